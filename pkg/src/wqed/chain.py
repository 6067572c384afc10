"""Density-matrix matrix product state of an emitter plus waveguide time bins.

Every site tensor has legs ``(left bond, d**2, right bond)`` where the physical
leg is the row-major flattened local density matrix. Site tensors are treated
as immutable: operations replace entries of ``chain.sites`` instead of writing
into arrays, which keeps shallow copies safe to hand to read-only consumers.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .observables import trace_vector
from .tensor import NumericalError, ShapeError, contract, svd_truncate

logger = logging.getLogger(__name__)

SYSTEM = "system"
Label = Union[str, int]
CHECKPOINT_VERSION = 1

_revision = itertools.count(1)


class ChainError(ValueError):
    """Raised on operations that violate the chain's structural preconditions."""


@dataclass
class DmChain:
    """Ordered site tensors with an orthogonality centre.

    ``labels`` tags each site as ``"system"`` or by its time-bin index; bins
    keep their label when they are swapped around. ``rev`` holds a revision
    number per site that changes whenever the tensor is replaced, which lets
    cached environments detect staleness.
    """

    sites: list[np.ndarray]
    dims: list[int]
    labels: list[Label]
    oc: int
    rev: list[int] = field(default_factory=list)
    discarded: float = 0.0
    trace_log: list[float] = field(default_factory=list)
    norm: float = 1.0

    def __post_init__(self):
        if not self.rev:
            self.rev = [next(_revision) for _ in self.sites]
        if not (len(self.sites) == len(self.dims) == len(self.labels) == len(self.rev)):
            raise ChainError("sites, dims and labels differ in length")

    def __len__(self) -> int:
        return len(self.sites)

    @property
    def system_pos(self) -> int:
        return self.labels.index(SYSTEM)

    def set_site(self, i: int, tensor: np.ndarray):
        self.sites[i] = tensor
        self.rev[i] = next(_revision)

    def position_of(self, label: Label) -> int:
        return self.labels.index(label)

    def bond_dims(self) -> list[int]:
        """Dimensions of the internal bonds, left to right."""
        return [s.shape[2] for s in self.sites[:-1]]

    @property
    def max_bond(self) -> int:
        return max(self.bond_dims(), default=1)

    def copy(self) -> "DmChain":
        return DmChain(list(self.sites), list(self.dims), list(self.labels), self.oc,
                       list(self.rev), self.discarded, list(self.trace_log), self.norm)

    def validate(self):
        for i, s in enumerate(self.sites):
            if s.ndim != 3 or s.shape[1] != self.dims[i] ** 2:
                raise ShapeError(f"site {i} has shape {s.shape}, expected physical leg {self.dims[i] ** 2}")
        if self.sites[0].shape[0] != 1 or self.sites[-1].shape[2] != 1:
            raise ShapeError("boundary bonds must have dimension 1")
        for i in range(len(self) - 1):
            if self.sites[i].shape[2] != self.sites[i + 1].shape[0]:
                raise ShapeError(f"bond mismatch between sites {i} and {i + 1}")
        if not 0 <= self.oc < len(self):
            raise ChainError(f"orthogonality centre {self.oc} outside the chain")

    def trace(self) -> complex:
        env = np.ones(1, dtype=complex)
        for s, d in zip(self.sites, self.dims):
            env = env @ np.tensordot(s, trace_vector(d), axes=([1], [0]))
        return complex(env[0])

    def to_dense(self, by_label: bool = True) -> np.ndarray:
        """Contract into one tensor with a ``d**2`` leg per site.

        With ``by_label`` the legs are ordered system first, then bins by label,
        independent of where swaps have left them in the chain.
        """
        t = self.sites[0]
        for s in self.sites[1:]:
            t = contract(t, s, [(t.ndim - 1, 0)])
        t = t.reshape(t.shape[1:-1])
        if by_label:
            t = np.transpose(t, self.label_order())
        return t

    def label_order(self) -> list[int]:
        """Chain positions sorted as system, bin 0, bin 1, ..."""
        return sorted(range(len(self)), key=lambda i: (-1 if self.labels[i] == SYSTEM else self.labels[i]))


# -- dense helpers ------------------------------------------------------------

def per_site_to_matrix(x: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Per-site flattened state (one ``d**2`` leg per site) to a density matrix."""
    k = len(dims)
    t = x.reshape([d for d in dims for _ in range(2)])
    t = t.transpose(list(range(0, 2 * k, 2)) + list(range(1, 2 * k, 2)))
    n = int(np.prod(dims))
    return t.reshape(n, n)


def matrix_to_per_site(rho: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    k = len(dims)
    t = rho.reshape(list(dims) * 2)
    order = [ax for s in range(k) for ax in (s, k + s)]
    return t.transpose(order).reshape([d * d for d in dims])


def check_density_matrix(rho: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ShapeError(f"density matrix must be square, got {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise ValueError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1.0) > tol:
        raise ValueError(f"density matrix has trace {np.trace(rho).real:.12g}, expected 1")
    if np.min(np.linalg.eigvalsh(rho)) < -tol:
        raise ValueError("density matrix is not positive semidefinite")
    return rho


# -- gauge moves --------------------------------------------------------------

def _shift_oc_right(chain: DmChain, i: int):
    a = chain.sites[i]
    cl, p, cr = a.shape
    q, r = np.linalg.qr(a.reshape(cl * p, cr))
    k = q.shape[1]
    chain.set_site(i, q.reshape(cl, p, k))
    chain.set_site(i + 1, np.tensordot(r, chain.sites[i + 1], axes=([1], [0])))


def _shift_oc_left(chain: DmChain, i: int):
    a = chain.sites[i]
    cl, p, cr = a.shape
    q, r = np.linalg.qr(a.reshape(cl, p * cr).T)
    k = q.shape[1]
    chain.set_site(i, q.T.reshape(k, p, cr))
    chain.set_site(i - 1, np.tensordot(chain.sites[i - 1], r.T, axes=([2], [0])))


def move_oc(chain: DmChain, target: int) -> DmChain:
    """Move the orthogonality centre with exact QR steps (no truncation)."""
    if not 0 <= target < len(chain):
        raise ChainError(f"target {target} outside the chain")
    while chain.oc < target:
        _shift_oc_right(chain, chain.oc)
        chain.oc += 1
    while chain.oc > target:
        _shift_oc_left(chain, chain.oc)
        chain.oc -= 1
    return chain


def canonicalize(chain: DmChain, center: int) -> DmChain:
    """Bring every site into canonical form around ``center``."""
    for i in range(center):
        _shift_oc_right(chain, i)
    for i in range(len(chain) - 1, center, -1):
        _shift_oc_left(chain, i)
    chain.oc = center
    return chain


def check_canonical(chain: DmChain, tol: float = 1e-9) -> bool:
    """True when every site left (right) of the centre is a left (right) isometry."""
    for i, a in enumerate(chain.sites):
        if i == chain.oc:
            continue
        cl, p, cr = a.shape
        if i < chain.oc:
            m = a.reshape(cl * p, cr)
            g = m.conj().T @ m
        else:
            m = a.reshape(cl, p * cr)
            g = m @ m.conj().T
        if np.max(np.abs(g - np.eye(g.shape[0]))) > tol:
            return False
    return True


# -- swaps ----------------------------------------------------------------------

def swap_adjacent(chain: DmChain, i: int, chi_max: int, oc_to: str = "right") -> float:
    """Exchange the physical contents of sites ``i`` and ``i + 1`` in place.

    The orthogonality centre must sit on one of the two sites; afterwards it is
    placed on the side named by ``oc_to``. Returns the discarded weight of the
    truncated SVD.
    """
    if not 0 <= i < len(chain) - 1:
        raise ChainError(f"cannot swap sites {i} and {i + 1} of a {len(chain)}-site chain")
    if chain.oc not in (i, i + 1):
        raise ChainError(f"orthogonality centre {chain.oc} is not on sites {i}, {i + 1}")
    if oc_to not in ("left", "right"):
        raise ValueError("oc_to must be 'left' or 'right'")
    a, b = chain.sites[i], chain.sites[i + 1]
    cl, pa, _ = a.shape
    _, pb, cr = b.shape
    theta = contract(a, b, [(2, 0)]).transpose(0, 2, 1, 3).reshape(cl * pb, pa * cr)
    res = svd_truncate(theta, chi_max)
    k = res.chi
    if oc_to == "right":
        left, right = res.u, res.s[:, None] * res.vdag
    else:
        left, right = res.u * res.s[None, :], res.vdag
    chain.set_site(i, left.reshape(cl, pb, k))
    chain.set_site(i + 1, right.reshape(k, pa, cr))
    chain.dims[i], chain.dims[i + 1] = chain.dims[i + 1], chain.dims[i]
    chain.labels[i], chain.labels[i + 1] = chain.labels[i + 1], chain.labels[i]
    chain.oc = i + 1 if oc_to == "right" else i
    chain.discarded += res.discarded_weight
    return res.discarded_weight


def move_site(chain: DmChain, frm: int, to: int, chi_max: int) -> DmChain:
    """Carry the site at ``frm`` to position ``to`` by adjacent swaps.

    The orthogonality centre is first brought to ``frm`` and then travels with
    the moving site, so it ends on position ``to``.
    """
    if not (0 <= frm < len(chain) and 0 <= to < len(chain)):
        raise ChainError(f"move {frm} -> {to} outside a {len(chain)}-site chain")
    move_oc(chain, frm)
    for i in range(frm, to):
        swap_adjacent(chain, i, chi_max, "right")
    for i in range(frm - 1, to - 1, -1):
        swap_adjacent(chain, i, chi_max, "left")
    return chain


def renormalize(chain: DmChain, trace: complex | None = None) -> DmChain:
    """Divide the orthogonality centre by the global trace."""
    tr = chain.trace() if trace is None else trace
    if not np.isfinite(tr) or abs(tr) == 0.0:
        raise NumericalError(f"cannot renormalize a chain with trace {tr}")
    if tr != 1.0:
        chain.set_site(chain.oc, chain.sites[chain.oc] / tr)
    chain.trace_log.append(complex(tr))
    logger.debug("renormalized chain by trace %.16g%+.3gj", tr.real, tr.imag)
    return chain


# -- construction -----------------------------------------------------------------

def _vacuum_site(d: int) -> np.ndarray:
    v = np.zeros((1, d * d, 1), dtype=complex)
    v[0, 0, 0] = 1.0
    return v


def _product_chain(system_dm: np.ndarray, bin_sites: list[np.ndarray], bin_dim: int,
                   system_pos: int) -> DmChain:
    rho = check_density_matrix(system_dm)
    ds = rho.shape[0]
    sites = list(bin_sites)
    sites.insert(system_pos, rho.reshape(1, ds * ds, 1).astype(complex))
    n_bins = len(bin_sites)
    labels: list[Label] = list(range(n_bins))
    labels.insert(system_pos, SYSTEM)
    dims = [bin_dim] * n_bins
    dims.insert(system_pos, ds)
    return DmChain(sites, dims, labels, oc=system_pos)


def vacuum_chain(n_bins: int, bin_dim: int, system_dm: np.ndarray, system_pos: int = 0) -> DmChain:
    """Product chain of vacuum bins with the system after ``system_pos`` bins."""
    if not 0 <= system_pos <= n_bins:
        raise ChainError(f"system position {system_pos} outside 0..{n_bins}")
    return _product_chain(system_dm, [_vacuum_site(bin_dim) for _ in range(n_bins)], bin_dim, system_pos)


@dataclass(frozen=True)
class PulseEnvelope:
    """Real single-photon envelope sampled once per bin, ``dt * sum(f**2) = 1``."""

    samples: np.ndarray
    dt: float

    def __post_init__(self):
        f = np.asarray(self.samples, dtype=float)
        object.__setattr__(self, "samples", f)
        norm = self.dt * float(np.sum(np.abs(f) ** 2))
        if abs(norm - 1.0) > 1e-10:
            raise ValueError(f"envelope is not normalized: dt * sum |f|^2 = {norm:.12g}")

    @classmethod
    def tophat(cls, duration: float, dt: float) -> "PulseEnvelope":
        n = int(round(duration / dt))
        if n < 1 or abs(n * dt - duration) > 1e-9 * max(1.0, duration):
            raise ValueError(f"pulse duration {duration} is not a whole number of bins of {dt}")
        return cls(np.full(n, 1.0 / np.sqrt(n * dt)), dt)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def amplitudes(self) -> np.ndarray:
        """Per-bin photon amplitudes ``sqrt(dt) * f_k``."""
        return np.sqrt(self.dt) * self.samples


def pure_to_dm_site(a: np.ndarray) -> np.ndarray:
    """Ket site ``(chi_l, d, chi_r)`` to density site ``(chi_l**2, d**2, chi_r**2)``.

    Bond pairs fuse as (ket, bra); the physical pair flattens row-major.
    """
    cl, d, cr = a.shape
    w = np.einsum("aib,cjd->acijbd", a, a.conj())
    return w.reshape(cl * cl, d * d, cr * cr)


def _fock_ket_sites(amps: np.ndarray, d: int, photons: int) -> list[np.ndarray]:
    """Ket tensors of an N-photon Fock pulse (N = 1, 2); the bond counts placed photons."""
    chi = photons + 1
    sites = []
    for amp in amps:
        a = np.zeros((chi, d, chi), dtype=complex)
        for n in range(chi):
            a[n, 0, n] = 1.0
        for n in range(photons):
            a[n, 1, n + 1] = amp
        if photons == 2:
            a[0, 2, 2] = amp**2 / np.sqrt(2.0)
        sites.append(a)
    # boundaries: nothing placed on the left, all photons placed on the right
    sites[0] = sites[0][:1]
    sites[-1] = sites[-1][:, :, -1:]
    return sites


def one_photon_ket_sites(env: PulseEnvelope, d: int = 2) -> list[np.ndarray]:
    if d < 2:
        raise ShapeError("a one-photon pulse needs bin dimension >= 2")
    return _fock_ket_sites(env.amplitudes, d, 1)


def two_photon_ket_sites(env: PulseEnvelope, d: int = 3) -> list[np.ndarray]:
    if d < 3:
        raise ShapeError("a two-photon pulse needs bin dimension >= 3")
    return _fock_ket_sites(env.amplitudes, d, 2)


def one_photon_dm_blocks(amp: complex, d: int = 2) -> np.ndarray:
    """Bulk density site of a one-photon pulse written block by block.

    Bond index ``(a, abar)`` fuses to ``2 * a + abar``; each block is the local
    ``d x d`` matrix (ket row, bra column).
    """
    w = np.zeros((2, 2, d, d, 2, 2), dtype=complex)
    proj = np.zeros((d, d), dtype=complex)
    proj[0, 0] = 1.0

    def unit(i, j, val):
        m = np.zeros((d, d), dtype=complex)
        m[i, j] = val
        return m

    w[0, 0, :, :, 0, 0] = proj
    w[0, 0, :, :, 0, 1] = unit(0, 1, np.conj(amp))
    w[0, 0, :, :, 1, 0] = unit(1, 0, amp)
    w[0, 0, :, :, 1, 1] = unit(1, 1, abs(amp) ** 2)
    w[0, 1, :, :, 0, 1] = proj
    w[0, 1, :, :, 1, 1] = unit(1, 0, amp)
    w[1, 0, :, :, 1, 0] = proj
    w[1, 0, :, :, 1, 1] = unit(0, 1, np.conj(amp))
    w[1, 1, :, :, 1, 1] = proj
    return w.reshape(4, d * d, 4)


def one_photon_dm_sites(env: PulseEnvelope, d: int = 2, route: str = "ket") -> list[np.ndarray]:
    """Density sites of a one-photon pulse.

    ``route="ket"`` converts the bond-dimension-2 ket tensors site by site;
    ``route="blocks"`` writes the density blocks directly.
    """
    if route == "ket":
        return [pure_to_dm_site(a) for a in one_photon_ket_sites(env, d)]
    if route != "blocks":
        raise ValueError(f"unknown route {route!r}")
    sites = [one_photon_dm_blocks(a, d) for a in env.amplitudes]
    sites[0] = sites[0][:1]          # (0, 0) on the left boundary
    sites[-1] = sites[-1][:, :, 3:]  # (1, 1) on the right boundary
    return sites


def _pulse_chain(pulse_sites: list[np.ndarray], n_bins: int, bin_dim: int,
                 system_dm: np.ndarray, system_pos: int) -> DmChain:
    if len(pulse_sites) > n_bins - system_pos:
        raise ChainError(f"pulse of {len(pulse_sites)} bins does not fit in {n_bins - system_pos} bins")
    bins = [_vacuum_site(bin_dim) for _ in range(n_bins)]
    bins[system_pos:system_pos + len(pulse_sites)] = pulse_sites
    chain = _product_chain(system_dm, bins, bin_dim, system_pos)
    canonicalize(chain, system_pos)
    tr = chain.trace()
    chain.norm = float(tr.real)
    renormalize(chain, tr)
    chain.trace_log.clear()
    return chain


def one_photon_chain(env: PulseEnvelope, system_dm: np.ndarray, n_bins: int, bin_dim: int = 2,
                     system_pos: int = 0, route: str = "ket") -> DmChain:
    """Chain whose first bins after the system carry a one-photon pulse."""
    return _pulse_chain(one_photon_dm_sites(env, bin_dim, route), n_bins, bin_dim, system_dm, system_pos)


def two_photon_chain(env: PulseEnvelope, system_dm: np.ndarray, n_bins: int, bin_dim: int = 3,
                     system_pos: int = 0) -> DmChain:
    """Chain carrying a two-photon Fock pulse, normalized to unit trace.

    The bond-dimension-3 ket tensors represent the state with norm 1/2; the
    factor is stored in ``chain.norm`` before normalization.
    """
    sites = [pure_to_dm_site(a) for a in two_photon_ket_sites(env, bin_dim)]
    return _pulse_chain(sites, n_bins, bin_dim, system_dm, system_pos)


# -- checkpoints -------------------------------------------------------------------

def save_chain(path, chain: DmChain):
    """Write a versioned ``.npz`` checkpoint that round-trips bit-exactly."""
    labels = np.array([-1 if lab == SYSTEM else int(lab) for lab in chain.labels], dtype=np.int64)
    arrays = {f"site_{i}": s for i, s in enumerate(chain.sites)}
    np.savez(path, format_version=np.int64(CHECKPOINT_VERSION), dims=np.array(chain.dims, dtype=np.int64),
             labels=labels, oc=np.int64(chain.oc), discarded=np.float64(chain.discarded),
             norm=np.float64(chain.norm), trace_log=np.array(chain.trace_log, dtype=complex), **arrays)


def load_chain(path) -> DmChain:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ChainError(f"unsupported checkpoint version {version}")
        dims = [int(d) for d in data["dims"]]
        labels: list[Label] = [SYSTEM if lab < 0 else int(lab) for lab in data["labels"]]
        sites = [data[f"site_{i}"] for i in range(len(dims))]
        chain = DmChain(sites, dims, labels, int(data["oc"]), discarded=float(data["discarded"]),
                        trace_log=list(data["trace_log"]), norm=float(data["norm"]))
    chain.validate()
    return chain
