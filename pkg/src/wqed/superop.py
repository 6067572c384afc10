"""Vectorized Liouvillians and per-step propagators for the collision model.

Density matrices are flattened row-major, ``vec(rho)[i * d + j] = rho[i, j]``,
so that ``vec(A rho B) = (A kron B^T) vec(rho)``.

A propagator acting on several sites is stored with *per-site* flattening:
each site contributes one leg of size ``d**2`` that fuses its own ket and bra
indices. This is the layout the chain tensors use, so a propagator can be
applied to a block of neighbouring sites without any reshuffling.
"""

from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .tensor import NumericalError, ShapeError

logger = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-12


# -- local operators -------------------------------------------------------

def sigma_minus() -> np.ndarray:
    """Lowering operator |g><e| with basis order (g, e)."""
    return np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)


def annihilation(n_max: int) -> np.ndarray:
    """Bosonic annihilation operator truncated to ``n_max`` photons."""
    return np.diag(np.sqrt(np.arange(1, n_max + 1)), k=1).astype(complex)


def embed(op: np.ndarray, pos: int, dims: Sequence[int]) -> np.ndarray:
    """Place ``op`` on factor ``pos`` of a tensor-product space."""
    out = np.ones((1, 1), dtype=complex)
    for k, d in enumerate(dims):
        out = np.kron(out, op if k == pos else np.eye(d))
    return out


def dagger(a: np.ndarray) -> np.ndarray:
    return a.conj().T


# -- vectorization ----------------------------------------------------------

def _square(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {a.shape}")
    return a


def vectorize_left(a: np.ndarray) -> np.ndarray:
    """Superoperator of ``rho -> A rho``."""
    a = _square(a, "A")
    return np.kron(a, np.eye(a.shape[0]))


def vectorize_right(b: np.ndarray) -> np.ndarray:
    """Superoperator of ``rho -> rho B``."""
    b = _square(b, "B")
    return np.kron(np.eye(b.shape[0]), b.T)


def vectorize_sandwich(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Superoperator of ``rho -> A rho B``."""
    a, b = _square(a, "A"), _square(b, "B")
    if a.shape != b.shape:
        raise ShapeError(f"A {a.shape} and B {b.shape} act on different spaces")
    return np.kron(a, b.T)


# -- Lindblad specification ---------------------------------------------------

@dataclass(frozen=True)
class LindbladSpec:
    """Hamiltonian plus (collapse operator, rate) pairs on a joint space.

    ``dims`` lists the local Hilbert-space dimensions of the sites the step
    acts on, system first.
    """

    dims: tuple[int, ...]
    hamiltonian: np.ndarray
    dissipators: tuple[tuple[np.ndarray, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        h = _square(np.asarray(self.hamiltonian, dtype=complex), "hamiltonian")
        n = self.dim
        if h.shape[0] != n:
            raise ShapeError(f"hamiltonian is {h.shape[0]}-dimensional, dims {self.dims} give {n}")
        if np.max(np.abs(h - dagger(h)), initial=0.0) > HERMITIAN_TOL:
            raise ValueError("hamiltonian is not Hermitian")
        object.__setattr__(self, "hamiltonian", h)
        diss = []
        for a, rate in self.dissipators:
            a = np.asarray(a, dtype=complex)
            if a.shape != (n, n):
                raise ShapeError(f"collapse operator of shape {a.shape} on a {n}-dimensional space")
            if rate < 0:
                raise ValueError(f"negative dissipation rate {rate}")
            diss.append((a, float(rate)))
        object.__setattr__(self, "dissipators", tuple(diss))

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(repr(self.dims).encode())
        h.update(self.hamiltonian.tobytes())
        for a, rate in self.dissipators:
            h.update(a.tobytes())
            h.update(repr(rate).encode())
        return h.hexdigest()


def _liouvillian_sparse(spec: LindbladSpec) -> sp.csr_matrix:
    n = spec.dim
    eye = sp.identity(n, dtype=complex, format="csr")
    h = sp.csr_matrix(spec.hamiltonian)
    lv = -1j * (sp.kron(h, eye) - sp.kron(eye, h.T))
    for a, rate in spec.dissipators:
        if rate == 0.0:
            continue
        a_s = sp.csr_matrix(a)
        ada = sp.csr_matrix(dagger(a) @ a)
        lv = lv + rate * (sp.kron(a_s, a_s.conj()) - 0.5 * sp.kron(ada, eye) - 0.5 * sp.kron(eye, ada.T))
    return sp.csr_matrix(lv)


def liouvillian(spec: LindbladSpec) -> np.ndarray:
    """Dense Liouvillian on the jointly flattened density matrix."""
    return _liouvillian_sparse(spec).toarray()


def site_permutation(dims: Sequence[int]) -> np.ndarray:
    """Map per-site flattened indices onto joint row-major flattened indices.

    Entry ``q`` is the joint index ``(i_1..i_k, j_1..j_k)`` that corresponds to
    the per-site index ``((i_1, j_1), ..., (i_k, j_k))``.
    """
    k = len(dims)
    joint = np.arange(int(np.prod(dims)) ** 2).reshape(tuple(dims) * 2)
    order = [ax for s in range(k) for ax in (s, k + s)]
    return joint.transpose(order).ravel()


# -- propagators --------------------------------------------------------------

class _BlockApply:
    """Shared ``apply``/``matrix`` logic for propagators acting on k sites."""

    site_dims: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.site_dims))

    def apply(self, block: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def matrix(self) -> np.ndarray:
        """Dense superoperator in per-site flattening (small cases only)."""
        n = self.size
        probe = np.eye(n, dtype=complex).reshape((1,) + self.site_dims + (n,))
        return self.apply(probe).reshape(n, n)

    @property
    def tensor(self) -> np.ndarray:
        """Rank-2k tensor: output legs then input legs, one per site."""
        return self.matrix.reshape(self.site_dims * 2)

    def _check_block(self, block: np.ndarray):
        if block.shape[1:-1] != self.site_dims:
            raise ShapeError(
                f"propagator acts on site legs {self.site_dims}, block has {block.shape[1:-1]}"
            )


@dataclass(frozen=True)
class StepPropagator(_BlockApply):
    """``exp(dt * L)`` stored as its exact block-diagonal decomposition.

    The Liouvillian never couples indices in different connected components of
    its sparsity graph, so its exponential is block diagonal over them. Blocks
    of equal size are batched: ``groups`` holds ``(indices, matrices)`` pairs of
    shapes ``(n, s)`` and ``(n, s, s)``.
    """

    dt: float
    dims: tuple[int, ...]
    groups: tuple[tuple[np.ndarray, np.ndarray], ...] = field(repr=False)

    @property
    def site_dims(self) -> tuple[int, ...]:
        return tuple(d * d for d in self.dims)

    def apply(self, block: np.ndarray) -> np.ndarray:
        """Apply to a block of shape ``(chi_l, d1^2, ..., dk^2, chi_r)``."""
        self._check_block(block)
        n = self.size
        shape = block.shape
        y = np.moveaxis(block.reshape(shape[0], n, shape[-1]), 1, 0).reshape(n, -1)
        out = np.empty_like(y, dtype=np.result_type(y, complex))
        for idx, mats in self.groups:
            out[idx] = np.matmul(mats, y[idx])
        return np.moveaxis(out.reshape(n, shape[0], shape[-1]), 0, 1).reshape(shape)

    def permute_sites(self, order: Sequence[int]) -> "StepPropagator":
        """Same map with its site legs reordered: new site ``k`` is old site ``order[k]``."""
        order = list(order)
        old_of_new = np.arange(self.size).reshape(self.site_dims).transpose(order).ravel()
        new_of_old = np.empty_like(old_of_new)
        new_of_old[old_of_new] = np.arange(self.size)
        groups = tuple((new_of_old[idx], mats) for idx, mats in self.groups)
        return StepPropagator(self.dt, tuple(self.dims[k] for k in order), groups)


@dataclass(frozen=True)
class SplitStepPropagator(_BlockApply):
    """Product of propagators acting on subsets of the sites, applied in order."""

    dims: tuple[int, ...]
    factors: tuple[tuple[tuple[int, ...], StepPropagator], ...]

    @property
    def site_dims(self) -> tuple[int, ...]:
        return tuple(d * d for d in self.dims)

    def apply(self, block: np.ndarray) -> np.ndarray:
        self._check_block(block)
        k = len(self.dims)
        out = block
        for sites, prop in self.factors:
            rest = [s for s in range(k) if s not in sites]
            order = [0] + [1 + s for s in sites] + [1 + s for s in rest] + [k + 1]
            t = np.transpose(out, order)
            tshape = t.shape
            sub = t.reshape((tshape[0],) + tshape[1:1 + len(sites)] + (-1,))
            t = prop.apply(sub).reshape(tshape)
            out = np.transpose(t, np.argsort(order))
        return np.ascontiguousarray(out)

    def permute_sites(self, order: Sequence[int]) -> "SplitStepPropagator":
        order = list(order)
        new_pos = {old: new for new, old in enumerate(order)}
        factors = []
        for sites, prop in self.factors:
            mapped = [new_pos[s] for s in sites]
            srt = sorted(range(len(mapped)), key=lambda i: mapped[i])
            factors.append((tuple(mapped[i] for i in srt), prop.permute_sites(srt)))
        return SplitStepPropagator(tuple(self.dims[k] for k in order), tuple(factors))


_CACHE: dict[tuple[str, float], StepPropagator] = {}
_CACHE_LOCK = threading.Lock()


def clear_cache():
    with _CACHE_LOCK:
        _CACHE.clear()


def _exp_blocks(lv: sp.csr_matrix, dt: float) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    pattern = (abs(lv) + abs(lv.T)).tocsr()
    n_comp, labels = connected_components(pattern, directed=False)
    members: dict[int, list[np.ndarray]] = {}
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n_comp + 1))
    lv = lv.tocsr()
    for c in range(n_comp):
        idx = order[bounds[c]:bounds[c + 1]]
        members.setdefault(len(idx), []).append(idx)
    groups = []
    for size, idx_list in sorted(members.items()):
        idx = np.array(idx_list)
        mats = np.empty((len(idx_list), size, size), dtype=complex)
        for n, ix in enumerate(idx_list):
            blk = lv[ix][:, ix].toarray()
            mats[n] = scipy.linalg.expm(dt * blk) if dt != 0.0 else np.eye(size)
        if not np.all(np.isfinite(mats)):
            raise NumericalError(f"propagator exponential overflowed (block size {size}, dt={dt})")
        groups.append((idx, mats))
    return tuple(groups)


def build_step(spec: LindbladSpec, dt: float, cache: bool = True) -> StepPropagator:
    """Exponentiate the Liouvillian of ``spec`` over one time step.

    Results are cached per (spec, dt); the values are immutable so concurrent
    writers are harmless.
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    key = (spec.fingerprint(), float(dt))
    if cache:
        with _CACHE_LOCK:
            hit = _CACHE.get(key)
        if hit is not None:
            return hit
    perm = site_permutation(spec.dims)
    lv = _liouvillian_sparse(spec)[perm][:, perm]
    prop = StepPropagator(float(dt), spec.dims, _exp_blocks(lv, float(dt)))
    logger.debug("built propagator dims=%s dt=%g blocks=%s", spec.dims, dt,
                 [(g[1].shape[1], g[1].shape[0]) for g in prop.groups])
    if cache:
        with _CACHE_LOCK:
            _CACHE[key] = prop
    return prop


def build_split_step(first: LindbladSpec, first_sites: Sequence[int],
                     second: LindbladSpec, second_sites: Sequence[int],
                     dims: Sequence[int], dt: float) -> SplitStepPropagator:
    """Symmetric splitting ``exp(dt L1 / 2) exp(dt L2) exp(dt L1 / 2)``.

    ``first`` acts on ``first_sites`` and ``second`` on ``second_sites`` of the
    block whose local dimensions are ``dims``. Site indices inside each factor
    must be increasing.
    """
    for spec, sites in ((first, first_sites), (second, second_sites)):
        if tuple(dims[s] for s in sites) != spec.dims or list(sites) != sorted(sites):
            raise ShapeError(f"factor dims {spec.dims} do not match sites {list(sites)} of {list(dims)}")
    half = build_step(first, dt / 2)
    full = build_step(second, dt)
    factors = ((tuple(first_sites), half), (tuple(second_sites), full), (tuple(first_sites), half))
    return SplitStepPropagator(tuple(int(d) for d in dims), factors)


# -- waveguide Hamiltonians ---------------------------------------------------

def _coupling(gain: complex, b: np.ndarray, s: np.ndarray) -> np.ndarray:
    """gain * b s^dag + h.c."""
    term = gain * (b @ dagger(s))
    return term + dagger(term)


def hamiltonian_single(gammas: Mapping[str, float], dt: float, detuning: float = 0.0,
                       n_max: int = 1) -> np.ndarray:
    """Single emitter coupled to the modes of one time bin.

    The bin holds one mode per key of ``gammas`` (order L then R), each
    truncated to ``n_max`` photons. Joint space: system (x) bin.
    """
    modes = [m for m in ("L", "R") if m in gammas]
    unknown = set(gammas) - {"L", "R"}
    if unknown:
        raise ValueError(f"unknown waveguide modes {sorted(unknown)}")
    if any(gammas[m] < 0 for m in modes):
        raise ValueError("coupling rates must be non-negative")
    dims = [2] + [n_max + 1] * len(modes)
    s = embed(sigma_minus(), 0, dims)
    h = detuning * dagger(s) @ s
    for k, m in enumerate(modes):
        b = embed(annihilation(n_max), 1 + k, dims)
        h = h + _coupling(np.sqrt(gammas[m] / dt), b, s)
    return h


def hamiltonian_feedback(gamma: float, phi: float, dt: float, n_max: int = 1) -> np.ndarray:
    """Emitter in front of a mirror: system (x) current bin (x) delayed bin."""
    dims = [2, n_max + 1, n_max + 1]
    s = embed(sigma_minus(), 0, dims)
    g = np.sqrt(gamma / (2 * dt))
    now = embed(annihilation(n_max), 1, dims)
    delayed = embed(annihilation(n_max), 2, dims)
    return _coupling(g, now, s) + _coupling(g * np.exp(1j * phi), delayed, s)


def hamiltonian_two_emitters(gamma_l: float, gamma_r: float, phi: float, dt: float,
                             n_max: int = 1, delayed: bool = True) -> np.ndarray:
    """Two emitters sharing a bidirectional waveguide.

    The system site fuses both emitters (index ``2 * s1 + s2``), each bin holds
    a left and a right mode. With ``delayed`` the joint space is
    system (x) current bin (x) delayed bin; without it both emitters see the
    current bin only (zero separation).
    """
    q = n_max + 1
    dims = [2, 2, q, q] + ([q, q] if delayed else [])
    s1 = embed(sigma_minus(), 0, dims)
    s2 = embed(sigma_minus(), 1, dims)
    a = annihilation(n_max)
    left_now, right_now = embed(a, 2, dims), embed(a, 3, dims)
    if delayed:
        left_old, right_old = embed(a, 4, dims), embed(a, 5, dims)
    else:
        left_old, right_old = left_now, right_now
    ph = np.exp(1j * phi)
    gl, gr = np.sqrt(gamma_l / dt), np.sqrt(gamma_r / dt)
    h = _coupling(gl * ph, left_old, s1) + _coupling(gr, right_now, s1)
    h = h + _coupling(gl, left_now, s2) + _coupling(gr * ph, right_old, s2)
    return h


def hamiltonian_feedback_parts(gamma: float, phi: float, dt: float,
                               n_max: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Current-bin and delayed-bin halves of :func:`hamiltonian_feedback`.

    Both act on system (x) one bin; used by the split propagator.
    """
    dims = [2, n_max + 1]
    s = embed(sigma_minus(), 0, dims)
    b = embed(annihilation(n_max), 1, dims)
    g = np.sqrt(gamma / (2 * dt))
    return _coupling(g, b, s), _coupling(g * np.exp(1j * phi), b, s)


def hamiltonian_two_emitters_parts(gamma_l: float, gamma_r: float, phi: float, dt: float,
                                   n_max: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Current-bin and delayed-bin halves of :func:`hamiltonian_two_emitters`."""
    q = n_max + 1
    dims = [2, 2, q, q]
    s1 = embed(sigma_minus(), 0, dims)
    s2 = embed(sigma_minus(), 1, dims)
    a = annihilation(n_max)
    left, right = embed(a, 2, dims), embed(a, 3, dims)
    ph = np.exp(1j * phi)
    gl, gr = np.sqrt(gamma_l / dt), np.sqrt(gamma_r / dt)
    now = _coupling(gr, right, s1) + _coupling(gl, left, s2)
    delayed = _coupling(gl * ph, left, s1) + _coupling(gr * ph, right, s2)
    return now, delayed
