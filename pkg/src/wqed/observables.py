"""Measurements on density-matrix chains.

Traces are contractions with flattened identity matrices ("trace vectors"), and
expectation values replace one trace vector by a flattened operator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .chain import DmChain

logger = logging.getLogger(__name__)


def trace_vector(d: int) -> np.ndarray:
    """Flattened ``d x d`` identity."""
    return np.eye(d, dtype=complex).ravel()


def op_trace_vector(op: np.ndarray) -> np.ndarray:
    """Vector ``v`` with ``v . vec(rho) = Tr[op rho]``."""
    op = np.asarray(op, dtype=complex)
    return op.T.ravel()


def _transfer(site: np.ndarray, vec: np.ndarray) -> np.ndarray:
    return np.tensordot(site, vec, axes=([1], [0]))


class Environments:
    """Cached trace environments of a chain.

    ``left(j)`` is the contraction of sites ``0..j-1`` with trace vectors and
    ``right(j)`` that of sites ``j+1..``. Entries are recomputed lazily when the
    revision number of a site they depend on has changed.
    """

    def __init__(self, chain: "DmChain"):
        self.chain = chain
        self._left = [np.ones(1, dtype=complex)]
        self._left_rev: list[int] = []
        self._right = [np.ones(1, dtype=complex)]
        self._right_rev: list[int] = []

    @staticmethod
    def _valid_prefix(stored: list[int], current: Sequence[int]) -> int:
        m = len(stored)
        if m == 0:
            return 0
        bad = np.flatnonzero(np.asarray(stored) != np.asarray(current[:m]))
        return int(bad[0]) if bad.size else m

    def transfer(self, i: int) -> np.ndarray:
        return _transfer(self.chain.sites[i], trace_vector(self.chain.dims[i]))

    def left(self, j: int) -> np.ndarray:
        revs = self.chain.rev
        valid = min(self._valid_prefix(self._left_rev, revs), j)
        del self._left[valid + 1:]
        del self._left_rev[valid:]
        for i in range(valid, j):
            self._left.append(self._left[-1] @ self.transfer(i))
            self._left_rev.append(revs[i])
        return self._left[j]

    def right(self, j: int) -> np.ndarray:
        n = len(self.chain)
        revs_rev = self.chain.rev[::-1]
        need = n - 1 - j
        valid = min(self._valid_prefix(self._right_rev, revs_rev), need)
        del self._right[valid + 1:]
        del self._right_rev[valid:]
        for m in range(valid, need):
            i = n - 1 - m
            self._right.append(self.transfer(i) @ self._right[-1])
            self._right_rev.append(revs_rev[m])
        return self._right[need]

    def site_value(self, i: int, vec: np.ndarray) -> complex:
        return complex(self.left(i) @ _transfer(self.chain.sites[i], vec) @ self.right(i))

    def trace(self) -> complex:
        s = self.chain.system_pos
        return self.site_value(s, trace_vector(self.chain.dims[s]))


def _envs_for(chain: "DmChain", envs: Environments | None) -> Environments:
    if envs is None:
        return Environments(chain)
    if envs.chain is not chain:
        raise ValueError("environments belong to a different chain")
    return envs


def expect_system(chain: "DmChain", op: np.ndarray, envs: Environments | None = None) -> complex:
    """``Tr[op rho]`` for an operator on the system site."""
    envs = _envs_for(chain, envs)
    s = chain.system_pos
    if np.shape(op) != (chain.dims[s], chain.dims[s]):
        raise ValueError(f"operator shape {np.shape(op)} does not match system dimension {chain.dims[s]}")
    return envs.site_value(s, op_trace_vector(op))


def expect_site(chain: "DmChain", pos: int, op: np.ndarray, envs: Environments | None = None) -> complex:
    envs = _envs_for(chain, envs)
    return envs.site_value(pos, op_trace_vector(op))


def reduced_system_dm(chain: "DmChain", envs: Environments | None = None, tol: float = 1e-9) -> np.ndarray:
    """Partial trace over all bins, cleaned to a valid density matrix."""
    envs = _envs_for(chain, envs)
    s = chain.system_pos
    d = chain.dims[s]
    vec = np.einsum("a,apb,b->p", envs.left(s), chain.sites[s], envs.right(s))
    rho = vec.reshape(d, d)
    rho = 0.5 * (rho + rho.conj().T)
    w, v = np.linalg.eigh(rho)
    if np.any(w < -tol):
        logger.info("clipping negative eigenvalues %s of the reduced state", w[w < -tol])
        w = np.where(w < -tol, 0.0, w)
        rho = (v * w) @ v.conj().T
    return rho / np.trace(rho).real


def total_excitations(chain: "DmChain", number_ops: dict[int, np.ndarray],
                      envs: Environments | None = None) -> float:
    """Sum of ``Tr[N_i rho]`` over all sites; ``number_ops`` maps local dimension to N."""
    envs = _envs_for(chain, envs)
    return float(sum(envs.site_value(i, op_trace_vector(number_ops[chain.dims[i]])).real
                     for i in range(len(chain))))


# -- entanglement ----------------------------------------------------------------

_SIGMA_Y2 = np.kron(np.array([[0, -1j], [1j, 0]]), np.array([[0, -1j], [1j, 0]])).real
# eigenvalues of a unit-trace state below this are rounding noise
_EIG_FLOOR = 1e-14


def concurrence(rho: np.ndarray, tol: float = 1e-8) -> float:
    """Wootters concurrence of a two-qubit density matrix.

    With ``rho = A A^dag`` the Wootters eigenvalues are the singular values of
    ``A^T (sy x sy) A``; this avoids square roots of noise-level eigenvalues.
    """
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise ValueError(f"concurrence needs a 4x4 density matrix, got {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) > tol or abs(np.trace(rho) - 1) > tol:
        raise ValueError("input is not a unit-trace Hermitian matrix")
    w, v = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    if w.min() < -tol:
        raise ValueError(f"input has negative eigenvalue {w.min():.3g}")
    keep = w > _EIG_FLOOR
    a = v[:, keep] * np.sqrt(w[keep])
    lam = np.zeros(4)
    lam[:keep.sum()] = np.linalg.svd(a.T @ _SIGMA_Y2 @ a, compute_uv=False)
    return float(max(0.0, lam[0] - lam[1] - lam[2] - lam[3]))


def entanglement_entropy_pure(probs: Sequence[float]) -> float:
    """Von Neumann entropy ``-sum p log p`` of Schmidt probabilities (natural log)."""
    p = np.asarray(probs, dtype=float)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def bond_singular_values(chain: "DmChain", cut: int) -> np.ndarray:
    """Singular values across the bond between sites ``cut - 1`` and ``cut``.

    Relies on the chain being in canonical form; the centre is moved on a copy.
    """
    from .chain import move_oc

    if not 1 <= cut <= len(chain) - 1:
        raise ValueError(f"cut {cut} is not an internal bond of a {len(chain)}-site chain")
    work = move_oc(chain.copy(), cut)
    a = work.sites[cut]
    return np.linalg.svd(a.reshape(a.shape[0], -1), compute_uv=False)


def operator_entanglement(chain: "DmChain", cut: int) -> float:
    """Entropy of the normalized squared singular values across ``cut``."""
    s = bond_singular_values(chain, cut)
    return entanglement_entropy_pure(s**2 / np.sum(s**2))


# -- two-time correlations and spectra ----------------------------------------------

@dataclass(frozen=True)
class CorrelatorGrid:
    """``g[k, l] = Tr[X_k Y_l rho]`` for the listed bins."""

    g: np.ndarray
    bins: tuple[int, ...]
    dt: float

    @property
    def times(self) -> np.ndarray:
        b = np.asarray(self.bins, dtype=float)
        return (b - b.min()) * self.dt if len(b) else b


def two_time_grid(chain: "DmChain", x: np.ndarray, y: np.ndarray, bins: Sequence[int] | None = None,
                  dt: float = 1.0, envs: Environments | None = None) -> CorrelatorGrid:
    """Two-time correlator of single-bin operators ``x`` (earlier index) and ``y``.

    ``bins`` are bin labels; by default every bin left of the system, i.e. all
    outgoing bins. All start points are propagated together through the chain
    so each site is visited once.
    """
    from .chain import SYSTEM

    envs = _envs_for(chain, envs)
    if bins is None:
        bins = [lab for lab in chain.labels[:chain.system_pos] if lab != SYSTEM]
    bins = list(bins)
    try:
        pos = [chain.position_of(b) for b in bins]
    except ValueError as exc:
        raise ValueError(f"requested bins {bins} are not all in the chain") from exc
    m = len(bins)
    g = np.zeros((m, m), dtype=complex)
    if m == 0:
        return CorrelatorGrid(g, tuple(bins), dt)
    vx, vy, vxy = op_trace_vector(x), op_trace_vector(y), op_trace_vector(np.asarray(x) @ np.asarray(y))
    order = np.argsort(pos)
    first, last = pos[order[0]], pos[order[-1]]
    slot = {pos[k]: k for k in range(m)}
    rows_x: list[int] = []  # requested index of the x-site for each running row
    vec_x = np.zeros((0, 1), dtype=complex)
    vec_y = np.zeros((0, 1), dtype=complex)
    for i in range(first, last + 1):
        site = chain.sites[i]
        t_tr = envs.transfer(i)
        if i in slot:
            b = slot[i]
            r = envs.right(i)
            if rows_x:
                g[rows_x, b] = (vec_x @ _transfer(site, vy)) @ r
                g[b, rows_x] = (vec_y @ _transfer(site, vx)) @ r
            lft = envs.left(i)
            g[b, b] = lft @ _transfer(site, vxy) @ r
            vec_x = np.vstack([vec_x @ t_tr, (lft @ _transfer(site, vx))[None, :]]) if rows_x else \
                (lft @ _transfer(site, vx))[None, :]
            vec_y = np.vstack([vec_y @ t_tr, (lft @ _transfer(site, vy))[None, :]]) if rows_x else \
                (lft @ _transfer(site, vy))[None, :]
            rows_x.append(b)
        elif rows_x:
            vec_x = vec_x @ t_tr
            vec_y = vec_y @ t_tr
    return CorrelatorGrid(g, tuple(bins), dt)


def spectrum(grid: CorrelatorGrid, omegas: Sequence[float]) -> np.ndarray:
    """Stationary spectrum ``dt * sum_kl exp(i w (t_l - t_k)) g[k, l]``.

    The factor ``dt`` makes the double sum approximate the double time
    integral of the continuous correlator.
    """
    w = np.asarray(omegas, dtype=float)
    phase = np.exp(1j * np.outer(w, grid.times))
    s = grid.dt * np.einsum("wk,kl,wl->w", phase.conj(), grid.g, phase)
    scale = max(np.max(np.abs(s.real), initial=0.0), 1e-300)
    if np.max(np.abs(s.imag), initial=0.0) > 1e-9 * scale:
        logger.warning("spectrum has imaginary part up to %.3g", np.max(np.abs(s.imag)))
    return s.real


def input_spectrum(photons: int, t_pulse: float, omega) -> np.ndarray:
    """Spectrum of an N-photon top-hat pulse, unit peak height per photon."""
    x = 0.5 * np.asarray(omega, dtype=float) * t_pulse
    return photons * np.sinc(x / np.pi) ** 2
