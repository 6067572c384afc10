"""Brute-force references for cross-checking the chain evolution.

Everything here works on dense matrices and is only usable for small systems
or few time bins.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import superop
from .chain import check_density_matrix, matrix_to_per_site, per_site_to_matrix
from .superop import LindbladSpec

logger = logging.getLogger(__name__)

# refuse dense collision states with more complex entries than this (64 MiB)
MAX_DENSE_ELEMENTS = 2**22


class OracleError(ValueError):
    """Raised when an oracle is asked for something outside its reach."""


@dataclass
class Trajectory:
    """States sampled on ``times``; ``states[k]`` is a density matrix."""

    times: np.ndarray
    states: np.ndarray

    def expect(self, op: np.ndarray) -> np.ndarray:
        return np.real(np.einsum("ij,tji->t", op, self.states))


@dataclass
class DenseState:
    """Joint state with one ``d**2`` leg per site: system first, then bins by label."""

    tensor: np.ndarray
    dims: tuple[int, ...]
    time: float

    @property
    def matrix(self) -> np.ndarray:
        return per_site_to_matrix(self.tensor, self.dims)

    def reduced_system(self) -> np.ndarray:
        t = self.tensor.reshape(self.tensor.shape[0], -1)
        tv = np.ones(1, dtype=complex)
        for d in self.dims[1:]:
            tv = np.kron(tv, np.eye(d).ravel())
        d0 = self.dims[0]
        return (t @ tv).reshape(d0, d0)

    def check(self, tol: float = 1e-10):
        m = self.matrix
        if np.max(np.abs(m - m.conj().T)) > tol or abs(np.trace(m) - 1) > tol:
            raise OracleError(f"dense state at t={self.time} is not a unit-trace Hermitian matrix")
        if np.min(np.linalg.eigvalsh(0.5 * (m + m.conj().T))) < -1e-9:
            raise OracleError(f"dense state at t={self.time} is not positive")


def lindblad_ode(hamiltonian: np.ndarray, dissipators: Sequence[tuple[np.ndarray, float]],
                 rho0: np.ndarray, t_final: float, dt: float, substeps: int = 10) -> Trajectory:
    """Integrate the Lindblad equation with classic RK4 at step ``dt / substeps``.

    States are returned every ``dt``.
    """
    h = np.asarray(hamiltonian, dtype=complex)
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.shape != h.shape:
        raise ValueError(f"initial state {rho0.shape} does not match Hamiltonian {h.shape}")
    lv = superop.liouvillian(LindbladSpec([h.shape[0]], h, tuple(dissipators)))
    n = int(math.ceil(t_final / dt - 1e-9))
    step = dt / substeps
    v = rho0.ravel().copy()
    out = [v.copy()]
    for _ in range(n):
        for _ in range(substeps):
            k1 = lv @ v
            k2 = lv @ (v + 0.5 * step * k1)
            k3 = lv @ (v + 0.5 * step * k2)
            k4 = lv @ (v + step * k3)
            v = v + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(v.copy())
    d = h.shape[0]
    return Trajectory(np.arange(n + 1) * dt, np.array(out).reshape(n + 1, d, d))


def two_emitter_operators():
    s = superop.sigma_minus()
    eye = np.eye(2)
    return np.kron(s, eye), np.kron(eye, s)


def two_emitter_me(gamma: float, phi: float, gamma_phi: float, rho0: np.ndarray, t_final: float,
                   dt: float, gamma_0: float = 0.0, substeps: int = 10) -> Trajectory:
    """Markovian master equation of two emitters coupled through a bidirectional waveguide.

    Collective jump operators ``s1 + exp(+-i phi) s2`` at rate ``gamma / 2`` each,
    coherent exchange ``(gamma / 2) sin(phi) (s1^dag s2 + h.c.)``, plus local
    dephasing and off-chip decay.
    """
    s1, s2 = two_emitter_operators()
    ph = np.exp(1j * phi)
    hop = s1.conj().T @ s2
    h = 0.5 * gamma * np.sin(phi) * (hop + hop.conj().T)
    diss = [(s1 + ph * s2, gamma / 2), (s1 + np.conj(ph) * s2, gamma / 2)]
    for s in (s1, s2):
        if gamma_phi > 0:
            diss.append((s.conj().T @ s, gamma_phi))
        if gamma_0 > 0:
            diss.append((s, gamma_0))
    return lindblad_ode(h, diss, check_density_matrix(rho0), t_final, dt, substeps)


# -- dense collision model ------------------------------------------------------

def _dense_pulse(sc, bin_dim: int) -> np.ndarray:
    """Per-site density tensor of the pulse bins, built from the ket directly."""
    n = sc.pulse_bins
    amp = math.sqrt(sc.dt) / math.sqrt(sc.t_pulse)  # top-hat amplitude per bin
    psi = np.zeros([bin_dim] * n, dtype=complex)
    if sc.photons == 1:
        for k in range(n):
            idx = [0] * n
            idx[k] = 1
            psi[tuple(idx)] = amp
    else:
        # two-photon Fock state (b^dag)^2 |0> / sqrt(2) with b^dag = sum_k amp b_k^dag
        for k in range(n):
            for m in range(k, n):
                idx = [0] * n
                if k == m:
                    idx[k] = 2
                    psi[tuple(idx)] = amp * amp
                else:
                    idx[k] = idx[m] = 1
                    psi[tuple(idx)] = math.sqrt(2.0) * amp * amp
    v = psi.ravel()
    v = v / np.linalg.norm(v)
    return matrix_to_per_site(np.outer(v, v.conj()), [bin_dim] * n)


def _apply_on_axes(prop, t: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    rest = [a for a in range(t.ndim) if a not in axes]
    order = list(axes) + rest
    moved = np.transpose(t, order)
    shape = moved.shape
    block = moved.reshape((1,) + shape[:len(axes)] + (-1,))
    out = prop.apply(block).reshape(shape)
    return np.ascontiguousarray(np.transpose(out, np.argsort(order)))


def dense_collision(sc, keep: str = "all") -> list[DenseState]:
    """Untruncated collision-model evolution of the full joint state.

    Uses the same step propagator as the chain code but acts on the exact
    delayed tensor factor instead of moving sites around. The initial pulse is
    built from its ket independently of the chain constructors.
    """
    from .evolve import build_model

    if keep not in ("all", "final"):
        raise ValueError("keep must be 'all' or 'final'")
    model = build_model(sc)
    n_bins = model.tau_idx + sc.n_steps
    dims = (model.system_dim,) + (model.bin_dim,) * n_bins
    size = int(np.prod([d * d for d in dims]))
    if size > MAX_DENSE_ELEMENTS:
        raise OracleError(f"dense joint state would hold {size} entries (cap {MAX_DENSE_ELEMENTS}); "
                          "shrink t_final or tau")
    vac = np.zeros(model.bin_dim**2, dtype=complex)
    vac[0] = 1.0
    t = model.system_dm.ravel()
    if sc.photons:
        pulse = _dense_pulse(sc, model.bin_dim)
        t = np.multiply.outer(t, pulse)
        first_vac = sc.pulse_bins
    else:
        first_vac = 0
    for _ in range(first_vac, n_bins):
        t = np.multiply.outer(t, vac)
    states = [DenseState(t, dims, 0.0)]
    for k in range(sc.n_steps):
        cur = 1 + model.tau_idx + k
        axes = [0, cur] if model.tau_idx == 0 else [0, cur, 1 + k]
        t = _apply_on_axes(model.spec_prop, t, axes)
        if keep == "all" or k == sc.n_steps - 1:
            states.append(DenseState(t, dims, (k + 1) * sc.dt))
    if keep == "final":
        states = states[-1:]
    return states


# -- single-excitation delay equation ---------------------------------------------------

def delay_amplitude(gamma: float, phi: float, tau: float, t_final: float, dt: float,
                    substeps: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Excited-state amplitude of an emitter in front of a mirror.

    Integrates ``c' = -(gamma/2) c - (gamma/2) exp(i phi) c(t - tau) Theta(t - tau)``,
    ``c(0) = 1``, by RK4 at step ``dt / substeps`` with linear interpolation of
    the history. Returns ``(times, c)`` sampled every ``dt``.
    """
    if tau < 0 or dt <= 0 or t_final < 0:
        raise ValueError("tau, t_final must be non-negative and dt positive")
    h = dt / substeps
    n_fine = int(math.ceil(t_final / h - 1e-9))
    hist = np.zeros(n_fine + 1, dtype=complex)
    hist[0] = 1.0
    fb = -0.5 * gamma * np.exp(1j * phi)

    eps = 1e-9 * h

    def delayed(t: float, t0: float) -> complex:
        # the feedback switches on at t = tau; a step that ends there must not see it
        s = t - tau
        if tau == 0 or s < -eps or (s <= eps and t0 < tau - eps):
            return 0.0
        x = max(s, 0.0) / h
        i = min(int(math.floor(x)), n_fine - 1)
        w = x - i
        return (1 - w) * hist[i] + w * hist[i + 1]

    def rhs(c: complex, cd: complex) -> complex:
        if tau == 0:
            return (-0.5 * gamma + fb) * c
        return -0.5 * gamma * c + fb * cd

    for n in range(n_fine):
        t = n * h
        c = hist[n]
        k1 = rhs(c, delayed(t, t))
        k2 = rhs(c + h / 2 * k1, delayed(t + h / 2, t))
        k3 = rhs(c + h / 2 * k2, delayed(t + h / 2, t))
        # the stage at t + h may need hist[n + 1] itself when tau < h; use the Euler guess
        if 0 < tau < h and t + h - tau > n * h:
            hist[n + 1] = c + h * k3
        k4 = rhs(c + h * k3, delayed(t + h, t))
        hist[n + 1] = c + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    idx = np.arange(0, n_fine + 1, substeps)
    return idx * h, hist[idx]


def trapped_population(gamma: float, tau: float) -> float:
    """Long-time population for phi = pi: ``1 / (1 + gamma tau / 2)**2``."""
    return 1.0 / (1.0 + 0.5 * gamma * tau) ** 2


# -- pure-state collision model ---------------------------------------------------------

def _ket_swap(sites: list[np.ndarray], i: int, chi: int, oc_right: bool) -> float:
    a, b = sites[i], sites[i + 1]
    cl, da, _ = a.shape
    _, db, cr = b.shape
    theta = np.einsum("aib,bjc->ajic", a, b).reshape(cl * db, da * cr)
    u, s, vh = np.linalg.svd(theta, full_matrices=False)
    k = min(chi, int(np.count_nonzero(s > 1e-14 * s[0])) or 1)
    lost = float(np.sum(s[k:] ** 2) / np.sum(s**2))
    u, s, vh = u[:, :k], s[:k], vh[:k]
    if oc_right:
        sites[i], sites[i + 1] = u.reshape(cl, db, k), (s[:, None] * vh).reshape(k, da, cr)
    else:
        sites[i], sites[i + 1] = (u * s).reshape(cl, db, k), vh.reshape(k, da, cr)
    return lost


def pure_collision(sc, chi_max: int = 32) -> tuple[np.ndarray, np.ndarray, float]:
    """Pure-state (ket) chain evolution of a dissipation-free scenario.

    Same collision model and chain layout as the density-matrix code, but the
    step is the unitary ``exp(-i H dt)`` acting on kets, so a ket bond
    dimension ``chi`` corresponds to ``chi**2`` for density matrices. Returns
    ``(times, reduced system states, discarded weight)``.
    """
    import scipy.linalg

    from .evolve import build_model

    if sc.gamma_phi or sc.gamma_0 or sc.photons or not sc.initial_state or sc.initial_state == "mixed":
        raise OracleError("the pure-state oracle needs a pure initial state and no dissipation or pulse")
    model = build_model(sc)
    tau_idx = model.tau_idx
    q = model.bin_dim
    ds = model.system_dim
    if sc.preset == "two_emitters":
        gl, gr = sc.couplings["L"], sc.couplings["R"]
        h = superop.hamiltonian_two_emitters(gl, gr, sc.phi, sc.dt, sc.photon_cutoff, delayed=tau_idx > 0)
    elif sc.preset == "feedback_tls" and tau_idx:
        h = superop.hamiltonian_feedback(sc.gamma, sc.phi, sc.dt, sc.photon_cutoff)
    else:
        raise OracleError("the pure-state oracle covers feedback_tls and two_emitters")
    u_step = scipy.linalg.expm(-1j * sc.dt * h)
    w, v = np.linalg.eigh(model.system_dm)
    psi0 = v[:, -1] * np.sqrt(w[-1])
    vac = np.zeros((1, q, 1), dtype=complex)
    vac[0, 0, 0] = 1.0
    n_bins = tau_idx + sc.n_steps
    sites = [vac.copy() for _ in range(n_bins)]
    s = tau_idx
    sites.insert(s, psi0.reshape(1, ds, 1).astype(complex))
    lost = 0.0

    def reduced(site):
        return np.einsum("aib,ajb->ij", site, site.conj())

    states = [reduced(sites[s])]
    for k in range(sc.n_steps):
        if tau_idx == 0:
            theta = np.einsum("aib,bjc->aijc", sites[s], sites[s + 1])
            cl, _, _, cr = theta.shape
            u4 = u_step.reshape(ds, q, ds, q)
            theta = np.einsum("ijkl,aklc->ajic", u4, theta).reshape(cl * q, ds * cr)
            uu, sv, vh = np.linalg.svd(theta, full_matrices=False)
            kk = min(chi_max, int(np.count_nonzero(sv > 1e-14 * sv[0])) or 1)
            lost += float(np.sum(sv[kk:] ** 2) / np.sum(sv**2))
            sites[s] = uu[:, :kk].reshape(cl, q, kk)
            sites[s + 1] = (sv[:kk, None] * vh[:kk]).reshape(kk, ds, cr)
        else:
            home = s - tau_idx
            # oc sits on the system; bring it to the delayed bin, then carry the bin over
            for i in range(s - 1, home - 1, -1):
                a, b = sites[i], sites[i + 1]
                cl, da, _ = a.shape
                _, db, cr = b.shape
                m = np.einsum("aib,bjc->aijc", a, b).reshape(cl * da, db * cr)
                uu, sv, vh = np.linalg.svd(m, full_matrices=False)
                kk = min(chi_max, int(np.count_nonzero(sv > 1e-14 * sv[0])) or 1)
                lost += float(np.sum(sv[kk:] ** 2) / np.sum(sv**2))
                sites[i] = (uu[:, :kk] * sv[:kk]).reshape(cl, da, kk)
                sites[i + 1] = vh[:kk].reshape(kk, db, cr)
            for i in range(home, s - 1):
                lost += _ket_swap(sites, i, chi_max, oc_right=True)
            f, sy, cu = sites[s - 1], sites[s], sites[s + 1]
            theta = np.einsum("aib,bjc,ckd->aijkd", f, sy, cu)
            u6 = u_step.reshape(ds, q, q, ds, q, q)  # (system, now, delayed)
            theta = np.einsum("sntSND,aDSNd->atnsd", u6, theta)
            cl, _, _, _, cr = theta.shape
            m = theta.reshape(cl * q * q, ds * cr)
            uu, sv, vh = np.linalg.svd(m, full_matrices=False)
            kk = min(chi_max, int(np.count_nonzero(sv > 1e-14 * sv[0])) or 1)
            lost += float(np.sum(sv[kk:] ** 2) / np.sum(sv**2))
            sys_site = vh[:kk].reshape(kk, ds, cr)
            rest = (uu[:, :kk] * sv[:kk]).reshape(cl * q, q * kk)
            u2, s2, v2 = np.linalg.svd(rest, full_matrices=False)
            k2 = min(chi_max, int(np.count_nonzero(s2 > 1e-14 * s2[0])) or 1)
            lost += float(np.sum(s2[k2:] ** 2) / np.sum(s2**2))
            sites[s - 1] = (u2[:, :k2] * s2[:k2]).reshape(cl, q, k2)
            sites[s] = v2[:k2].reshape(k2, q, kk)
            sites[s + 1] = sys_site
            # carry the used bin home, then bring the centre to the system
            for i in range(s - 2, home - 1, -1):
                lost += _ket_swap(sites, i, chi_max, oc_right=False)
            for i in range(home, s + 1):
                a = sites[i]
                cl, d, cr = a.shape
                qq, rr = np.linalg.qr(a.reshape(cl * d, cr))
                sites[i] = qq.reshape(cl, d, qq.shape[1])
                sites[i + 1] = np.tensordot(rr, sites[i + 1], axes=(1, 0))
        s += 1
        nrm = np.linalg.norm(sites[s])
        sites[s] = sites[s] / nrm
        states.append(reduced(sites[s]))
    return np.arange(sc.n_steps + 1) * sc.dt, np.array(states), lost
