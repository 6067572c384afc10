"""Time stepping of density-matrix chains through the collision model.

A run places the system after ``tau_idx`` padding bins (the initially empty
feedback arm) and sweeps it to the right, one bin per step. Bin ``j`` keeps
label ``j`` for the whole run; at step ``k`` the system meets bin
``tau_idx + k`` and, with feedback, bin ``k`` again.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from . import superop
from .chain import (SYSTEM, ChainError, DmChain, PulseEnvelope, move_oc, move_site, one_photon_chain,
                    renormalize, two_photon_chain, vacuum_chain)
from .observables import (CorrelatorGrid, Environments, bond_singular_values, concurrence,
                          entanglement_entropy_pure, input_spectrum, reduced_system_dm, spectrum,
                          total_excitations, trace_vector, two_time_grid)
from .superop import LindbladSpec, StepPropagator, SplitStepPropagator
from .tensor import ShapeError, contract, svd_truncate

logger = logging.getLogger(__name__)

PRESETS = ("feedback_tls", "two_emitters", "fock_scattering", "custom")
OBSERVABLES = ("population", "trace", "concurrence", "operator_entanglement", "excitations", "spectrum")
SINGLE_STATES = ("g", "e", "plus")
PAIR_STATES = ("gg", "ge", "eg", "ee", "superradiant", "subradiant", "mixed")

# numerical defaults per preset; explicit user values always win
PRESET_DEFAULTS: dict[str, dict[str, Any]] = {
    "feedback_tls": dict(tau=0.5, phi=math.pi, dt=0.05, chi_max=4, t_final=5.0, initial_state="e"),
    "two_emitters": dict(tau=0.5, phi=0.0, dt=0.05, chi_max=20, t_final=5.0, initial_state="ee",
                         observables=("population", "concurrence", "operator_entanglement")),
    "fock_scattering": dict(dt=0.02, chi_max=16, t_final=20.0, photons=1, t_pulse=2.0, initial_state="g",
                            observables=("population", "spectrum")),
    "custom": dict(),
}


class ConfigError(ValueError):
    """Raised for inconsistent or unsupported scenario settings."""


@dataclass(frozen=True)
class Scenario:
    """One simulation run. Rates are in units of gamma, times in units of 1/gamma.

    ``gamma_l``/``gamma_r`` left as ``None`` take the preset's geometry: a
    chiral emitter (``gamma_r = gamma``) for ``custom`` and ``fock_scattering``,
    symmetric coupling ``gamma / 2`` for ``two_emitters``. ``n_max`` left as
    ``None`` becomes ``max(1, photons)``.
    """

    preset: str = "custom"
    gamma: float = 1.0
    gamma_l: float | None = None
    gamma_r: float | None = None
    gamma_phi: float = 0.0
    gamma_0: float = 0.0
    phi: float = 0.0
    tau: float = 0.0
    detuning: float = 0.0
    dt: float = 0.05
    t_final: float = 5.0
    chi_max: int = 4
    n_max: int | None = None
    initial_state: str = "e"
    photons: int = 0
    pulse_shape: str = "tophat"
    t_pulse: float = 2.0
    observables: tuple[str, ...] = ("population",)
    split_propagator: bool = False
    omega_max: float | None = None
    omega_points: int = 201

    def __post_init__(self):
        object.__setattr__(self, "observables", tuple(self.observables))
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        for name in ("gamma", "gamma_l", "gamma_r", "gamma_phi", "gamma_0", "tau", "t_pulse"):
            val = getattr(self, name)
            if val is not None and (not math.isfinite(val) or val < 0):
                raise ConfigError(f"{name} must be a non-negative number, got {val}")
        if not self.dt > 0 or not self.t_final > 0:
            raise ConfigError("dt and t_final must be positive")
        if self.chi_max < 1:
            raise ConfigError("chi_max must be >= 1")
        if self.photons not in (0, 1, 2):
            raise ConfigError(f"photons must be 0, 1 or 2, got {self.photons}")
        if self.n_max is not None and (self.n_max < 1 or self.n_max < self.photons):
            raise ConfigError(f"n_max={self.n_max} cannot hold a {self.photons}-photon pulse")
        if self.pulse_shape != "tophat":
            raise ConfigError(f"unsupported pulse shape {self.pulse_shape!r}")
        bad = set(self.observables) - set(OBSERVABLES)
        if bad:
            raise ConfigError(f"unknown observables {sorted(bad)}")
        valid_states = PAIR_STATES if self.preset == "two_emitters" else SINGLE_STATES
        if self.initial_state not in valid_states:
            raise ConfigError(f"initial_state {self.initial_state!r} not in {valid_states}")
        if self.photons and self.preset in ("two_emitters", "feedback_tls"):
            raise ConfigError(f"Fock pulses are not supported by the {self.preset} preset")
        if self.tau > 0 and self.preset not in ("two_emitters", "feedback_tls"):
            raise ConfigError(f"the {self.preset} preset has no delay line; tau must be 0")
        if "concurrence" in self.observables and self.preset != "two_emitters":
            raise ConfigError("concurrence needs the two_emitters preset")
        # validated index properties
        _ = self.tau_idx, self.n_steps
        if self.tau_idx and self.t_final < self.tau:
            raise ConfigError("t_final must cover at least one delay time")
        if self.photons and self.n_steps < self.pulse_bins:
            raise ConfigError("t_final is shorter than the pulse")

    @classmethod
    def from_preset(cls, preset: str = "custom", **overrides) -> "Scenario":
        if preset not in PRESET_DEFAULTS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        return cls(preset=preset, **{**PRESET_DEFAULTS[preset], **overrides})

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    @property
    def tau_idx(self) -> int:
        idx = int(round(self.tau / self.dt))
        if abs(idx * self.dt - self.tau) > 1e-9 * max(1.0, self.tau):
            raise ConfigError(f"tau={self.tau} is not an integer multiple of dt={self.dt}")
        return idx

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.t_final / self.dt - 1e-9))

    @property
    def pulse_bins(self) -> int:
        return int(round(self.t_pulse / self.dt)) if self.photons else 0

    @property
    def photon_cutoff(self) -> int:
        return self.n_max if self.n_max is not None else max(1, self.photons)

    @property
    def couplings(self) -> dict[str, float]:
        if self.preset == "two_emitters":
            half = self.gamma / 2
            return {"L": half if self.gamma_l is None else self.gamma_l,
                    "R": half if self.gamma_r is None else self.gamma_r}
        if self.gamma_l is None and self.gamma_r is None:
            return {"R": self.gamma}
        return {"L": self.gamma_l or 0.0, "R": self.gamma_r or 0.0}

    @property
    def spectrum_omegas(self) -> np.ndarray:
        w = self.omega_max if self.omega_max is not None else 8.0 / self.t_pulse
        return np.linspace(-w, w, self.omega_points)

    def as_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["observables"] = list(self.observables)
        return d


# -- model assembly ----------------------------------------------------------

@dataclass
class Model:
    """Everything a run needs besides the chain itself."""

    system_dim: int
    bin_dim: int
    tau_idx: int
    spec_prop: StepPropagator | SplitStepPropagator  # sites (system, now[, delayed])
    chain_prop: StepPropagator | SplitStepPropagator  # sites in chain order
    system_dm: np.ndarray
    system_ops: dict[str, np.ndarray]
    bin_number: np.ndarray
    bin_readout: np.ndarray  # annihilation operator of the mode used for spectra


def initial_system_dm(state: str) -> np.ndarray:
    g, e = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    kets = {
        "g": g, "e": e, "plus": (g + e) / np.sqrt(2),
        "gg": np.kron(g, g), "ge": np.kron(g, e), "eg": np.kron(e, g), "ee": np.kron(e, e),
        "superradiant": (np.kron(e, g) + np.kron(g, e)) / np.sqrt(2),
        "subradiant": (np.kron(e, g) - np.kron(g, e)) / np.sqrt(2),
    }
    if state == "mixed":
        return 0.5 * (np.outer(np.kron(g, e), np.kron(g, e)) + np.outer(np.kron(e, g), np.kron(e, g))).astype(complex)
    if state not in kets:
        raise ConfigError(f"unknown initial state {state!r}")
    k = kets[state].astype(complex)
    return np.outer(k, k.conj())


def _emitter_ops(n_emitters: int) -> list[np.ndarray]:
    s = superop.sigma_minus()
    if n_emitters == 1:
        return [s]
    return [np.kron(s, np.eye(2)), np.kron(np.eye(2), s)]


def _dissipators(sc: Scenario, lowering: list[np.ndarray], dims: list[int]):
    out = []
    for s in lowering:
        full = superop.embed(s, 0, dims)
        if sc.gamma_0 > 0:
            out.append((full, sc.gamma_0))
        if sc.gamma_phi > 0:
            out.append((full.conj().T @ full, sc.gamma_phi))
    return tuple(out)


def build_model(sc: Scenario) -> Model:
    """Assemble the propagator and local operators for a scenario."""
    n_max = sc.photon_cutoff
    q = n_max + 1
    a = superop.annihilation(n_max)
    tau_idx = sc.tau_idx
    if sc.preset == "two_emitters":
        n_em, sys_dim = 2, 4
        gl, gr = sc.couplings["L"], sc.couplings["R"]
        bin_dim = q * q
        bin_number = np.kron(a.conj().T @ a, np.eye(q)) + np.kron(np.eye(q), a.conj().T @ a)
        readout = np.kron(np.eye(q), a)
    else:
        n_em, sys_dim = 1, 2
        modes = ["R"] if sc.preset == "feedback_tls" else [m for m in ("L", "R") if m in sc.couplings]
        bin_dim = q ** len(modes)
        mode_ops = [superop.embed(a, k, [q] * len(modes)) for k in range(len(modes))]
        bin_number = sum(m.conj().T @ m for m in mode_ops)
        readout = mode_ops[modes.index("R")] if "R" in modes else mode_ops[0]
    lowering = _emitter_ops(n_em)

    detune = sc.detuning * sum(superop.embed(s.conj().T @ s, 0, [sys_dim, bin_dim]) for s in lowering)
    if tau_idx == 0:
        dims = [sys_dim, bin_dim]
        if sc.preset == "two_emitters":
            h = superop.hamiltonian_two_emitters(gl, gr, sc.phi, sc.dt, n_max, delayed=False) + detune
        elif sc.preset == "feedback_tls":
            # zero delay: both paths address the same bin and interfere
            rate = 0.5 * sc.gamma * abs(1 + np.exp(1j * sc.phi)) ** 2
            h = superop.hamiltonian_single({"R": rate}, sc.dt, sc.detuning, n_max)
        else:
            h = superop.hamiltonian_single(sc.couplings, sc.dt, sc.detuning, n_max)
        spec_prop = superop.build_step(LindbladSpec(dims, h, _dissipators(sc, lowering, dims)), sc.dt)
        chain_prop = spec_prop
    else:
        dims = [sys_dim, bin_dim, bin_dim]
        if sc.preset == "two_emitters":
            parts = superop.hamiltonian_two_emitters_parts(gl, gr, sc.phi, sc.dt, n_max)
        else:
            parts = superop.hamiltonian_feedback_parts(sc.gamma, sc.phi, sc.dt, n_max)
        if sc.split_propagator:
            pair = [sys_dim, bin_dim]
            first = LindbladSpec(pair, parts[0] + detune, _dissipators(sc, lowering, pair))
            second = LindbladSpec(pair, parts[1])
            spec_prop = superop.build_split_step(first, (0, 1), second, (0, 2), dims, sc.dt)
        else:
            if sc.preset == "two_emitters":
                h = superop.hamiltonian_two_emitters(gl, gr, sc.phi, sc.dt, n_max, delayed=True)
            else:
                h = superop.hamiltonian_feedback(sc.gamma, sc.phi, sc.dt, n_max)
            h = h + np.kron(detune, np.eye(bin_dim))
            spec_prop = superop.build_step(LindbladSpec(dims, h, _dissipators(sc, lowering, dims)), sc.dt)
        # chain order is (delayed, system, now)
        chain_prop = spec_prop.permute_sites([2, 0, 1])

    ops: dict[str, np.ndarray] = {}
    if n_em == 1:
        ops["population"] = lowering[0].conj().T @ lowering[0]
    else:
        for k, s in enumerate(lowering, 1):
            ops[f"population_{k}"] = s.conj().T @ s
    return Model(sys_dim, bin_dim, tau_idx, spec_prop, chain_prop, initial_system_dm(sc.initial_state),
                 ops, bin_number, readout)


def initial_chain(sc: Scenario, model: Model) -> DmChain:
    n_bins = model.tau_idx + sc.n_steps
    pos = model.tau_idx
    if sc.photons == 0:
        return vacuum_chain(n_bins, model.bin_dim, model.system_dm, system_pos=pos)
    if model.bin_dim != sc.photon_cutoff + 1:
        raise ConfigError("Fock pulses need a single waveguide mode per bin")
    env = PulseEnvelope.tophat(sc.t_pulse, sc.dt)
    if sc.photons == 1:
        return one_photon_chain(env, model.system_dm, n_bins, model.bin_dim, system_pos=pos)
    return two_photon_chain(env, model.system_dm, n_bins, model.bin_dim, system_pos=pos)


# -- steps -------------------------------------------------------------------------

def step_markovian(chain: DmChain, prop, chi_max: int) -> DmChain:
    """Let the system interact with the bin on its right, then pass it.

    Precondition: the orthogonality centre is on the system. Afterwards the
    system sits one site further right and still carries the centre.
    """
    s = chain.system_pos
    if chain.oc != s:
        raise ChainError(f"orthogonality centre {chain.oc} is not on the system ({s})")
    if s + 1 >= len(chain):
        raise ChainError("no bin left for the system to interact with")
    a, b = chain.sites[s], chain.sites[s + 1]
    theta = prop.apply(contract(a, b, [(2, 0)]))
    cl, ps, pb, cr = theta.shape
    res = svd_truncate(theta.transpose(0, 2, 1, 3).reshape(cl * pb, ps * cr), chi_max)
    k = res.chi
    chain.set_site(s, res.u.reshape(cl, pb, k))
    chain.set_site(s + 1, (res.s[:, None] * res.vdag).reshape(k, ps, cr))
    chain.dims[s], chain.dims[s + 1] = chain.dims[s + 1], chain.dims[s]
    chain.labels[s], chain.labels[s + 1] = chain.labels[s + 1], chain.labels[s]
    chain.oc = s + 1
    chain.discarded += res.discarded_weight
    return chain


def step_feedback(chain: DmChain, prop, tau_idx: int, chi_max: int) -> DmChain:
    """Interaction with the current bin and the bin ``tau_idx`` steps back.

    The delayed bin is swapped next to the system, the three-site propagator
    (chain order: delayed, system, current) is applied, the block is split
    back into sites and the delayed bin returns to its place.
    """
    if tau_idx < 1:
        raise ValueError("step_feedback needs tau_idx >= 1")
    s = chain.system_pos
    if chain.oc != s:
        raise ChainError(f"orthogonality centre {chain.oc} is not on the system ({s})")
    home = s - tau_idx
    if home < 0 or s + 1 >= len(chain):
        raise RuntimeError(f"feedback bin {home} or current bin {s + 1} missing; chain was not padded")
    move_site(chain, home, s - 1, chi_max)
    f, sy, cu = chain.sites[s - 1], chain.sites[s], chain.sites[s + 1]
    theta = contract(contract(f, sy, [(2, 0)]), cu, [(3, 0)])
    theta = prop.apply(theta).transpose(0, 1, 3, 2, 4)  # -> (delayed, current, system)
    cl, pf, pc, ps, cr = theta.shape
    res = svd_truncate(theta.reshape(cl * pf * pc, ps * cr), chi_max)
    k1 = res.chi
    sys_site = res.vdag.reshape(k1, ps, cr)
    rest = (res.u * res.s[None, :]).reshape(cl * pf, pc * k1)
    res2 = svd_truncate(rest, chi_max)
    k2 = res2.chi
    chain.set_site(s - 1, (res2.u * res2.s[None, :]).reshape(cl, pf, k2))
    chain.set_site(s, res2.vdag.reshape(k2, pc, k1))
    chain.set_site(s + 1, sys_site)
    chain.dims[s - 1:s + 2] = [chain.dims[s - 1], chain.dims[s + 1], chain.dims[s]]
    chain.labels[s - 1:s + 2] = [chain.labels[s - 1], chain.labels[s + 1], chain.labels[s]]
    chain.oc = s - 1
    chain.discarded += res.discarded_weight + res2.discarded_weight
    move_site(chain, s - 1, home, chi_max)
    move_oc(chain, s + 1)
    return chain


# -- runs ------------------------------------------------------------------------------

@dataclass
class RunRecord:
    """Time series and diagnostics of one run; row ``k`` is time ``k * dt``."""

    scenario: Scenario
    times: np.ndarray
    series: dict[str, np.ndarray]
    diagnostics: dict[str, np.ndarray]
    timings: dict[str, float]
    spectrum: dict[str, np.ndarray] | None = None
    grid: CorrelatorGrid | None = None
    chain: DmChain | None = field(default=None, repr=False)

    @property
    def max_bond(self) -> int:
        return int(np.max(self.diagnostics["max_bond"]))

    @property
    def discarded(self) -> float:
        return float(self.diagnostics["discarded"][-1])

    @property
    def wall_time(self) -> float:
        return float(sum(self.timings.values()))


def _measure(sc: Scenario, model: Model, chain: DmChain, envs: Environments, out: dict[str, list]):
    s = chain.system_pos
    vec = np.einsum("a,apb,b->p", envs.left(s), chain.sites[s], envs.right(s))
    d = model.system_dim
    raw = vec.reshape(d, d)
    out.setdefault("_hermiticity", []).append(float(np.max(np.abs(raw - raw.conj().T))))
    out.setdefault("_min_eig", []).append(float(np.min(np.linalg.eigvalsh(0.5 * (raw + raw.conj().T)).real)))
    if "population" in sc.observables:
        for name, op in model.system_ops.items():
            out.setdefault(name, []).append(float(np.real(np.trace(op @ raw))))
    if "trace" in sc.observables:
        out.setdefault("trace", []).append(float(np.real(vec @ trace_vector(d))))
    if "concurrence" in sc.observables:
        out.setdefault("concurrence", []).append(concurrence(reduced_system_dm(chain, envs)))
    if "operator_entanglement" in sc.observables:
        # cut between the outgoing field and system plus incoming field
        val = 0.0
        if s > 0:
            sv = bond_singular_values(chain, s)
            val = entanglement_entropy_pure(sv**2 / np.sum(sv**2))
        out.setdefault("operator_entanglement", []).append(val)
    if "excitations" in sc.observables:
        numbers = {model.system_dim: sum(model.system_ops.values()), model.bin_dim: model.bin_number}
        out.setdefault("excitations", []).append(total_excitations(chain, numbers, envs))


def run(sc: Scenario, keep_chain: bool = False,
        on_step: Callable[[int, DmChain], None] | None = None) -> RunRecord:
    """Evolve a scenario to ``t_final`` and collect the requested observables."""
    timings = {}
    t0 = time.perf_counter()
    model = build_model(sc)
    timings["propagator"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    chain = initial_chain(sc, model)
    envs = Environments(chain)
    timings["initial_state"] = time.perf_counter() - t0

    out: dict[str, list] = {}
    diag: dict[str, list] = {"max_bond": [], "discarded": [], "trace_error": []}
    t_evolve = t_measure = 0.0
    for k in range(sc.n_steps + 1):
        if k > 0:
            t0 = time.perf_counter()
            if model.tau_idx:
                step_feedback(chain, model.chain_prop, model.tau_idx, sc.chi_max)
            else:
                step_markovian(chain, model.chain_prop, sc.chi_max)
            tr = envs.trace()
            renormalize(chain, tr)
            t_evolve += time.perf_counter() - t0
            diag["trace_error"].append(abs(tr - 1.0))
        else:
            diag["trace_error"].append(0.0)
        t0 = time.perf_counter()
        _measure(sc, model, chain, envs, out)
        diag["max_bond"].append(chain.max_bond)
        diag["discarded"].append(chain.discarded)
        t_measure += time.perf_counter() - t0
        if on_step is not None:
            on_step(k, chain)
    timings["evolution"] = t_evolve
    timings["observables"] = t_measure

    diag["hermiticity"] = out.pop("_hermiticity")
    diag["min_eig"] = out.pop("_min_eig")
    rec = RunRecord(sc, np.arange(sc.n_steps + 1) * sc.dt, {k: np.asarray(v) for k, v in out.items()},
                    {k: np.asarray(v) for k, v in diag.items()}, timings)
    if "spectrum" in sc.observables:
        t0 = time.perf_counter()
        b = model.bin_readout
        rec.grid = two_time_grid(chain, b.conj().T, b, dt=sc.dt, envs=envs)
        w = sc.spectrum_omegas
        raw = spectrum(rec.grid, w)
        peak = np.max(raw)
        rec.spectrum = {
            "omega": w,
            "S_raw": raw,
            "S_peak_normalized": raw / peak if peak > 0 else raw,
            "S_input_reference": input_spectrum(sc.photons, sc.t_pulse, w),
        }
        timings["two_time"] = time.perf_counter() - t0
    if keep_chain:
        rec.chain = chain
    logger.info("run %s finished: %d steps, max bond %d, discarded %.3g, %.2fs", sc.preset, sc.n_steps,
                rec.max_bond, rec.discarded, rec.wall_time)
    return rec
