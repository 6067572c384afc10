"""Acceptance criteria shared by ``wqed validate`` and the test suite.

Each criterion returns a :class:`CriterionResult` with the measured value and
the tolerance it was judged against. Runs are memoized per scenario so that
criteria sharing a run (and the conservation audit) do not repeat it.
"""

from __future__ import annotations

import functools
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracle
from .chain import (DmChain, PulseEnvelope, canonicalize, one_photon_ket_sites, pure_to_dm_site, renormalize,
                    two_photon_ket_sites, vacuum_chain)
from .evolve import ConfigError, RunRecord, Scenario, initial_system_dm, run
from .observables import concurrence, entanglement_entropy_pure, operator_entanglement

logger = logging.getLogger(__name__)

UNBOUNDED_CHI = 10**6


@dataclass(frozen=True)
class CriterionResult:
    number: int
    name: str
    passed: bool
    measured: str
    tolerance: str
    seconds: float

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.number:>2} {self.name}: {self.measured} (required {self.tolerance}; {self.seconds:.1f}s)"


@functools.lru_cache(maxsize=None)
def cached_run(sc: Scenario) -> RunRecord:
    return run(sc)


def timed_run(sc: Scenario) -> tuple[RunRecord, float]:
    t0 = time.perf_counter()
    rec = cached_run(sc)
    return rec, time.perf_counter() - t0


# -- scenarios -----------------------------------------------------------------------

def markov_decay_scenario() -> Scenario:
    return Scenario.from_preset("custom", dt=0.01, t_final=5.0, chi_max=4, observables=("population", "trace"))


def feedback_scenario(**kw) -> Scenario:
    base = dict(t_final=10.0, observables=("population", "trace"))
    return Scenario.from_preset("feedback_tls", **{**base, **kw})


def two_emitter_markov(state: str, gamma_phi: float, dt: float = 0.05) -> Scenario:
    return Scenario.from_preset("two_emitters", tau=0.0, dt=dt, t_final=5.0, gamma_phi=gamma_phi,
                                initial_state=state, observables=("population", "trace"))


def onset_scenario() -> Scenario:
    # runs past the window so a late onset is reported rather than missed
    return Scenario.from_preset("two_emitters", t_final=3.75, observables=("population", "concurrence"))


def fock_scenario(photons: int, gamma_phi: float) -> Scenario:
    return Scenario.from_preset("fock_scattering", photons=photons, gamma_phi=gamma_phi)


def gate_scenarios() -> list[Scenario]:
    """Every preset (and the split-propagator variant) shrunk to at most five bins."""
    big = UNBOUNDED_CHI
    return [
        Scenario.from_preset("custom", dt=0.1, t_final=0.5, chi_max=big, gamma_phi=0.3, gamma_0=0.2,
                             initial_state="plus"),
        Scenario.from_preset("custom", dt=0.1, t_final=0.4, chi_max=big, gamma_l=0.4, gamma_r=0.6, detuning=0.5,
                             initial_state="plus"),
        Scenario.from_preset("feedback_tls", dt=0.1, tau=0.2, t_final=0.3, chi_max=big, gamma_phi=0.5,
                             gamma_0=0.1, initial_state="plus", phi=1.0),
        Scenario.from_preset("feedback_tls", dt=0.1, tau=0.1, t_final=0.4, chi_max=big, gamma_phi=0.5,
                             initial_state="plus", phi=1.0, split_propagator=True),
        Scenario.from_preset("two_emitters", dt=0.1, tau=0.1, t_final=0.3, chi_max=big, gamma_phi=0.5,
                             initial_state="superradiant", phi=0.7, observables=("population",)),
        Scenario.from_preset("two_emitters", dt=0.1, tau=0.0, t_final=0.4, chi_max=big, initial_state="mixed",
                             gamma_phi=0.5, observables=("population",)),
        Scenario.from_preset("fock_scattering", dt=0.1, t_pulse=0.3, t_final=0.5, chi_max=big, gamma_phi=0.4,
                             observables=("population",)),
        Scenario.from_preset("fock_scattering", dt=0.1, t_pulse=0.3, t_final=0.4, chi_max=big, photons=2,
                             gamma_phi=0.4, observables=("population",)),
    ]


# -- oracle comparison (also used by ``wqed oracle``) -------------------------------------

def oracle_comparison(sc: Scenario) -> tuple[str, np.ndarray, dict[str, np.ndarray]]:
    """Run ``sc`` and its matching brute-force reference.

    Returns the oracle kind, the time grid and columns ``mps_X``, ``oracle_X``
    and ``abs_diff_X`` per population observable.
    """
    rec = run(sc.replace(observables=tuple(dict.fromkeys(sc.observables + ("population",)))))
    ops = {}
    if sc.preset == "two_emitters":
        s1, s2 = oracle.two_emitter_operators()
        ops = {"population_1": s1.conj().T @ s1, "population_2": s2.conj().T @ s2}
    else:
        ops = {"population": np.diag([0.0, 1.0]).astype(complex)}
    kind, states = None, None
    if sc.preset == "two_emitters" and sc.tau_idx == 0 and sc.photons == 0 and sc.gamma_l is None \
            and sc.gamma_r is None and sc.detuning == 0:
        kind = "master_equation"
        states = oracle.two_emitter_me(sc.gamma, sc.phi, sc.gamma_phi, initial_system_dm(sc.initial_state),
                                       sc.t_final, sc.dt, sc.gamma_0).states
    elif sc.preset == "feedback_tls" and sc.gamma_phi == 0 and sc.gamma_0 == 0 and sc.detuning == 0 \
            and sc.initial_state == "e":
        kind = "delay_equation"
        _, c = oracle.delay_amplitude(sc.gamma, sc.phi, sc.tau, sc.n_steps * sc.dt, sc.dt)
        pops = np.abs(c) ** 2
        states = np.zeros((len(pops), 2, 2), dtype=complex)
        states[:, 1, 1], states[:, 0, 0] = pops, 1 - pops
    elif sc.preset == "custom" and sc.photons == 0:
        kind = "lindblad"
        s = np.array([[0, 1], [0, 0]], dtype=complex)
        rate = sum(sc.couplings.values()) + sc.gamma_0
        diss = [(s, rate)] + ([(s.conj().T @ s, sc.gamma_phi)] if sc.gamma_phi else [])
        h = sc.detuning * s.conj().T @ s
        states = oracle.lindblad_ode(h, diss, initial_system_dm(sc.initial_state), sc.n_steps * sc.dt,
                                     sc.dt).states
    elif sc.preset == "two_emitters" and sc.gamma_phi == 0 and sc.gamma_0 == 0 and sc.initial_state != "mixed":
        kind = "pure_state_chain"
        _, states, _ = oracle.pure_collision(sc, chi_max=max(32, sc.chi_max))
    else:
        try:
            kind = "dense_collision"
            states = np.array([d.reduced_system() for d in oracle.dense_collision(sc)])
        except oracle.OracleError as exc:
            raise ConfigError(f"no oracle covers this configuration: {exc}") from exc
    cols: dict[str, np.ndarray] = {}
    for name, op in ops.items():
        ref = np.real(np.einsum("ij,tji->t", op, states))
        cols[f"mps_{name}"] = rec.series[name]
        cols[f"oracle_{name}"] = ref
        cols[f"abs_diff_{name}"] = np.abs(rec.series[name] - ref)
    return kind, rec.times, cols


# -- criteria -------------------------------------------------------------------------

def c01_markov_decay() -> tuple[bool, str, str]:
    rec, secs = timed_run(markov_decay_scenario())
    err = float(np.max(np.abs(rec.series["population"] - np.exp(-rec.times))))
    return err <= 5e-3 and secs < 10, f"max |P - exp(-t)| = {err:.2e}, runtime {secs:.2f}s", "<= 5e-3 and < 10 s"


def c02_feedback_trapping() -> tuple[bool, str, str]:
    sc = feedback_scenario()
    rec, secs = timed_run(sc)
    _, c = oracle.delay_amplitude(sc.gamma, sc.phi, sc.tau, sc.t_final, sc.dt)
    target = oracle.trapped_population(sc.gamma, sc.tau)
    p = float(rec.series["population"][-1])
    ok = abs(p - target) <= 0.02 and secs < 30
    return ok, (f"P(t={sc.t_final:g}) = {p:.4f} vs {target:.4f} (delay oracle at t_final {abs(c[-1])**2:.4f}), "
                f"runtime {secs:.2f}s"), "within 0.02 of 0.64 and < 30 s"


def c03_dephasing_band() -> tuple[bool, str, str]:
    sc0 = feedback_scenario()
    k = int(round(10 * sc0.tau / sc0.dt))
    p0 = float(cached_run(sc0).series["population"][k])
    p1 = float(cached_run(feedback_scenario(gamma_phi=1.0)).series["population"][k])
    ratio = p1 / p0
    return p1 > 0 and 0.3 <= ratio <= 0.7, f"P(10 tau) = {p1:.4f}, ratio to lossless {ratio:.3f}", \
        "0 < P and ratio in [0.3, 0.7]"


def c04_offchip_ordering() -> tuple[bool, str, str]:
    sc0 = feedback_scenario()
    k = sc0.tau_idx - 1  # last sample before the first return, t = tau^-
    pops = [float(cached_run(feedback_scenario(gamma_0=g)).series["population"][k]) for g in (0.0, 0.2, 1.0)]
    ok = pops[2] < pops[1] < pops[0]
    return ok, "P(tau^-) for gamma_0 = 0, 0.2, 1: " + ", ".join(f"{p:.4f}" for p in pops), \
        "strictly decreasing in gamma_0"


def _me_error(state: str, gamma_phi: float, dt: float, chi_max: int | None = None) -> float:
    sc = two_emitter_markov(state, gamma_phi, dt)
    if chi_max is not None:
        sc = sc.replace(chi_max=chi_max)
    rec = cached_run(sc)
    me = oracle.two_emitter_me(sc.gamma, sc.phi, gamma_phi, initial_system_dm(state), sc.t_final, dt)
    s1, s2 = oracle.two_emitter_operators()
    e1 = np.abs(rec.series["population_1"] - me.expect(s1.conj().T @ s1))
    e2 = np.abs(rec.series["population_2"] - me.expect(s2.conj().T @ s2))
    return float(max(e1.max(), e2.max()))


def c05_me_agreement(chi_max: int | None = None) -> tuple[bool, str, str]:
    """``chi_max`` replaces the preset bond cap; a starved cap must make this fail."""
    worst, ratios = 0.0, []
    for state in ("superradiant", "subradiant", "ee", "mixed"):
        for gp in (0.0, 0.5):
            e, e_half = _me_error(state, gp, 0.05, chi_max), _me_error(state, gp, 0.025, chi_max)
            worst = max(worst, e)
            if e > 1e-10:
                ratios.append(e / e_half)
    ok = worst <= 1e-2 and all(1.6 <= r <= 2.4 for r in ratios)
    return ok, f"max diff {worst:.2e} at dt=0.05; error ratio dt/(dt/2) in [{min(ratios, default=math.nan):.2f}, {max(ratios, default=math.nan):.2f}]", \
        "<= 1e-2, first-order ratio in [1.6, 2.4]"


def c06_superradiant_rate() -> tuple[bool, str, str]:
    sup = cached_run(two_emitter_markov("superradiant", 0.0))
    t, p = sup.times, sup.series["population_1"]
    mask = (t <= 3.0) & (p > 1e-8)
    rate = -np.polyfit(t[mask], np.log(p[mask]), 1)[0]
    sub = cached_run(two_emitter_markov("subradiant", 0.0))
    drift = float(np.max(np.abs(sub.series["population_1"] - sub.series["population_1"][0])))
    ok = abs(rate - 2.0) <= 0.1 and drift <= 1e-3
    return ok, f"fitted rate {rate:.4f} gamma, subradiant drift {drift:.1e}", "2 gamma +- 5%, drift <= 1e-3"


def c07_entanglement_onset() -> tuple[bool, str, str]:
    sc = onset_scenario()
    rec = cached_run(sc)
    t, c = rec.times, rec.series["concurrence"]
    eps = 1e-9
    early = float(np.max(c[t < 4 * sc.tau - eps]))
    window = float(np.max(c[(t >= 5 * sc.tau - eps) & (t <= 7 * sc.tau + eps)]))
    onset = t[np.argmax(c > 0.01)] if np.any(c > 0.01) else math.nan
    # untruncated pure-state reference for the same scenario
    _, states, _ = oracle.pure_collision(sc, chi_max=64)
    c_ref = np.array([concurrence(0.5 * (r + r.conj().T)) for r in states])
    ref_onset = t[np.argmax(c_ref > 0.01)] if np.any(c_ref > 0.01) else math.nan
    ok = early <= 1e-3 and window > 0.01
    return ok, (f"max C(t<4tau) = {early:.1e}, max C on [5tau, 7tau] = {window:.4f}, C>0.01 first at t={onset:g} "
                f"(pure-state reference: t={ref_onset:g})"), "<= 1e-3 early and > 0.01 in window"


def _pure_chains() -> list[tuple[str, list[np.ndarray]]]:
    """Ket chains with a variety of Schmidt spectra."""
    rng = np.random.default_rng(7)
    env = PulseEnvelope(np.array([0.5, 1.0, 0.8, 0.3]) / math.sqrt(0.1 * (0.25 + 1 + 0.64 + 0.09)), 0.1)
    chains = [("one_photon", one_photon_ket_sites(env, 2)), ("two_photon", two_photon_ket_sites(env, 3))]
    dims, bonds = [2, 3, 2, 2, 3], [1, 2, 4, 3, 2, 1]
    rand = [rng.normal(size=(bonds[i], dims[i], bonds[i + 1])) + 1j * rng.normal(size=(bonds[i], dims[i], bonds[i + 1]))
            for i in range(len(dims))]
    chains.append(("random", rand))
    return chains


def _ket_entropies(sites: list[np.ndarray]) -> list[float]:
    psi = sites[0]
    for s in sites[1:]:
        psi = np.tensordot(psi, s, axes=([-1], [0]))
    psi = psi.reshape(psi.shape[1:-1])
    psi = psi / np.linalg.norm(psi)
    dims = psi.shape
    out = []
    for cut in range(1, len(dims)):
        sv = np.linalg.svd(psi.reshape(int(np.prod(dims[:cut])), -1), compute_uv=False)
        out.append(entanglement_entropy_pure(sv**2 / np.sum(sv**2)))
    return out


def _dm_chain_from_kets(sites: list[np.ndarray]) -> DmChain:
    dm_sites = [pure_to_dm_site(a) for a in sites]
    dims = [a.shape[1] for a in sites]
    chain = DmChain(dm_sites, dims, list(range(len(sites))), oc=0)
    canonicalize(chain, 0)
    return renormalize(chain)


def c08_operator_entanglement() -> tuple[bool, str, str]:
    worst = 0.0
    for _, sites in _pure_chains():
        chain = _dm_chain_from_kets(sites)
        for cut, s in enumerate(_ket_entropies(sites), start=1):
            worst = max(worst, abs(operator_entanglement(chain, cut) - 2 * s))
    prod = vacuum_chain(4, 2, np.diag([0.3, 0.7]).astype(complex), system_pos=2)
    prod_max = max(operator_entanglement(prod, c) for c in range(1, len(prod)))
    ok = worst <= 1e-9 and prod_max <= 1e-12
    return ok, f"max |S_OE - 2S| = {worst:.1e}, product chain S_OE = {abs(prod_max):.1e}", "<= 1e-9, product 0"


def _spectrum(photons: int, gamma_phi: float):
    rec = cached_run(fock_scenario(photons, gamma_phi))
    return rec.spectrum, rec


def c09_single_photon_spectrum() -> tuple[bool, str, str]:
    spec, rec = _spectrum(1, 0.0)
    w = spec["omega"]
    mask = np.abs(w) <= 8.0 / rec.scenario.t_pulse + 1e-12
    dev = float(np.max(np.abs(spec["S_peak_normalized"] - spec["S_input_reference"])[mask]))
    return dev <= 2e-2, f"max deviation {dev:.2e} over |w| <= {8 / rec.scenario.t_pulse:g}", "<= 2e-2"


def c10_dephasing_split() -> tuple[bool, str, str]:
    spec, _ = _spectrum(1, 1.0)
    w, s = spec["omega"], spec["S_peak_normalized"]
    maxima = [i for i in range(1, len(s) - 1) if s[i] > s[i - 1] and s[i] >= s[i + 1]]
    minima = [i for i in range(1, len(s) - 1) if s[i] < s[i - 1] and s[i] <= s[i + 1]]
    centre = int(np.argmin(np.abs(w)))
    big = [i for i in maxima if s[i] > 0.5]
    dip = [i for i in minima if abs(w[i]) <= 2 * (w[1] - w[0])]
    ok = len(big) == 2 and w[big[0]] < 0 < w[big[1]] and bool(dip)
    return ok, (f"maxima at w = {[round(float(w[i]), 3) for i in big]}, "
                f"S(0) = {s[centre]:.3f}"), "two maxima around a minimum at w = 0"


def c11_two_photon_nonlinear() -> tuple[bool, str, str]:
    spec, _ = _spectrum(2, 0.0)
    dev = float(np.max(np.abs(spec["S_peak_normalized"] - spec["S_input_reference"] / 2)))
    return dev > 5e-2, f"max deviation {dev:.3f}", "> 5e-2"


def c12_oracle_gate() -> tuple[bool, str, str]:
    worst = 0.0
    for sc in gate_scenarios():
        rec = run(sc, keep_chain=True)
        dense = oracle.dense_collision(sc, keep="final")[-1]
        worst = max(worst, float(np.max(np.abs(rec.chain.to_dense() - dense.tensor))))
    return worst <= 1e-9, f"max elementwise difference {worst:.1e} over {len(gate_scenarios())} scenarios", \
        "<= 1e-9"


def conservation_audit(rec: RunRecord) -> list[str]:
    """Invariant violations of one run (empty when everything holds)."""
    d = rec.diagnostics
    problems = []
    step_lost = np.diff(d["discarded"], prepend=0.0)
    # truncation can move the trace by at most a few times the discarded weight
    bad = d["trace_error"] > 10 * np.sqrt(step_lost) + 1e-10
    if np.any(bad):
        problems.append(f"trace drift {d['trace_error'].max():.1e} beyond truncation bound")
    if "trace" in rec.series and np.max(np.abs(rec.series["trace"] - 1)) > 1e-8:
        problems.append("trace not 1 after renormalization")
    # truncating a density chain is not Hermiticity-preserving; allow the truncation scale
    herm_tol = 1e-10 + np.sqrt(d["discarded"])
    if np.any(d["hermiticity"] > herm_tol):
        problems.append(f"reduced state not Hermitian ({d['hermiticity'].max():.1e})")
    floor = -1e-9 - 10 * np.sqrt(d["discarded"])
    if np.any(d["min_eig"] < floor):
        problems.append(f"reduced state eigenvalue {d['min_eig'].min():.1e}")
    if rec.grid is not None:
        g = rec.grid.g
        if np.max(np.abs(g - g.conj().T)) > 1e-9:
            problems.append("two-time grid not Hermitian")
        if np.linalg.eigvalsh(0.5 * (g + g.conj().T)).min() < -1e-8 - np.sqrt(rec.discarded):
            problems.append("two-time grid not positive")
    return problems


def excitation_drift(sc: Scenario) -> float:
    rec = cached_run(sc.replace(observables=("population", "excitations")))
    ex = rec.series["excitations"]
    return float(np.max(np.abs(ex - ex[0])))


def c13_conservation() -> tuple[bool, str, str]:
    problems = []
    runs = audit_scenarios()
    for sc in runs:
        for p in conservation_audit(cached_run(sc)):
            problems.append(f"{sc.preset}: {p}")
    drifts = [excitation_drift(feedback_scenario(gamma_phi=1.0, t_final=2.0)),
              excitation_drift(Scenario.from_preset("custom", gamma_phi=0.7, dt=0.05, t_final=3.0)),
              excitation_drift(two_emitter_markov("ee", 0.5).replace(t_final=2.0)),
              excitation_drift(fock_scenario(2, 1.0).replace(t_final=4.0, chi_max=64))]
    ok = not problems and max(drifts) <= 1e-8
    msg = f"{len(runs)} runs audited, {len(problems)} violations; max excitation drift {max(drifts):.1e}"
    if problems:
        msg += "; " + "; ".join(problems[:3])
    return ok, msg, "all invariants, excitation drift <= 1e-8"


def audit_scenarios() -> list[Scenario]:
    """The runs behind criteria 1-11 (memoized, so auditing them is free after those criteria)."""
    scs = [markov_decay_scenario(), feedback_scenario(), feedback_scenario(gamma_phi=1.0),
           feedback_scenario(gamma_0=0.2), feedback_scenario(gamma_0=1.0), onset_scenario(),
           fock_scenario(1, 0.0), fock_scenario(1, 1.0), fock_scenario(2, 0.0)]
    for state in ("superradiant", "subradiant", "ee", "mixed"):
        for gp in (0.0, 0.5):
            scs += [two_emitter_markov(state, gp), two_emitter_markov(state, gp, 0.025)]
    return scs


CRITERIA: list[tuple[int, str, Callable[[], tuple[bool, str, str]]]] = [
    (1, "markov_decay", c01_markov_decay),
    (2, "feedback_trapping", c02_feedback_trapping),
    (3, "dephasing_band", c03_dephasing_band),
    (4, "offchip_ordering", c04_offchip_ordering),
    (5, "me_agreement", c05_me_agreement),
    (6, "superradiant_rate", c06_superradiant_rate),
    (7, "entanglement_onset", c07_entanglement_onset),
    (8, "operator_entanglement_identity", c08_operator_entanglement),
    (9, "single_photon_spectrum", c09_single_photon_spectrum),
    (10, "dephasing_spectral_split", c10_dephasing_split),
    (11, "two_photon_nonlinearity", c11_two_photon_nonlinear),
    (12, "oracle_gate", c12_oracle_gate),
    (13, "conservation", c13_conservation),
]


def evaluate(number: int) -> CriterionResult:
    num, name, fn = next(c for c in CRITERIA if c[0] == number)
    t0 = time.perf_counter()
    passed, measured, tol = fn()
    return CriterionResult(num, name, bool(passed), measured, tol, time.perf_counter() - t0)


def run_all(name_filter: str | None = None, report: Callable[[str], None] | None = None) -> list[CriterionResult]:
    out = []
    for num, name, _ in CRITERIA:
        if name_filter and name_filter not in name and name_filter != str(num):
            continue
        res = evaluate(num)
        if report is not None:
            report(res.line())
        out.append(res)
    return out
