import numpy as np
import pytest

from wqed.chain import ChainError, vacuum_chain
from wqed.evolve import (ConfigError, Scenario, build_model, initial_chain, initial_system_dm, run,
                         step_feedback, step_markovian)
from wqed.oracle import delay_amplitude, dense_collision, trapped_population
from wqed.superop import LindbladSpec, build_step, hamiltonian_single

EXCITED = np.diag([0.0, 1.0]).astype(complex)
UNBOUNDED = 10**6


# -- scenario validation -------------------------------------------------------------------

def test_tau_must_be_multiple_of_dt():
    with pytest.raises(ConfigError, match="integer multiple"):
        Scenario.from_preset("feedback_tls", tau=0.52)


@pytest.mark.parametrize("kw", [
    dict(preset="nope"), dict(gamma_phi=-0.1), dict(chi_max=0), dict(dt=0.0), dict(photons=3),
    dict(observables=("magic",)), dict(initial_state="ee"), dict(tau=0.5), dict(concurrence=1),
    dict(pulse_shape="gauss"), dict(gamma=float("nan")),
])
def test_invalid_scenarios_rejected(kw):
    preset = kw.pop("preset", "custom")
    with pytest.raises(ConfigError):
        Scenario.from_preset(preset, **kw)


def test_feedback_needs_one_delay():
    with pytest.raises(ConfigError, match="delay"):
        Scenario.from_preset("feedback_tls", t_final=0.25)


def test_preset_defaults_and_overrides():
    sc = Scenario.from_preset("feedback_tls", gamma_phi=0.2)
    assert (sc.tau, sc.phi, sc.dt, sc.chi_max, sc.gamma_phi) == (0.5, np.pi, 0.05, 4, 0.2)
    assert sc.tau_idx == 10 and sc.n_steps == 100
    assert Scenario.from_preset("two_emitters").couplings == {"L": 0.5, "R": 0.5}
    assert Scenario.from_preset("custom").couplings == {"R": 1.0}
    assert Scenario.from_preset("fock_scattering", photons=2).photon_cutoff == 2


def test_initial_states_are_density_matrices():
    for name in ("g", "e", "plus", "gg", "ge", "eg", "ee", "superradiant", "subradiant", "mixed"):
        rho = initial_system_dm(name)
        assert abs(np.trace(rho) - 1) < 1e-15 and np.linalg.eigvalsh(rho).min() > -1e-15
    with pytest.raises(ConfigError):
        initial_system_dm("zz")


# -- single steps -------------------------------------------------------------------------

def test_zero_coupling_step_leaves_chain_unchanged():
    prop = build_step(LindbladSpec((2, 2), hamiltonian_single({"R": 0.0}, 0.1)), 0.1)
    chain = vacuum_chain(3, 2, np.full((2, 2), 0.5, dtype=complex))
    before = chain.to_dense()
    step_markovian(chain, prop, 4)
    assert chain.system_pos == 1
    assert np.max(np.abs(chain.to_dense() - before)) <= 1e-12


def test_markovian_steps_match_dense_collision():
    sc = Scenario.from_preset("custom", dt=0.1, t_final=0.5, chi_max=UNBOUNDED)
    model = build_model(sc)
    chain = initial_chain(sc, model)
    dense = dense_collision(sc)
    for k in range(sc.n_steps):
        tr_before = chain.trace()
        step_markovian(chain, model.chain_prop, sc.chi_max)
        assert abs(chain.trace() - tr_before) <= 1e-10
        assert np.max(np.abs(chain.to_dense() - dense[k + 1].tensor)) <= 1e-12


def test_step_preconditions():
    sc = Scenario.from_preset("custom", dt=0.1, t_final=0.2)
    model = build_model(sc)
    chain = initial_chain(sc, model)
    chain.oc = 1
    with pytest.raises(ChainError):
        step_markovian(chain, model.chain_prop, 4)
    fb = Scenario.from_preset("feedback_tls", dt=0.1, tau=0.2, t_final=0.2)
    fm = build_model(fb)
    unpadded = vacuum_chain(3, 2, EXCITED, system_pos=1)
    with pytest.raises(RuntimeError, match="padded"):
        step_feedback(unpadded, fm.chain_prop, 2, 4)
    with pytest.raises(ValueError):
        step_feedback(unpadded, fm.chain_prop, 0, 4)


def test_feedback_steps_keep_layout():
    sc = Scenario.from_preset("feedback_tls", dt=0.1, tau=0.3, t_final=0.5, chi_max=UNBOUNDED)
    model = build_model(sc)
    chain = initial_chain(sc, model)
    for k in range(sc.n_steps):
        step_feedback(chain, model.chain_prop, model.tau_idx, sc.chi_max)
        s = chain.system_pos
        assert chain.oc == s
        assert chain.labels[:s] == list(range(s)) and chain.labels[s + 1:] == list(range(s, len(chain) - 1))


# -- runs --------------------------------------------------------------------------------

def test_feedback_trapping_plateau():
    rec = run(Scenario.from_preset("feedback_tls", t_final=10.0))
    p = rec.series["population"]
    assert p[-1] == pytest.approx(trapped_population(1.0, 0.5), abs=0.02)
    assert np.max(np.abs(p[-40:] - p[-1])) < 5e-3  # plateau over the last 4 delays
    _, c = delay_amplitude(1.0, np.pi, 0.5, 10.0, 0.05)
    assert np.max(np.abs(p - np.abs(c) ** 2)) < 2e-2


def test_offchip_decay_visible_before_first_delay():
    base = run(Scenario.from_preset("feedback_tls", t_final=1.0)).series["population"]
    lossy = run(Scenario.from_preset("feedback_tls", t_final=1.0, gamma_0=1.0)).series["population"]
    before = slice(1, 10)
    assert np.all(lossy[before] < base[before])


def test_superradiant_population():
    rec = run(Scenario.from_preset("two_emitters", tau=0.0, initial_state="superradiant", t_final=3.0,
                                   observables=("population",)))
    t = rec.times
    assert np.max(np.abs(rec.series["population_1"] - 0.5 * np.exp(-2 * t))) < 1e-2
    assert np.allclose(rec.series["population_1"], rec.series["population_2"], atol=1e-12)


def test_single_photon_spectrum_unchanged():
    rec = run(Scenario.from_preset("fock_scattering"))
    s = rec.spectrum
    assert np.max(np.abs(s["S_peak_normalized"] - s["S_input_reference"])) <= 2e-2
    assert s["omega"][0] == pytest.approx(-4.0) and len(s["omega"]) == 201


def test_zero_delay_feedback_effective_rate():
    for phi, rate in ((0.0, 2.0), (np.pi, 0.0), (np.pi / 2, 1.0)):
        rec = run(Scenario.from_preset("feedback_tls", tau=0.0, phi=phi, dt=0.01, t_final=1.0))
        assert rec.series["population"][-1] == pytest.approx(np.exp(-rate), abs=5e-3)


def test_run_records_diagnostics():
    rec = run(Scenario.from_preset("feedback_tls", gamma_phi=1.0, t_final=2.0,
                                   observables=("population", "trace", "excitations")))
    n = len(rec.times)
    assert all(len(v) == n for v in rec.series.values())
    assert all(len(v) == n for v in rec.diagnostics.values())
    assert np.all(np.diff(rec.diagnostics["discarded"]) >= 0)
    assert np.allclose(rec.series["trace"], 1, atol=1e-12)
    assert set(rec.timings) >= {"propagator", "initial_state", "evolution", "observables"}
    assert rec.max_bond <= 4


def test_run_is_deterministic():
    sc = Scenario.from_preset("feedback_tls", gamma_phi=0.5, t_final=1.5)
    a, b = run(sc), run(sc)
    assert np.array_equal(a.series["population"], b.series["population"])
    assert np.array_equal(a.diagnostics["discarded"], b.diagnostics["discarded"])


def test_on_step_callback_sees_every_step():
    seen = []
    run(Scenario.from_preset("custom", t_final=0.5), on_step=lambda k, chain: seen.append(k))
    assert seen == list(range(11))


# -- invariants ---------------------------------------------------------------------------

def test_dense_oracle_gate():
    from wqed.acceptance import c12_oracle_gate
    ok, msg, _ = c12_oracle_gate()
    assert ok, msg


@pytest.mark.parametrize("preset,kw", [
    ("custom", dict(gamma_phi=0.5, gamma_0=0.2, initial_state="plus", t_final=2.0, chi_max=8)),
    ("feedback_tls", dict(tau=0.4, t_final=2.0, chi_max=8)),
    ("two_emitters", dict(tau=0.0, initial_state="ee", t_final=2.0, chi_max=16, observables=("population",))),
])
def test_trotter_first_order(preset, kw):
    final = {}
    for dt in (0.1, 0.05, 0.0125):
        rec = run(Scenario.from_preset(preset, dt=dt, **kw))
        final[dt] = np.array([v[-1] for k, v in rec.series.items() if k.startswith("population")])
    e1 = np.max(np.abs(final[0.1] - final[0.0125]))
    e2 = np.max(np.abs(final[0.05] - final[0.0125]))
    assert 1.6 <= e1 / e2 <= 2.4, e1 / e2


@pytest.mark.parametrize("sc", [
    Scenario.from_preset("feedback_tls", t_final=5.0),
    Scenario.from_preset("fock_scattering", t_final=6.0),
    Scenario.from_preset("two_emitters", tau=0.0, initial_state="mixed", observables=("population",)),
], ids=["feedback", "fock", "two_emitters_markov"])
def test_chi_convergence_without_truncation(sc):
    base = run(sc)
    more = run(sc.replace(chi_max=2 * sc.chi_max))
    assert base.discarded < 1e-20
    for name, series in base.series.items():
        assert np.max(np.abs(series - more.series[name])) < 1e-6
    if base.spectrum is not None:
        assert np.max(np.abs(base.spectrum["S_peak_normalized"] - more.spectrum["S_peak_normalized"])) < 1e-6


@pytest.mark.parametrize("sc", [
    Scenario.from_preset("custom", gamma_phi=0.7, dt=0.05, t_final=3.0),
    Scenario.from_preset("feedback_tls", gamma_phi=1.0, t_final=2.0),
    Scenario.from_preset("fock_scattering", photons=2, gamma_phi=1.0, t_final=3.0, chi_max=81),
], ids=["markov", "feedback", "two_photon"])
def test_excitation_conservation(sc):
    rec = run(sc.replace(observables=("population", "excitations")))
    ex = rec.series["excitations"]
    assert np.max(np.abs(ex - ex[0])) <= 1e-8
