import numpy as np
import pytest

from wqed.evolve import Scenario, initial_system_dm, run
from wqed.oracle import (DenseState, OracleError, delay_amplitude, dense_collision, lindblad_ode, pure_collision,
                         trapped_population, two_emitter_me, two_emitter_operators)
from wqed.superop import sigma_minus

SM = sigma_minus()
N_E = SM.conj().T @ SM
EXCITED = np.diag([0.0, 1.0]).astype(complex)


def test_lindblad_decay():
    tr = lindblad_ode(np.zeros((2, 2)), [(SM, 1.0)], EXCITED, 1.0, 0.05)
    assert tr.times[-1] == pytest.approx(1.0)
    assert tr.expect(N_E)[-1] == pytest.approx(0.36788, abs=1e-5)
    assert np.max(np.abs(tr.expect(N_E) - np.exp(-tr.times))) < 1e-10


def test_lindblad_dephasing_closed_form():
    rho0 = np.full((2, 2), 0.5, dtype=complex)
    tr = lindblad_ode(np.zeros((2, 2)), [(N_E, 0.6)], rho0, 2.0, 0.1)
    assert np.allclose(tr.states[:, 1, 1], 0.5)
    assert np.allclose(np.abs(tr.states[:, 0, 1]), 0.5 * np.exp(-0.3 * tr.times), atol=1e-10)


def test_lindblad_constant_without_generator():
    rho0 = np.array([[0.2, 0.1], [0.1, 0.8]], dtype=complex)
    tr = lindblad_ode(np.zeros((2, 2)), [], rho0, 1.0, 0.1)
    assert np.allclose(tr.states, rho0)
    with pytest.raises(ValueError):
        lindblad_ode(np.zeros((3, 3)), [], rho0, 1.0, 0.1)


def test_me_superradiant_and_subradiant():
    s1, _ = two_emitter_operators()
    n1 = s1.conj().T @ s1
    sup = two_emitter_me(1.0, 0.0, 0.0, initial_system_dm("superradiant"), 3.0, 0.05)
    assert np.allclose(sup.expect(n1), 0.5 * np.exp(-2 * sup.times), atol=1e-9)
    sub = two_emitter_me(1.0, 0.0, 0.0, initial_system_dm("subradiant"), 3.0, 0.05)
    assert np.allclose(sub.expect(n1), 0.5, atol=1e-12)


def test_me_doubly_excited_closed_form_and_fitted_rate():
    s1, s2 = two_emitter_operators()
    n_tot = s1.conj().T @ s1 + s2.conj().T @ s2
    tr = two_emitter_me(1.0, 0.0, 0.0, initial_system_dm("ee"), 1.5, 0.01)
    per_emitter = tr.expect(n_tot) / 2
    # |ee> -> symmetric state -> |gg>, both at rate 2 gamma
    assert np.allclose(per_emitter, np.exp(-2 * tr.times) * (1 + tr.times), atol=1e-9)
    k = -np.polyfit(tr.times, np.log(per_emitter), 1)[0]
    assert k == pytest.approx(np.sqrt(2), rel=0.1)


def test_me_matches_generic_lindblad():
    s1, s2 = two_emitter_operators()
    phi, gp = 0.7, 0.3
    rho0 = initial_system_dm("ee")
    me = two_emitter_me(1.0, phi, gp, rho0, 1.0, 0.05)
    hop = s1.conj().T @ s2
    h = 0.5 * np.sin(phi) * (hop + hop.conj().T)
    diss = [(s1 + np.exp(1j * phi) * s2, 0.5), (s1 + np.exp(-1j * phi) * s2, 0.5),
            (s1.conj().T @ s1, gp), (s2.conj().T @ s2, gp)]
    ref = lindblad_ode(h, diss, rho0, 1.0, 0.05)
    assert np.max(np.abs(me.states - ref.states)) <= 1e-8


def test_trajectory_states_are_valid():
    tr = two_emitter_me(1.0, 0.4, 0.5, initial_system_dm("mixed"), 2.0, 0.1)
    for rho in tr.states:
        assert np.max(np.abs(rho - rho.conj().T)) <= 1e-10
        assert abs(np.trace(rho) - 1) <= 1e-10
        assert np.linalg.eigvalsh(rho).min() >= -1e-9


# -- dense collision model -------------------------------------------------------------------

def test_dense_collision_first_order_convergence():
    errs = []
    for dt in (0.2, 0.1, 0.05):
        sc = Scenario.from_preset("custom", dt=dt, t_final=0.4, chi_max=10**6, gamma_phi=0.3)
        pop = dense_collision(sc, keep="final")[-1].reduced_system()[1, 1].real
        errs.append(abs(pop - np.exp(-0.4)))
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(1.6 <= r <= 2.4 for r in ratios), ratios


def test_dense_collision_agrees_with_lindblad_small_dt():
    sc = Scenario.from_preset("custom", dt=0.1, t_final=0.5, chi_max=10**6)
    states = dense_collision(sc)
    pops = np.array([s.reduced_system()[1, 1].real for s in states])
    assert np.max(np.abs(pops - np.exp(-np.arange(6) * 0.1))) < 1e-2
    for s in states:
        s.check()


def test_dense_collision_zero_coupling_constant():
    sc = Scenario.from_preset("custom", gamma=0.0, dt=0.1, t_final=0.4, chi_max=10**6, initial_state="plus")
    states = dense_collision(sc)
    for s in states[1:]:
        assert np.allclose(s.tensor, states[0].tensor, atol=1e-15)


def test_dense_collision_refuses_large():
    sc = Scenario.from_preset("custom", dt=0.1, t_final=2.0, chi_max=10**6)
    with pytest.raises(OracleError, match="cap"):
        dense_collision(sc)
    with pytest.raises(ValueError):
        dense_collision(sc, keep="some")


def test_dense_state_check_rejects_non_positive():
    bad = DenseState(np.array([1.5, 0, 0, -0.5], dtype=complex), (2,), 0.0)
    with pytest.raises(OracleError):
        bad.check()


# -- delay equation -------------------------------------------------------------------------

def test_delay_trapping():
    _, c = delay_amplitude(1.0, np.pi, 0.5, 30.0, 0.05)
    assert abs(c[-1]) ** 2 == pytest.approx(trapped_population(1.0, 0.5), abs=1e-10)
    _, c = delay_amplitude(1.0, np.pi, 0.3, 30.0, 0.2)  # delay not a whole number of substeps
    assert abs(c[-1]) ** 2 == pytest.approx(trapped_population(1.0, 0.3), abs=1e-10)
    assert trapped_population(1.0, 0.5) == pytest.approx(0.64)


def test_delay_markov_limit():
    t, c = delay_amplitude(1.0, 0.0, 100.0, 5.0, 0.05)
    assert np.allclose(np.abs(c) ** 2, np.exp(-t), atol=1e-10)


def test_delay_constructive_phase_speeds_decay():
    t, c = delay_amplitude(1.0, 0.0, 0.2, 3.0, 0.05)
    late = t > 0.2
    assert np.all(np.abs(c[late]) ** 2 < np.exp(-t[late]))


def test_delay_rejects_bad_args():
    with pytest.raises(ValueError):
        delay_amplitude(1.0, 0.0, -1.0, 1.0, 0.1)


# -- pure-state chain --------------------------------------------------------------------------

def test_pure_collision_matches_density_chain():
    sc = Scenario.from_preset("two_emitters", tau=0.1, t_final=0.5, chi_max=10**6, observables=("population",))
    _, states, lost = pure_collision(sc, chi_max=10**6)
    rec = run(sc)
    s1, _ = two_emitter_operators()
    pops = np.real(np.einsum("ij,tji->t", s1.conj().T @ s1, states))
    assert lost < 1e-12
    assert np.max(np.abs(pops - rec.series["population_1"])) <= 1e-10


def test_pure_collision_feedback_matches_delay_trend():
    sc = Scenario.from_preset("feedback_tls", t_final=3.0)
    _, states, _ = pure_collision(sc)
    rec = run(sc)
    assert np.max(np.abs(states[:, 1, 1].real - rec.series["population"])) <= 1e-10


def test_pure_collision_refuses_dissipation():
    with pytest.raises(OracleError):
        pure_collision(Scenario.from_preset("feedback_tls", gamma_phi=0.1))
    with pytest.raises(OracleError):
        pure_collision(Scenario.from_preset("custom"))
