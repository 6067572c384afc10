import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wqed.chain import (SYSTEM, ChainError, DmChain, PulseEnvelope, canonicalize, check_canonical,
                        check_density_matrix, load_chain, matrix_to_per_site, move_oc, move_site,
                        one_photon_chain, one_photon_dm_sites, one_photon_ket_sites, per_site_to_matrix,
                        pure_to_dm_site, renormalize, save_chain, swap_adjacent, two_photon_chain,
                        two_photon_ket_sites, vacuum_chain)
from wqed.evolve import initial_system_dm
from wqed.observables import expect_site
from wqed.tensor import ShapeError

EXCITED = np.diag([0.0, 1.0]).astype(complex)


def dense_matrix(chain):
    return per_site_to_matrix(chain.to_dense(), [chain.dims[i] for i in chain.label_order()])


def dense_from_kets(ket_sites):
    psi = ket_sites[0]
    for s in ket_sites[1:]:
        psi = np.tensordot(psi, s, axes=([-1], [0]))
    return psi.reshape(-1)


def random_chain(seed, n=4, chi=3, d=2):
    """Random positive chain: a density chain built from a random ket chain."""
    rng = np.random.default_rng(seed)
    bonds = [1] + [chi] * (n - 1) + [1]
    kets = [rng.normal(size=(bonds[i], d, bonds[i + 1])) + 1j * rng.normal(size=(bonds[i], d, bonds[i + 1]))
            for i in range(n)]
    labels = [SYSTEM] + list(range(n - 1))
    chain = DmChain([pure_to_dm_site(a) for a in kets], [d] * n, labels, oc=0)
    canonicalize(chain, 0)
    return renormalize(chain)


# -- construction ------------------------------------------------------------------------

def test_vacuum_chain_excited():
    c = vacuum_chain(10, 2, EXCITED)
    assert abs(c.trace() - 1) < 1e-14 and c.max_bond == 1 and len(c) == 11
    assert np.array_equal(c.sites[1].ravel(), [1, 0, 0, 0])


def test_vacuum_chain_mixed_two_emitter_state():
    rho = initial_system_dm("mixed")
    assert np.allclose(rho, 0.5 * (np.diag([0, 1, 0, 0]) + np.diag([0, 0, 1, 0])))
    c = vacuum_chain(3, 4, rho, system_pos=1)
    assert c.system_pos == 1 and c.labels == [0, SYSTEM, 1, 2]
    assert np.allclose(c.sites[1].reshape(4, 4), rho)


def test_vacuum_chain_subradiant_rank_one():
    rho = initial_system_dm("subradiant")
    assert np.linalg.matrix_rank(rho) == 1
    psi = np.array([0, 1, -1, 0]) / np.sqrt(2)
    assert np.allclose(rho, np.outer(psi, psi))
    assert abs(vacuum_chain(2, 4, rho).trace() - 1) < 1e-14


@pytest.mark.parametrize("rho", [np.diag([0.5, 0.6]), np.diag([1.2, -0.2]), np.array([[1, 1], [0, 0]])])
def test_vacuum_chain_rejects_invalid_density_matrix(rho):
    with pytest.raises(ValueError):
        vacuum_chain(2, 2, rho.astype(complex))


def test_envelope_normalization():
    env = PulseEnvelope.tophat(2.0, 0.1)
    assert len(env) == 20 and 0.1 * np.sum(env.samples**2) == pytest.approx(1, abs=1e-12)
    with pytest.raises(ValueError):
        PulseEnvelope(np.ones(3), 0.1)
    with pytest.raises(ValueError):
        PulseEnvelope.tophat(0.25, 0.1)


def test_one_photon_routes_agree():
    env = PulseEnvelope(np.array([1.0, 2.0, 0.5, 1.5]) / np.sqrt(0.2 * 7.5), 0.2)
    for a, b in zip(one_photon_dm_sites(env, route="ket"), one_photon_dm_sites(env, route="blocks")):
        assert np.max(np.abs(a - b)) <= 1e-12
    with pytest.raises(ValueError):
        one_photon_dm_sites(env, route="nope")


def test_one_photon_block_value():
    env = PulseEnvelope(np.array([1.0, 2.0, 0.5, 1.5]) / np.sqrt(0.2 * 7.5), 0.2)
    amp = env.amplitudes[1]
    w = one_photon_dm_sites(env, route="blocks")[1].reshape(2, 2, 2, 2, 2, 2)
    # bond pair (0, 0) -> (1, 0): the ket places its photon here, the bra has not yet
    assert np.allclose(w[0, 0, :, :, 1, 0], [[0, 0], [amp, 0]])


def test_one_photon_chain_photon_numbers():
    env = PulseEnvelope(np.array([1.0, 2.0, 0.5]) / np.sqrt(0.1 * 5.25), 0.1)
    c = one_photon_chain(env, np.diag([1.0, 0]).astype(complex), n_bins=5)
    assert abs(c.trace() - 1) < 1e-12
    num = np.diag([0.0, 1.0])
    for k in range(5):
        expect = 0.1 * env.samples[k] ** 2 if k < 3 else 0.0
        assert expect_site(c, c.position_of(k), num).real == pytest.approx(expect, abs=1e-12)
    # against a dense construction of the one-photon ket
    psi = dense_from_kets(one_photon_ket_sites(env))
    rho_bins = np.outer(psi, psi.conj())
    rho = np.kron(np.diag([1.0, 0]), np.kron(rho_bins, np.diag([1.0, 0, 0, 0])))
    assert np.allclose(dense_matrix(c), rho, atol=1e-12)


def test_one_photon_chain_does_not_fit():
    env = PulseEnvelope.tophat(0.5, 0.1)
    with pytest.raises(ChainError):
        one_photon_chain(env, EXCITED, n_bins=4)


def test_two_photon_chain():
    env = PulseEnvelope(np.array([1.0, 2.0, 0.5, 1.5]) / np.sqrt(0.2 * 7.5), 0.2)
    c = two_photon_chain(env, np.diag([1.0, 0]).astype(complex), n_bins=4)
    assert abs(c.trace() - 1) < 1e-12
    assert c.norm == pytest.approx(0.5, abs=1e-12)
    num = np.diag([0.0, 1.0, 2.0])
    total = sum(expect_site(c, c.position_of(k), num).real for k in range(4))
    assert total == pytest.approx(2.0, abs=1e-12)
    assert max(c.bond_dims()) == 9


def test_two_photon_same_bin_amplitude():
    env = PulseEnvelope(np.array([1.0, 2.0, 0.5, 1.5]) / np.sqrt(0.2 * 7.5), 0.2)
    a = two_photon_ket_sites(env)[1]
    amp = env.amplitudes[1]
    assert a[0, 2, 2] == pytest.approx(amp**2 / np.sqrt(2))
    with pytest.raises(ShapeError):
        two_photon_ket_sites(env, d=2)


def test_pure_to_dm_vacuum_and_norm():
    assert np.array_equal(pure_to_dm_site(np.array([1.0, 0]).reshape(1, 2, 1)).ravel(), [1, 0, 0, 0])
    c = random_chain(0)
    assert abs(c.trace() - 1) < 1e-12
    assert all(int(np.sqrt(b)) ** 2 == b for b in c.bond_dims())


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_constructed_chains_are_valid_states(seed):
    c = random_chain(seed, n=4, chi=2)
    m = dense_matrix(c)
    assert np.max(np.abs(m - m.conj().T)) <= 1e-10
    assert np.linalg.eigvalsh(m).min() >= -1e-9


def test_per_site_roundtrip():
    rng = np.random.default_rng(2)
    rho = rng.normal(size=(12, 12))
    assert np.array_equal(per_site_to_matrix(matrix_to_per_site(rho, [2, 3, 2]), [2, 3, 2]), rho)
    with pytest.raises(ValueError):
        check_density_matrix(np.eye(2))


# -- canonical form, swaps and moves --------------------------------------------------------

def test_canonicalize_and_move_oc():
    c = random_chain(5, n=5)
    assert check_canonical(c)
    move_oc(c, 3)
    assert c.oc == 3 and check_canonical(c)


def test_swap_twice_restores():
    c = random_chain(1, n=5)
    before = c.to_dense(by_label=False)
    move_oc(c, 2)
    swap_adjacent(c, 2, 10**6)
    assert c.labels[2] == 2 and c.labels[3] == 1
    swap_adjacent(c, 2, 10**6, oc_to="left")
    after = c.to_dense(by_label=False)
    assert np.max(np.abs(after - before)) <= 10 * np.finfo(float).eps * 16 * np.max(np.abs(before))


def test_swap_product_chain_keeps_chi_one():
    c = vacuum_chain(4, 2, EXCITED)
    swap_adjacent(c, 0, 8)
    assert c.max_bond == 1 and c.labels[:2] == [0, SYSTEM]


def test_swap_entangled_preserves_state_and_trace():
    c = random_chain(9, n=5)
    ref = c.to_dense()
    move_oc(c, 1)
    swap_adjacent(c, 1, 10**6)
    assert abs(c.trace() - 1) <= 1e-10
    assert np.allclose(c.to_dense(), ref, atol=1e-12)


def test_swap_requires_adjacent_oc():
    c = random_chain(3)
    with pytest.raises(ChainError):
        swap_adjacent(c, 2, 4)
    with pytest.raises(ChainError):
        swap_adjacent(c, 5, 4)


def test_move_site_identity_unit_and_roundtrip():
    c = random_chain(4, n=5)
    ref = c.to_dense()
    labels = list(c.labels)
    move_site(c, 2, 2, 10**6)
    assert c.labels == labels
    move_site(c, 4, 3, 10**6)
    assert c.labels[3] == labels[4]
    move_site(c, 3, 4, 10**6)
    assert c.labels == labels
    move_site(c, 4, 1, 10**6)
    assert c.labels[1] == labels[4] and c.oc == 1
    assert np.allclose(c.to_dense(), ref, atol=1e-12)
    move_site(c, 1, 4, 10**6)
    assert c.labels == labels
    assert np.allclose(c.to_dense(), ref, atol=1e-12)
    with pytest.raises(ChainError):
        move_site(c, 0, 7, 4)


def test_renormalize():
    c = vacuum_chain(2, 2, EXCITED)
    renormalize(c)
    assert abs(c.trace() - 1) < 1e-15 and c.trace_log[-1] == 1
    c.set_site(c.oc, 2 * c.sites[c.oc])
    renormalize(c)
    assert abs(c.trace() - 1) < 1e-15 and c.trace_log[-1] == pytest.approx(2)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_truncating_swap_trace_bounded_by_discarded(seed):
    c = random_chain(seed, n=5, chi=4)
    move_oc(c, 1)
    w = swap_adjacent(c, 1, 2)
    assert abs(c.trace() - 1) <= w + 1e-10


def test_checkpoint_roundtrip(tmp_path):
    c = random_chain(6)
    c.discarded = 0.125
    path = tmp_path / "chain.npz"
    save_chain(path, c)
    back = load_chain(path)
    assert back.labels == c.labels and back.dims == c.dims and back.oc == c.oc
    assert back.discarded == c.discarded
    for a, b in zip(back.sites, c.sites):
        assert np.array_equal(a, b)


def test_validate_catches_bad_bond():
    c = random_chain(7)
    c.sites[1] = c.sites[1][:1]
    with pytest.raises(ShapeError):
        c.validate()
