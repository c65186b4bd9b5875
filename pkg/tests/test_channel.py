import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmicl import channel as ch
from ssmicl.channel import CONSTELLATIONS, ScenarioError


def make_task(seed=0, K=4, group_size=None, snr_db=24.0, **kw):
    rng = np.random.default_rng(seed)
    dep = ch.sample_deployment(rng, 4, K)
    return ch.sample_task(dep, snr_db, rng, group_size=group_size, **kw), rng


def test_ap_grid_quarter_points():
    dep = ch.sample_deployment(1, 4, 4, 1000.0)
    assert sorted(map(tuple, dep.ap_positions)) == [(250, 250), (250, 750), (750, 250), (750, 750)]


def test_deployment_deterministic_and_bounded():
    a, b = ch.sample_deployment(7, 4, 4), ch.sample_deployment(7, 4, 4)
    assert np.array_equal(a.ue_positions, b.ue_positions)
    one = ch.sample_deployment(3, 4, 1)
    assert one.ue_positions.shape == (1, 2)
    assert np.all((one.ue_positions >= 0) & (one.ue_positions <= 1000))
    with pytest.raises(ScenarioError):
        ch.sample_deployment(0, 0, 2)


def test_pathloss_values():
    assert ch.pathloss_db(1.0) == pytest.approx(-30.5)
    assert ch.pathloss_db(100.0) == pytest.approx(-103.9)
    assert ch.pathloss_db(10.0) - ch.pathloss_db(100.0) == pytest.approx(36.7)
    assert ch.pathloss_db(0.2) == ch.pathloss_db(1.0)


def test_correlation_isotropic_limit():
    assert np.array_equal(ch.correlation_matrix((0, 0), (1, 1), 3, np.inf, 1.0), np.eye(3))


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1000), st.floats(0, 1000), st.integers(1, 6), st.floats(1, 60),
       st.floats(1e-12, 1.0))
def test_correlation_properties(x, y, n, spread, beta):
    R = ch.correlation_matrix((500.0, 500.0), (x, y), n, spread, beta)
    assert np.allclose(R, R.conj().T, atol=1e-12 * beta)
    assert np.linalg.eigvalsh(R).min() >= -1e-10 * beta
    assert np.real(np.trace(R)) / n == pytest.approx(beta, rel=1e-12)


def test_correlation_two_antennas_15deg():
    R = ch.correlation_matrix((0.0, 0.0), (100.0, 0.0), 2, 15.0, 1.0)
    assert 0.0 < abs(R[0, 1]) < 1.0


def test_constellations_unit_power():
    for pts in CONSTELLATIONS.values():
        assert np.mean(np.abs(pts) ** 2) == pytest.approx(1.0, abs=1e-12)
    assert set(CONSTELLATIONS["BPSK"]) == {1, -1}
    qam4 = {(round(p.real * np.sqrt(2)), round(p.imag * np.sqrt(2))) for p in CONSTELLATIONS["4-QAM"]}
    assert qam4 == {(1, 1), (1, -1), (-1, 1), (-1, -1)}
    q16 = CONSTELLATIONS["16-QAM"] * np.sqrt(10)
    assert np.allclose(np.sort(np.unique(np.round(q16.real))), [-3, -1, 1, 3])


def test_walsh_hadamard_orthogonal():
    X = ch.walsh_hadamard(8)
    assert np.array_equal(X @ X.T, 8 * np.eye(8))


@pytest.mark.parametrize("g", [1, 2, 3, 4])
def test_sharing_sets(g):
    task, _ = make_task(1, group_size=g)
    sizes = [len(task.sharing_set(k)) for k in range(4)]
    assert sorted(sizes) == sorted([g - 1] * g + [0] * (4 - g))
    for k in range(4):
        for j in task.sharing_set(k):
            assert k in task.sharing_set(j)


def test_sample_task_invariants():
    task, _ = make_task(2)
    assert task.noise_var > 0
    assert task.R.shape == (4, 4, 2, 2)
    assert 2 <= max(len(task.sharing_set(k)) for k in range(4)) + 1 <= 4
    assert np.allclose(task.large_scale, np.real(np.trace(task.R, axis1=2, axis2=3)) / 2)
    with pytest.raises(ScenarioError):
        make_task(0, K=4, group_size=1, n_pilots=2)


def test_sample_task_reproducible():
    a, _ = make_task(5)
    b, _ = make_task(5)
    assert a.constellations == b.constellations
    assert np.array_equal(a.R, b.R) and np.array_equal(a.pilot_assignment, b.pilot_assignment)


def test_group_size_distribution():
    sizes = [max(len(make_task(s)[0].sharing_set(k)) for k in range(4)) + 1 for s in range(300)]
    counts = np.bincount(sizes, minlength=5)[2:]
    assert np.all(counts > 70)


def test_snr_convention():
    task, _ = make_task(3, snr_db=24.0)
    assert task.noise_var == pytest.approx(np.median(task.large_scale) / 10 ** 2.4)


def test_channel_second_moments():
    task, rng = make_task(4)
    n = 100_000
    w = (rng.standard_normal((n, 2)) + 1j * rng.standard_normal((n, 2))) / np.sqrt(2)
    S = task.sqrt_R()[1, 2]
    h = w @ S.T
    emp = h.T @ h.conj() / n
    R = task.R[1, 2]
    assert np.all(np.abs(emp - R) <= 0.05 * np.abs(R[0, 0]))
    H = ch.sample_channels(task, rng)
    assert H.shape == (4, 4, 2)


def test_pilots_noise_free_single_ue():
    task, rng = make_task(6, K=1, group_size=1)
    task.noise_var = 0.0
    task.pilot_book = np.ones((8, 8))
    H = ch.sample_channels(task, rng)
    Y = ch.transmit_pilots(task, H, rng)
    for i in range(8):
        assert np.allclose(Y[:, :, i], H[:, 0, :])


def test_pilot_noise_variance():
    task, rng = make_task(7)
    Y = ch.transmit_pilots(task, np.zeros((4, 4, 2), complex), rng)
    assert Y.shape == (4, 2, 8)
    task.noise_var = 1.0
    big = np.concatenate([ch.transmit_pilots(task, np.zeros((4, 4, 2), complex), rng).ravel()
                          for _ in range(16000)])
    assert np.var(big) == pytest.approx(1.0, rel=0.01)


def test_orthogonal_pilots_despread_exactly():
    task, rng = make_task(8, K=2, group_size=1)
    task.noise_var = 0.0
    H = ch.sample_channels(task, rng)
    Y = ch.transmit_pilots(task, H, rng)
    for k in range(2):
        z = Y @ task.pilot(k) / 8
        assert np.allclose(z, H[:, k, :], atol=1e-14)


def test_transmit_data():
    task, rng = make_task(9, K=1, group_size=1)
    task.noise_var = 0.0
    H = ch.sample_channels(task, rng)
    x = ch.sample_symbols(task, rng)
    assert np.allclose(ch.transmit_data(task, H, x, rng), H[:, 0, :] * x[0])
    with pytest.raises(ScenarioError):
        ch.transmit_data(task, H, np.array([0.3 + 0.1j]), rng)
    task.noise_var = 2.0
    y = ch.transmit_data(task, H, np.zeros(1), rng, check=False)
    assert not np.allclose(y, 0)


def test_received_energy():
    task, rng = make_task(10)
    n = 20_000
    total = 0.0
    for _ in range(n):
        H = ch.sample_channels(task, rng)
        total += np.sum(np.abs(ch.transmit_data(task, H, ch.sample_symbols(task, rng), rng)) ** 2)
    expected = np.real(np.trace(task.R, axis1=2, axis2=3)).sum() + 8 * task.noise_var
    assert total / n == pytest.approx(expected, rel=0.02)


def test_symbols_in_constellation():
    task, rng = make_task(11)
    x = ch.sample_symbols(task, rng)
    for k, c in enumerate(task.constellations):
        assert np.min(np.abs(CONSTELLATIONS[c] - x[k])) < 1e-12


def test_seeded_realizations_bit_exact():
    outs = []
    for _ in range(2):
        task, rng = make_task(12)
        H = ch.sample_channels(task, rng)
        outs.append(ch.transmit_pilots(task, H, rng))
    assert np.array_equal(outs[0], outs[1])


def test_task_json_roundtrip():
    task, _ = make_task(13)
    back = ch.task_from_json(ch.task_to_json(task))
    assert np.array_equal(back.R, task.R)
    assert back.constellations == task.constellations
    assert np.array_equal(back.pilot_assignment, task.pilot_assignment)
    assert back.noise_var == task.noise_var
    assert np.array_equal(back.deployment.ue_positions, task.deployment.ue_positions)
