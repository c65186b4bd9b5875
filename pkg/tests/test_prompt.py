import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmicl import channel as ch
from ssmicl import prompt as pr
from ssmicl.harness import codebook_for, simulate_block


def block(seed=0, g=None, K=4):
    rng = np.random.default_rng(seed)
    task = ch.sample_task(ch.sample_deployment(rng, 4, K), 24.0, rng, group_size=g)
    x, Yq, yq = simulate_block(task, codebook_for(8), rng)
    return task, x, Yq, yq


def test_registry():
    assert pr.constellation_index("BPSK") == 0
    assert pr.constellation_index("64-QAM") == 4 == len(ch.CONSTELLATION_NAMES) - 1
    for i in range(5):
        assert pr.constellation_index(pr.constellation_name(i)) == i
    with pytest.raises(pr.PromptError):
        pr.constellation_index("256-QAM")
    with pytest.raises(pr.PromptError):
        pr.constellation_name(5)


def test_context_contents():
    task, _, Yq, _ = block(1, g=2)
    sharers = [k for k in range(4) if task.sharing_set(k)]
    assert len(sharers) == 2
    ctx = pr.build_context(task, Yq, sharers[0])
    assert len(ctx.contaminators) == 1 and ctx.n_examples == 8
    assert np.array_equal(ctx.contaminators[0], task.large_scale[:, sharers[1]])
    assert np.array_equal(ctx.pilots[3], Yq[:, :, 3].reshape(-1))
    with pytest.raises(pr.PromptError):
        pr.build_context(task, Yq, 4)


def test_uncontaminated_length():
    task, _, Yq, yq = block(2, g=1)
    tok = pr.tokenize(pr.build_prompt(task, Yq, yq, 0))
    assert tok.shape == (10, 18)


def test_all_share_length_and_width():
    task, _, Yq, yq = block(3, g=4)
    for k in range(4):
        tok = pr.tokenize(pr.build_prompt(task, Yq, yq, k))
        assert tok.shape == (13, 18) == (13, pr.token_width(4, 2))


def test_token_layout():
    task, _, Yq, yq = block(4, g=3)
    k = next(k for k in range(4) if task.sharing_set(k))
    lsf = pr.LsfScaler(-10.0, 2.0)
    p = pr.build_prompt(task, Yq, yq, k, normalize=False)
    tok = pr.tokenize(p, lsf)
    M = 4
    assert np.allclose(tok[0, :M], (np.log10(task.large_scale[:, k]) + 10) / 2)
    assert np.all(tok[0, M:] == 0)
    for row, j in zip(tok[1:3], task.sharing_set(k)):
        assert np.allclose(row[:M], lsf(task.large_scale[:, j]))
    pilots = tok[3:11]
    Y = Yq.reshape(8, 8)  # (M*N, T_P)
    assert np.array_equal(pilots[:, :8], Y.real.T) and np.array_equal(pilots[:, 8:16], Y.imag.T)
    assert np.array_equal(pilots[:, 16], task.pilot(k)) and np.all(pilots[:, 17] == 0)
    assert pilots[0, 16] == 1.0  # first Walsh-Hadamard entry is +1
    q = tok[-1]
    assert np.array_equal(q[:8], yq.reshape(-1).real) and np.array_equal(q[8:16], yq.reshape(-1).imag)
    assert q[16] == pr.constellation_index(task.constellations[k]) and q[17] == 0


def test_normalization_scale_invariance():
    task, _, Yq, yq = block(5)
    a = pr.tokenize(pr.build_prompt(task, Yq, yq, 1))
    b = pr.tokenize(pr.build_prompt(task, 1e3 * Yq, 1e3 * yq, 1))
    assert np.allclose(a, b, rtol=1e-12)
    rows = a[-9:-1, :16]
    assert np.sqrt(np.mean(rows ** 2) * 2) == pytest.approx(1.0, rel=1e-9)


def test_contaminator_order_canonical():
    task, _, Yq, yq = block(6, g=4)
    p = pr.build_prompt(task, Yq, yq, 2)
    shuffled = pr.Prompt(pr.Context(p.context.r_k, p.context.contaminators[::-1], p.context.pilots,
                                    p.context.pilot_symbols), p.query, p.constellation_index)
    canonical = pr.build_prompt(task, Yq, yq, 2)
    assert np.array_equal(pr.tokenize(canonical), pr.tokenize(p))
    assert not np.array_equal(pr.tokenize(shuffled), pr.tokenize(p))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3), st.integers(0, 17), st.floats(0.01, 1.0))
def test_tokenize_injective(seed, k, col, eps):
    task, _, Yq, yq = block(seed % 50)
    p = pr.build_prompt(task, Yq, yq, k, normalize=False)
    q2 = p.query.copy()
    if col < 8:
        q2[col] += eps
    elif col < 16:
        q2[col - 8] += 1j * eps
    else:
        p2 = pr.Prompt(p.context, p.query, (p.constellation_index + 1) % 5)
        assert not np.array_equal(pr.tokenize(p), pr.tokenize(p2))
        return
    p2 = pr.Prompt(p.context, q2, p.constellation_index)
    assert not np.array_equal(pr.tokenize(p), pr.tokenize(p2))


def test_lsf_scaler_fit():
    g = 10.0 ** np.random.default_rng(0).normal(-9, 2, 1000)
    s = pr.LsfScaler.fit(g)
    z = s(g)
    assert abs(z.mean()) < 1e-12 and z.std() == pytest.approx(1.0)
