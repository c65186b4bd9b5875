import numpy as np
import pytest

from ssmicl import numerics as nx
from ssmicl.accounting import measure_flops
from ssmicl.transformer import (TICLModel, TransformerConfig, attention_forward, attention_mask,
                                block_forward)


def small(seed=0, **kw):
    cfg = dict(n_layers=2, d_model=16, n_heads=2, token_dim=6, max_len=16)
    cfg.update(kw)
    return TICLModel(TransformerConfig(**cfg), seed)


def test_heads_must_divide():
    with pytest.raises(ValueError):
        TransformerConfig(d_model=10, n_heads=3)


def test_single_token_attention_is_value_projection():
    m = small()
    blk = m.blocks[0]
    rng = np.random.default_rng(0)
    X = rng.normal(size=(1, 16))
    out = attention_forward(blk, X).data
    qkv = X @ blk.W_qkv.value.T
    v = qkv[:, 32:]
    assert np.allclose(out, v @ blk.W_o.value.T + blk.b_o.value, atol=1e-14)


def test_attention_weights_rows_and_mask():
    m = small()
    X = np.random.default_rng(1).normal(size=(2, 7, 16))
    _, w = attention_forward(m.blocks[0], X, return_weights=True)
    w = w.data
    assert np.allclose(w.sum(-1), 1.0, atol=1e-12)
    upper = np.triu(np.ones((7, 7), bool), 1)
    assert np.all(w[..., upper] == 0.0)


def test_padding_mask():
    valid = np.array([[False, False, True, True]])
    keep = attention_mask(4, valid)[0, 0]
    assert keep[0].tolist() == [True, False, False, False]
    assert keep[3].tolist() == [False, False, True, True]


def test_zero_weights_zero_output():
    m = small()
    for p in m.parameters():
        p.assign(np.zeros(p.shape))
    assert m.estimate(np.random.default_rng(2).normal(size=(5, 6))) == 0


def test_width_and_length_errors():
    m = small()
    with pytest.raises(nx.ShapeError):
        m.forward(np.ones((3, 5)))
    with pytest.raises(nx.ShapeError):
        m.forward(np.ones((17, 6)))


def test_causality():
    m = small(3)
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 16))
    Y = X.copy()
    Y[4] += 1.0
    a = block_forward(m.blocks[0], X).data
    b = block_forward(m.blocks[0], Y).data
    assert np.array_equal(a[:4], b[:4])
    assert not np.allclose(a[4], b[4])


def test_left_padding_matches_unpadded():
    m = small(4)
    rng = np.random.default_rng(4)
    m.head_W.assign(rng.normal(size=(2, 16)))
    U = rng.normal(size=(5, 6))
    # positions index the padded frame, so compare against the same frame
    padded = np.concatenate([np.zeros((3, 6)), U])
    valid = np.array([False] * 3 + [True] * 5)
    other = np.concatenate([rng.normal(size=(3, 6)), U])
    assert m.estimate(padded, valid) == pytest.approx(m.estimate(other, valid), rel=1e-12)


def test_position_sensitivity_regression():
    m = small(5)
    rng = np.random.default_rng(5)
    m.head_W.assign(rng.normal(size=(2, 16)))
    U = rng.normal(size=(6, 6))
    assert abs(m.estimate(U) - m.estimate(U[[1, 0, 2, 3, 4, 5]])) > 1e-6


def test_gradients():
    rng = np.random.default_rng(6)
    m = small(6, max_len=5)
    for p in m.parameters():
        p.assign(p.value + rng.uniform(-0.3, 0.3, p.shape))
    U = rng.uniform(-1, 1, size=(3, 5, 6))
    y = rng.uniform(-1, 1, size=(3, 2))
    valid = np.ones((3, 5), bool)
    valid[0, :2] = False

    def loss():
        d = m.forward(U, valid) - y
        return nx.mean(nx.sum_(d * d, axis=-1))

    assert nx.finite_difference_check(loss, m.parameters()) < 1e-4


def test_flops_contain_quadratic_term():
    m = TICLModel(TransformerConfig(n_layers=2, d_model=32, n_heads=4, token_dim=18, max_len=128))
    Ls = np.array([8, 16, 32, 64, 128])
    f = np.array([measure_flops(m, L) for L in Ls], float)
    quad, lin, const = np.polyfit(Ls, f, 2)
    assert quad > 0
    assert np.allclose(np.polyval([quad, lin, const], Ls), f, rtol=1e-9)
    assert np.all(np.diff(f, 2) > 0)
