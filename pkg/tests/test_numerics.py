import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ssmicl import numerics as nx
from ssmicl.numerics import Parameter, Tape


def grad_of(fn, *values):
    ps = [Parameter(np.asarray(v, float), f"p{i}") for i, v in enumerate(values)]
    with Tape() as tape:
        out = fn(*ps)
    tape.backward(out)
    return [p.grad for p in ps]


def test_matmul_shapes():
    out = nx.matmul(np.ones((2, 3)), np.ones((3, 1)))
    assert out.shape == (2, 1)
    with pytest.raises(nx.ShapeError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 1)))


def test_softplus_at_zero():
    assert nx.softplus(0.0).item() == pytest.approx(np.log(2.0), abs=1e-12)
    (g,) = grad_of(nx.softplus, 0.0)
    assert g == pytest.approx(0.5)


def test_lower_solve_identity():
    v = np.array([1.0, -2.0, 3.5])
    assert np.array_equal(nx.solve_lower(np.eye(3), v).data, v)


def test_square_gradient():
    (g,) = grad_of(lambda x: x * x, 3.0)
    assert g == 6.0


def test_nonfinite_names_operation():
    with pytest.raises(nx.NumericError, match="log"):
        nx.log(np.array([-1.0]))


def test_backward_usage_errors():
    x = Parameter(np.ones(2))
    y = x * 2.0  # computed outside any tape
    with Tape() as tape:
        z = x * x
    with pytest.raises(nx.UsageError):
        tape.backward(y)
    with pytest.raises(nx.ShapeError):
        tape.backward(z, seed=np.ones(3))


def test_gradients_accumulate_until_zeroed():
    x = Parameter(np.array([1.5]))
    for _ in range(2):
        with Tape() as tape:
            y = nx.sum_(x * x)
        tape.backward(y)
    assert x.grad[0] == pytest.approx(6.0)
    x.zero_grad()
    assert x.grad[0] == 0.0


def test_backward_linear_in_seed():
    rng = np.random.default_rng(0)
    W = Parameter(rng.normal(size=(3, 4)))
    x = rng.normal(size=(5, 3))
    seed = rng.normal(size=(5, 4))
    grads = []
    for s in (seed, 2 * seed):
        W.zero_grad()
        with Tape() as tape:
            out = nx.tanh(nx.matmul(x, W))
        tape.backward(out, seed=s)
        grads.append(W.grad.copy())
    assert np.array_equal(grads[1], 2 * grads[0])


def test_forward_deterministic():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
    f = lambda: nx.softmax(nx.gelu(nx.matmul(a, b))).data
    assert np.array_equal(f(), f())


def test_fd_quadratic_and_empty():
    A = np.diag([1.0, 2.0, 3.0])
    x = Parameter(np.array([0.3, -0.7, 1.1]))
    assert nx.finite_difference_check(lambda: nx.sum_(x * nx.matmul(A, x)), [x]) < 1e-8
    assert nx.finite_difference_check(lambda: nx.as_tensor(1.0), []) == 0.0


def test_fd_three_layer_composition():
    rng = np.random.default_rng(2)
    W1 = Parameter(rng.uniform(-1, 1, (4, 5)))
    W2 = Parameter(rng.uniform(-1, 1, (5, 3)))
    b = Parameter(rng.uniform(-1, 1, 3))
    x = rng.uniform(-1, 1, (6, 4))

    def loss():
        h = nx.sigmoid(nx.matmul(x, W1))
        h = nx.layer_norm(nx.softplus(nx.matmul(h, W2) + b))
        return nx.mean(nx.exp(nx.tanh(h)) * h)

    assert nx.finite_difference_check(loss, [W1, W2, b]) < 1e-4


UNARY = {
    "exp": nx.exp, "tanh": nx.tanh, "sigmoid": nx.sigmoid, "softplus": nx.softplus,
    "gelu": nx.gelu, "sqrt": lambda t: nx.sqrt(t + 2.0), "log": lambda t: nx.log(t + 2.0),
    "neg": nx.neg, "layer_norm": nx.layer_norm, "softmax": nx.softmax,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    rng = np.random.default_rng(3)
    p = Parameter(rng.uniform(-1, 1, (3, 4)))
    w = rng.uniform(-1, 1, (3, 4))
    assert nx.finite_difference_check(lambda: nx.sum_(UNARY[name](p) * w), [p]) < 1e-4


BINARY = {"add": nx.add, "sub": nx.sub, "mul": nx.mul, "div": lambda a, b: nx.div(a, b + 3.0),
          "matmul": lambda a, b: nx.matmul(a, nx.swapaxes(b, 0, 1))}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name):
    rng = np.random.default_rng(4)
    a = Parameter(rng.uniform(-1, 1, (3, 4)))
    b = Parameter(rng.uniform(-1, 1, (3, 4)) if name != "add" else rng.uniform(-1, 1, 4))
    loss = lambda: nx.sum_(nx.tanh(BINARY[name](a, b)))
    assert nx.finite_difference_check(loss, [a, b]) < 1e-4


def test_shape_op_gradients():
    rng = np.random.default_rng(5)
    a = Parameter(rng.uniform(-1, 1, (2, 3, 4)))
    b = Parameter(rng.uniform(-1, 1, (2, 3, 4)))
    w = rng.uniform(-1, 1, (2, 2, 3, 4))

    def loss():
        s = nx.stack([a, nx.reshape(nx.swapaxes(b, 1, 2), (2, 4, 3)).reshape(2, 3, 4)], axis=1)
        c = nx.concat([a[:, :1], nx.expand_dims(b[:, 2], 1)], axis=1)
        return nx.sum_(s * w) + nx.sum_(c * c) + nx.mean(a[:, [0, 2]])

    assert nx.finite_difference_check(loss, [a, b]) < 1e-4


def test_solve_lower_gradient():
    rng = np.random.default_rng(6)
    Lm = Parameter(np.tril(rng.uniform(-1, 1, (4, 4))) + 3 * np.eye(4))
    r = Parameter(rng.uniform(-1, 1, (4, 2)))
    loss = lambda: nx.sum_(nx.tanh(nx.solve_lower(Lm, r)))
    assert nx.finite_difference_check(loss, [r]) < 1e-4


def test_flop_counts():
    with Tape() as tape:
        nx.matmul(np.ones((2, 3)), np.ones((3, 5)))
    assert tape.flops == 2 * 5 * 5
    with Tape() as tape:
        nx.add(np.ones(4), 1.0)
        nx.reshape(np.ones(4), (2, 2))
    assert tape.flops == 4
    assert tape.counts_by_op()["reshape"] == 0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-20, 20)))
def test_softmax_rows_sum_to_one(x):
    out = nx.softmax(x).data
    assert np.allclose(out.sum(-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


def test_tensors_are_read_only():
    t = nx.as_tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 2.0
