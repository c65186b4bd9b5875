"""Selective state-space sequence model with a fixed HiPPO state matrix.

The time-invariant helpers (``bilinear_discretize``, ``ti_ssm_recurrent``,
``ti_ssm_conv``) are plain numpy; the selective layer and the stacked model
run on :mod:`ssmicl.numerics` tensors so they can be trained.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import solve_triangular

from . import _kernels
from . import numerics as nx
from .numerics import NumericError, Parameter, ShapeError, Tensor


def hippo_matrix(N: int) -> np.ndarray:
    """A[i, j] = -sqrt((2i+1)(2j+1)) below the diagonal, -(i+1) on it, 0 above."""
    if N < 1:
        raise ValueError("N must be >= 1")
    p = np.sqrt(2.0 * np.arange(N) + 1.0)
    A = -np.tril(np.outer(p, p), -1)
    A[np.diag_indices(N)] = -(np.arange(N) + 1.0)
    return A


def bilinear_discretize(A: np.ndarray, b: np.ndarray, delta: float):
    """(A_bar, b_bar) = ((I - d/2 A)^-1 (I + d/2 A), (I - d/2 A)^-1 d b).

    ``A`` must be lower-triangular; both solves are forward substitutions.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    lhs = np.eye(n) - 0.5 * delta * A
    if np.any(np.diag(lhs) == 0.0):
        raise NumericError("singular bilinear system (I - delta/2 A)")
    A_bar = solve_triangular(lhs, np.eye(n) + 0.5 * delta * A, lower=True)
    b_bar = solve_triangular(lhs, delta * np.asarray(b, dtype=float), lower=True)
    return A_bar, b_bar


@dataclass
class TIStateSpace:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("step size must be positive")

    def discrete(self):
        return bilinear_discretize(self.A, self.b, self.delta)


def ti_ssm_recurrent(ssm: TIStateSpace, u) -> np.ndarray:
    A_bar, b_bar = ssm.discrete()
    h = np.zeros(len(b_bar))
    out = np.empty(len(u))
    for t, ut in enumerate(u):
        h = A_bar @ h + b_bar * ut
        out[t] = ssm.c @ h
    return out


def ssm_kernel(ssm: TIStateSpace, L: int) -> np.ndarray:
    """K[t] = c A_bar^t b_bar for t = 0..L-1."""
    A_bar, b_bar = ssm.discrete()
    K = np.empty(L)
    v = b_bar.copy()
    for t in range(L):
        K[t] = ssm.c @ v
        v = A_bar @ v
    return K


def ti_ssm_conv(ssm: TIStateSpace, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    K = ssm_kernel(ssm, len(u))
    return np.convolve(u, K)[: len(u)]


# ------------------------------------------------------- differentiable solves

def dense_shift_solve(A: np.ndarray, s, rhs) -> Tensor:
    """x = (I - s A)^-1 rhs for any lower-triangular A by forward substitution.

    Cost: N^2 + 4N FLOPs per system.
    """
    s, rhs = nx.as_tensor(s), nx.as_tensor(rhs)
    if s.shape != rhs.shape[:-1]:
        raise ShapeError(f"dense_shift_solve: shift {s.shape} vs rhs {rhs.shape}")
    N = rhs.shape[-1]
    A = np.ascontiguousarray(A, dtype=float)
    sf = np.ascontiguousarray(s.data.reshape(-1))
    rf = np.ascontiguousarray(rhs.data.reshape(-1, N))
    x = _kernels.dense_solve_fwd(A, sf, rf)

    def backward(g):
        _, gr, gs = _kernels.dense_solve_bwd(A, sf, x, np.ascontiguousarray(g.reshape(-1, N)))
        return gs.reshape(s.shape), gr.reshape(rhs.shape)

    n_sys = rhs.size // N
    return nx.record_op("dense_shift_solve", x.reshape(rhs.shape), (s, rhs), backward,
                        n_sys * (N * N + 4 * N))


def selective_scan(U, delta, Bp, Cp) -> Tensor:
    """Fused selective recurrence of one layer for the HiPPO matrix.

    U, delta: (..., L, D); Bp, Cp: (..., L, N) per-token b_l and c_l.
    Returns O (..., L, D) with o_{l,d} = c_l . h_{l,d} and
    h_{l,d} = A_bar(delta_{l,d}) h_{l-1,d} + b_bar(delta_{l,d}, b_l) u_{l,d}, h_0 = 0.

    Cost per sequence and channel: 2L + 9N + 12N(L-1) for the updates plus
    L(2N-1) for the readout.
    """
    U, delta, Bp, Cp = (nx.as_tensor(t) for t in (U, delta, Bp, Cp))
    *lead, L, D = U.shape
    N = Bp.shape[-1]
    if delta.shape != U.shape or Bp.shape != (*lead, L, N) or Cp.shape != Bp.shape:
        raise ShapeError(f"selective_scan: U {U.shape}, delta {delta.shape}, "
                         f"B {Bp.shape}, C {Cp.shape}")
    u3 = np.ascontiguousarray(U.data.reshape(-1, L, D))
    d3 = np.ascontiguousarray(delta.data.reshape(-1, L, D))
    b3 = np.ascontiguousarray(Bp.data.reshape(-1, L, N))
    c3 = np.ascontiguousarray(Cp.data.reshape(-1, L, N))
    O, H = _kernels.scan_fwd(u3, d3, b3, c3)

    def backward(g):
        gU, gd, gB, gC = _kernels.scan_bwd(np.ascontiguousarray(g.reshape(-1, L, D)),
                                           u3, d3, b3, c3, H)
        return (gU.reshape(U.shape), gd.reshape(U.shape), gB.reshape(Bp.shape),
                gC.reshape(Cp.shape))

    n_seq = u3.shape[0]
    flops = n_seq * D * (2 * L + 9 * N + 12 * N * (L - 1) + L * (2 * N - 1))
    return nx.record_op("selective_scan", O.reshape(U.shape), (U, delta, Bp, Cp), backward, flops)


# --------------------------------------------------------------- the model

@dataclass
class SSMConfig:
    n_layers: int = 2
    state_dim: int = 32
    token_dim: int = 18
    residual: bool = False
    layer_norm: bool = False
    solver: str = "structured"  # or "dense"

    def __post_init__(self):
        if self.solver not in ("structured", "dense"):
            raise ValueError(f"unknown solver {self.solver!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class SelectiveLayer:
    """One selective SSM layer: D parallel scalar SSMs sharing b_l, c_l."""

    def __init__(self, state_dim: int, token_dim: int, rng: np.random.Generator, name: str = "layer"):
        N, D = state_dim, token_dim
        self.A = hippo_matrix(N)
        self.W_B = Parameter(rng.normal(0.0, 1.0 / np.sqrt(D), (N, D)), f"{name}.W_B")
        self.W_C = Parameter(rng.normal(0.0, 1.0 / np.sqrt(D), (N, D)), f"{name}.W_C")
        self.w_delta = Parameter(np.zeros(D), f"{name}.w_delta")
        # softplus(eps) log-uniform in [1e-3, 1e-1]
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), D))
        self.eps = Parameter(dt + np.log(-np.expm1(-dt)), f"{name}.eps")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def token_dim(self) -> int:
        return self.eps.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.W_B, self.W_C, self.w_delta, self.eps]


def _step_sizes(layer: SelectiveLayer, U: Tensor) -> Tensor:
    """delta_l = softplus(w_delta . u_l + eps), shape (..., L, D)."""
    try:
        z = nx.matmul(U, layer.w_delta)
        delta = nx.softplus(nx.expand_dims(z, -1) + layer.eps)
    except NumericError:
        with np.errstate(all="ignore"):
            pre = (U.data @ layer.w_delta.data)[..., None] + layer.eps.data
            bad = ~np.isfinite(np.logaddexp(0.0, pre))
        tok = int(np.argwhere(bad)[0][-2]) if bad.any() else -1
        raise NumericError(f"non-finite step size at token {tok}") from None
    nonpos = delta.data <= 0
    if nonpos.any():
        tok = int(np.argwhere(nonpos)[0][-2])
        raise NumericError(f"step size underflowed to zero at token {tok}")
    return delta


def selective_layer_forward(layer: SelectiveLayer, U, solver: str = "structured") -> Tensor:
    """Run the layer over tokens ``U`` of shape (..., L, D); returns (..., L, D).

    Per token l and channel d the state update is
    h_l = (I - s A)^-1 (2 h_{l-1} + delta b_l u) - h_{l-1},  s = delta/2,
    which equals A_bar h_{l-1} + b_bar u because
    (I - sA)^-1 (I + sA) = 2 (I - sA)^-1 - I.  For l = 1, h_1 = b_bar u.
    """
    U = nx.as_tensor(U)
    if U.shape[-1] != layer.token_dim:
        raise ShapeError(f"token width {U.shape[-1]} != layer width {layer.token_dim}")
    L = U.shape[-2]
    delta = _step_sizes(layer, U)  # (..., L, D)
    Bp = nx.matmul(U, layer.W_B.T)  # (..., L, N)
    Cp = nx.matmul(U, layer.W_C.T)
    if solver == "structured":
        return selective_scan(U, delta, Bp, Cp)
    half = delta * 0.5
    h = None
    outs = []
    for l in range(L):
        v = delta[..., l, :] * U[..., l, :]  # (..., D)
        drive = nx.expand_dims(v, -1) * nx.expand_dims(Bp[..., l, :], -2)  # (..., D, N)
        if h is None:
            h = dense_shift_solve(layer.A, half[..., l, :], drive)
        else:
            h = dense_shift_solve(layer.A, half[..., l, :], h * 2.0 + drive) - h
        outs.append(nx.matmul(h, nx.expand_dims(Cp[..., l, :], -1)))  # (..., D, 1)
    return nx.reshape(nx.stack(outs, axis=-3), U.shape)


class SSMICLModel:
    def __init__(self, config: SSMConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.layers = [SelectiveLayer(config.state_dim, config.token_dim, rng, f"layer{i}")
                       for i in range(config.n_layers)]
        self.head_W = Parameter(np.zeros((2, config.token_dim)), "head.W")
        self.head_b = Parameter(np.zeros(2), "head.b")

    def parameters(self) -> list[Parameter]:
        ps = [p for layer in self.layers for p in layer.parameters()]
        return ps + [self.head_W, self.head_b]

    def forward(self, tokens, valid=None) -> Tensor:
        """tokens (..., L, D) -> (..., 2) = (Re x_hat, Im x_hat) read from the last token.

        ``valid`` is accepted for interface parity and ignored: zero tokens
        before the prompt leave the zero initial state untouched.
        """
        X = nx.as_tensor(tokens)
        if X.shape[-1] != self.config.token_dim:
            raise ShapeError(f"token width {X.shape[-1]} != model width {self.config.token_dim}")
        for layer in self.layers:
            inp = nx.layer_norm(X) if self.config.layer_norm else X
            out = selective_layer_forward(layer, inp, self.config.solver)
            X = X + out if self.config.residual else out
        last = X[..., -1, :]
        return nx.matmul(last, self.head_W.T) + self.head_b

    def estimate(self, tokens, valid=None) -> np.ndarray:
        out = self.forward(tokens).data
        return out[..., 0] + 1j * out[..., 1]
