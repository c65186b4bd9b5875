"""Decoder-only transformer equalizer used as the in-context baseline.

Pre-norm blocks (affine layer norm, bias-free fused QKV multi-head causal
attention, GELU feed-forward), learned absolute position embeddings and a
linear head on the final normalized last token.  Positions index the padded frame, so with
left padding the query always sits at position L_max - 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import Parameter, ShapeError, Tensor


@dataclass
class TransformerConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    mlp_ratio: int = 4
    token_dim: int = 18
    max_len: int = 32

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def _dense(rng, fan_out, fan_in, name, std=None):
    std = 1.0 / np.sqrt(fan_in) if std is None else std
    return (Parameter(rng.normal(0.0, std, (fan_out, fan_in)), f"{name}.W"),
            Parameter(np.zeros(fan_out), f"{name}.b"))


class AffineNorm:
    def __init__(self, d: int, name: str):
        self.gain = Parameter(np.ones(d), f"{name}.gain")
        self.bias = Parameter(np.zeros(d), f"{name}.bias")

    def __call__(self, x):
        return nx.layer_norm(x) * self.gain + self.bias

    def parameters(self):
        return [self.gain, self.bias]


class Block:
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator, name: str):
        d, f = cfg.d_model, cfg.mlp_ratio * cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = AffineNorm(d, f"{name}.ln1")
        # no QKV bias: a key bias shifts every score in a row equally and cancels
        self.W_qkv, _ = _dense(rng, 3 * d, d, f"{name}.qkv")
        # residual-branch outputs start small so the stack begins near identity
        out_std = 1.0 / np.sqrt(d * 2 * cfg.n_layers)
        self.W_o, self.b_o = _dense(rng, d, d, f"{name}.proj", out_std)
        self.ln2 = AffineNorm(d, f"{name}.ln2")
        self.W_1, self.b_1 = _dense(rng, f, d, f"{name}.fc1")
        self.W_2, self.b_2 = _dense(rng, d, f, f"{name}.fc2", 1.0 / np.sqrt(f * 2 * cfg.n_layers))

    def parameters(self):
        return [*self.ln1.parameters(), self.W_qkv, self.W_o, self.b_o,
                *self.ln2.parameters(), self.W_1, self.b_1, self.W_2, self.b_2]


def attention_mask(L: int, valid=None) -> np.ndarray:
    """Boolean (..., 1, L, L) keep-mask: causal, keys restricted to ``valid``.

    ``valid`` (..., L) marks real (non-padding) tokens.  A padding query keeps
    its own diagonal entry so every softmax row has at least one live key.
    """
    causal = np.tril(np.ones((L, L), dtype=bool))
    if valid is None:
        return causal
    valid = np.asarray(valid, dtype=bool)
    keep = causal & valid[..., None, :]
    keep |= np.eye(L, dtype=bool)
    return keep[..., None, :, :]


def attention_forward(block: Block, X, mask=None, return_weights: bool = False):
    """Multi-head causal self-attention on pre-normalized input X (..., L, d)."""
    X = nx.as_tensor(X)
    *lead, L, d = X.shape
    H = block.n_heads
    dh = d // H
    if mask is None:
        mask = attention_mask(L)
    qkv = nx.matmul(X, block.W_qkv.T)  # (..., L, 3d)
    qkv = nx.reshape(qkv, (*lead, L, 3, H, dh))
    q, k, v = (nx.swapaxes(qkv[..., i, :, :], -2, -3) for i in range(3))  # (..., H, L, dh)
    scores = nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    weights = nx.softmax(scores, mask)
    ctx = nx.matmul(weights, v)  # (..., H, L, dh)
    ctx = nx.reshape(nx.swapaxes(ctx, -2, -3), (*lead, L, d))
    out = nx.matmul(ctx, block.W_o.T) + block.b_o
    return (out, weights) if return_weights else out


def block_forward(block: Block, X, mask=None) -> Tensor:
    X = X + attention_forward(block, block.ln1(X), mask)
    hidden = nx.gelu(nx.matmul(block.ln2(X), block.W_1.T) + block.b_1)
    return X + (nx.matmul(hidden, block.W_2.T) + block.b_2)


class TICLModel:
    def __init__(self, config: TransformerConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.W_in, self.b_in = _dense(rng, d, config.token_dim, "embed")
        self.pos = Parameter(rng.normal(0.0, 0.02, (config.max_len, d)), "embed.pos")
        self.blocks = [Block(config, rng, f"block{i}") for i in range(config.n_layers)]
        self.ln_f = AffineNorm(d, "ln_f")
        self.head_W = Parameter(np.zeros((2, d)), "head.W")
        self.head_b = Parameter(np.zeros(2), "head.b")

    def parameters(self) -> list[Parameter]:
        ps = [self.W_in, self.b_in, self.pos]
        for blk in self.blocks:
            ps += blk.parameters()
        return ps + [*self.ln_f.parameters(), self.head_W, self.head_b]

    def forward(self, tokens, valid=None) -> Tensor:
        """tokens (..., L, D) -> (..., 2); ``valid`` (..., L) masks left padding."""
        X = nx.as_tensor(tokens)
        *_, L, D = X.shape
        if D != self.config.token_dim:
            raise ShapeError(f"token width {D} != model width {self.config.token_dim}")
        if L > self.config.max_len:
            raise ShapeError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        mask = attention_mask(L, valid)
        X = nx.matmul(X, self.W_in.T) + self.b_in + self.pos[:L]
        for blk in self.blocks:
            X = block_forward(blk, X, mask)
        last = self.ln_f(X[..., -1, :])
        return nx.matmul(last, self.head_W.T) + self.head_b

    def estimate(self, tokens, valid=None) -> np.ndarray:
        out = self.forward(tokens, valid).data
        return out[..., 0] + 1j * out[..., 1]


ticl_forward = TICLModel.estimate
