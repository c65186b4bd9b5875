"""Parameter and FLOP accounting for both sequence models.

``count_flops`` is a closed form derived from the forward pass of one
unpadded prompt of length L; ``measure_flops`` runs that forward pass under a
tape and sums the per-primitive costs.  The two must agree exactly.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .ssm import SSMICLModel
from .transformer import TICLModel


def count_params(model) -> int:
    """Trainable scalars (the fixed HiPPO matrix is not a parameter)."""
    return int(sum(p.size for p in model.parameters()))


def _linear(L, fan_in, fan_out, bias=True):
    return L * fan_out * (2 * fan_in - 1) + (L * fan_out if bias else 0)


def _layer_norm(L, d, affine=False):
    return L * (5 * d + 3) + (2 * L * d if affine else 0)


def ssm_flops(cfg, L: int) -> int:
    N, D = cfg.state_dim, cfg.token_dim
    per_layer = 2 * _linear(L, D, N, bias=False)  # b_l, c_l
    per_layer += _linear(L, D, 1, bias=False) + 2 * L * D  # w_delta.u + eps, softplus
    if cfg.solver == "structured":
        per_layer += D * (2 * L + 9 * N + 12 * N * (L - 1) + L * (2 * N - 1))
    else:
        per_layer += L * D  # delta / 2
        per_layer += L * (D + D * N + D * (N * N + 4 * N) + D * (2 * N - 1))
        per_layer += (L - 1) * 3 * D * N  # 2h, + drive, - h
    if cfg.layer_norm:
        per_layer += _layer_norm(L, D)
    if cfg.residual:
        per_layer += L * D
    return cfg.n_layers * per_layer + _linear(1, D, 2)


def transformer_flops(cfg, L: int) -> int:
    d, H, D = cfg.d_model, cfg.n_heads, cfg.token_dim
    dh, f = cfg.head_dim, cfg.mlp_ratio * cfg.d_model
    attn = _linear(L, d, 3 * d, bias=False)
    attn += H * L * L * (2 * dh - 1) + H * L * L  # scores and 1/sqrt(dh)
    attn += H * L * (4 * L - 1)  # softmax
    attn += H * L * dh * (2 * L - 1)  # weights @ values
    attn += _linear(L, d, d)
    mlp = _linear(L, d, f) + L * f + _linear(L, f, d)  # with GELU
    per_layer = 2 * _layer_norm(L, d, affine=True) + attn + mlp + 2 * L * d
    embed = _linear(L, D, d) + L * d
    return embed + cfg.n_layers * per_layer + _layer_norm(1, d, affine=True) + _linear(1, d, 2)


def count_flops(model, L: int) -> int:
    """Analytic FLOPs of one forward pass over an L-token prompt."""
    if isinstance(model, SSMICLModel):
        return ssm_flops(model.config, L)
    if isinstance(model, TICLModel):
        return transformer_flops(model.config, L)
    raise TypeError(f"no FLOP model for {type(model).__name__}")


def measure_flops(model, L: int, seed: int = 0) -> int:
    """Instrumented FLOPs: run the model on random tokens and sum the tape."""
    tokens = np.random.default_rng(seed).normal(size=(L, model.config.token_dim))
    with nx.Tape() as tape:
        model.forward(tokens)
    return tape.flops
