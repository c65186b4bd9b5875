"""Scalar fronthaul quantizer: Lloyd-Max codebooks for the unit Gaussian."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import ndtr, ndtri

_SQRT_2PI = math.sqrt(2.0 * math.pi)
SCALE_FLOOR = 1e-12


class ConvergenceError(RuntimeError):
    def __init__(self, msg: str, last: "Codebook"):
        super().__init__(msg)
        self.last = last


@dataclass(frozen=True)
class Codebook:
    bits: float
    levels: np.ndarray  # ascending, 2**bits entries
    thresholds: np.ndarray  # ascending, 2**bits - 1 entries

    @property
    def unlimited(self) -> bool:
        return math.isinf(self.bits)

    @classmethod
    def identity(cls) -> "Codebook":
        return cls(math.inf, np.empty(0), np.empty(0))

    def distortion(self) -> float:
        """E[(X - Q(X))^2] for X ~ N(0, 1)."""
        if self.unlimited:
            return 0.0
        return _gaussian_distortion(self.levels, self.thresholds)

    def to_dict(self) -> dict:
        return {"bits": None if self.unlimited else int(self.bits),
                "levels": self.levels.tolist(), "thresholds": self.thresholds.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Codebook":
        if d["bits"] is None:
            return cls.identity()
        return cls(int(d["bits"]), np.asarray(d["levels"], float), np.asarray(d["thresholds"], float))


def _pdf(x):
    return np.exp(-0.5 * x * x) / _SQRT_2PI


def _cell_moments(edges):
    """Mass, first and second moments of N(0,1) on each [edges[i], edges[i+1]]."""
    lo, hi = edges[:-1], edges[1:]
    # use the lower tail for negative cells to keep small masses accurate
    p = np.where(hi <= 0, ndtr(hi) - ndtr(lo), ndtr(-lo) - ndtr(-hi))
    flo, fhi = _pdf(lo), _pdf(hi)
    m1 = flo - fhi
    lof = np.where(np.isinf(lo), 0.0, np.nan_to_num(lo) * flo)
    hif = np.where(np.isinf(hi), 0.0, np.nan_to_num(hi) * fhi)
    m2 = p + lof - hif
    return p, m1, m2


def _edges(thresholds):
    return np.concatenate([[-np.inf], thresholds, [np.inf]])


def _gaussian_distortion(levels, thresholds) -> float:
    p, m1, m2 = _cell_moments(_edges(thresholds))
    return float(np.sum(m2 - 2 * levels * m1 + levels ** 2 * p))


def _lloyd_step(levels):
    thresholds = 0.5 * (levels[1:] + levels[:-1])
    p, m1, _ = _cell_moments(_edges(thresholds))
    new = m1 / p
    new = 0.5 * (new - new[::-1])  # exact symmetry of the even density
    return new, thresholds


def _newton_step(levels):
    """Newton step on levels - centroid(levels) = 0 (tridiagonal Jacobian)."""
    thresholds = 0.5 * (levels[1:] + levels[:-1])
    edges = _edges(thresholds)
    p, m1, _ = _cell_moments(edges)
    c = m1 / p
    lo, hi = edges[:-1], edges[1:]
    dlo = np.where(np.isinf(lo), 0.0, _pdf(lo) * (c - np.nan_to_num(lo)) / p)
    dhi = np.where(np.isinf(hi), 0.0, _pdf(hi) * (np.nan_to_num(hi) - c) / p)
    n = len(levels)
    ab = np.zeros((3, n))
    ab[1] = 1.0 - 0.5 * (dlo + dhi)
    ab[0, 1:] = -0.5 * dhi[:-1]  # d c_i / d y_{i+1}
    ab[2, :-1] = -0.5 * dlo[1:]  # d c_i / d y_{i-1}
    return solve_banded((1, 1), ab, c - levels)


def lloyd_max_gaussian(bits: float, tolerance: float = 1e-10, max_iters: int = 1000) -> Codebook:
    """Minimum-MSE ``bits``-bit scalar quantizer for N(0, 1).

    The Lloyd fixed point is located with Newton steps; convergence is
    declared when a plain Lloyd step moves no level by ``tolerance`` or more.
    ``bits=math.inf`` returns the identity codebook used for unlimited fronthaul.
    """
    if math.isinf(bits):
        return Codebook.identity()
    if bits != int(bits) or not 1 <= bits <= 12:
        raise ValueError(f"bits must be an integer in [1, 12], got {bits}")
    bits = int(bits)
    n = 2 ** bits
    # high-resolution optimum (point density ~ pdf^(1/3)) as the starting point
    levels = math.sqrt(3.0) * ndtri((np.arange(n) + 0.5) / n)
    levels = 0.5 * (levels - levels[::-1])
    for _ in range(max_iters):
        step = _newton_step(levels)
        trial = levels + step
        if np.any(np.diff(trial) <= 0):
            trial, _ = _lloyd_step(levels)
        trial = 0.5 * (trial - trial[::-1])
        levels = trial
        lloyd, _ = _lloyd_step(levels)
        if np.max(np.abs(lloyd - levels)) < tolerance:
            levels = lloyd
            break
    else:
        raise ConvergenceError(f"Lloyd iteration did not converge in {max_iters} steps",
                               Codebook(bits, levels, 0.5 * (levels[1:] + levels[:-1])))
    return Codebook(bits, levels, 0.5 * (levels[1:] + levels[:-1]))


def quantize(values, codebook: Codebook, scale: float = 1.0) -> np.ndarray:
    """Map each value to ``scale`` times its nearest codebook level.

    Magnitudes are quantized on the positive half of the (symmetric) codebook
    so that Q(-v) = -Q(v) holds exactly.  An exact zero sits on the middle
    threshold and is mapped to 0, so silent samples stay silent.
    """
    values = np.asarray(values, dtype=float)
    if codebook.unlimited:
        return values.copy()
    if scale <= 0:
        raise ValueError("scale must be positive")
    half = len(codebook.levels) // 2
    pos_levels = codebook.levels[half:]
    pos_thresholds = codebook.thresholds[half:]
    mag = np.abs(values) / scale
    idx = np.searchsorted(pos_thresholds, mag, side="left")
    return np.sign(values) * scale * pos_levels[idx]


def quantize_complex(z, codebook: Codebook, scale: float) -> np.ndarray:
    z = np.asarray(z)
    return quantize(z.real, codebook, scale) + 1j * quantize(z.imag, codebook, scale)


def block_scale(pilots) -> float:
    """RMS of the concatenated real and imaginary pilot samples (floored)."""
    z = np.asarray(pilots)
    rms = math.sqrt(0.5 * float(np.mean(np.abs(z) ** 2))) if z.size else 0.0
    return max(rms, SCALE_FLOOR)


def quantize_block(pilots, data, codebook: Codebook):
    """Quantize one AP's pilot block and data vector with a shared scale.

    Returns ``(pilots_q, data_q, scale)``.
    """
    scale = block_scale(pilots)
    return quantize_complex(pilots, codebook, scale), quantize_complex(data, codebook, scale), scale
