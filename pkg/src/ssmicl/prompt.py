"""Per-UE prompts and their fixed-width real token sequences.

Token layout for a system with M APs of N_ant antennas (D = 2*M*N_ant + 2):

    row 0                    log-LSF of UE k          [z(r_k), 0...]
    rows 1..|U_k|            log-LSF of each sharer   [z(r_j), 0...]
    next T_P rows            pilot example i          [Re Y_i, Im Y_i, Re x_ki, Im x_ki]
    last row                 query                    [Re y, Im y, idx(X_k), 0]

``z`` is log10 followed by standardisation with dataset-level constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import CONSTELLATION_NAMES, Task


class PromptError(ValueError):
    pass


def constellation_index(name: str) -> int:
    try:
        return CONSTELLATION_NAMES.index(name)
    except ValueError:
        raise PromptError(f"unknown constellation {name!r}") from None


def constellation_name(index: int) -> str:
    if not 0 <= index < len(CONSTELLATION_NAMES):
        raise PromptError(f"constellation index {index} out of range")
    return CONSTELLATION_NAMES[index]


@dataclass(frozen=True)
class LsfScaler:
    """Standardisation of log10 large-scale gains."""

    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, gains) -> "LsfScaler":
        z = np.log10(np.asarray(gains, dtype=float).reshape(-1))
        return cls(float(z.mean()), float(z.std()) or 1.0)

    def __call__(self, gains) -> np.ndarray:
        return (np.log10(gains) - self.mean) / self.std


@dataclass
class Context:
    r_k: np.ndarray  # (M,)
    contaminators: list = field(default_factory=list)  # r_j for j in U_k, ascending j
    pilots: np.ndarray = None  # (T_P, M*N) complex: columns of the stacked pilot matrix
    pilot_symbols: np.ndarray = None  # (T_P,) complex

    @property
    def n_examples(self) -> int:
        return len(self.pilot_symbols)


@dataclass
class Prompt:
    context: Context
    query: np.ndarray  # (M*N,) complex
    constellation_index: int


def build_context(task: Task, pilots_q: np.ndarray, k: int, signal_scale: float = 1.0) -> Context:
    """Context of UE ``k`` from the quantized pilot blocks (M, N, T_P)."""
    if not 0 <= k < task.num_ues:
        raise PromptError(f"UE index {k} out of range")
    r = task.large_scale
    stacked = pilots_q.reshape(-1, pilots_q.shape[-1])  # rows: AP-major, then antenna
    return Context(r_k=r[:, k].copy(),
                   contaminators=[r[:, j].copy() for j in sorted(task.sharing_set(k))],
                   pilots=stacked.T / signal_scale,
                   pilot_symbols=task.pilot(k).astype(complex))


def received_scale(pilots_q: np.ndarray) -> float:
    """RMS magnitude of the whole received pilot block (CPU-side normaliser)."""
    return max(float(np.sqrt(np.mean(np.abs(pilots_q) ** 2))), 1e-300)


def build_prompt(task: Task, pilots_q: np.ndarray, data_q: np.ndarray, k: int,
                 normalize: bool = True) -> Prompt:
    """Prompt for UE ``k``; ``normalize`` divides all received signals by the
    pilot-block RMS so prompts are invariant to the absolute received power."""
    scale = received_scale(pilots_q) if normalize else 1.0
    ctx = build_context(task, pilots_q, k, scale)
    return Prompt(ctx, np.asarray(data_q).reshape(-1) / scale,
                  constellation_index(task.constellations[k]))


def token_width(M: int, n_ant: int) -> int:
    return 2 * M * n_ant + 2


def tokenize(prompt: Prompt, lsf: LsfScaler | None = None) -> np.ndarray:
    """(L, D) token matrix with L = 2 + |U_k| + T_P."""
    lsf = lsf or LsfScaler()
    ctx = prompt.context
    width = 2 * len(prompt.query) + 2
    M = len(ctx.r_k)
    rows = []
    for r in [ctx.r_k, *ctx.contaminators]:
        row = np.zeros(width)
        row[:M] = lsf(r)
        rows.append(row)
    Y = ctx.pilots
    x = ctx.pilot_symbols
    rows.extend(np.concatenate([Y.real, Y.imag, x.real[:, None], x.imag[:, None]], axis=1))
    q = prompt.query
    rows.append(np.concatenate([q.real, q.imag, [float(prompt.constellation_index), 0.0]]))
    return np.array(rows)
