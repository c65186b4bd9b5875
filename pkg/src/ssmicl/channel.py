"""Cell-free uplink scenario generation: deployments, tasks, channels, signals."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import hadamard

SPEED_OF_LIGHT = 299_792_458.0
CARRIER_HZ = 2e9
AP_HEIGHT_M = 10.0
SHADOWING_STD_DB = 4.0
ANGULAR_SPREAD_DEG = 15.0
ANTENNA_SPACING = 0.5  # wavelengths

_QAM16 = np.array([-3, -1, 1, 3], dtype=float)
_QAM64 = np.array([-7, -5, -3, -1, 1, 3, 5, 7], dtype=float)


def _square_qam(levels: np.ndarray) -> np.ndarray:
    pts = (levels[:, None] + 1j * levels[None, :]).reshape(-1)
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


# Order fixes the constellation index used by the tokenizer.
CONSTELLATIONS: dict[str, np.ndarray] = {
    "BPSK": np.array([1.0 + 0j, -1.0 + 0j]),
    "4-QAM": _square_qam(np.array([-1.0, 1.0])),
    "8-PSK": np.exp(2j * np.pi * np.arange(8) / 8),
    "16-QAM": _square_qam(_QAM16),
    "64-QAM": _square_qam(_QAM64),
}
CONSTELLATION_NAMES = tuple(CONSTELLATIONS)


class ScenarioError(ValueError):
    """Invalid scenario parameters or contract violation."""


@dataclass(frozen=True)
class Deployment:
    ap_positions: np.ndarray  # (M, 2) metres
    ue_positions: np.ndarray  # (K, 2) metres
    area_side: float

    @property
    def num_aps(self) -> int:
        return len(self.ap_positions)

    @property
    def num_ues(self) -> int:
        return len(self.ue_positions)


def ap_grid(M: int, area_side: float) -> np.ndarray:
    """APs at the centres of a near-square grid of M cells."""
    cols = math.ceil(math.sqrt(M))
    rows = math.ceil(M / cols)
    pts = [((c + 0.5) * area_side / cols, (r + 0.5) * area_side / rows)
           for c in range(cols) for r in range(rows)]
    return np.array(pts[:M], dtype=float)


def sample_deployment(seed, M: int = 4, K: int = 4, area_side: float = 1000.0) -> Deployment:
    if M < 1 or K < 1:
        raise ScenarioError("need at least one AP and one UE")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ues = rng.uniform(0.0, area_side, size=(K, 2))
    return Deployment(ap_grid(M, area_side), ues, float(area_side))


def pathloss_db(distance_m):
    """UMi-style median channel gain in dB, distance clamped below at 1 m."""
    d = np.maximum(np.asarray(distance_m, dtype=float), 1.0)
    return -30.5 - 36.7 * np.log10(d)


# Gauss-Hermite nodes for averaging over a Gaussian angular deviation.
_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(64)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


def correlation_matrix(ap, ue, n_ant: int, angular_spread_deg: float | None = ANGULAR_SPREAD_DEG,
                       beta: float = 1.0) -> np.ndarray:
    """Local-scattering correlation of a half-wavelength ULA, scaled to trace n_ant*beta.

    ``angular_spread_deg`` of None or inf selects uncorrelated fading (beta*I).
    """
    if n_ant < 1:
        raise ScenarioError("n_ant must be >= 1")
    if angular_spread_deg is None or not np.isfinite(angular_spread_deg):
        return beta * np.eye(n_ant, dtype=complex)
    dx, dy = np.asarray(ue, float) - np.asarray(ap, float)
    theta = math.atan2(dy, dx)
    sigma = math.radians(angular_spread_deg)
    lags = np.arange(n_ant)
    angles = theta + sigma * _GH_NODES
    # first column R[l, 0] = E[exp(j 2 pi spacing l sin(phi))]
    col = (np.exp(2j * np.pi * ANTENNA_SPACING * lags[:, None] * np.sin(angles)[None, :])
           * _GH_WEIGHTS).sum(axis=1)
    idx = lags[:, None] - lags[None, :]
    R = np.where(idx >= 0, col[np.abs(idx)], np.conj(col[np.abs(idx)]))
    R = 0.5 * (R + R.conj().T) * beta
    if np.linalg.eigvalsh(R).min() < -1e-10 * max(beta, 1e-300) * n_ant:
        raise ScenarioError("correlation matrix is not positive semidefinite")
    return R


def large_scale_gains(deployment: Deployment, rng: np.random.Generator,
                      shadowing_std_db: float = SHADOWING_STD_DB) -> np.ndarray:
    """Linear gains beta[m, k] = pathloss + i.i.d. log-normal shadowing."""
    diff = deployment.ap_positions[:, None, :] - deployment.ue_positions[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1) + AP_HEIGHT_M ** 2)
    shadow = shadowing_std_db * rng.standard_normal(dist.shape)
    return 10.0 ** ((pathloss_db(dist) + shadow) / 10.0)


@dataclass
class Task:
    noise_var: float
    constellations: list[str]
    R: np.ndarray  # (M, K, N, N) complex
    pilot_assignment: np.ndarray  # (K,) pilot row index per UE
    pilot_book: np.ndarray  # (T_P, T_P)
    deployment: Deployment | None = None
    _sqrt_R: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def num_aps(self) -> int:
        return self.R.shape[0]

    @property
    def num_ues(self) -> int:
        return self.R.shape[1]

    @property
    def n_ant(self) -> int:
        return self.R.shape[2]

    @property
    def n_pilots(self) -> int:
        return self.pilot_book.shape[0]

    @property
    def large_scale(self) -> np.ndarray:
        """r[m, k] = tr(R[m, k]) / N_ant."""
        return np.real(np.trace(self.R, axis1=2, axis2=3)) / self.n_ant

    def pilot(self, k: int) -> np.ndarray:
        return self.pilot_book[self.pilot_assignment[k]]

    def sharing_set(self, k: int) -> list[int]:
        """UEs other than k that use k's pilot, ascending."""
        p = self.pilot_assignment[k]
        return [j for j in range(self.num_ues) if j != k and self.pilot_assignment[j] == p]

    def sqrt_R(self) -> np.ndarray:
        if self._sqrt_R is None:
            w, V = np.linalg.eigh(self.R)
            w = np.sqrt(np.maximum(w, 0.0))
            self._sqrt_R = (V * w[..., None, :]) @ np.conj(np.swapaxes(V, -1, -2))
        return self._sqrt_R


def noise_variance_for_snr(large_scale: np.ndarray, snr_db: float) -> float:
    """sigma^2 = median_{m,k} r[m,k] / 10^(snr/10) with unit transmit power."""
    return float(np.median(large_scale) / 10.0 ** (snr_db / 10.0))


def sample_task(deployment: Deployment, snr_db: float, rng: np.random.Generator,
                n_ant: int = 2, n_pilots: int = 8, group_size: int | None = None,
                constellations: list[str] | None = None,
                angular_spread_deg: float | None = ANGULAR_SPREAD_DEG) -> Task:
    """Draw the statistics of one equalization task for ``deployment``.

    ``group_size`` fixes how many UEs share one pilot (1 = no sharing); by
    default it is drawn uniformly from {2, 3, 4} (capped at K).
    """
    M, K = deployment.num_aps, deployment.num_ues
    beta = large_scale_gains(deployment, rng)
    R = np.empty((M, K, n_ant, n_ant), dtype=complex)
    for m in range(M):
        for k in range(K):
            R[m, k] = correlation_matrix(deployment.ap_positions[m], deployment.ue_positions[k],
                                         n_ant, angular_spread_deg, beta[m, k])
    if constellations is None:
        constellations = [CONSTELLATION_NAMES[i]
                          for i in rng.integers(len(CONSTELLATION_NAMES), size=K)]
    else:
        constellations = list(constellations)
        for c in constellations:
            if c not in CONSTELLATIONS:
                raise ScenarioError(f"unknown constellation {c!r}")
    if group_size is None:
        group_size = min(int(rng.integers(2, 5)), K) if K >= 2 else 1
    if not 1 <= group_size <= K:
        raise ScenarioError(f"group size {group_size} outside [1, {K}]")
    if 1 + (K - group_size) > n_pilots:
        raise ScenarioError(f"{1 + K - group_size} distinct pilots needed, only {n_pilots}")
    pilots = rng.permutation(n_pilots)
    sharers = rng.choice(K, size=group_size, replace=False)
    assignment = np.empty(K, dtype=int)
    assignment[sharers] = pilots[0]
    others = [k for k in range(K) if k not in set(sharers.tolist())]
    assignment[others] = pilots[1:1 + len(others)]
    sigma2 = noise_variance_for_snr(np.real(np.trace(R, axis1=2, axis2=3)) / n_ant, snr_db)
    return Task(sigma2, constellations, R, assignment, walsh_hadamard(n_pilots), deployment)


def walsh_hadamard(n: int) -> np.ndarray:
    return hadamard(n).astype(float)


def sample_channels(task: Task, rng: np.random.Generator) -> np.ndarray:
    """h[m, k] ~ CN(0, R[m, k]); shape (M, K, N)."""
    M, K, N = task.num_aps, task.num_ues, task.n_ant
    w = (rng.standard_normal((M, K, N)) + 1j * rng.standard_normal((M, K, N))) / np.sqrt(2.0)
    return np.einsum("mkij,mkj->mki", task.sqrt_R(), w)


def _cn(rng, shape, var):
    return np.sqrt(var / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def transmit_pilots(task: Task, channels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Y^P[m] = sum_k h[m,k] x^P_k + N[m]; shape (M, N, T_P)."""
    X = task.pilot_book[task.pilot_assignment]  # (K, T_P)
    Y = np.einsum("mki,kt->mit", channels, X)
    return Y + _cn(rng, Y.shape, task.noise_var)


def sample_symbols(task: Task, rng: np.random.Generator) -> np.ndarray:
    return np.array([CONSTELLATIONS[c][rng.integers(len(CONSTELLATIONS[c]))]
                     for c in task.constellations])


def transmit_data(task: Task, channels: np.ndarray, symbols: np.ndarray,
                  rng: np.random.Generator, check: bool = True) -> np.ndarray:
    """y[m] = sum_k h[m,k] x_k + n[m]; shape (M, N).

    ``check=False`` skips the constellation membership test (test hooks only).
    """
    symbols = np.asarray(symbols, dtype=complex)
    if check:
        for k, c in enumerate(task.constellations):
            if np.min(np.abs(CONSTELLATIONS[c] - symbols[k])) > 1e-9:
                raise ScenarioError(f"symbol {symbols[k]} of UE {k} not in {c}")
    y = np.einsum("mki,k->mi", channels, symbols)
    return y + _cn(rng, y.shape, task.noise_var)


# ---------------------------------------------------------------- JSON schema

def _interleave(z: np.ndarray) -> list:
    return np.stack([z.real, z.imag], axis=-1).tolist()


def task_to_dict(task: Task) -> dict:
    """Schema: see README "Task JSON"."""
    d = {
        "noise_var": task.noise_var,
        "constellations": list(task.constellations),
        "pilot_assignment": [int(p) for p in task.pilot_assignment],
        "pilot_book": task.pilot_book.tolist(),
        "correlation": _interleave(task.R),
    }
    if task.deployment is not None:
        d["deployment"] = {
            "area_side": task.deployment.area_side,
            "ap_positions": task.deployment.ap_positions.tolist(),
            "ue_positions": task.deployment.ue_positions.tolist(),
        }
    return d


def task_from_dict(d: dict) -> Task:
    corr = np.asarray(d["correlation"], dtype=float)
    dep = None
    if "deployment" in d:
        dd = d["deployment"]
        dep = Deployment(np.asarray(dd["ap_positions"], float),
                         np.asarray(dd["ue_positions"], float), float(dd["area_side"]))
    return Task(float(d["noise_var"]), list(d["constellations"]), corr[..., 0] + 1j * corr[..., 1],
                np.asarray(d["pilot_assignment"], dtype=int), np.asarray(d["pilot_book"], float), dep)


def task_to_json(task: Task) -> str:
    return json.dumps(task_to_dict(task))


def task_from_json(s: str) -> Task:
    return task_from_dict(json.loads(s))
