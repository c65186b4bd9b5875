"""Centralized two-stage LMMSE baseline with genie statistics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .channel import Task

REGULARIZATION = 1e-12


@dataclass
class ChannelEstimate:
    h_hat: np.ndarray  # (M, N)
    error_cov: np.ndarray  # (M, N, N), one block per AP

    def stacked(self) -> np.ndarray:
        return self.h_hat.reshape(-1)

    def dense_cov(self) -> np.ndarray:
        M, N, _ = self.error_cov.shape
        C = np.zeros((M * N, M * N), dtype=complex)
        for m in range(M):
            C[m * N:(m + 1) * N, m * N:(m + 1) * N] = self.error_cov[m]
        return C


def despread(pilots_q: np.ndarray, pilot_book: np.ndarray, pilot_index: int) -> np.ndarray:
    """z[m] = Y^P[m] x^H / sqrt(T_P); pilots_q has shape (M, N, T_P)."""
    x = pilot_book[pilot_index]
    return pilots_q @ np.conj(x) / np.sqrt(len(x))


def _solve(A, B, what):
    try:
        cond = np.linalg.cond(A)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e15:
        warnings.warn(f"{what}: near-singular matrix, regularizing", RuntimeWarning, stacklevel=3)
        A = A + REGULARIZATION * np.eye(A.shape[0])
    return np.linalg.solve(A, B)


def mmse_channel_estimate(z: np.ndarray, task: Task, k: int) -> ChannelEstimate:
    """Per-AP MMSE estimate of h[:, k] from the despread pilot signal z (M, N)."""
    tp = task.n_pilots
    group = [k] + task.sharing_set(k)
    M, N = task.num_aps, task.n_ant
    h_hat = np.empty((M, N), dtype=complex)
    C = np.empty((M, N, N), dtype=complex)
    for m in range(M):
        Rk = task.R[m, k]
        psi = tp * sum(task.R[m, j] for j in group) + task.noise_var * np.eye(N)
        sol = _solve(psi, np.column_stack([z[m], Rk]), "pilot covariance")
        h_hat[m] = np.sqrt(tp) * Rk @ sol[:, 0]
        C[m] = Rk - tp * Rk @ sol[:, 1:]
    return ChannelEstimate(h_hat, C)


def lmmse_equalize(y_q: np.ndarray, estimates: list[ChannelEstimate], task: Task) -> np.ndarray:
    """x_hat[k] = v_k^H y with v_k = (sum_j h_j h_j^H + C_j + sigma^2 I)^-1 h_k."""
    y = np.asarray(y_q).reshape(-1)
    H = np.column_stack([e.stacked() for e in estimates])
    G = H @ np.conj(H.T) + sum(e.dense_cov() for e in estimates) + task.noise_var * np.eye(len(y))
    V = _solve(G, H, "combining Gram")
    return np.conj(V.T) @ y


def lmmse_block(task: Task, pilots_q: np.ndarray, data_q: np.ndarray) -> np.ndarray:
    """Estimate all K symbols of one coherence block."""
    ests = [mmse_channel_estimate(despread(pilots_q, task.pilot_book, task.pilot_assignment[k]),
                                  task, k)
            for k in range(task.num_ues)]
    return lmmse_equalize(data_q, ests, task)
