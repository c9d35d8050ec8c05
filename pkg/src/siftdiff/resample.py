"""Path-wise importance weights, relaxed rejection, and the replay buffer.

A sampled path gets log weight reward(x_0) + log_rnd; relaxed rejection keeps
it with probability min(1, exp(log_weight - log_c)), where log_c is the batch
quantile that targets a configured acceptance rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sde import TrajectoryBatch


@dataclass(frozen=True)
class WeightedPath:
    x0: np.ndarray
    log_weight: float
    source_iteration: int = 0


def log_weight(traj: TrajectoryBatch) -> np.ndarray:
    """Per-path log importance weight reward + log_rnd; reward must be attached."""
    if traj.reward is None:
        raise ValueError("trajectory batch carries no reward; set traj.reward first")
    return np.asarray(traj.reward, dtype=np.float64) + traj.log_rnd


def adaptive_log_c(log_weights: np.ndarray, target_accept: float) -> float:
    """The ceil(rho*N)-th largest log weight.

    Paths at or above the returned threshold are accepted surely, so the
    expected acceptance rate is at least target_accept.
    """
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.size == 0:
        raise ValueError("adaptive threshold needs at least one weight")
    if not 0.0 < target_accept <= 1.0:
        raise ValueError("target acceptance rate must be in (0, 1]")
    k = int(np.ceil(target_accept * lw.size))
    return float(np.sort(lw)[::-1][k - 1])


def acceptance_probability(log_weights: np.ndarray, log_c: float) -> np.ndarray:
    """alpha = min(1, exp(log_weight - log_c)) per path."""
    return np.exp(np.minimum(np.asarray(log_weights, dtype=np.float64) - log_c, 0.0))


def rejection_mask(
    log_weights: np.ndarray, log_c: float, rng: np.random.Generator
) -> np.ndarray:
    """Independent keep/drop decisions with probability alpha per path."""
    alpha = acceptance_probability(log_weights, log_c)
    return rng.uniform(size=alpha.shape) < alpha


def rejection_step(
    paths: list[WeightedPath], log_c: float, rng: np.random.Generator
) -> list[WeightedPath]:
    lw = np.array([p.log_weight for p in paths])
    mask = rejection_mask(lw, log_c, rng)
    return [p for p, keep in zip(paths, mask) if keep]


def effective_sample_size(log_weights: np.ndarray) -> float:
    """(sum w)^2 / sum w^2, computed in log space."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.size == 0:
        return 0.0
    lw = lw - lw.max()
    w = np.exp(lw)
    return float(w.sum() ** 2 / (w * w).sum())


class ReplayBuffer:
    """Fixed-capacity FIFO of accepted terminal samples."""

    def __init__(self, capacity: int, dim: int = 2):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._store = np.empty((capacity, dim))
        self._next = 0
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def push(self, samples: np.ndarray) -> None:
        """Append samples, evicting oldest-first past capacity; empty push is a no-op."""
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        if samples.size == 0:
            return
        if samples.shape[1] != self._store.shape[1]:
            raise ValueError("sample dim does not match buffer dim")
        if len(samples) >= self.capacity:
            self._store[:] = samples[-self.capacity :]
            self._next = 0
            self._count = self.capacity
            return
        k = len(samples)
        end = self._next + k
        if end <= self.capacity:
            self._store[self._next : end] = samples
        else:
            split = self.capacity - self._next
            self._store[self._next :] = samples[:split]
            self._store[: end - self.capacity] = samples[split:]
        self._next = end % self.capacity
        self._count = min(self._count + k, self.capacity)

    def contents(self) -> np.ndarray:
        """Current contents, oldest first."""
        if self._count < self.capacity:
            return self._store[: self._count].copy()
        return np.roll(self._store, -self._next, axis=0).copy()

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        """m uniform draws with replacement."""
        if self._count == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._count, size=m)
        if self._count < self.capacity:
            return self._store[idx].copy()
        return self._store[(self._next + idx) % self.capacity].copy()
