"""Quantitative evaluation: reward averages, grid divergences, mode masses,
and the path-cost functional with its rejection descent check."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .gmm import IsotropicGmm, gmm_logpdf


@dataclass(frozen=True)
class GridSpec:
    lo: float = -4.0
    hi: float = 4.0
    res: int = 100

    def __post_init__(self) -> None:
        if not self.hi > self.lo:
            raise ValueError("grid needs hi > lo")
        if self.res < 2:
            raise ValueError("grid resolution must be >= 2")

    @property
    def cell_area(self) -> float:
        return ((self.hi - self.lo) / self.res) ** 2

    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.res + 1)

    def cell_centers(self) -> np.ndarray:
        e = self.edges()
        c = 0.5 * (e[:-1] + e[1:])
        xx, yy = np.meshgrid(c, c, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)


def expected_reward(samples: np.ndarray, reward_fn) -> tuple[float, float]:
    """Mean reward with its standard error (NaN for a single sample)."""
    samples = np.atleast_2d(samples)
    if len(samples) < 1:
        raise ValueError("need at least one sample")
    r = np.asarray(reward_fn(samples), dtype=np.float64)
    se = float(r.std(ddof=1) / np.sqrt(len(r))) if len(r) > 1 else float("nan")
    return float(r.mean()), se


def grid_divergences(
    samples: np.ndarray, target: IsotropicGmm, grid: GridSpec
) -> tuple[float, float, int]:
    """(TV, smoothed KL, n outside box) between a sample histogram and the target.

    Target cell masses are density * cell area at cell centers; samples outside
    the box land in a slop bin that is compared against the target's leftover
    mass. KL uses 1e-9 additive smoothing.
    """
    samples = np.atleast_2d(samples)
    e = grid.edges()
    hist, _, _ = np.histogram2d(samples[:, 0], samples[:, 1], bins=[e, e])
    n = len(samples)
    n_outside = int(n - hist.sum())
    p = np.append(hist.ravel() / n, n_outside / n)
    q_cells = np.exp(gmm_logpdf(target, grid.cell_centers())) * grid.cell_area
    q = np.append(q_cells, max(0.0, 1.0 - q_cells.sum()))
    tv = 0.5 * float(np.abs(p - q).sum())
    ps = p + 1e-9
    qs = q + 1e-9
    ps /= ps.sum()
    qs /= qs.sum()
    kl = float((ps * np.log(ps / qs)).sum())
    return tv, kl, n_outside


def mode_mass(samples: np.ndarray, centers: np.ndarray, radius: float) -> np.ndarray:
    """Fraction of samples within radius of each center, nearest-center assigned."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    samples = np.atleast_2d(samples)
    centers = np.atleast_2d(centers)
    dist = np.linalg.norm(samples[:, None, :] - centers[None], axis=2)
    nearest = dist.argmin(axis=1)
    within = dist[np.arange(len(samples)), nearest] <= radius
    return np.array(
        [np.mean(within & (nearest == k)) for k in range(len(centers))]
    )


def gmm_mode_mass(
    g: IsotropicGmm, centers: np.ndarray, radius: float, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Monte Carlo reference ball masses of an analytic mixture."""
    from .gmm import gmm_sample

    return mode_mass(gmm_sample(g, n, rng), centers, radius)


def f_estimate(step_cost: np.ndarray, rewards: np.ndarray) -> tuple[float, float]:
    """Path-cost functional estimate: mean(step cost) - mean(reward), with SE.

    step_cost is the per-path sum of 0.5 beta_tilde^-2 ||Delta_t||^2 (the
    discrete KL of guided vs base path measure); the estimate targets
    KL(P_guided, P_base) - E[reward].
    """
    f_i = np.asarray(step_cost, dtype=np.float64) - np.asarray(rewards, dtype=np.float64)
    se = float(f_i.std(ddof=1) / np.sqrt(len(f_i))) if len(f_i) > 1 else float("nan")
    return float(f_i.mean()), se


@dataclass
class DescentResult:
    f_before: float
    f_after: float
    se: float
    passed: bool
    inconclusive: bool


def descent_check(
    step_cost: np.ndarray,
    rewards: np.ndarray,
    alpha: np.ndarray,
    n_se: float = 3.0,
) -> DescentResult:
    """Rejection should not increase the path-cost functional.

    f_after reweights per-path costs by the acceptance probabilities alpha
    (self-normalized); the check passes when f_after <= f_before + n_se
    combined standard errors. Degenerate alpha (at most one effective path)
    is flagged inconclusive.
    """
    f_i = np.asarray(step_cost, dtype=np.float64) - np.asarray(rewards, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != f_i.shape:
        raise ValueError("alpha must have one entry per path")
    n = len(f_i)
    f_before = float(f_i.mean())
    se_before = float(f_i.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    a_sum = alpha.sum()
    ess = a_sum**2 / (alpha * alpha).sum() if a_sum > 0 else 0.0
    if a_sum <= 0 or ess <= 1.0 + 1e-12:
        return DescentResult(f_before, float("nan"), float("nan"), False, True)
    f_after = float((alpha * f_i).sum() / a_sum)
    se_after = float(np.sqrt((alpha**2 * (f_i - f_after) ** 2).sum()) / a_sum)
    se = float(np.sqrt(se_before**2 + se_after**2))
    if not np.isfinite(se):
        passed = f_after <= f_before
    else:
        passed = f_after <= f_before + n_se * se
    return DescentResult(f_before, f_after, se, passed, False)


@dataclass
class EvalReport:
    """One run's evaluation summary, serialized to JSON and a runs.csv index."""

    name: str
    tag: str
    seed: int
    config_hash: str
    mean_reward: float
    reward_se: float
    grid_tv: float
    grid_kl: float
    mode_masses: list[float]
    mode_mass_l1: float
    mode_mass_linf: float
    n_samples: int
    f_before: float = float("nan")
    f_after: float = float("nan")
    ess: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


RUNS_CSV_COLUMNS = [
    "name",
    "tag",
    "seed",
    "config_hash",
    "mean_reward",
    "grid_tv",
    "grid_kl",
    "mode_mass_l1",
    "mode_mass_linf",
    "n_samples",
]


def append_runs_index(report: EvalReport, path: str) -> None:
    import os

    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8") as f:
        if new:
            f.write(",".join(RUNS_CSV_COLUMNS) + "\n")
        row = [str(getattr(report, c)) for c in RUNS_CSV_COLUMNS]
        f.write(",".join(row) + "\n")
