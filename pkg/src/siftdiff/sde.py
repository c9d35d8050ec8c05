"""Discrete DDPM forward/reverse processes with an additive mean correction.

Conventions used throughout the package:

* time index t runs 1..T; x_T is the most-noised state, x_0 the sample.
* models live in noise-prediction space; a score-space field converts via
  eps = -nu_t * score.
* the guided reverse kernel is N(x_{t-1}; mu_theta + Delta_t, beta_tilde_t^2 I)
  with Delta_t = -(1/sqrt(alpha_t)) * ((1-alpha_t)/sqrt(1-alpha_bar_t)) * h_eps.
* log_rnd of a trajectory is log dP_base/dP_guided along that path, the sum of
  per-step Gaussian log-ratios, accumulated while sampling.

The final reverse step has beta_tilde_1 = 0 (deterministic). A mean shift on a
zero-variance kernel would make the two path measures mutually singular, so the
correction is suppressed there: Delta_t = 0 whenever beta_tilde_t = 0, and such
steps contribute nothing to log_rnd or to the step-cost sum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

EpsModel = "Callable[[np.ndarray, int], np.ndarray]"


@dataclass(frozen=True)
class VpSchedule:
    """Variance-preserving noise schedule, arrays indexed by t-1 for t = 1..T."""

    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return self._derived()[0]

    @property
    def alpha_bars(self) -> np.ndarray:
        return self._derived()[1]

    @property
    def beta_tildes(self) -> np.ndarray:
        return self._derived()[2]

    @property
    def gammas(self) -> np.ndarray:
        return np.sqrt(self._derived()[1])

    @property
    def nus(self) -> np.ndarray:
        return np.sqrt(1.0 - self._derived()[1])

    def _derived(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cached = getattr(self, "_cache", None)
        if cached is None:
            alphas = 1.0 - self.betas
            alpha_bars = np.cumprod(alphas)
            prev = np.concatenate([[1.0], alpha_bars[:-1]])
            beta_tildes = np.sqrt((1.0 - prev) / (1.0 - alpha_bars) * self.betas)
            cached = (alphas, alpha_bars, beta_tildes)
            object.__setattr__(self, "_cache", cached)
        return cached

    def _idx(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"time index {t} outside 1..{self.T}")
        return t - 1

    def beta(self, t: int) -> float:
        return float(self.betas[self._idx(t)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._idx(t)])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._idx(t)])

    def beta_tilde(self, t: int) -> float:
        return float(self.beta_tildes[self._idx(t)])

    def gamma(self, t: int) -> float:
        return float(self.gammas[self._idx(t)])

    def nu(self, t: int) -> float:
        return float(self.nus[self._idx(t)])

    def delta_coef(self, t: int) -> float:
        """|dDelta/dh_eps| at step t: (1-alpha_t) / (sqrt(1-alpha_bar_t) sqrt(alpha_t))."""
        i = self._idx(t)
        return float(
            (1.0 - self.alphas[i]) / (np.sqrt(1.0 - self.alpha_bars[i]) * np.sqrt(self.alphas[i]))
        )


def build_schedule(T: int, beta_min: float = 0.1, beta_max: float = 20.0) -> VpSchedule:
    """Linear VP discretization: beta_t = (beta_min + (t-1)/(T-1)(beta_max-beta_min))/T."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_min < beta_max:
        raise ValueError("need 0 < beta_min < beta_max")
    if T == 1:
        betas = np.array([beta_max / T])
    else:
        ramp = beta_min + np.arange(T) / (T - 1) * (beta_max - beta_min)
        betas = ramp / T
    if np.any(betas >= 1.0):
        raise ValueError("schedule produces beta_t >= 1; reduce beta_max or increase T")
    return VpSchedule(betas=betas)


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, schedule: VpSchedule) -> np.ndarray:
    """x_t = gamma_t x0 + nu_t eps."""
    return schedule.gamma(t) * np.asarray(x0) + schedule.nu(t) * np.asarray(eps)


def tweedie(x_t: np.ndarray, eps_pred: np.ndarray, t: int, schedule: VpSchedule) -> np.ndarray:
    """Denoised mean estimate x0_hat = (x_t - nu_t eps_pred) / gamma_t."""
    return (np.asarray(x_t) - schedule.nu(t) * np.asarray(eps_pred)) / schedule.gamma(t)


def posterior_mean(
    x_t: np.ndarray, eps_pred: np.ndarray, t: int, schedule: VpSchedule
) -> np.ndarray:
    """Unguided DDPM reverse-kernel mean mu_theta(x_t, t)."""
    a = schedule.alpha(t)
    return (np.asarray(x_t) - (1.0 - a) / schedule.nu(t) * np.asarray(eps_pred)) / np.sqrt(a)


def ancestral_step(
    x_t: np.ndarray,
    eps_pred: np.ndarray,
    h_eps: np.ndarray | None,
    t: int,
    z: np.ndarray,
    schedule: VpSchedule,
) -> tuple[np.ndarray, np.ndarray]:
    """One guided reverse step; returns (x_{t-1}, Delta_t).

    h_eps is the mean correction in noise-prediction space (None for the
    unguided sampler). On deterministic steps (beta_tilde_t = 0) the
    correction is suppressed, see module docstring.
    """
    mu = posterior_mean(x_t, eps_pred, t, schedule)
    bt = schedule.beta_tilde(t)
    if h_eps is None or bt == 0.0:
        delta = np.zeros_like(mu)
    else:
        delta = -schedule.delta_coef(t) * np.asarray(h_eps)
    x_prev = mu + delta + bt * np.asarray(z)
    return x_prev, delta


def score_to_eps(score: np.ndarray, t: int, schedule: VpSchedule) -> np.ndarray:
    """Noise-prediction field of a score field: eps = -nu_t * score."""
    return -schedule.nu(t) * np.asarray(score)


def eps_to_score(eps: np.ndarray, t: int, schedule: VpSchedule) -> np.ndarray:
    return -np.asarray(eps) / schedule.nu(t)


@dataclass
class Trajectory:
    """One reverse path; states[t] is x_t, per-step arrays are indexed t-1."""

    states: np.ndarray  # (T+1, d)
    noises: np.ndarray  # (T, d), z used in the t -> t-1 step
    deltas: np.ndarray  # (T, d)
    step_log_rnds: np.ndarray  # (T,)
    log_rnd: float
    step_cost: float  # sum_t 0.5 beta_tilde^-2 ||Delta_t||^2
    reward: float | None = None

    @property
    def x0(self) -> np.ndarray:
        return self.states[0]


@dataclass
class TrajectoryBatch:
    """Batch of reverse paths; full per-step arrays only kept when recorded."""

    x0: np.ndarray  # (n, d)
    log_rnd: np.ndarray  # (n,)
    step_cost: np.ndarray  # (n,), sum_t 0.5 beta_tilde^-2 ||Delta_t||^2
    reward: np.ndarray | None = None
    states: np.ndarray | None = None  # (n, T+1, d)
    noises: np.ndarray | None = None  # (n, T, d)
    deltas: np.ndarray | None = None  # (n, T, d)
    step_log_rnds: np.ndarray | None = None  # (n, T)
    aborted: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.x0)

    @property
    def recorded(self) -> bool:
        return self.states is not None

    def get(self, i: int) -> Trajectory:
        if not self.recorded:
            raise ValueError("batch was sampled without record=True")
        return Trajectory(
            states=self.states[i],
            noises=self.noises[i],
            deltas=self.deltas[i],
            step_log_rnds=self.step_log_rnds[i],
            log_rnd=float(self.log_rnd[i]),
            step_cost=float(self.step_cost[i]),
            reward=None if self.reward is None else float(self.reward[i]),
        )


def sample_guided(
    eps_model,
    h_model,
    n: int,
    schedule: VpSchedule,
    rng: np.random.Generator,
    d: int = 2,
    record: bool = False,
) -> TrajectoryBatch:
    """Sample n paths from x_T ~ N(0, I) down to x_0, streaming log_rnd.

    eps_model and h_model map a batch (n, d) and a time index to (n, d); pass
    h_model=None for the unguided process (log_rnd is then identically 0).
    Chains whose state goes non-finite are dropped from the batch and reported.
    """
    T = schedule.T
    x = rng.standard_normal((n, d))
    log_rnd = np.zeros(n)
    step_cost = np.zeros(n)
    states = noises = deltas = step_log_rnds = None
    if record:
        states = np.empty((n, T + 1, d))
        noises = np.empty((n, T, d))
        deltas = np.empty((n, T, d))
        step_log_rnds = np.empty((n, T))
        states[:, T] = x

    for t in range(T, 0, -1):
        eps_pred = eps_model(x, t)
        bt = schedule.beta_tilde(t)
        z = rng.standard_normal((n, d))
        if h_model is None or bt == 0.0:
            delta = np.zeros_like(x)
        else:
            delta = -schedule.delta_coef(t) * h_model(x, t)
        mu = posterior_mean(x, eps_pred, t, schedule)
        x = mu + delta + bt * z
        if bt > 0.0:
            inc = -0.5 * (delta * delta).sum(axis=1) / bt**2 - (delta * z).sum(axis=1) / bt
            log_rnd += inc
            step_cost += 0.5 * (delta * delta).sum(axis=1) / bt**2
        else:
            inc = np.zeros(n)
        if record:
            states[:, t - 1] = x
            noises[:, t - 1] = z
            deltas[:, t - 1] = delta
            step_log_rnds[:, t - 1] = inc

    finite = np.isfinite(x).all(axis=1) & np.isfinite(log_rnd)
    aborted = np.flatnonzero(~finite)
    if aborted.size:
        warnings.warn(f"aborted {aborted.size} non-finite trajectories: {aborted.tolist()}")
    keep = finite
    return TrajectoryBatch(
        x0=x[keep],
        log_rnd=log_rnd[keep],
        step_cost=step_cost[keep],
        states=None if states is None else states[keep],
        noises=None if noises is None else noises[keep],
        deltas=None if deltas is None else deltas[keep],
        step_log_rnds=None if step_log_rnds is None else step_log_rnds[keep],
        aborted=aborted,
    )


def log_rnd_direct(
    traj: Trajectory | TrajectoryBatch,
    schedule: VpSchedule,
    eps_model=None,
) -> float | np.ndarray:
    """log dP_base/dP_guided by the per-step Gaussian-ratio formula.

    Evaluates -1/(2 beta_tilde^2) [ ||x_{t-1}-mu_theta||^2 - ||x_{t-1}-mu_h||^2 ]
    summed over noisy steps, from the stored states. mu_h is reconstructed as
    x_{t-1} - beta_tilde z; mu_theta = mu_h - Delta_t, or is recomputed from
    eps_model when one is passed (a fully independent cross-check of Delta).
    """
    single = isinstance(traj, Trajectory)
    if single:
        states = traj.states[None]
        noises = traj.noises[None]
        deltas = traj.deltas[None]
    else:
        if not traj.recorded:
            raise ValueError("direct RND needs a recorded batch")
        states, noises, deltas = traj.states, traj.noises, traj.deltas

    T = schedule.T
    total = np.zeros(states.shape[0])
    for t in range(1, T + 1):
        bt = schedule.beta_tilde(t)
        if bt == 0.0:
            continue
        x_prev = states[:, t - 1]
        mu_h = x_prev - bt * noises[:, t - 1]
        if eps_model is None:
            mu_theta = mu_h - deltas[:, t - 1]
        else:
            mu_theta = posterior_mean(states[:, t], eps_model(states[:, t], t), t, schedule)
        q_base = ((x_prev - mu_theta) ** 2).sum(axis=1)
        q_guided = ((x_prev - mu_h) ** 2).sum(axis=1)
        total += -(q_base - q_guided) / (2.0 * bt**2)
    return float(total[0]) if single else total


def trajectory_to_csv(traj: Trajectory, path: str) -> None:
    """Debug dump: one row per step t with state, noise, delta, partial log-RND."""
    d = traj.states.shape[1]
    header = (
        ["t"]
        + [f"x{i}" for i in range(d)]
        + [f"eps{i}" for i in range(d)]
        + [f"delta{i}" for i in range(d)]
        + ["partial_log_rnd"]
    )
    partial = np.cumsum(traj.step_log_rnds[::-1])[::-1]  # sum over steps t..1
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for t in range(len(traj.noises), 0, -1):
            row = (
                [str(t)]
                + [repr(v) for v in traj.states[t]]
                + [repr(v) for v in traj.noises[t - 1]]
                + [repr(v) for v in traj.deltas[t - 1]]
                + [repr(partial[t - 1])]
            )
            f.write(",".join(row) + "\n")
