"""Comparison methods: classifier guidance and online log-variance fine-tuning.

Classifier guidance needs no training: the guidance field is a scaled reward
gradient evaluated at the noisy state. The online baseline trains the same
guidance model by minimizing the empirical variance, over a batch of
trajectories sampled with a frozen copy of the model, of the per-path
statistic log dP_guided/dP_base - reward; gradients flow only through fresh
guidance evaluations at the frozen path states, never through sampling.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .finetune import (
    FinetuneConfig,
    HModel,
    IterationMetrics,
    _h_backward,
    _h_forward_cached,
    init_h_model,
)
from .nets import AdamState, opt_step
from .resample import effective_sample_size
from .sde import TrajectoryBatch, VpSchedule, sample_guided


def classifier_guidance_h(reward_grad, gamma: float, schedule: VpSchedule):
    """Guidance field gamma * grad_reward(x_t) in noise-prediction space."""
    if not np.isfinite(gamma) or gamma < 0:
        raise ValueError("guidance scale must be finite and >= 0")

    def h_eps(x: np.ndarray, t: int) -> np.ndarray:
        return -schedule.nu(t) * gamma * reward_grad(x)

    return h_eps


def classifier_guidance_sample(
    base_eps,
    reward_grad,
    gamma: float,
    n: int,
    schedule: VpSchedule,
    rng: np.random.Generator,
    d: int = 2,
    record: bool = False,
) -> TrajectoryBatch:
    """Guided sampling with the scaled reward gradient; gamma=0 is the base sampler."""
    h = classifier_guidance_h(reward_grad, gamma, schedule) if gamma != 0.0 else None
    return sample_guided(base_eps, h, n, schedule, rng, d=d, record=record)


def _vargrad_statistic(
    model: HModel, traj: TrajectoryBatch, rewards: np.ndarray, schedule: VpSchedule
):
    """Per-path statistic and the per-step pieces needed for its gradient.

    S_i = sum_t [ -1/(2 bt^2) ||D_h||^2 + 1/bt^2 D_g . D_h + 1/bt D_h . z ] - r_i,
    with D_h the differentiable mean shift at the frozen states and D_g the
    shift actually used during sampling.
    """
    n = len(traj)
    T = schedule.T
    S = -np.asarray(rewards, dtype=np.float64).copy()
    deltas_h = np.empty((n, T, traj.x0.shape[1]))
    for t in range(1, T + 1):
        bt = schedule.beta_tilde(t)
        if bt == 0.0:
            deltas_h[:, t - 1] = 0.0
            continue
        x_t = traj.states[:, t]
        d_h = -schedule.delta_coef(t) * model(x_t, t)
        d_g = traj.deltas[:, t - 1]
        z = traj.noises[:, t - 1]
        S += (
            -0.5 * (d_h * d_h).sum(axis=1) / bt**2
            + (d_g * d_h).sum(axis=1) / bt**2
            + (d_h * z).sum(axis=1) / bt
        )
        deltas_h[:, t - 1] = d_h
    return S, deltas_h


def vargrad_loss(
    model: HModel,
    traj: TrajectoryBatch,
    rewards: np.ndarray,
    schedule: VpSchedule,
    with_grads: bool = True,
) -> tuple[float, list[np.ndarray] | None]:
    """Empirical variance of the per-path statistic, with guidance-parameter gradients.

    The trajectory batch must be recorded and sampled with a detached copy of
    the guidance (or any fixed reference process).
    """
    if not traj.recorded:
        raise ValueError("variance loss needs recorded trajectories")
    n = len(traj)
    if n < 2:
        raise ValueError("variance loss needs a batch of at least 2 trajectories")
    S, deltas_h = _vargrad_statistic(model, traj, rewards, schedule)
    s_mean = S.mean()
    loss = float(((S - s_mean) ** 2).sum() / (n - 1))
    if not with_grads:
        return loss, None
    dS = 2.0 / (n - 1) * (S - s_mean)  # dVar/dS_i

    grads: list[np.ndarray] | None = None
    for t in range(1, schedule.T + 1):
        bt = schedule.beta_tilde(t)
        if bt == 0.0:
            continue
        x_t = traj.states[:, t]
        _, g, cache1, cache2 = _h_forward_cached(model, x_t, t)
        d_h = deltas_h[:, t - 1]
        d_g = traj.deltas[:, t - 1]
        z = traj.noises[:, t - 1]
        dS_ddh = -d_h / bt**2 + d_g / bt**2 + z / bt
        cot = dS[:, None] * dS_ddh * (-schedule.delta_coef(t))
        step_grads = _h_backward(model, cot, g, cache1, cache2)
        grads = step_grads if grads is None else [a + b for a, b in zip(grads, step_grads)]
    return loss, grads


@dataclass
class OnlineConfig:
    outer_steps: int = 40
    inner_steps: int = 20
    n_paths: int = 1024
    learning_rate: float = 1e-3
    hidden: int = 64
    n_freqs: int = 8
    spatial_freqs: int = 5
    activation: str = "tanh"
    guidance_clip: float = 6.0
    dim: int = 2


def run_online_finetune(
    cfg: OnlineConfig,
    base_eps,
    reward_fn,
    reward_grad,
    schedule: VpSchedule,
    master_seed: int,
    model: HModel | None = None,
    callback=None,
) -> tuple[HModel, list[IterationMetrics]]:
    """Online variance-loss fine-tuning with detached trajectory sampling."""
    t_start = _time.monotonic()
    if model is None:
        model = init_h_model(
            base_eps,
            reward_grad,
            schedule,
            rngmod.stream(master_seed, "init"),
            d=cfg.dim,
            hidden=cfg.hidden,
            n_freqs=cfg.n_freqs,
            spatial_freqs=cfg.spatial_freqs,
            activation=cfg.activation,
            guidance_clip=cfg.guidance_clip,
        )
    opt = AdamState(lr=cfg.learning_rate)
    history: list[IterationMetrics] = []
    for k in range(1, cfg.outer_steps + 1):
        batch = sample_guided(
            base_eps,
            model,
            cfg.n_paths,
            schedule,
            rngmod.stream(master_seed, "sample", k),
            d=cfg.dim,
            record=True,
        )
        rewards = np.asarray(reward_fn(batch.x0), dtype=np.float64)
        loss_sum = 0.0
        for _ in range(cfg.inner_steps):
            loss, grads = vargrad_loss(model, batch, rewards, schedule)
            opt_step(opt, model.params(), grads)
            loss_sum += loss
        lw = rewards + batch.log_rnd
        f_i = batch.step_cost - rewards
        history.append(
            IterationMetrics(
                iteration=k,
                n_sampled=len(batch),
                n_accepted=len(batch),
                accept_rate=1.0,
                log_c=float("nan"),
                mean_log_weight=float(lw.mean()),
                max_log_weight=float(lw.max()),
                ess=effective_sample_size(lw),
                mean_reward=float(rewards.mean()),
                kl_hat=float(batch.step_cost.mean()),
                f_hat=float(f_i.mean()),
                buffer_fill=0,
                train_loss=loss_sum / cfg.inner_steps,
                wallclock=_time.monotonic() - t_start,
            )
        )
        if callback is not None:
            callback(k, model, history[-1])
    return model, history
