"""Reward-informed guidance model and the self-supervised fine-tuning loop.

The guidance model predicts, in noise-prediction space,

    h(x_t, t) = NN1(x_t, time) + NN2(time) * (-nu_t) * grad_reward(x0_hat),

where x0_hat is the denoised (Tweedie) estimate under the frozen base model.
The reward-gradient feature carries no parameter gradient; both final layers
start at zero so fine-tuning begins exactly at the base sampler.

The outer loop alternates sampling with the current guidance, relaxed
rejection on path importance weights, and inner denoising-matching updates on
a replay buffer of accepted terminal samples.
"""

from __future__ import annotations

import time as _time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .nets import (
    AdamState,
    DenseNet,
    SpatialFeature,
    TimeFeature,
    init_dense,
    net_backward,
    net_forward,
    net_forward_cached,
    opt_step,
)
from .resample import (
    ReplayBuffer,
    acceptance_probability,
    adaptive_log_c,
    effective_sample_size,
    rejection_mask,
)
from .sde import VpSchedule, forward_noise, sample_guided, tweedie


@dataclass
class HModel:
    """Two-network guidance head over a frozen base noise model."""

    nn1: DenseNet  # (spatial features of x_t + time features) -> d
    nn2: DenseNet  # time features -> 1 (scalar gate)
    time_feature: TimeFeature
    spatial_feature: SpatialFeature
    base_eps: "callable"
    reward_grad: "callable"
    schedule: VpSchedule
    guidance_clip: float = 6.0  # box for the denoised estimate inside the guidance term

    @property
    def dim(self) -> int:
        return self.nn1.out_dim

    def t_bar(self, t: int) -> float:
        return t / self.schedule.T

    def features(self, x: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        """(NN1 input, NN2 input) for a batch at time t."""
        n = len(x)
        tf = np.broadcast_to(self.time_feature(self.t_bar(t)), (n, self.time_feature.dim))
        return np.concatenate([self.spatial_feature(x), tf], axis=1), np.array(tf)

    def guidance(self, x: np.ndarray, t: int) -> np.ndarray:
        """Reward-gradient feature in noise-prediction space; no parameter gradient."""
        x0_hat = tweedie(x, self.base_eps(x, t), t, self.schedule)
        if self.guidance_clip is not None:
            x0_hat = np.clip(x0_hat, -self.guidance_clip, self.guidance_clip)
        return -self.schedule.nu(t) * self.reward_grad(x0_hat)

    def __call__(self, x: np.ndarray, t: int) -> np.ndarray:
        in1, in2 = self.features(x, t)
        gate = net_forward(self.nn2, in2)
        return net_forward(self.nn1, in1) + gate * self.guidance(x, t)

    def params(self) -> list[np.ndarray]:
        return self.nn1.params() + self.nn2.params()

    def max_delta_norm(self, x: np.ndarray, t: int) -> float:
        bt = self.schedule.beta_tilde(t)
        if bt == 0.0:
            return 0.0
        return float(
            np.max(np.linalg.norm(self.schedule.delta_coef(t) * self(x, t), axis=-1))
        )


def init_h_model(
    base_eps,
    reward_grad,
    schedule: VpSchedule,
    rng: np.random.Generator,
    d: int = 2,
    hidden: int = 64,
    n_freqs: int = 8,
    spatial_freqs: int = 5,
    activation: str = "tanh",
    guidance_clip: float = 6.0,
) -> HModel:
    """Fresh guidance model; both heads output exactly zero at initialization."""
    tf = TimeFeature(n_freqs=n_freqs)
    sf = SpatialFeature(n_freqs=spatial_freqs)
    nn1 = init_dense([sf.dim(d) + tf.dim, hidden, hidden, d], activation, rng, zero_final=True)
    nn2 = init_dense([tf.dim, hidden, 1], activation, rng, zero_final=True)
    return HModel(
        nn1=nn1,
        nn2=nn2,
        time_feature=tf,
        spatial_feature=sf,
        base_eps=base_eps,
        reward_grad=reward_grad,
        schedule=schedule,
        guidance_clip=guidance_clip,
    )


def h_eval(model: HModel, x: np.ndarray, t: int) -> np.ndarray:
    """Guidance in noise-prediction space at time t."""
    return model(x, t)


def _h_forward_cached(model: HModel, x: np.ndarray, t: int):
    in1, in2 = model.features(x, t)
    out1, cache1 = net_forward_cached(model.nn1, in1)
    gate, cache2 = net_forward_cached(model.nn2, in2)
    g = model.guidance(x, t)
    return out1 + gate * g, g, cache1, cache2


def _h_backward(model: HModel, cot: np.ndarray, g: np.ndarray, cache1, cache2):
    """Parameter gradients of <h, cot>; the guidance feature g is a constant."""
    grads1, _ = net_backward(model.nn1, cache1, cot)
    grads2, _ = net_backward(model.nn2, cache2, (cot * g).sum(axis=1, keepdims=True))
    return grads1 + grads2


def ft_loss(
    model: HModel,
    x0_batch: np.ndarray,
    rng: np.random.Generator,
    schedule: VpSchedule,
    per_element_t: bool = False,
) -> tuple[float, list[np.ndarray]]:
    """Denoising-matching loss on buffer samples, with parameter gradients.

    Draws one shared t (or per-element t), noises x0, and penalizes
    mean ||(base_eps + h)(x_t) - eps||^2. Gradients flow only into the
    guidance networks; the base model is frozen.
    """
    x0 = np.atleast_2d(x0_batch)
    n, d = x0.shape
    T = schedule.T
    eps = rng.standard_normal((n, d))
    if per_element_t:
        ts = rng.integers(1, T + 1, size=n)
        loss = 0.0
        grads: list[np.ndarray] | None = None
        for t in np.unique(ts):
            sel = ts == t
            l_t, g_t = _ft_loss_at_t(model, x0[sel], eps[sel], int(t), schedule, n)
            loss += l_t
            grads = g_t if grads is None else [a + b for a, b in zip(grads, g_t)]
        return loss, grads
    t = int(rng.integers(1, T + 1))
    return _ft_loss_at_t(model, x0, eps, t, schedule, n)


def _ft_loss_at_t(model, x0, eps, t, schedule, n_total):
    x_t = forward_noise(x0, t, eps, schedule)
    base = model.base_eps(x_t, t)
    h, g, cache1, cache2 = _h_forward_cached(model, x_t, t)
    resid = base + h - eps
    loss = float((resid * resid).sum() / n_total)
    cot = 2.0 * resid / n_total
    return loss, _h_backward(model, cot, g, cache1, cache2)


def kl_reg(
    model: HModel,
    x0_batch: np.ndarray,
    rng: np.random.Generator,
    schedule: VpSchedule,
    t: int | None = None,
    eps: np.ndarray | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Single-timestep estimator of the trajectory cost sum_t 0.5 bt^-2 ||Delta_t||^2.

    Draws t uniform in 1..T (unless pinned), noises x0, and returns
    T * mean_i 0.5 beta_tilde_t^-2 ||Delta(x_t, t)||^2 with gradients for the
    guidance parameters; deterministic steps contribute zero. No gradient
    flows through x_t.
    """
    x0 = np.atleast_2d(x0_batch)
    n, d = x0.shape
    T = schedule.T
    if t is None:
        t = int(rng.integers(1, T + 1))
    if eps is None:
        eps = rng.standard_normal((n, d))
    bt = schedule.beta_tilde(t)
    if bt == 0.0:
        zero = [np.zeros_like(p) for p in model.params()]
        return 0.0, zero
    x_t = forward_noise(x0, t, eps, schedule)
    h, g, cache1, cache2 = _h_forward_cached(model, x_t, t)
    coef = schedule.delta_coef(t)
    scale = T * 0.5 * coef**2 / bt**2
    value = float(scale * (h * h).sum() / n)
    cot = (2.0 * scale / n) * h
    return value, _h_backward(model, cot, g, cache1, cache2)


def kl_sum_exact(
    model: HModel, x0_batch: np.ndarray, eps: np.ndarray, schedule: VpSchedule
) -> float:
    """Exact sum over all steps of the single-t estimator's target (fixed noise)."""
    x0 = np.atleast_2d(x0_batch)
    total = 0.0
    for t in range(1, schedule.T + 1):
        bt = schedule.beta_tilde(t)
        if bt == 0.0:
            continue
        x_t = forward_noise(x0, t, eps, schedule)
        h = model(x_t, t)
        coef = schedule.delta_coef(t)
        total += float(0.5 * coef**2 / bt**2 * (h * h).sum() / len(x0))
    return total


@dataclass
class FinetuneConfig:
    outer_steps: int = 40
    inner_steps: int = 200
    n_paths: int = 4096
    batch_size: int = 4096
    buffer_capacity: int = 6000
    accept_rate: float | list[float] = 0.7
    kl_weight: float = 0.2
    learning_rate: float = 1e-3
    hidden: int = 64
    n_freqs: int = 8
    spatial_freqs: int = 5
    activation: str = "tanh"
    guidance_clip: float = 6.0
    per_element_t: bool = False
    preseed_buffer: bool = True
    weight_mode: str = "importance"  # importance | reward_only
    kl_t_scaled: bool = False
    dim: int = 2

    def __post_init__(self) -> None:
        for name in ("outer_steps", "inner_steps", "n_paths", "batch_size", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size must not exceed buffer_capacity")
        if self.weight_mode not in ("importance", "reward_only"):
            raise ValueError("weight_mode must be 'importance' or 'reward_only'")

    def rate_at(self, k: int) -> float:
        """Acceptance rate for outer iteration k (1-based)."""
        if isinstance(self.accept_rate, (int, float)):
            return float(self.accept_rate)
        return float(self.accept_rate[min(k - 1, len(self.accept_rate) - 1)])


@dataclass
class IterationMetrics:
    iteration: int
    n_sampled: int
    n_accepted: int
    accept_rate: float
    log_c: float
    mean_log_weight: float
    max_log_weight: float
    ess: float
    mean_reward: float
    kl_hat: float
    f_hat: float
    buffer_fill: int
    train_loss: float
    wallclock: float


def run_finetune(
    cfg: FinetuneConfig,
    base_eps,
    reward_fn,
    reward_grad,
    schedule: VpSchedule,
    master_seed: int,
    model: HModel | None = None,
    callback=None,
) -> tuple[HModel, list[IterationMetrics]]:
    """Self-supervised importance fine-tuning (outer sampling / inner updates).

    Per outer iteration: sample n_paths with the current guidance while
    streaming log-RND, threshold the log weights at the batch quantile for the
    configured acceptance rate, keep paths by relaxed rejection, push accepted
    terminals to the buffer, then run inner_steps denoising-matching updates
    (plus the weighted single-step cost regularizer) on buffer batches.
    """
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
    buffer = ReplayBuffer(cfg.buffer_capacity, dim=cfg.dim)

    if cfg.preseed_buffer:
        seed_batch = sample_guided(
            base_eps, None, cfg.n_paths, schedule, rngmod.stream(master_seed, "preseed"), d=cfg.dim
        )
        buffer.push(seed_batch.x0)

    history: list[IterationMetrics] = []
    for k in range(1, cfg.outer_steps + 1):
        batch = sample_guided(
            base_eps, model, cfg.n_paths, schedule, rngmod.stream(master_seed, "sample", k), d=cfg.dim
        )
        rewards = np.asarray(reward_fn(batch.x0), dtype=np.float64)
        if cfg.weight_mode == "importance":
            lw = rewards + batch.log_rnd
        else:
            lw = rewards.copy()
        rate = cfg.rate_at(k)
        log_c = adaptive_log_c(lw, rate)
        mask = rejection_mask(lw, log_c, rngmod.stream(master_seed, "reject", k))
        accepted = batch.x0[mask]
        if len(accepted) == 0 and len(buffer) == 0:
            warnings.warn("empty buffer after rejection; falling back to top weights")
            top = np.argsort(lw)[::-1][: max(1, int(np.ceil(rate * len(lw))))]
            accepted = batch.x0[top]
        buffer.push(accepted)

        inner_rng = rngmod.stream(master_seed, "inner", k)
        # The regularizer weight multiplies the one-step cost sample directly;
        # against the T-scaled path-KL estimator, weight 0.2 flattens the
        # late-denoising corrections and the run never leaves the base model.
        kl_w = cfg.kl_weight * (1.0 if cfg.kl_t_scaled else 1.0 / schedule.T)
        loss_sum = 0.0
        for _ in range(cfg.inner_steps):
            xb = buffer.sample(cfg.batch_size, inner_rng)
            loss, grads = ft_loss(model, xb, inner_rng, schedule, cfg.per_element_t)
            if kl_w > 0.0:
                kl_val, kl_grads = kl_reg(model, xb, inner_rng, schedule)
                loss += kl_w * kl_val
                grads = [a + kl_w * b for a, b in zip(grads, kl_grads)]
            opt_step(opt, model.params(), grads)
            loss_sum += loss

        f_i = batch.step_cost - rewards
        row = IterationMetrics(
            iteration=k,
            n_sampled=len(batch),
            n_accepted=int(mask.sum()),
            accept_rate=float(mask.mean()),
            log_c=float(log_c),
            mean_log_weight=float(lw.mean()),
            max_log_weight=float(lw.max()),
            ess=effective_sample_size(lw),
            mean_reward=float(rewards.mean()),
            kl_hat=float(batch.step_cost.mean()),
            f_hat=float(f_i.mean()),
            buffer_fill=len(buffer),
            train_loss=loss_sum / cfg.inner_steps,
            wallclock=_time.monotonic() - t_start,
        )
        history.append(row)
        if callback is not None:
            callback(k, model, row)
    return model, history


def rejection_alphas(log_weights: np.ndarray, rate: float) -> np.ndarray:
    """Acceptance probabilities for a batch under the adaptive threshold."""
    return acceptance_probability(log_weights, adaptive_log_c(log_weights, rate))
