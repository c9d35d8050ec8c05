"""Denoising-matching pretraining of a base noise model on exact prior samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .gmm import IsotropicGmm, gmm_sample
from .nets import (
    AdamState,
    DenseNet,
    TimeFeature,
    init_dense,
    net_backward,
    net_forward,
    net_forward_cached,
    opt_step,
)
from .sde import VpSchedule


@dataclass
class PretrainConfig:
    steps: int = 20000
    batch_size: int = 256
    learning_rate: float = 1e-3
    hidden: int = 128
    n_freqs: int = 8
    activation: str = "tanh"
    dim: int = 2


def eps_net_model(net: DenseNet, time_feature: TimeFeature, T: int):
    """Wrap a trained net as an (x, t) -> eps callable."""

    def eps(x: np.ndarray, t: int) -> np.ndarray:
        n = len(x)
        tf = np.broadcast_to(time_feature(t / T), (n, time_feature.dim))
        return net_forward(net, np.concatenate([x, tf], axis=1))

    return eps


def train_eps_net(
    prior: IsotropicGmm,
    schedule: VpSchedule,
    cfg: PretrainConfig,
    master_seed: int,
) -> tuple[DenseNet, TimeFeature, list[float]]:
    """Minimize mean ||eps_hat(gamma_t x0 + nu_t eps, t) - eps||^2 with per-element t.

    Returns the net, its time featurizer, and the loss curve. Aborts on a
    non-finite loss.
    """
    tf = TimeFeature(n_freqs=cfg.n_freqs)
    net_rng = rngmod.stream(master_seed, "pretrain", "init")
    net = init_dense(
        [cfg.dim + tf.dim, cfg.hidden, cfg.hidden, cfg.dim], cfg.activation, net_rng
    )
    opt = AdamState(lr=cfg.learning_rate)
    data_rng = rngmod.stream(master_seed, "pretrain", "data")
    T = schedule.T
    losses: list[float] = []
    gammas = schedule.gammas
    nus = schedule.nus
    for step in range(cfg.steps):
        x0 = gmm_sample(prior, cfg.batch_size, data_rng)
        ts = data_rng.integers(1, T + 1, size=cfg.batch_size)
        eps = data_rng.standard_normal(x0.shape)
        x_t = gammas[ts - 1][:, None] * x0 + nus[ts - 1][:, None] * eps
        feats = np.concatenate([x_t, tf(ts / T)], axis=1)
        pred, cache = net_forward_cached(net, feats)
        resid = pred - eps
        loss = float((resid * resid).sum() / cfg.batch_size)
        if not np.isfinite(loss):
            raise FloatingPointError(f"pretraining diverged at step {step}")
        grads, _ = net_backward(net, cache, 2.0 * resid / cfg.batch_size)
        opt_step(opt, net.params(), grads)
        losses.append(loss)
    return net, tf, losses
