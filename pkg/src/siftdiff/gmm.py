"""Closed-form calculus for weighted mixtures of isotropic Gaussians.

The testbed keeps every distribution in this family: the data prior, the
reward mixture, their product (the reward-tilted target), and every diffused
marginal. That closure is what makes the exact guidance field available as an
oracle: at noise level t it is the score of the diffused tilted mixture minus
the score of the diffused prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sde import VpSchedule


@dataclass(frozen=True)
class IsotropicGmm:
    weights: np.ndarray  # (K,) on the probability simplex
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K,) > 0, covariance v_k * I

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "variances", np.asarray(self.variances, dtype=np.float64))
        if self.means.ndim != 2:
            raise ValueError("means must be (K, d)")
        K = self.means.shape[0]
        if self.weights.shape != (K,) or self.variances.shape != (K,):
            raise ValueError("weights/variances must be (K,)")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("weights must lie on the probability simplex")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _component_logpdfs(g: IsotropicGmm, x: np.ndarray) -> np.ndarray:
    """log w_k + log N(x; mu_k, v_k I) as an (n, K) array."""
    d = g.dim
    diff = x[:, None, :] - g.means[None]
    sq = (diff * diff).sum(axis=2)
    return (
        np.log(g.weights)[None]
        - 0.5 * d * np.log(2.0 * np.pi * g.variances)[None]
        - sq / (2.0 * g.variances)[None]
    )


def _promote(x: np.ndarray, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != d:
            raise ValueError(f"point dim {x.shape[0]} != mixture dim {d}")
        return x[None], True
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"points must be (n, {d})")
    return x, False


def gmm_logpdf(g: IsotropicGmm, x: np.ndarray) -> float | np.ndarray:
    """Log density, log-sum-exp stabilized; finite for all finite x."""
    pts, single = _promote(x, g.dim)
    lp = _component_logpdfs(g, pts)
    mx = lp.max(axis=1, keepdims=True)
    out = mx[:, 0] + np.log(np.exp(lp - mx).sum(axis=1))
    return float(out[0]) if single else out


def gmm_score(g: IsotropicGmm, x: np.ndarray) -> np.ndarray:
    """Gradient of the log density via responsibilities: sum_k r_k (mu_k - x)/v_k."""
    pts, single = _promote(x, g.dim)
    lp = _component_logpdfs(g, pts)
    mx = lp.max(axis=1, keepdims=True)
    resp = np.exp(lp - mx)
    resp /= resp.sum(axis=1, keepdims=True)
    pull = (g.means[None] - pts[:, None, :]) / g.variances[None, :, None]
    out = (resp[:, :, None] * pull).sum(axis=1)
    return out[0] if single else out


def gmm_sample(g: IsotropicGmm, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. draws; component chosen by weight, then an isotropic Gaussian."""
    if n < 1:
        raise ValueError("n must be >= 1")
    comp = rng.choice(g.n_components, size=n, p=g.weights)
    eps = rng.standard_normal((n, g.dim))
    return g.means[comp] + np.sqrt(g.variances[comp])[:, None] * eps


def gmm_diffuse(g: IsotropicGmm, gamma_t: float, nu_t: float) -> IsotropicGmm:
    """Marginal of gamma_t x0 + nu_t z for x0 ~ g: means scale, variances shear up."""
    if not 0.0 < gamma_t <= 1.0 or not 0.0 <= nu_t < 1.0:
        raise ValueError("need gamma_t in (0,1] and nu_t in [0,1)")
    return IsotropicGmm(
        weights=g.weights,
        means=gamma_t * g.means,
        variances=gamma_t**2 * g.variances + nu_t**2,
    )


def gmm_product(a: IsotropicGmm, b: IsotropicGmm) -> IsotropicGmm:
    """Normalized product density of two mixtures (a mixture over component pairs)."""
    if a.dim != b.dim:
        raise ValueError("mixtures must share a dimension")
    d = a.dim
    va, vb = a.variances[:, None], b.variances[None, :]
    v = (va * vb) / (va + vb)
    mu = (
        a.means[:, None, :] * (vb / (va + vb))[:, :, None]
        + b.means[None, :, :] * (va / (va + vb))[:, :, None]
    )
    sq = ((a.means[:, None, :] - b.means[None, :, :]) ** 2).sum(axis=2)
    logw = (
        np.log(a.weights)[:, None]
        + np.log(b.weights)[None, :]
        - 0.5 * d * np.log(2.0 * np.pi * (va + vb))
        - sq / (2.0 * (va + vb))
    )
    logw = logw.ravel()
    logw -= logw.max()
    w = np.exp(logw)
    return IsotropicGmm(weights=w / w.sum(), means=mu.reshape(-1, d), variances=v.ravel())


@dataclass(frozen=True)
class TiltedSpec:
    """Prior mixture tilted by exp(reward), reward = sign * log reward-mixture density / temperature.

    temperature folds into the reward; the closed-form tilted mixture (and the
    exact guidance oracle built on it) exists only for temperature 1 with the
    positive sign, where prior * exp(reward) is again a mixture.
    """

    prior: IsotropicGmm
    reward_mixture: IsotropicGmm
    temperature: float = 1.0
    sign: float = 1.0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.sign not in (-1.0, 1.0):
            raise ValueError("sign must be +1 or -1")

    def reward(self, x: np.ndarray) -> float | np.ndarray:
        return self.sign / self.temperature * gmm_logpdf(self.reward_mixture, x)

    def reward_grad(self, x: np.ndarray) -> np.ndarray:
        return self.sign / self.temperature * gmm_score(self.reward_mixture, x)

    @property
    def has_exact_tilted(self) -> bool:
        return self.temperature == 1.0 and self.sign == 1.0

    def tilted(self) -> IsotropicGmm:
        if not self.has_exact_tilted:
            raise ValueError(
                "closed-form tilted mixture requires temperature=1 and positive sign"
            )
        return gmm_product(self.prior, self.reward_mixture)


def oracle_h(spec: TiltedSpec, schedule: VpSchedule, t: int, x: np.ndarray) -> np.ndarray:
    """Exact guidance field in score space at discrete time t.

    Equals score(diffused tilted, x) - score(diffused prior, x); adding it to
    the prior score turns the reverse process into one whose terminal law is
    the tilted mixture.
    """
    if not spec.has_exact_tilted:
        raise ValueError("exact guidance oracle requires temperature=1 and positive sign")
    gamma_t, nu_t = schedule.gamma(t), schedule.nu(t)
    tilted_t = gmm_diffuse(spec.tilted(), gamma_t, nu_t)
    prior_t = gmm_diffuse(spec.prior, gamma_t, nu_t)
    return gmm_score(tilted_t, x) - gmm_score(prior_t, x)


def analytic_eps_model(g: IsotropicGmm, schedule: VpSchedule):
    """Exact noise-prediction model for g: eps(x, t) = -nu_t * score of the diffused mixture."""
    cache: dict[int, IsotropicGmm] = {}

    def eps(x: np.ndarray, t: int) -> np.ndarray:
        diffused = cache.get(t)
        if diffused is None:
            diffused = gmm_diffuse(g, schedule.gamma(t), schedule.nu(t))
            cache[t] = diffused
        return -schedule.nu(t) * gmm_score(diffused, x)

    return eps


def oracle_h_eps_model(spec: TiltedSpec, schedule: VpSchedule):
    """Exact guidance field in noise-prediction space: -nu_t * oracle score-space field."""
    if not spec.has_exact_tilted:
        raise ValueError("exact guidance oracle requires temperature=1 and positive sign")
    tilted_cache: dict[int, IsotropicGmm] = {}
    prior_cache: dict[int, IsotropicGmm] = {}
    tilted = spec.tilted()

    def h_eps(x: np.ndarray, t: int) -> np.ndarray:
        a = tilted_cache.get(t)
        b = prior_cache.get(t)
        if a is None:
            a = gmm_diffuse(tilted, schedule.gamma(t), schedule.nu(t))
            b = gmm_diffuse(spec.prior, schedule.gamma(t), schedule.nu(t))
            tilted_cache[t], prior_cache[t] = a, b
        return -schedule.nu(t) * (gmm_score(a, x) - gmm_score(b, x))

    return h_eps


def paper_toy_spec(sign: float = 1.0, temperature: float = 1.0) -> TiltedSpec:
    """The 2D testbed: 25-mode lattice prior, 4-mode reward mixture.

    Prior modes sit on {-2.5,-1.25,0,1.25,2.5}^2 with equal weights and
    variance 0.1; the reward mixture has modes (-2.5,1.25), (-1.25,2.5),
    (1.25,0), (2.5,-1.25) with weights 1/8, 1/8, 5/8, 1/8 and variance 0.1.
    """
    axis = np.array([-2.5, -1.25, 0.0, 1.25, 2.5])
    prior_means = np.array([[a, b] for a in axis for b in axis])
    prior = IsotropicGmm(
        weights=np.full(25, 1.0 / 25.0),
        means=prior_means,
        variances=np.full(25, 0.1),
    )
    reward = IsotropicGmm(
        weights=np.array([1.0, 1.0, 5.0, 1.0]) / 8.0,
        means=np.array([[-2.5, 1.25], [-1.25, 2.5], [1.25, 0.0], [2.5, -1.25]]),
        variances=np.full(4, 0.1),
    )
    return TiltedSpec(prior=prior, reward_mixture=reward, temperature=temperature, sign=sign)
