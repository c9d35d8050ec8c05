"""Experiment configuration: TOML round-trip, presets, and config hashing."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .baselines import OnlineConfig
from .finetune import FinetuneConfig
from .gmm import IsotropicGmm, TiltedSpec
from .metrics import GridSpec
from .pretrain import PretrainConfig


@dataclass
class MixtureSpec:
    """Serializable mixture: weights, row-major flattened means, variances."""

    weights: list[float]
    means_flat: list[float]
    variances: list[float]
    dim: int = 2

    def build(self) -> IsotropicGmm:
        means = np.asarray(self.means_flat, dtype=np.float64).reshape(-1, self.dim)
        return IsotropicGmm(
            weights=np.asarray(self.weights), means=means, variances=np.asarray(self.variances)
        )

    @classmethod
    def from_gmm(cls, g: IsotropicGmm) -> "MixtureSpec":
        return cls(
            weights=[float(w) for w in g.weights],
            means_flat=[float(v) for v in g.means.ravel()],
            variances=[float(v) for v in g.variances],
            dim=g.dim,
        )


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 0.1
    beta_max: float = 20.0


@dataclass
class BaselineConfig:
    cg_gamma: float = 0.3
    online: OnlineConfig = field(default_factory=OnlineConfig)


@dataclass
class EvalConfig:
    grid_lo: float = -4.0
    grid_hi: float = 4.0
    grid_res: int = 100
    n_samples: int = 20000
    mode_radius: float = 0.5

    def grid(self) -> GridSpec:
        return GridSpec(lo=self.grid_lo, hi=self.grid_hi, res=self.grid_res)


@dataclass
class RunConfig:
    name: str = "paper-toy"
    base_model: str = "analytic"  # analytic | learned
    seed: int = 0
    out_dir: str = "out"
    reward_sign: float = 1.0
    reward_temperature: float = 1.0
    prior: MixtureSpec = field(default_factory=lambda: _paper_prior())
    reward: MixtureSpec = field(default_factory=lambda: _paper_reward())
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if self.base_model not in ("analytic", "learned"):
            raise ValueError("base_model must be 'analytic' or 'learned'")
        if self.schedule.T < 1:
            raise ValueError("schedule T must be >= 1")

    def tilted_spec(self) -> TiltedSpec:
        return TiltedSpec(
            prior=self.prior.build(),
            reward_mixture=self.reward.build(),
            temperature=self.reward_temperature,
            sign=self.reward_sign,
        )

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=float)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def _paper_prior() -> MixtureSpec:
    axis = [-2.5, -1.25, 0.0, 1.25, 2.5]
    means = [float(v) for a in axis for b in axis for v in (a, b)]
    return MixtureSpec(weights=[1.0 / 25.0] * 25, means_flat=means, variances=[0.1] * 25)


def _paper_reward() -> MixtureSpec:
    means = [-2.5, 1.25, -1.25, 2.5, 1.25, 0.0, 2.5, -1.25]
    return MixtureSpec(
        weights=[1 / 8, 1 / 8, 5 / 8, 1 / 8], means_flat=means, variances=[0.1] * 4
    )


def paper_toy_config(seed: int = 0) -> RunConfig:
    """Full toy preset: batch 4096, buffer 6000, 40x200 steps, 30% rejection, T=1000."""
    return RunConfig(name="paper-toy", seed=seed)


def reduced_config(seed: int = 0) -> RunConfig:
    """Fast preset: batch 512, T=100; same loop structure as the full toy run.

    The buffer scales with the batch so the replay churn matches the full
    preset (roughly two outer iterations of accepted samples).
    """
    cfg = RunConfig(name="reduced-toy", seed=seed)
    cfg.schedule.T = 100
    cfg.finetune.n_paths = 512
    cfg.finetune.batch_size = 512
    cfg.finetune.buffer_capacity = 750
    cfg.baseline.online = OnlineConfig(outer_steps=40, inner_steps=20, n_paths=512)
    return cfg


def demo_config(seed: int = 0) -> RunConfig:
    cfg = reduced_config(seed)
    cfg.name = "demo"
    cfg.finetune.outer_steps = 10
    cfg.finetune.inner_steps = 80
    cfg.finetune.n_paths = 256
    cfg.finetune.batch_size = 256
    cfg.finetune.buffer_capacity = 2000
    cfg.eval.n_samples = 5000
    return cfg


PRESETS = {
    "paper_toy": paper_toy_config,
    "reduced": reduced_config,
    "demo": demo_config,
}


def _to_tables(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    # flatten nested baseline.online into its own table for TOML readability
    return d


def _toml_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return json.dumps(v)
    raise TypeError(f"cannot serialize {type(v)} to TOML")


def _emit_table(name: str, table: dict, out: list[str]) -> None:
    scalars = {k: v for k, v in table.items() if not isinstance(v, dict)}
    subtables = {k: v for k, v in table.items() if isinstance(v, dict)}
    if name:
        out.append(f"[{name}]")
    for k, v in scalars.items():
        if isinstance(v, (list, tuple)):
            body = ", ".join(_toml_scalar(x) for x in v)
            out.append(f"{k} = [{body}]")
        else:
            out.append(f"{k} = {_toml_scalar(v)}")
    if name:
        out.append("")
    for k, v in subtables.items():
        _emit_table(f"{name}.{k}" if name else k, v, out)


def dumps_toml(cfg: RunConfig) -> str:
    tables = _to_tables(cfg)
    out: list[str] = []
    _emit_table("", {k: v for k, v in tables.items() if not isinstance(v, dict)}, out)
    out.append("")
    for k, v in tables.items():
        if isinstance(v, dict):
            _emit_table(k, v, out)
    return "\n".join(out) + "\n"


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# config_hash = {cfg.hash()}\n")
        f.write(dumps_toml(cfg))


def _update_dataclass(obj, data: dict) -> None:
    for k, v in data.items():
        if not hasattr(obj, k):
            raise KeyError(f"unknown config key {k!r} for {type(obj).__name__}")
        cur = getattr(obj, k)
        if isinstance(v, dict):
            _update_dataclass(cur, v)
        else:
            setattr(obj, k, v)


def load_config(path: str) -> RunConfig:
    with open(path, "rb") as f:
        data = tomllib.load(f)
    preset = data.pop("preset", None)
    cfg = PRESETS[preset]() if preset else RunConfig()
    for key in ("prior", "reward"):
        if key in data:
            spec = data.pop(key)
            setattr(
                cfg,
                key,
                MixtureSpec(
                    weights=list(spec["weights"]),
                    means_flat=list(spec["means_flat"]),
                    variances=list(spec["variances"]),
                    dim=int(spec.get("dim", 2)),
                ),
            )
    _update_dataclass(cfg, data)
    cfg.__post_init__()
    return cfg
