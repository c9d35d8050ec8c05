"""Experiment driver: configuration, seeding, subcommands, artifact layout.

Output tree per run: out/<name>/{config.toml, metrics.csv, report.json,
figures/*.ppm, checkpoints/*}. Every CSV row and JSON report embeds the
config hash and master seed; rerunning a subcommand with the same config and
seed reproduces all numbers except the wallclock column.
"""

from __future__ import annotations

import argparse
import os
import sys


def _setup_threads(argv: list[str]) -> None:
    """Cap BLAS threads before numpy gets imported; N=1 is the reference."""
    n = None
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif a.startswith("--threads="):
            n = a.split("=", 1)[1]
    if n is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(int(n))


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="siftdiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=str, default=None, help="TOML config path")
        sp.add_argument("--preset", type=str, default=None, choices=["paper_toy", "reduced", "demo"])
        sp.add_argument("--seed", type=int, default=None, help="master seed")
        sp.add_argument("--out", type=str, default=None, help="output directory")
        sp.add_argument("--threads", type=int, default=None, help="BLAS thread cap")
        sp.add_argument("--steps-T", type=int, default=None, help="override schedule steps")

    common(sub.add_parser("pretrain", help="train the base noise model on exact prior samples"))
    common(sub.add_parser("finetune", help="self-supervised importance fine-tuning"))
    bl = sub.add_parser("baseline", help="run a comparison method")
    bl.add_argument("method", choices=["cg", "vargrad", "reward-only"])
    common(bl)
    ev = sub.add_parser("eval", help="evaluate a sampler against an analytic target")
    ev.add_argument(
        "--sampler",
        default="unguided",
        choices=["exact-prior", "exact-tilted", "unguided", "checkpoint", "cg"],
    )
    ev.add_argument("--target", default=None, choices=["prior", "tilted"])
    ev.add_argument("--checkpoint-dir", default=None, help="run dir containing checkpoints/")
    common(ev)
    common(sub.add_parser("oracle-check", help="run the invariant suite; nonzero exit on failure"))
    common(sub.add_parser("demo", help="small end-to-end run with figures"))
    return p


def _resolve_config(args):
    from .config import PRESETS, load_config, paper_toy_config

    if args.config:
        if not os.path.exists(args.config):
            print(f"error: config file not found: {args.config}", file=sys.stderr)
            raise SystemExit(2)
        cfg = load_config(args.config)
    elif args.preset:
        cfg = PRESETS[args.preset]()
    elif args.command == "demo":
        cfg = PRESETS["demo"]()
    else:
        cfg = paper_toy_config()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.steps_T is not None:
        cfg.schedule.T = args.steps_T
    return cfg


def _run_dir(cfg) -> str:
    path = os.path.join(cfg.out_dir, cfg.name)
    os.makedirs(os.path.join(path, "figures"), exist_ok=True)
    os.makedirs(os.path.join(path, "checkpoints"), exist_ok=True)
    from .config import save_config

    save_config(cfg, os.path.join(path, "config.toml"))
    return path


METRICS_COLUMNS = [
    "tag",
    "iteration",
    "n_sampled",
    "n_accepted",
    "accept_rate",
    "log_c",
    "mean_log_weight",
    "max_log_weight",
    "ess",
    "mean_reward",
    "kl_hat",
    "f_hat",
    "buffer_fill",
    "train_loss",
    "wallclock",
    "config_hash",
    "seed",
]


def _write_metrics(path: str, tag: str, history, cfg) -> None:
    h = cfg.hash()
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for row in history:
            vals = [tag] + [repr(getattr(row, c)) for c in METRICS_COLUMNS[1:-2]] + [h, str(cfg.seed)]
            f.write(",".join(vals) + "\n")


def _base_model(cfg, run_dir: str | None):
    """Base noise model per config: analytic prior score or a trained checkpoint."""
    from .gmm import analytic_eps_model
    from .sde import build_schedule

    sched = build_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)
    spec = cfg.tilted_spec()
    if cfg.base_model == "analytic":
        return spec, sched, analytic_eps_model(spec.prior, sched)
    from .nets import TimeFeature, load_checkpoint
    from .pretrain import eps_net_model

    ckpt = os.path.join(cfg.out_dir, cfg.name, "checkpoints", "eps_model.bin")
    if run_dir is not None:
        ckpt = os.path.join(run_dir, "checkpoints", "eps_model.bin")
    if not os.path.exists(ckpt):
        print(f"error: learned base model requires checkpoint at {ckpt}; run pretrain", file=sys.stderr)
        raise SystemExit(2)
    net = load_checkpoint(ckpt)
    tf = TimeFeature(n_freqs=cfg.pretrain.n_freqs)
    return spec, sched, eps_net_model(net, tf, sched.T)


def _evaluate(cfg, spec, sched, samples, step_cost, rewards, tag: str, run_dir: str, target=None):
    import numpy as np

    from .figures import density_image, scatter_image, write_ppm
    from .metrics import EvalReport, append_runs_index, expected_reward, grid_divergences, mode_mass

    grid = cfg.eval.grid()
    if target is None:
        target = spec.tilted() if spec.has_exact_tilted else None
    mean_r, se_r = expected_reward(samples, spec.reward)
    if target is not None:
        tv, kl, _ = grid_divergences(samples, target, grid)
    else:
        tv, kl = float("nan"), float("nan")
    masses = mode_mass(samples, spec.reward_mixture.means, cfg.eval.mode_radius)
    ref = spec.reward_mixture.weights
    report = EvalReport(
        name=cfg.name,
        tag=tag,
        seed=cfg.seed,
        config_hash=cfg.hash(),
        mean_reward=mean_r,
        reward_se=se_r,
        grid_tv=tv,
        grid_kl=kl,
        mode_masses=[float(m) for m in masses],
        mode_mass_l1=float(np.abs(masses - ref).sum()),
        mode_mass_linf=float(np.abs(masses - ref).max()),
        n_samples=len(samples),
        f_before=float(np.mean(step_cost - rewards)) if step_cost is not None else float("nan"),
    )
    with open(os.path.join(run_dir, "report.json"), "w", encoding="utf-8") as f:
        f.write(report.to_json())
    append_runs_index(report, os.path.join(cfg.out_dir, "runs.csv"))
    comment = f"config_hash={cfg.hash()} seed={cfg.seed}"
    write_ppm(
        os.path.join(run_dir, "figures", f"samples_{tag}.ppm"),
        scatter_image(samples, grid.lo, grid.hi),
        comment,
    )
    if target is not None:
        write_ppm(
            os.path.join(run_dir, "figures", "target_density.ppm"),
            density_image(target, grid.lo, grid.hi),
            comment,
        )
    write_ppm(
        os.path.join(run_dir, "figures", "prior_density.ppm"),
        density_image(spec.prior, grid.lo, grid.hi),
        comment,
    )
    return report


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    if cfg.base_model != "learned":
        print("error: pretrain requires base_model = 'learned' (analytic base has nothing to train)", file=sys.stderr)
        return 2
    run_dir = _run_dir(cfg)
    from .nets import save_checkpoint
    from .pretrain import train_eps_net
    from .sde import build_schedule

    sched = build_schedule(cfg.schedule.T, cfg.schedule.beta_min, cfg.schedule.beta_max)
    net, _, losses = train_eps_net(cfg.prior.build(), sched, cfg.pretrain, cfg.seed)
    save_checkpoint(net, os.path.join(run_dir, "checkpoints", "eps_model.bin"))
    h = cfg.hash()
    with open(os.path.join(run_dir, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write("tag,step,loss,config_hash,seed\n")
        for i, loss in enumerate(losses):
            f.write(f"pretrain,{i},{loss!r},{h},{cfg.seed}\n")
    print(f"pretrain done: final loss {losses[-1]:.5f} -> {run_dir}")
    return 0


def cmd_finetune(args, weight_mode: str = "importance", tag: str = "ift") -> int:
    cfg = _resolve_config(args)
    cfg.finetune.weight_mode = weight_mode
    run_dir = _run_dir(cfg)
    spec, sched, base = _base_model(cfg, run_dir)
    from . import rng as rngmod
    from .finetune import run_finetune
    from .nets import save_checkpoint
    from .sde import sample_guided

    model, history = run_finetune(
        cfg.finetune, base, spec.reward, spec.reward_grad, sched, cfg.seed
    )
    _write_metrics(os.path.join(run_dir, "metrics.csv"), tag, history, cfg)
    save_checkpoint(model.nn1, os.path.join(run_dir, "checkpoints", "h_nn1.bin"))
    save_checkpoint(model.nn2, os.path.join(run_dir, "checkpoints", "h_nn2.bin"))
    batch = sample_guided(
        base, model, cfg.eval.n_samples, sched, rngmod.stream(cfg.seed, "final-eval"), d=cfg.finetune.dim
    )
    rewards = spec.reward(batch.x0)
    report = _evaluate(cfg, spec, sched, batch.x0, batch.step_cost, rewards, tag, run_dir)
    print(
        f"{tag} done: mean reward {report.mean_reward:.3f}, grid TV {report.grid_tv:.3f}, "
        f"mode masses {['%.3f' % m for m in report.mode_masses]} -> {run_dir}"
    )
    return 0


def cmd_baseline(args) -> int:
    if args.method == "reward-only":
        return cmd_finetune(args, weight_mode="reward_only", tag="reward-only")
    cfg = _resolve_config(args)
    run_dir = _run_dir(cfg)
    spec, sched, base = _base_model(cfg, run_dir)
    from . import rng as rngmod

    if args.method == "cg":
        from .baselines import classifier_guidance_sample

        batch = classifier_guidance_sample(
            base,
            spec.reward_grad,
            cfg.baseline.cg_gamma,
            cfg.eval.n_samples,
            sched,
            rngmod.stream(cfg.seed, "cg-eval"),
        )
        rewards = spec.reward(batch.x0)
        report = _evaluate(cfg, spec, sched, batch.x0, batch.step_cost, rewards, "cg", run_dir)
        _write_metrics(os.path.join(run_dir, "metrics.csv"), "cg", [], cfg)
        print(f"cg done: mean reward {report.mean_reward:.3f}, grid TV {report.grid_tv:.3f} -> {run_dir}")
        return 0

    from .baselines import run_online_finetune
    from .nets import save_checkpoint
    from .sde import sample_guided

    model, history = run_online_finetune(
        cfg.baseline.online, base, spec.reward, spec.reward_grad, sched, cfg.seed
    )
    _write_metrics(os.path.join(run_dir, "metrics.csv"), "vargrad", history, cfg)
    save_checkpoint(model.nn1, os.path.join(run_dir, "checkpoints", "h_nn1.bin"))
    save_checkpoint(model.nn2, os.path.join(run_dir, "checkpoints", "h_nn2.bin"))
    batch = sample_guided(
        base, model, cfg.eval.n_samples, sched, rngmod.stream(cfg.seed, "final-eval")
    )
    rewards = spec.reward(batch.x0)
    report = _evaluate(cfg, spec, sched, batch.x0, batch.step_cost, rewards, "vargrad", run_dir)
    print(f"vargrad done: mean reward {report.mean_reward:.3f}, grid TV {report.grid_tv:.3f} -> {run_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    run_dir = _run_dir(cfg)
    spec, sched, base = _base_model(cfg, run_dir)
    from . import rng as rngmod
    from .gmm import gmm_sample
    from .sde import sample_guided

    n = cfg.eval.n_samples
    g = rngmod.stream(cfg.seed, "eval", args.sampler)
    step_cost = rewards = None
    if args.sampler == "exact-prior":
        samples = gmm_sample(spec.prior, n, g)
    elif args.sampler == "exact-tilted":
        samples = gmm_sample(spec.tilted(), n, g)
    elif args.sampler == "unguided":
        batch = sample_guided(base, None, n, sched, g)
        samples, step_cost = batch.x0, batch.step_cost
    elif args.sampler == "cg":
        from .baselines import classifier_guidance_sample

        batch = classifier_guidance_sample(base, spec.reward_grad, cfg.baseline.cg_gamma, n, sched, g)
        samples, step_cost = batch.x0, batch.step_cost
    else:
        ckpt_dir = args.checkpoint_dir or os.path.join(run_dir, "checkpoints")
        nn1_path = os.path.join(ckpt_dir, "h_nn1.bin")
        if not os.path.exists(nn1_path):
            print(f"error: no checkpoint at {nn1_path}", file=sys.stderr)
            return 2
        from .finetune import HModel
        from .nets import SpatialFeature, TimeFeature, load_checkpoint

        model = HModel(
            nn1=load_checkpoint(nn1_path),
            nn2=load_checkpoint(os.path.join(ckpt_dir, "h_nn2.bin")),
            time_feature=TimeFeature(n_freqs=cfg.finetune.n_freqs),
            spatial_feature=SpatialFeature(n_freqs=cfg.finetune.spatial_freqs),
            base_eps=base,
            reward_grad=spec.reward_grad,
            schedule=sched,
            guidance_clip=cfg.finetune.guidance_clip,
        )
        batch = sample_guided(base, model, n, sched, g)
        samples, step_cost = batch.x0, batch.step_cost
    if step_cost is not None:
        rewards = spec.reward(samples)

    # exact/unguided prior-style samplers compare against the prior by default
    target_name = args.target or ("prior" if args.sampler in ("exact-prior", "unguided") else "tilted")
    target = spec.prior if target_name == "prior" else None
    report = _evaluate(
        cfg, spec, sched, samples, step_cost, rewards,
        f"eval-{args.sampler}-vs-{target_name}", run_dir, target=target,
    )
    print(f"eval {args.sampler} vs {target_name}: TV {report.grid_tv:.4f}, mean reward {report.mean_reward:.3f}")
    return 0


def cmd_oracle_check(args) -> int:
    cfg = _resolve_config(args)
    if args.steps_T is None and args.config is None and args.preset is None:
        cfg.schedule.T = 100  # invariant suite reference scale
    from .oracle_check import run_all

    ok = run_all(cfg)
    return 0 if ok else 1


def cmd_demo(args) -> int:
    return cmd_finetune(args)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_threads(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "pretrain":
        return cmd_pretrain(args)
    if args.command == "finetune":
        return cmd_finetune(args)
    if args.command == "baseline":
        return cmd_baseline(args)
    if args.command == "eval":
        return cmd_eval(args)
    if args.command == "oracle-check":
        return cmd_oracle_check(args)
    if args.command == "demo":
        return cmd_demo(args)
    parser.print_usage(sys.stderr)
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
