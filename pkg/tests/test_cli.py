import json
import os
import subprocess
import sys

import numpy as np
import pytest

from siftdiff.cli import main
from siftdiff.config import demo_config, load_config, save_config


def run_cli(args):
    return main(args)


@pytest.fixture()
def demo_cfg_file(tmp_path):
    cfg = demo_config(seed=3)
    cfg.finetune.outer_steps = 3
    cfg.finetune.inner_steps = 20
    cfg.finetune.n_paths = 128
    cfg.finetune.batch_size = 128
    cfg.finetune.buffer_capacity = 400
    cfg.finetune.hidden = 32
    cfg.eval.n_samples = 2000
    cfg.out_dir = str(tmp_path / "out")
    path = tmp_path / "cfg.toml"
    save_config(cfg, str(path))
    return path, cfg


class TestParsing:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_config_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["finetune", "--config", "/nonexistent.toml"])
        assert exc.value.code == 2

    def test_pretrain_refuses_analytic_base(self, demo_cfg_file, capsys):
        path, _ = demo_cfg_file
        rc = main(["pretrain", "--config", str(path)])
        assert rc == 2
        assert "analytic" in capsys.readouterr().err


class TestFinetuneCommand:
    def test_produces_artifact_tree(self, demo_cfg_file):
        path, cfg = demo_cfg_file
        rc = main(["finetune", "--config", str(path)])
        assert rc == 0
        run_dir = os.path.join(cfg.out_dir, cfg.name)
        for rel in (
            "config.toml",
            "metrics.csv",
            "report.json",
            "checkpoints/h_nn1.bin",
            "checkpoints/h_nn2.bin",
            "figures/samples_ift.ppm",
            "figures/target_density.ppm",
        ):
            assert os.path.exists(os.path.join(run_dir, rel)), rel
        report = json.loads(open(os.path.join(run_dir, "report.json")).read())
        assert report["config_hash"] == cfg.hash()
        assert report["seed"] == 3
        lines = open(os.path.join(run_dir, "metrics.csv")).read().strip().splitlines()
        assert len(lines) == 1 + cfg.finetune.outer_steps
        assert lines[0].split(",")[0] == "tag"
        assert os.path.exists(os.path.join(cfg.out_dir, "runs.csv"))

    def test_rerun_reproduces_csv_except_wallclock(self, demo_cfg_file):
        path, cfg = demo_cfg_file
        main(["finetune", "--config", str(path)])
        run_dir = os.path.join(cfg.out_dir, cfg.name)
        first = open(os.path.join(run_dir, "metrics.csv")).read()
        main(["finetune", "--config", str(path)])
        second = open(os.path.join(run_dir, "metrics.csv")).read()

        def strip_wallclock(text):
            rows = [r.split(",") for r in text.strip().splitlines()]
            wc = rows[0].index("wallclock")
            return [[c for i, c in enumerate(r) if i != wc] for r in rows]

        assert strip_wallclock(first) == strip_wallclock(second)


class TestEvalCommand:
    def test_exact_prior_self_consistency(self, demo_cfg_file, capsys):
        path, cfg = demo_cfg_file
        rc = main(["eval", "--sampler", "exact-prior", "--config", str(path)])
        assert rc == 0
        run_dir = os.path.join(cfg.out_dir, cfg.name)
        report = json.loads(open(os.path.join(run_dir, "report.json")).read())
        # exact draws against their own density: only histogram noise remains
        assert report["grid_tv"] < 0.5

    def test_checkpoint_requires_file(self, demo_cfg_file):
        path, cfg = demo_cfg_file
        rc = main(
            ["eval", "--sampler", "checkpoint", "--checkpoint-dir", "/nope", "--config", str(path)]
        )
        assert rc == 2

    def test_checkpoint_round_trip_sampling(self, demo_cfg_file):
        path, cfg = demo_cfg_file
        assert main(["finetune", "--config", str(path)]) == 0
        rc = main(["eval", "--sampler", "checkpoint", "--config", str(path)])
        assert rc == 0


class TestBaselineCommand:
    def test_cg_runs(self, demo_cfg_file):
        path, cfg = demo_cfg_file
        rc = main(["baseline", "cg", "--config", str(path)])
        assert rc == 0
        report = json.loads(
            open(os.path.join(cfg.out_dir, cfg.name, "report.json")).read()
        )
        assert report["tag"] == "cg"

    def test_reward_only_runs(self, demo_cfg_file):
        path, cfg = demo_cfg_file
        rc = main(["baseline", "reward-only", "--config", str(path)])
        assert rc == 0
        report = json.loads(
            open(os.path.join(cfg.out_dir, cfg.name, "report.json")).read()
        )
        assert report["tag"] == "reward-only"


def test_entry_point_usage_error():
    proc = subprocess.run(
        [sys.executable, "-m", "siftdiff.cli", "bogus"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2
    assert "usage" in (proc.stderr + proc.stdout).lower()


def test_steps_t_override(tmp_path, demo_cfg_file):
    path, cfg = demo_cfg_file
    rc = main(["finetune", "--config", str(path), "--steps-T", "40", "--out", str(tmp_path / "o2")])
    assert rc == 0
    saved = load_config(os.path.join(str(tmp_path / "o2"), cfg.name, "config.toml"))
    assert saved.schedule.T == 40
