import json
import os
import subprocess
import sys

import numpy as np
import pytest

from bullettime.cli import main


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "bullettime.cli", *args],
        capture_output=True, text=True,
    )


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, tiny_ds):
    root = tmp_path_factory.mktemp("cli")
    ck = root / "pre.ckpt"
    rc = main(["pretrain", "--data", tiny_ds.root, "--steps", "4",
               "--out", str(ck), "--holdout", "5", "--seed", "11"])
    assert rc == 0
    return {"root": root, "ckpt": str(ck), "data": tiny_ds.root}


class TestBasics:
    def test_no_command_is_usage_error(self):
        r = run_cli()
        assert r.returncode == 2

    def test_unknown_flag_usage_error(self):
        r = run_cli("gen-data", "--nope")
        assert r.returncode == 2

    def test_missing_file_runtime_error(self, tmp_path):
        rc = main(["eval", "--ckpt", "oracle", "--data",
                   str(tmp_path / "missing"), "--holdout", "0"])
        assert rc == 1

    def test_dump_config_roundtrips(self, tmp_path):
        r = run_cli("--dump-config")
        assert r.returncode == 0
        cfg = json.loads(r.stdout)
        path = tmp_path / "cfg.json"
        path.write_text(r.stdout)
        r2 = run_cli("--config", str(path), "--dump-config")
        assert json.loads(r2.stdout) == cfg


class TestCommands:
    def test_pretrain_outputs(self, workspace):
        assert os.path.isfile(workspace["ckpt"])
        assert os.path.isfile(workspace["ckpt"] + ".json")
        assert os.path.isfile(workspace["ckpt"] + ".log.jsonl")
        with open(workspace["ckpt"] + ".log.jsonl") as f:
            recs = [json.loads(line) for line in f]
        assert len(recs) == 4
        for rec in recs:
            for key in ("step", "loss_total", "loss_rgb", "loss_spatial",
                        "loss_temporal", "wall_ms"):
                assert key in rec

    def test_pretrain_zero_steps_keeps_init(self, workspace, tiny_ds):
        from bullettime.optim import load_checkpoint
        from bullettime.renderer import init_model
        from bullettime.config import ModelConfig
        out = str(workspace["root"] / "zero.ckpt")
        rc = main(["pretrain", "--data", tiny_ds.root, "--steps", "0",
                   "--out", out, "--seed", "21"])
        assert rc == 0
        store = load_checkpoint(out)
        fresh = init_model(21, ModelConfig())
        for k in fresh.params:
            assert np.array_equal(store.params[k].data, fresh.params[k].data)

    def test_preview_and_stats(self, workspace):
        out = str(workspace["root"] / "prev")
        rc = main(["preview", "--ckpt", workspace["ckpt"], "--data",
                   workspace["data"], "--orbit", "--n", "2", "--out", out])
        assert rc == 0
        stats = json.load(open(os.path.join(out, "stats.json")))
        assert len(stats) == 2
        for row in stats:
            assert row["net_evals"] > 0 and row["rays_cast"] > 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert manifest["command"] == "preview"
        assert manifest["seed"] == 42

    def test_refine_and_access_log(self, workspace, tmp_path):
        from bullettime.trajectory import preset_orbit, save_trajectory
        traj = tmp_path / "orbit.json"
        save_trajectory(preset_orbit([0, 0, 0], 2.5, 0.3, 4, 2.0), str(traj))
        out = str(workspace["root"] / "ref.ckpt")
        rc = main(["refine", "--ckpt", workspace["ckpt"], "--data",
                   workspace["data"], "--traj", str(traj), "--steps", "2",
                   "--out", out])
        assert rc == 0
        access = json.load(open(out + ".access.json"))
        for _, cams in access.items():
            assert len(cams) <= 4

    def test_eval_report_schema(self, workspace):
        out = str(workspace["root"] / "report.json")
        rc = main(["eval", "--ckpt", workspace["ckpt"], "--data",
                   workspace["data"], "--holdout", "5", "--out", out])
        assert rc == 0
        rep = json.load(open(out))
        assert set(rep) == {"per_view", "mean_psnr", "mean_ssim"}
        for row in rep["per_view"]:
            assert set(row) == {"frame", "cam", "psnr", "ssim"}

    def test_ablate_samples_monotone_evals(self, workspace):
        out = str(workspace["root"] / "abl_samples")
        rc = main(["ablate", "--what", "samples", "--data",
                   workspace["data"], "--ckpt", workspace["ckpt"],
                   "--out", out])
        assert rc == 0
        rows = json.load(open(os.path.join(out, "ablation.json")))
        counts = [r["samples"] for r in rows]
        evals = [r["net_evals"] for r in rows]
        assert counts == [5, 10, 20, 40, 60]
        assert all(a <= b for a, b in zip(evals, evals[1:]))

    def test_ablate_blocks_param_counts(self, workspace):
        out = str(workspace["root"] / "abl_blocks")
        rc = main(["ablate", "--what", "blocks", "--data",
                   workspace["data"], "--out", out])
        assert rc == 0
        rows = json.load(open(os.path.join(out, "ablation.json")))
        params = [r["extractor_params"] for r in rows]
        assert params == sorted(params)
        # linear growth in block count
        d1 = params[1] - params[0]
        assert params[2] - params[1] == 3 * d1
        assert params[3] - params[2] == 3 * d1
