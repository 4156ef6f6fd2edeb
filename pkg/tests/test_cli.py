import json
import os

import numpy as np
import pytest

from cloudseg import raster
from cloudseg.cli import main


def run(argv):
    return main([str(a) for a in argv])


class TestExitCodes:
    def test_synth_bad_density_is_2(self, tmp_path, capsys):
        code = run(["synth", "--scenes", 1, "--density", "0.99",
                    "--out", tmp_path / "d"])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_manifest_is_3(self, tmp_path, capsys):
        code = run(["fingerprint", "--manifest", tmp_path / "nope.jsonl"])
        assert code == 3

    def test_corrupt_tensor_is_3(self, tmp_path, capsys):
        bad = tmp_path / "bad.cseg"
        bad.write_bytes(b"XSEG" + b"\x00" * 16)
        code = run(["baseline", "--band", bad, "--out", tmp_path / "m.cseg"])
        assert code == 3

    def test_success_is_0(self, tmp_path):
        assert run(["synth", "--scenes", 1, "--size", "64,64",
                    "--out", tmp_path / "d"]) == 0


class TestSynthCommand:
    def test_writes_manifest_and_tensors(self, tmp_path):
        out = tmp_path / "data"
        assert run(["synth", "--scenes", 2, "--size", "64,64", "--bands", 2,
                    "--out", out]) == 0
        records = raster.read_manifest(out / "manifest.jsonl")
        assert len(records) == 2
        patch, mask = raster.load_patch(records[0], str(out))
        assert patch.values.shape == (2, 64, 64)
        assert mask is not None


class TestBaselineCommand:
    def test_fixed_tau(self, tmp_path):
        band = np.zeros((16, 16), dtype=np.float32)
        band[:8] = 1.0
        raster.save_tensor(band, tmp_path / "band.cseg")
        out = tmp_path / "mask.cseg"
        assert run(["baseline", "--band", tmp_path / "band.cseg",
                    "--tau", 0.5, "--out", out]) == 0
        mask = raster.load_tensor(out)
        assert mask[:8].all() and not mask[8:].any()


class TestPostprocessCommand:
    def test_adaptive_rule(self, tmp_path):
        in_dir = tmp_path / "in"
        in_dir.mkdir()
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[8, 8] = 1  # isolated speck, minority cloud: opening removes it
        raster.save_tensor(mask, in_dir / "p0.mask.cseg")
        out_dir = tmp_path / "out"
        assert run(["postprocess", "--in-dir", in_dir, "--out-dir", out_dir,
                    "--rule", "adaptive"]) == 0
        assert raster.load_tensor(out_dir / "p0.mask.cseg").sum() == 0

    def test_empty_dir_is_3(self, tmp_path):
        (tmp_path / "in").mkdir()
        assert run(["postprocess", "--in-dir", tmp_path / "in",
                    "--out-dir", tmp_path / "out"]) == 3


class TestMosReportCommand:
    def test_table_rows(self, tmp_path):
        responses = tmp_path / "responses.csv"
        responses.write_text(
            "image_id,choice\nimg0,A\nimg0,B\nimg1,B\nimg1,B\n")
        ji = tmp_path / "ji.csv"
        ji.write_text("image_id,ji_a,ji_b\nimg0,0.9,0.5\nimg1,0.4,0.8\n")
        out = tmp_path / "mos.csv"
        assert run(["mos-report", "--responses", responses,
                    "--ji-table", ji, "--out", out]) == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("images,pct_a,avg_ji_a,pct_b")
        labels = [l.split(",")[0] for l in lines[1:]]
        assert labels == ["higher_ji_mask_a", "higher_ji_mask_b", "all"]
        all_row = lines[-1].split(",")
        assert all_row[1] == "25.00"  # img0 50% A, img1 0% A, averaged
        assert all_row[7] == "2"


class TestRenderCommand:
    def test_writes_ppm(self, tmp_path):
        rng = np.random.default_rng(0)
        paths = []
        for c in "rgb":
            p = tmp_path / f"{c}.cseg"
            raster.save_tensor(rng.random((16, 16)).astype(np.float32), p)
            paths.append(p)
        mask = np.zeros((16, 16), dtype=np.uint8)
        raster.save_tensor(mask, tmp_path / "mask.cseg")
        out = tmp_path / "overlay.ppm"
        assert run(["render", "--bands", *paths,
                    "--mask", tmp_path / "mask.cseg", "--out", out]) == 0
        assert out.read_bytes().startswith(b"P6\n16 16\n255\n")


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    """One tiny end-to-end pipeline run shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    assert run(["synth", "--scenes", 4, "--size", "64,64", "--bands", 2,
                "--out", data]) == 0
    run_dir = root / "run"
    cfg = {
        "train_manifest": str(data / "manifest.jsonl"),
        "run_dir": str(run_dir),
        "seed": 0,
        "folds": 4,
        "budget_gb": 24.0,
        "base_channels": 2,
        "epochs": 1,
        "batches_per_epoch": 1,
        "batch_size": 2,
        "post_rule": "none",
    }
    cfg_path = root / "pipeline.json"
    cfg_path.write_text(json.dumps(cfg))
    assert run(["pipeline", "--config", cfg_path]) == 0
    return root, cfg_path, run_dir


class TestPipelineCommand:
    def test_artifacts_exist(self, pipeline_run):
        _, _, run_dir = pipeline_run
        for name in ("fingerprint.json", "pipeline.json", "pipeline.trace.txt",
                     "metrics.jsonl", "summary.json"):
            assert (run_dir / name).exists(), name
        for i in range(4):
            assert (run_dir / f"fold{i}" / "index.json").exists()
            assert (run_dir / f"fold{i}_curve.csv").exists()
        preds = os.listdir(run_dir / "predictions")
        assert sum(p.endswith(".mask.cseg") for p in preds) == 4

    def test_stage_markers(self, pipeline_run):
        _, _, run_dir = pipeline_run
        done = sorted(os.listdir(run_dir / "markers"))
        assert done == ["configure.done", "evaluate.done", "fingerprint.done",
                        "predict.done", "train.done"]

    def test_resume_skips_completed_stages(self, pipeline_run, capsys):
        _, cfg_path, _ = pipeline_run
        assert run(["pipeline", "--config", cfg_path]) == 0
        out = capsys.readouterr().out
        assert out.count("already complete") == 5
        assert "running" not in out

    def test_partial_resume_runs_missing_stage(self, pipeline_run, capsys):
        _, cfg_path, run_dir = pipeline_run
        os.unlink(run_dir / "markers" / "evaluate.done")
        assert run(["pipeline", "--config", cfg_path]) == 0
        out = capsys.readouterr().out
        assert "[evaluate] running" in out
        assert "[train] already complete" in out

    def test_summary_has_metric_block(self, pipeline_run):
        _, _, run_dir = pipeline_run
        summary = json.loads((run_dir / "summary.json").read_text())
        assert "ji" in summary["primary"]
        block = summary["primary"]["ji"]
        assert block["n_defined"] + block["n_undefined"] == 4
