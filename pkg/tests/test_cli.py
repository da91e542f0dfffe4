import numpy as np
import pytest
import yaml

from echodetect.cli import run
from echodetect.reporting import parse_csv
from echodetect.volio import write_nifti

TINY_CONFIG = {
    "seed": 11,
    "phantom": {
        "n_cases": 12,
        "positive_fraction": 0.6,
        "split_counts": [8, 2, 2],
        "spec": {
            "shape": [24, 24, 24],
            "prostate_semiaxes": [9.0, 8.0, 7.0],
            "lesion_radius_range": [1.5, 4.0],
            "stripe_radius_range": [1.0, 1.5],
            "outside_blob_radius_range": [1.5, 2.0],
        },
    },
    "train": {
        "manifest": None,  # filled per test
        "stage": "finetune",
        "use_pretrained": False,
        "epochs": 1,
        "patches_per_case": 2,
        "batch_size": 2,
        "model": {"levels": 3, "base_channels": 2, "num_scales": 2, "patch_size": [16, 16, 16]},
    },
    "infer": {"manifest": None, "checkpoint": None, "split": "test"},
    "evaluate": {"manifest": None, "predictions": None, "split": "test", "name": "tiny-run"},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the full CLI pipeline once; individual tests inspect its outputs."""
    root = tmp_path_factory.mktemp("cli")
    config = yaml.safe_load(yaml.safe_dump(TINY_CONFIG))
    data = root / "data"
    config["train"]["manifest"] = str(data / "manifest.csv")
    config["infer"]["manifest"] = str(data / "manifest.csv")
    config["evaluate"]["manifest"] = str(data / "manifest.csv")
    config["infer"]["checkpoint"] = str(root / "train" / "checkpoint.pt")
    config["evaluate"]["predictions"] = str(root / "infer")
    cfg_path = root / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(config))

    assert run(["generate-phantoms", "--config", str(cfg_path), "--out", str(data)]) == 0
    assert run(["train", "--config", str(cfg_path), "--out", str(root / "train")]) == 0
    assert run(["infer", "--config", str(cfg_path), "--out", str(root / "infer")]) == 0
    assert run(["evaluate", "--config", str(cfg_path), "--out", str(root / "eval")]) == 0
    return root, cfg_path


class TestPipeline:
    def test_phantom_outputs(self, pipeline):
        root, _ = pipeline
        data = root / "data"
        assert (data / "manifest.csv").exists()
        assert (data / "generation_report.csv").exists()
        assert (data / "run_meta.yaml").exists()
        lines = (data / "manifest.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 2 * 12  # header + weak and strong row per case

    def test_train_outputs(self, pipeline):
        root, _ = pipeline
        assert (root / "train" / "checkpoint.pt").exists()
        log = (root / "train" / "loss_log.csv").read_text().splitlines()
        assert log[0] == "epoch,l_seg,l_cls,l_ent,l_total,val_auc"
        assert len(log) == 2  # one epoch

    def test_checkpoint_carries_threshold(self, pipeline):
        from echodetect import load_checkpoint

        root, _ = pipeline
        ckpt = load_checkpoint(root / "train" / "checkpoint.pt")
        assert ckpt.stage == "finetuned"
        assert 0.0 < ckpt.metadata["decision_threshold"] < 1.0

    def test_infer_outputs(self, pipeline):
        root, _ = pipeline
        infer = root / "infer"
        probs = sorted(infer.glob("*_prob.nii.gz"))
        entropies = sorted(infer.glob("*_entropy.nii.gz"))
        assert len(probs) == 2 and len(entropies) == 2  # the two test cases
        assert (infer / "candidates.csv").exists()
        assert (infer / "threshold.yaml").exists()

    def test_evaluate_outputs(self, pipeline):
        root, _ = pipeline
        rows = parse_csv((root / "eval" / "metrics.csv").read_text())
        assert len(rows) == 1 and rows[0].name == "tiny-run" and rows[0].source == "run"
        assert (root / "eval" / "per_case.csv").exists()
        assert (root / "eval" / "metrics.txt").exists()

    def test_report_merges_runs_with_references(self, pipeline):
        root, cfg = pipeline
        out = root / "report"
        assert run(["report", "--out", str(out), str(root / "eval")]) == 0
        rows = parse_csv((out / "report.csv").read_text())
        names = [r.name for r in rows]
        assert "tiny-run" in names
        assert "published-full-model" in names
        assert [r.source for r in rows].count("run") == 1

    def test_run_meta_reproducibility_fields(self, pipeline):
        root, _ = pipeline
        meta = yaml.safe_load((root / "train" / "run_meta.yaml").read_text())
        assert meta["command"] == "train"
        assert meta["seed"] == 11
        assert "config" in meta and meta["config"]["train"]["epochs"] == 1


class TestErrorPaths:
    def test_unknown_flag_exits_one(self, capsys):
        assert run(["generate-phantoms", "--config", "x.yaml", "--frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_config_key_exits_one(self, tmp_path, capsys):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("phantom:\n  n_cases: 12\n  typo_key: 3\n")
        assert run(["generate-phantoms", "--config", cfg.as_posix(), "--out", str(tmp_path / "o")]) == 1
        assert "typo_key" in capsys.readouterr().err

    def test_missing_config_file_exits_one(self, tmp_path):
        assert run(["train", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 1

    def test_missing_section_exits_one(self, tmp_path):
        cfg = tmp_path / "empty.yaml"
        cfg.write_text("seed: 1\n")
        assert run(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1

    def test_no_out_and_no_env_exits_one(self, tmp_path, monkeypatch):
        monkeypatch.delenv("ECHODETECT_OUT_ROOT", raising=False)
        cfg = tmp_path / "c.yaml"
        cfg.write_text("seed: 1\nphantom:\n  n_cases: 12\n")
        assert run(["generate-phantoms", "--config", str(cfg)]) == 1

    def test_out_root_env_used(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ECHODETECT_OUT_ROOT", str(tmp_path / "runs"))
        cfg = tmp_path / "c.yaml"
        cfg.write_text(yaml.safe_dump({
            "seed": 3,
            "phantom": TINY_CONFIG["phantom"],
        }))
        assert run(["generate-phantoms", "--config", str(cfg)]) == 0
        produced = list((tmp_path / "runs").glob("generate-phantoms-*"))
        assert len(produced) == 1

    def test_grid_mismatch_exits_two(self, pipeline, tmp_path, capsys):
        # predictions on a different grid than the truth volumes
        root, cfg_path = pipeline
        bad_pred = tmp_path / "badpred"
        bad_pred.mkdir()
        config = yaml.safe_load(cfg_path.read_text())
        manifest = config["evaluate"]["manifest"]
        import csv as _csv

        with open(manifest) as fh:
            case_ids = sorted({r["case_id"] for r in _csv.DictReader(fh) if r["split"] == "test"})
        for cid in case_ids:
            write_nifti(bad_pred / f"{cid}_prob.nii.gz", np.zeros((8, 8, 8), np.float32), (1, 1, 1), (0, 0, 0))
        (bad_pred / "threshold.yaml").write_text("threshold: 0.5\nmin_lesion_voxels: 5\n")
        config["evaluate"]["predictions"] = str(bad_pred)
        bad_cfg = tmp_path / "bad_eval.yaml"
        bad_cfg.write_text(yaml.safe_dump(config))
        assert run(["evaluate", "--config", str(bad_cfg), "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err.lower()
        assert "grid" in err or "shape" in err

    def test_report_missing_metrics_exits_one(self, tmp_path):
        empty = tmp_path / "emptyrun"
        empty.mkdir()
        assert run(["report", "--out", str(tmp_path / "o"), str(empty)]) == 1

    def test_unsupported_device_exits_one(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("seed: 1\nphantom:\n  n_cases: 12\n")
        assert run(["generate-phantoms", "--config", str(cfg), "--out", str(tmp_path / "o"), "--device", "cuda"]) == 1
