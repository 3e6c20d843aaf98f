import json
from pathlib import Path

import numpy as np
import pytest

from caft.cli import main
from caft.maskops import read_pgm
from caft.synth import SynthConfig, write_synthetic


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthdata")
    write_synthetic(SynthConfig(n_images=6, seed=11), root)
    return root


def _run(*argv):
    return main([str(a) for a in argv])


def _tree_bytes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
    }


class TestPhases:
    def test_cluster_outputs(self, dataset, tmp_path):
        out = tmp_path / "phase_a"
        assert _run("cluster", "--manifest", dataset / "manifest.json", "--out", out) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_images"] == 6 and not summary["failed"]
        for entry in summary["images"].values():
            assert set(entry["metrics"]) == {
                "d_ic", "d_r", "d_cc", "ratio_ic", "ratio_r", "ch_score"
            }
        masks = sorted((out / "masks").glob("*.pgm"))
        assert len(masks) == 6
        assert len(sorted((out / "masks").glob("*.bits"))) == 6
        mask = read_pgm(masks[0])
        assert mask.bits.shape == (24, 24)

    def test_full_three_phase_flow(self, dataset, tmp_path):
        phase_a = tmp_path / "a"
        model1 = tmp_path / "m" / "atf1.cafm"
        phase_c = tmp_path / "c"
        model2 = tmp_path / "m" / "atf2.cafm"
        preds = tmp_path / "p" / "boxes.json"
        report = tmp_path / "r"
        assert _run("cluster", "--manifest", dataset / "manifest.json", "--out", phase_a) == 0
        assert _run(
            "train", "--manifest", dataset / "manifest.json", "--masks", phase_a / "masks",
            "--out", model1, "--epochs", 5,
        ) == 0
        assert model1.is_file() and model1.with_suffix(".cafm.log.csv").is_file()
        log_lines = model1.with_suffix(".cafm.log.csv").read_text().splitlines()
        assert log_lines[0] == "epoch,loss,token_acc,lr" and len(log_lines) == 6
        assert _run(
            "refine", "--manifest", dataset / "manifest.json", "--model", model1, "--out", phase_c
        ) == 0
        refined = read_pgm(next((phase_c / "refined").glob("*.pgm")))
        assert refined.bits.shape == (48, 48)
        target = read_pgm(next((phase_c / "targets").glob("*.pgm")))
        assert target.bits.shape == (24, 24)
        assert _run(
            "train", "--manifest", dataset / "manifest.json", "--masks", phase_c / "targets",
            "--out", model2, "--epochs", 5,
        ) == 0
        assert _run(
            "predict", "--manifest", dataset / "manifest.json", "--model", model2, "--out", preds
        ) == 0
        boxes = json.loads(preds.read_text())
        assert len(boxes) == 6
        for box in boxes.values():
            assert len(box) == 4 and box[0] < box[2] and box[1] < box[3]
        meta = json.loads((preds.parent / "boxes.meta.json").read_text())
        assert meta["fallback_count"] == len(meta["fallback_ids"])
        assert _run(
            "eval", "--manifest", dataset / "manifest.json", "--pred", preds, "--out", report
        ) == 0
        payload = json.loads((report / "report.json").read_text())
        assert payload["n_images"] == 6
        assert payload["top1_loc"] <= payload["top5_loc"] <= payload["gt_known_loc"]
        assert payload["fallback_count"] == meta["fallback_count"]
        curve = (report / "curve.csv").read_text().splitlines()
        assert curve[0] == "iou_threshold,gt_known_loc" and len(curve) == 10

    def test_determinism_byte_identical(self, dataset, tmp_path):
        outputs = []
        for run in ("one", "two"):
            base = tmp_path / run
            _run("cluster", "--manifest", dataset / "manifest.json", "--out", base / "a",
                 "--seed", 3)
            _run("train", "--manifest", dataset / "manifest.json", "--masks", base / "a" / "masks",
                 "--out", base / "atf1.cafm", "--epochs", 3, "--seed", 3)
            _run("refine", "--manifest", dataset / "manifest.json", "--model", base / "atf1.cafm",
                 "--out", base / "c", "--seed", 3)
            _run("predict", "--manifest", dataset / "manifest.json", "--model", base / "atf1.cafm",
                 "--out", base / "boxes.json", "--seed", 3)
            _run("eval", "--manifest", dataset / "manifest.json", "--pred", base / "boxes.json",
                 "--out", base / "report", "--seed", 3)
            outputs.append(_tree_bytes(base))
        assert outputs[0].keys() == outputs[1].keys()
        for name in outputs[0]:
            assert outputs[0][name] == outputs[1][name], f"{name} differs between runs"

    def test_empty_manifest_zero_exit(self, tmp_path):
        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps(
            {"version": 1, "patch_size": 16, "image_size": [64, 64], "images": []}
        ))
        out = tmp_path / "out"
        assert _run("cluster", "--manifest", manifest, "--out", out) == 0
        assert json.loads((out / "summary.json").read_text())["n_images"] == 0

    def test_refine_without_quadrants_skips_all(self, dataset, tmp_path):
        raw = json.loads((dataset / "manifest.json").read_text())
        for entry in raw["images"]:
            entry.pop("quadrant_maps")
            entry["token_map"] = str(dataset / entry["token_map"])
        stripped = tmp_path / "manifest.json"
        stripped.write_text(json.dumps(raw))
        phase_a = tmp_path / "a"
        _run("cluster", "--manifest", dataset / "manifest.json", "--out", phase_a)
        model = tmp_path / "atf1.cafm"
        _run("train", "--manifest", dataset / "manifest.json", "--masks", phase_a / "masks",
             "--out", model, "--epochs", 2)
        out = tmp_path / "c"
        assert _run("refine", "--manifest", stripped, "--model", model, "--out", out) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["written"] == 0 and len(summary["skipped"]) == 6

    def test_diagnose_outputs(self, dataset, tmp_path):
        out = tmp_path / "diag"
        small = tmp_path / "manifest.json"
        raw = json.loads((dataset / "manifest.json").read_text())
        raw["images"] = raw["images"][:1]
        # keep paths resolvable from the new manifest location
        for entry in raw["images"]:
            entry["token_map"] = str(dataset / entry["token_map"])
            entry["quadrant_maps"] = [str(dataset / q) for q in entry["quadrant_maps"]]
        small.write_text(json.dumps(raw))
        assert _run("diagnose", "--manifest", small, "--out", out) == 0
        image_id = raw["images"][0]["id"]
        sim = np.loadtxt(out / f"{image_id}.similarity.csv", delimiter=",")
        assert sim.shape == (576, 576)
        np.testing.assert_allclose(np.diag(sim), 1.0, atol=1e-9)
        np.testing.assert_allclose(sim, sim.T, atol=1e-9)
        curve = np.loadtxt(out / f"{image_id}.curve.csv", delimiter=",")
        assert curve.shape == (576,)
        payload = json.loads((out / f"{image_id}.metrics.json").read_text())
        assert set(payload["metrics"]) == {
            "d_ic", "d_r", "d_cc", "ratio_ic", "ratio_r", "ch_score"
        }
        assert payload["class_token_affinity"] <= payload["metrics"]["d_r"] + 1e-9

    def test_diagnose_with_model_reports_block_metrics(self, dataset, tmp_path):
        phase_a = tmp_path / "a"
        _run("cluster", "--manifest", dataset / "manifest.json", "--out", phase_a)
        model = tmp_path / "atf1.cafm"
        _run("train", "--manifest", dataset / "manifest.json", "--masks", phase_a / "masks",
             "--out", model, "--epochs", 2)
        out = tmp_path / "diag"
        assert _run("diagnose", "--manifest", dataset / "manifest.json", "--out", out,
                    "--model", model) == 0
        payload = json.loads(next(out.glob("*.metrics.json")).read_text())
        assert len(payload["blocks"]) == 2
        for block in payload["blocks"]:
            assert "metrics" in block and "class_token_affinity" in block


class TestCliContract:
    def test_usage_error_exit_code(self, capsys):
        with pytest.raises(SystemExit) as err:
            _run("cluster")  # missing required flags
        assert err.value.code == 1

    def test_unknown_subcommand_exit_code(self):
        with pytest.raises(SystemExit) as err:
            _run("frobnicate")
        assert err.value.code == 1

    def test_data_error_exit_code(self, tmp_path):
        assert _run("cluster", "--manifest", tmp_path / "missing.json", "--out", tmp_path) == 2

    def test_missing_masks_exit_code(self, dataset, tmp_path):
        empty = tmp_path / "masks"
        empty.mkdir()
        assert _run(
            "train", "--manifest", dataset / "manifest.json", "--masks", empty,
            "--out", tmp_path / "m.cafm",
        ) == 2

    def test_config_file_and_flag_override(self, dataset, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"k": 2, "seed": 5, "alpha": [1, 0, 0, 0]}))
        out = tmp_path / "a"
        assert _run("cluster", "--manifest", dataset / "manifest.json", "--out", out,
                    "--config", config, "--k", 3) == 0
        assert (out / "summary.json").is_file()

    def test_bad_config_key_rejected(self, dataset, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"clusters": 3}))
        assert _run("cluster", "--manifest", dataset / "manifest.json",
                    "--out", tmp_path / "o", "--config", config) == 2

    def test_synth_subcommand(self, tmp_path):
        out = tmp_path / "data"
        assert _run("synth", "--out", out, "--n-images", 2, "--seed", 9) == 0
        assert (out / "manifest.json").is_file()
        assert len(list((out / "maps").glob("*.ctm"))) == 2 * 5  # full + 4 quadrants

    def test_selftest_subcommand(self):
        assert _run("selftest", "--instances", 3) == 0

    def test_mismatched_prediction_ids(self, dataset, tmp_path):
        preds = tmp_path / "boxes.json"
        preds.write_text(json.dumps({"nope": [0, 0, 1, 1]}))
        assert _run("eval", "--manifest", dataset / "manifest.json", "--pred", preds,
                    "--out", tmp_path / "r") == 2
