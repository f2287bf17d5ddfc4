import json
from pathlib import Path

import pytest

from greskit.cli import main


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train -> infer once; several tests read the artifacts."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    run_dir = root / "run"
    preds = root / "predictions.jsonl"
    assert run(["synth", "--out", data, "--samples", 40, "--seed", 11]) == 0
    assert (
        run(
            [
                "train", "--dataset", data, "--out", run_dir,
                "--steps", 5, "--batch-size", 4, "--seed", 11,
            ]
        )
        == 0
    )
    assert (
        run(
            [
                "infer", "--checkpoint", run_dir / "checkpoint.ckpt",
                "--dataset", data, "--split", "val", "--out", preds,
            ]
        )
        == 0
    )
    return root, data, run_dir, preds


class TestSynth:
    def test_outputs_validate(self, pipeline):
        _, data, *_ = pipeline
        from greskit.dataset import load_dataset

        ds = load_dataset(data / "dataset.json")
        assert len(ds.refs) == 40
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["seed"] == 11
        assert (data / "config.json").exists()

    def test_same_seed_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(["synth", "--out", a, "--samples", 12, "--seed", 4]) == 0
        assert run(["synth", "--out", b, "--samples", 12, "--seed", 4]) == 0
        assert (a / "dataset.json").read_bytes() == (b / "dataset.json").read_bytes()
        for img in sorted((a / "images").iterdir()):
            assert img.read_bytes() == (b / "images" / img.name).read_bytes()

    def test_zero_samples_is_validation_error(self, tmp_path):
        assert run(["synth", "--out", tmp_path / "x", "--samples", 0]) == 2


class TestTrain:
    def test_artifacts_exist(self, pipeline):
        _, _, run_dir, _ = pipeline
        assert (run_dir / "checkpoint.ckpt").exists()
        log_lines = (run_dir / "train_log.jsonl").read_text().splitlines()
        assert len(log_lines) == 5
        record = json.loads(log_lines[0])
        assert {"step", "lm", "bce", "dice", "total"} <= set(record)
        resolved = json.loads((run_dir / "config.json").read_text())
        assert resolved["model"]["seed"] == 11

    def test_flag_combinations_map_to_config(self, pipeline, tmp_path):
        _, data, *_ = pipeline
        out = tmp_path / "ablated"
        code = run(
            [
                "train", "--dataset", data, "--out", out, "--steps", 1,
                "--multi-seg=false", "--use-rej=false", "--prefix=true",
                "--share-seg=false", "--num-seg-tokens", 3, "--seed", 1,
            ]
        )
        assert code == 0
        cfg = json.loads((out / "config.json").read_text())["model"]
        assert cfg["multi_seg"] is False
        assert cfg["use_rej"] is False
        assert cfg["prefix_expressions"] is True
        assert cfg["share_seg_embedding"] is False
        assert cfg["max_targets"] == 3


class TestInfer:
    def test_line_count_matches_split(self, pipeline):
        _, data, _, preds = pipeline
        from greskit.dataset import load_dataset, split_refs

        ds = load_dataset(data / "dataset.json")
        lines = preds.read_text().splitlines()
        assert len(lines) == len(split_refs(ds, "val"))

    def test_rej_lines_null_mask(self, pipeline):
        *_, preds = pipeline
        for line in preds.read_text().splitlines():
            rec = json.loads(line)
            assert (rec["mask"] is None) == (rec["decision"] == "rej")

    def test_rerun_byte_identical(self, pipeline, tmp_path):
        _, data, run_dir, preds = pipeline
        again = tmp_path / "again.jsonl"
        assert (
            run(
                [
                    "infer", "--checkpoint", run_dir / "checkpoint.ckpt",
                    "--dataset", data, "--split", "val", "--out", again,
                ]
            )
            == 0
        )
        assert again.read_bytes() == preds.read_bytes()


class TestEval:
    def test_gres_report_written(self, pipeline, tmp_path):
        _, data, _, preds = pipeline
        report = tmp_path / "report.json"
        code = run(
            [
                "eval", "--predictions", preds, "--dataset", data,
                "--split", "val", "--suite", "gres", "--policy", "explicit",
                "--out", report,
            ]
        )
        assert code == 0
        body = json.loads(report.read_text())
        assert body["metric_suite"] == "gres"
        assert {"gIoU", "cIoU", "N_acc", "accumulators"} <= set(body)

    def test_pixel_policy_flag(self, pipeline, tmp_path):
        _, data, _, preds = pipeline
        report = tmp_path / "report.json"
        code = run(
            [
                "eval", "--predictions", preds, "--dataset", data,
                "--split", "val", "--policy", "pixel:50", "--out", report,
            ]
        )
        assert code == 0
        assert json.loads(report.read_text())["policy"] == "pixel:50"

    def test_refzom_and_rec_suites(self, pipeline, tmp_path):
        _, data, _, preds = pipeline
        for suite in ("refzom", "rec"):
            report = tmp_path / f"{suite}.json"
            assert (
                run(
                    [
                        "eval", "--predictions", preds, "--dataset", data,
                        "--split", "val", "--suite", suite, "--out", report,
                    ]
                )
                == 0
            )
            assert json.loads(report.read_text())["metric_suite"] == suite

    def test_mismatched_predictions_exit_2(self, pipeline, tmp_path):
        _, data, *_ = pipeline
        bogus = tmp_path / "bogus.jsonl"
        bogus.write_text(json.dumps({"ref_id": 99999, "decision": "rej", "mask": None}) + "\n")
        assert run(["eval", "--predictions", bogus, "--dataset", data, "--split", "val"]) == 2


class TestOverlayCommand:
    def test_overlays_written(self, pipeline, tmp_path):
        _, data, _, preds = pipeline
        out = tmp_path / "overlays"
        assert run(["overlay", "--predictions", preds, "--dataset", data, "--out", out]) == 0
        pngs = list(out.glob("ref_*.png"))
        assert len(pngs) == len(preds.read_text().splitlines())


class TestGradcheckCommand:
    def test_passes_at_default_tolerance(self, capsys):
        assert run(["gradcheck", "--seed", 0]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out

    def test_larger_epsilon_still_finite(self, capsys):
        code = run(["gradcheck", "--seed", 0, "--epsilon", 1e-2, "--tolerance", 1.0])
        assert code == 0
        out = capsys.readouterr().out
        assert "max relative error" in out


class TestExitCodes:
    def test_missing_dataset_is_io_or_validation(self, tmp_path):
        code = run(["train", "--dataset", tmp_path / "nope", "--out", tmp_path / "o", "--steps", 1])
        assert code in (2, 4)

    def test_bad_bool_flag(self, capsys):
        with pytest.raises(SystemExit):
            run(["train", "--dataset", "x", "--out", "y", "--multi-seg=maybe"])
