"""End-to-end pipeline: synth -> preprocess -> train -> infer -> zeroshot ->
evaluate, all through the CLI, on a small cohort with a short training budget.
"""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from noduleclip.cli import main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cohort = root / "cohort"
    assert main(["synth", "--out", str(cohort), "--patients", "12", "--seed", "31"]) == 0
    run = root / "run"
    assert (
        main(
            [
                "train",
                "--manifest", str(cohort / "manifest.csv"),
                "--out", str(run),
                "--epochs", "1",
                "--folds", "3",
                "--seed", "2",
                "--holdout-fraction", "0.2",
            ]
        )
        == 0
    )
    return cohort, run, root


class TestTrainArtifacts:
    def test_run_directory_contents(self, pipeline):
        _, run, _ = pipeline
        assert (run / "cv_summary.json").exists()
        assert (run / "config.json").exists()
        assert (run / "manifest.txt").exists()
        assert (run / "train_manifest.csv").exists()
        assert (run / "test_manifest.csv").exists()
        from noduleclip.manifest import load_splits

        splits = load_splits(run / "splits.json")
        assert sorted(s.fold_index for s in splits) == [0, 1, 2]
        for k in range(3):
            assert (run / f"fold{k}" / "model.tarc").exists()
            assert (run / f"fold{k}" / "config.json").exists()
            assert (run / f"fold{k}" / "train_log.jsonl").exists()
        summary = json.loads((run / "cv_summary.json").read_text())
        assert len(summary["folds"]) == 3

    def test_fold_meta_carries_calibrator(self, pipeline):
        _, run, _ = pipeline
        payload = json.loads((run / "fold0" / "config.json").read_text())
        calibrator = payload["meta"]["calibrator"]
        assert calibrator["a"] >= 0 and calibrator["b"] >= 0

    def test_holdout_disjoint(self, pipeline):
        cohort, run, _ = pipeline
        from noduleclip.manifest import load_manifest

        train = load_manifest(run / "train_manifest.csv")
        test = load_manifest(run / "test_manifest.csv")
        assert not set(train.patients()) & set(test.patients())


class TestInfer:
    def test_predictions_written_and_valid(self, pipeline):
        cohort, run, root = pipeline
        out = root / "infer"
        code = main(
            [
                "infer",
                "--run", str(run),
                "--manifest", str(run / "test_manifest.csv"),
                "--out", str(out),
            ]
        )
        assert code == 0
        with open(out / "patient_predictions.csv") as fh:
            rows = list(csv.DictReader(fh))
        from noduleclip.manifest import load_manifest

        test = load_manifest(run / "test_manifest.csv")
        assert {r["patient_id"] for r in rows} == set(test.patients())
        assert all(0.0 <= float(r["probability"]) <= 1.0 for r in rows)
        with open(out / "nodule_predictions.csv") as fh:
            nodule_rows = list(csv.DictReader(fh))
        assert {r["fold"] for r in nodule_rows} == {"0", "1", "2"}

    def test_evaluate_on_predictions(self, pipeline):
        cohort, run, root = pipeline
        out = root / "infer"
        eval_out = root / "eval"
        code = main(
            [
                "evaluate",
                "--predictions", str(out / "patient_predictions.csv"),
                "--manifest", str(run / "test_manifest.csv"),
                "--out", str(eval_out),
                "--bootstrap-draws", "100",
                "--seed", "0",
            ]
        )
        assert code == 0
        report = json.loads((eval_out / "metrics.json").read_text())
        assert 0.0 <= report["auroc"] <= 1.0
        assert len(report["operating_points"]) == 4


class TestZeroShot:
    def test_scores_form_simplex_per_query(self, pipeline):
        cohort, run, root = pipeline
        out = root / "zs"
        code = main(
            [
                "zeroshot",
                "--checkpoint", str(run / "fold0"),
                "--manifest", str(run / "test_manifest.csv"),
                "--out", str(out),
                "--features", "Nodule Margin,Pleural Attachment",
            ]
        )
        assert code == 0
        with open(out / "zeroshot.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {r["feature"] for r in rows} == {"Nodule Margin", "Pleural Attachment"}
        by_key = {}
        for r in rows:
            by_key.setdefault((r["nodule_id"], r["feature"]), []).append(
                float(r["probability"])
            )
        for probs in by_key.values():
            assert abs(sum(probs) - 1.0) < 1e-6
