"""Command-line entry point: synth, preprocess, train, infer, zeroshot, and
evaluate subcommands.

Config precedence is defaults < config file < command-line flags. Exit codes:
0 success, 1 validation error, 2 runtime failure. ``NODULECLIP_SEED`` is the
global seed fallback when neither flag nor config provides one.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import calibrate, metrics, synth
from .archive import save_archive
from .manifest import absolutize_uris, hold_out_test, load_manifest, save_manifest
from .model import load_checkpoint
from .preprocess import PREPROCESSING_VERSION
from .train import CohortData, TrainConfig, TrainingDiverged, run_cv
from .util import read_json, write_json

SEED_ENV_VAR = "NODULECLIP_SEED"

_CONFIG_KEYS = {
    "seed",
    "epochs",
    "learning_rate",
    "weight_decay",
    "batch_size",
    "temperature_init",
    "folds",
    "preset",
    "holdout_fraction",
    "text_synonym_prob",
    "text_crop_prob",
    "lora_rank",
    "lora_scale",
    "lora_dropout",
}


class CliError(ValueError):
    pass


def _default_seed() -> int:
    env = os.environ.get(SEED_ENV_VAR)
    return int(env) if env else 0


def _load_config(path) -> dict:
    if path is None:
        return {}
    config = read_json(path)
    unknown = set(config) - _CONFIG_KEYS
    if unknown:
        raise CliError(f"unknown config key(s): {sorted(unknown)}")
    return config


def _resolve(args, config: dict, key: str, default):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in config:
        return config[key]
    return default


def _prepare_run_dir(path, overwrite: bool) -> Path:
    run_dir = Path(path)
    if run_dir.exists() and any(run_dir.iterdir()):
        if not overwrite:
            raise CliError(f"run directory {run_dir} exists; pass --overwrite to reuse it")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _write_run_manifest(run_dir: Path, artifacts: list[str]) -> None:
    with open(run_dir / "manifest.txt", "w", encoding="utf-8") as fh:
        for artifact in sorted(artifacts):
            fh.write(artifact + "\n")


def _train_config(args, config: dict) -> TrainConfig:
    from .model import LoRAConfig

    return TrainConfig(
        epochs=int(_resolve(args, config, "epochs", 30)),
        learning_rate=float(_resolve(args, config, "learning_rate", 1e-4)),
        weight_decay=float(_resolve(args, config, "weight_decay", 0.1)),
        batch_size=int(_resolve(args, config, "batch_size", 16)),
        temperature_init=float(_resolve(args, config, "temperature_init", 0.03)),
        lora=LoRAConfig(
            rank=int(_resolve(args, config, "lora_rank", 2)),
            scale=float(_resolve(args, config, "lora_scale", 1.0)),
            dropout=float(_resolve(args, config, "lora_dropout", 0.25)),
        ),
        seed=int(_resolve(args, config, "seed", _default_seed())),
        folds=int(_resolve(args, config, "folds", 5)),
        preset=str(_resolve(args, config, "preset", "toy")),
        text_synonym_prob=float(_resolve(args, config, "text_synonym_prob", 0.3)),
        text_crop_prob=float(_resolve(args, config, "text_crop_prob", 0.5)),
    )


def cmd_synth(args) -> int:
    out_dir = _prepare_run_dir(args.out, args.overwrite)
    seed = args.seed if args.seed is not None else _default_seed()
    manifest = synth.generate_cohort(out_dir, n_patients=args.patients, seed=seed)
    _write_run_manifest(
        out_dir, ["manifest.csv", "semantics.json", "truth.csv", "volumes/"]
    )
    print(f"generated {len(manifest)} nodules for {len(manifest.patients())} patients in {out_dir}")
    return 0


def cmd_preprocess(args) -> int:
    manifest = load_manifest(args.manifest)
    root = Path(args.manifest).parent
    out_dir = _prepare_run_dir(args.out, args.overwrite)
    config = TrainConfig(seed=args.seed if args.seed is not None else _default_seed())
    data = CohortData(manifest, root, config)
    failures = []
    artifacts = []
    done = 0
    for i, rec in enumerate(manifest.records):
        stem = f"{rec.patient_id}_{rec.nodule_id}"
        stack_path = out_dir / f"{stem}.tarc"
        if stack_path.exists() and not args.overwrite:
            done += 1
            continue
        try:
            stack = data.deterministic_stack(i)
            save_archive(stack_path, {"views": stack.views})
            write_json(
                out_dir / f"{stem}.json",
                {
                    "plane_ids": list(stack.plane_ids),
                    "preprocessing_version": PREPROCESSING_VERSION,
                },
            )
            report = data.report(i)
            with open(out_dir / f"{stem}.txt", "w", encoding="utf-8") as fh:
                fh.write("Findings:\n" + report.findings_text() + "\n\nImpression:\n")
                fh.write(report.impression + "\n")
            artifacts.extend([f"{stem}.tarc", f"{stem}.json", f"{stem}.txt"])
            done += 1
        except Exception as exc:  # collect per-record failures, keep going
            failures.append((rec.patient_id, rec.nodule_id, str(exc)))
    _write_run_manifest(out_dir, artifacts)
    print(f"preprocessed {done}/{len(manifest)} records into {out_dir}")
    if failures:
        for pid, nid, msg in failures:
            print(f"FAILED ({pid}, {nid}): {msg}", file=sys.stderr)
        return 2
    return 0


def cmd_train(args) -> int:
    config_file = _load_config(args.config)
    config = _train_config(args, config_file)
    manifest = load_manifest(args.manifest)
    root = Path(args.manifest).parent
    run_dir = _prepare_run_dir(args.out, args.overwrite)
    write_json(run_dir / "config.json", config.to_json_dict())

    holdout = _resolve(args, config_file, "holdout_fraction", None)
    artifacts = ["config.json"]
    if holdout is not None:
        absolute = absolutize_uris(manifest, root)
        train_manifest, test_manifest = hold_out_test(absolute, float(holdout), config.seed)
        save_manifest(run_dir / "train_manifest.csv", train_manifest)
        save_manifest(run_dir / "test_manifest.csv", test_manifest)
        artifacts.extend(["train_manifest.csv", "test_manifest.csv"])
    else:
        train_manifest = manifest

    data = CohortData(train_manifest, root, config)
    result = run_cv(train_manifest, config, data, out_dir=run_dir)
    summary = {
        "mean_val_auroc": result.mean_val_auroc,
        "std_val_auroc": result.std_val_auroc,
        "folds": [
            {"fold": f.fold_index, "val_auroc": f.val_auroc, "best_epoch": f.best_epoch}
            for f in result.folds
        ],
    }
    write_json(run_dir / "cv_summary.json", summary)
    artifacts.append("cv_summary.json")
    artifacts.extend(f"fold{f.fold_index}/" for f in result.folds)
    _write_run_manifest(run_dir, artifacts)
    print(
        f"cross-validation done: mean val AUROC "
        f"{result.mean_val_auroc:.3f} +/- {result.std_val_auroc:.3f}"
    )
    return 0


def _fold_dirs(run_dir: Path) -> list[Path]:
    dirs = sorted(run_dir.glob("fold*"))
    if not dirs:
        raise CliError(f"no fold checkpoints under {run_dir}")
    return dirs


def cmd_infer(args) -> int:
    manifest = load_manifest(args.manifest)
    root = Path(args.manifest).parent
    run_dir = Path(args.run)
    out_dir = _prepare_run_dir(args.out, args.overwrite)
    fold_dirs = _fold_dirs(run_dir)
    first_bundle, _ = load_checkpoint(fold_dirs[0])
    config = TrainConfig(seed=_default_seed())
    data = CohortData(
        manifest, root, config, normalization=first_bundle.config.normalization
    )

    nodule_rows = []
    per_fold_patients = []
    for fold_dir in fold_dirs:
        bundle, meta = load_checkpoint(fold_dir)
        fold_index = int(meta.get("fold_index", -1))
        cal = meta.get("calibrator", {"a": 1.0, "b": 1.0, "c": 0.0})
        calibrator = calibrate.BetaCalibrator(a=cal["a"], b=cal["b"], c=cal["c"])
        fold_risks = []
        for i, rec in enumerate(manifest.records):
            risk = calibrate.infer_nodule(
                bundle,
                data.deterministic_stack(i),
                patient_id=rec.patient_id,
                nodule_id=rec.nodule_id,
                fold_index=fold_index,
            )
            fold_risks.append(risk)
            nodule_rows.append(risk)
        by_patient: dict[str, list] = {}
        for risk in fold_risks:
            by_patient.setdefault(risk.patient_id, []).append(risk)
        fold_patients = [
            calibrate.PatientRisk(
                patient_id=pid,
                probability=calibrator.apply_scalar(
                    calibrate.patient_aggregate(risks).probability
                ),
            )
            for pid, risks in sorted(by_patient.items())
        ]
        per_fold_patients.append(fold_patients)

    ensembled = calibrate.ensemble(per_fold_patients)
    calibrate.write_nodule_predictions(out_dir / "nodule_predictions.csv", nodule_rows)
    calibrate.write_patient_predictions(out_dir / "patient_predictions.csv", ensembled)
    _write_run_manifest(out_dir, ["nodule_predictions.csv", "patient_predictions.csv"])
    print(f"wrote predictions for {len(ensembled)} patients to {out_dir}")
    return 0


def cmd_zeroshot(args) -> int:
    manifest = load_manifest(args.manifest)
    root = Path(args.manifest).parent
    out_dir = _prepare_run_dir(args.out, args.overwrite)
    bundle, meta = load_checkpoint(args.checkpoint)
    tokenizer = bundle.config.make_tokenizer()
    config = TrainConfig(seed=_default_seed())
    data = CohortData(manifest, root, config, normalization=bundle.config.normalization)

    if args.features:
        wanted = set(args.features.split(","))
        queries = [
            q for q in calibrate.default_queries() if q.feature_name in wanted
        ]
        if not queries:
            raise CliError(f"no zero-shot queries match {sorted(wanted)}")
    else:
        queries = calibrate.default_queries()

    rows = []
    for i, rec in enumerate(manifest.records):
        embedding = calibrate.image_embedding_of_stack(bundle, data.deterministic_stack(i))
        for query in queries:
            probs = calibrate.zero_shot_scores(
                embedding, query, bundle, tokenizer, use_temperature=not args.unit_temperature
            )
            for cls, prob in zip(query.classes, probs):
                rows.append((rec.nodule_id, query.feature_name, cls, float(prob)))
    calibrate.write_zero_shot(out_dir / "zeroshot.csv", rows)
    _write_run_manifest(out_dir, ["zeroshot.csv"])
    print(f"wrote {len(rows)} zero-shot scores to {out_dir / 'zeroshot.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    predictions = calibrate.read_patient_predictions(args.predictions)
    labels_by_patient = {p: manifest.patient_label(p) for p in manifest.patients()}
    missing = [r.patient_id for r in predictions if r.patient_id not in labels_by_patient]
    if missing:
        raise CliError(f"predictions for unknown patients: {missing[:5]}")
    scores = np.asarray([r.probability for r in predictions])
    labels = np.asarray([labels_by_patient[r.patient_id] for r in predictions])
    seed = args.seed if args.seed is not None else _default_seed()
    report = metrics.evaluate_predictions(
        scores, labels, n_draws=args.bootstrap_draws, seed=seed
    )
    out_dir = _prepare_run_dir(args.out, args.overwrite)
    report.save(out_dir / "metrics.json")
    with open(out_dir / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "point", "ci_lower", "ci_upper"])
        for row in report.table_rows():
            writer.writerow(row)
    _write_run_manifest(out_dir, ["metrics.json", "metrics.csv"])
    print(
        f"AUROC {report.auroc:.3f} [{report.auroc_ci[0]:.3f}, {report.auroc_ci[1]:.3f}]  "
        f"AUPRC {report.auprc:.3f} [{report.auprc_ci[0]:.3f}, {report.auprc_ci[1]:.3f}]"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noduleclip",
        description="Semantic-guided nodule malignancy pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=48)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="cache view stacks and report texts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="run cross-validation training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--preset", default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--holdout-fraction", dest="holdout_fraction", type=float, default=None)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="ensemble inference on a manifest")
    p.add_argument("--run", required=True, help="training run directory with fold checkpoints")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("zeroshot", help="zero-shot semantic-feature scores")
    p.add_argument("--checkpoint", required=True, help="one fold checkpoint directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features", default=None, help="comma-separated feature names")
    p.add_argument("--unit-temperature", action="store_true")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("evaluate", help="metrics report from prediction CSVs")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bootstrap-draws", dest="bootstrap_draws", type=int, default=10000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
