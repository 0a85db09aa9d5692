"""Cross-validation training harness: rare-feature upsampling, AdamW
optimization of the adapter/head parameter set, per-epoch validation AUROC,
best-epoch checkpointing, and per-fold Beta calibration.

Determinism contract: a fixed (manifest, config, seed) reproduces checkpoints
exactly in single-worker mode.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import semantics as sem
from .calibrate import BetaCalibrator, fit_beta_calibration
from .manifest import CohortManifest, FoldSplit, make_patient_folds
from .metrics import MetricError, auroc
from .model import (
    EncoderConfig,
    LoRAConfig,
    ModelBundle,
    risk_probability,
    save_checkpoint,
)
from .nifti import read_nifti
from .objective import LossWeights, inverse_frequency_class_weights, total_loss
from .preprocess import (
    AugmentationConfig,
    ViewStack,
    augment,
    deterministic_crop,
    resample_isotropic,
    slice_nine_planes,
    to_model_input,
)
from .util import derive_rng, derive_seed

_VOLUME_CACHE_CAP = 64


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, lr: float, terms: dict):
        super().__init__(f"non-finite loss at step {step} (lr={lr}): {terms}")
        self.step = step
        self.lr = lr
        self.terms = terms


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-4
    weight_decay: float = 0.1
    batch_size: int = 16
    temperature_init: float = 0.03
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    seed: int = 0
    folds: int = 5
    preset: str = "toy"
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    text_synonym_prob: float = 0.3
    text_crop_prob: float = 0.5
    w_clip: float = 1.0
    w_ce_image: float = 1.0
    w_ce_text: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.batch_size < 2 or self.epochs < 0 or self.folds < 2:
            raise ValueError("need batch_size >= 2, epochs >= 0, folds >= 2")

    def encoder_config(self) -> EncoderConfig:
        factory = {
            "toy": EncoderConfig.toy,
            "pretrained-compatible": EncoderConfig.pretrained_compatible,
        }.get(self.preset)
        if factory is None:
            raise ValueError(f"unknown preset {self.preset!r}")
        return factory(temperature_init=self.temperature_init)

    def to_json_dict(self) -> dict:
        out = asdict(self)
        out["augmentation"]["contrast_exponent_range"] = list(
            self.augmentation.contrast_exponent_range
        )
        return out


class CohortData:
    """Lazy, cached access to preprocessed inputs for one cohort.

    Resampled volumes and deterministic view stacks are cached; augmented
    stacks and text draws are recomputed per request from the supplied
    generator.
    """

    def __init__(
        self,
        manifest: CohortManifest,
        root,
        config: TrainConfig,
        annotations: dict[tuple[str, str], sem.SemanticFeatureSet] | None = None,
        normalization=None,
    ):
        self.manifest = manifest
        self.root = Path(root)
        self.config = config
        self.normalization = normalization or config.encoder_config().normalization
        self._annotations = annotations  # loaded lazily; inference is image-only
        self._volumes: OrderedDict[str, object] = OrderedDict()
        self._stacks: dict[int, ViewStack] = {}
        self._reports: dict[int, sem.NoduleReport] = {}

    @property
    def annotations(self) -> dict[tuple[str, str], sem.SemanticFeatureSet]:
        if self._annotations is None:
            loaded: dict[tuple[str, str], sem.SemanticFeatureSet] = {}
            for uri in sorted(
                {r.semantics_uri for r in self.manifest.records if r.semantics_uri}
            ):
                loaded.update(sem.load_semantics(self.root / uri))
            self._annotations = loaded
        return self._annotations

    def __len__(self) -> int:
        return len(self.manifest.records)

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([r.label_one_year for r in self.manifest.records], dtype=np.int64)

    def record(self, i: int):
        return self.manifest.records[i]

    def volume_1mm(self, i: int):
        uri = self.record(i).volume_uri
        if uri in self._volumes:
            self._volumes.move_to_end(uri)
            return self._volumes[uri]
        volume = resample_isotropic(read_nifti(self.root / uri))
        self._volumes[uri] = volume
        if len(self._volumes) > _VOLUME_CACHE_CAP:
            self._volumes.popitem(last=False)
        return volume

    def features(self, i: int) -> sem.SemanticFeatureSet:
        rec = self.record(i)
        feats = self.annotations.get((rec.patient_id, rec.nodule_id))
        if feats is None:
            raise KeyError(
                f"no semantic annotation for ({rec.patient_id}, {rec.nodule_id})"
            )
        return feats

    def deterministic_stack(self, i: int) -> ViewStack:
        if i not in self._stacks:
            rec = self.record(i)
            crop = deterministic_crop(self.volume_1mm(i), rec.centroid_mm)
            self._stacks[i] = to_model_input(slice_nine_planes(crop), self.normalization)
        return self._stacks[i]

    def augmented_stack(self, i: int, rng: np.random.Generator) -> ViewStack:
        rec = self.record(i)
        _, crop = augment(self.volume_1mm(i), rec.centroid_mm, self.config.augmentation, rng)
        return to_model_input(slice_nine_planes(crop), self.normalization)

    def report(self, i: int) -> sem.NoduleReport:
        if i not in self._reports:
            rec = self.record(i)
            rng = derive_rng(self.config.seed, "report", rec.patient_id, rec.nodule_id)
            self._reports[i] = sem.render_report(self.features(i), rng)
        return self._reports[i]

    def training_text(self, i: int, rng: np.random.Generator) -> str:
        text = sem.select_training_text(self.report(i), rng)
        return sem.augment_text(
            text,
            rng,
            synonym_prob=self.config.text_synonym_prob,
            crop_prob=self.config.text_crop_prob,
        )


def build_sampler(semantic_sets: list[sem.SemanticFeatureSet | None]) -> np.ndarray:
    """Upsampling weights from semantic-feature rarity.

    weight = mean over a nodule's present (feature, value) pairs of
    1 / count(feature=value in cohort), renormalized to mean 1. Nodules with
    no present features get the neutral pre-normalization weight 1.
    """
    if not semantic_sets:
        raise ValueError("empty cohort")
    counts: dict[tuple[str, str], int] = {}
    items_per_nodule = []
    for features in semantic_sets:
        items = features.present_items() if features is not None else []
        items_per_nodule.append(items)
        for item in items:
            counts[item] = counts.get(item, 0) + 1
    weights = np.empty(len(semantic_sets), dtype=np.float64)
    for n, items in enumerate(items_per_nodule):
        if items:
            weights[n] = np.mean([1.0 / counts[item] for item in items])
        else:
            weights[n] = 1.0
    return weights / weights.mean()


@dataclass
class TrainedFold:
    bundle: ModelBundle
    fold_index: int
    best_epoch: int
    val_auroc: float
    calibrator: BetaCalibrator
    history: list[dict]
    val_patient_scores: dict[str, float]


def _nodule_probabilities(
    bundle: ModelBundle, data: CohortData, indices, chunk: int = 8
) -> np.ndarray:
    bundle.eval()
    probs = np.empty(len(indices), dtype=np.float64)
    with torch.no_grad():
        for start in range(0, len(indices), chunk):
            block = indices[start : start + chunk]
            views = torch.stack(
                [torch.from_numpy(data.deterministic_stack(i).views) for i in block]
            )
            emb, _ = bundle.image_embedding(views)
            probs[start : start + len(block)] = (
                risk_probability(bundle.image_risk(emb)).numpy()
            )
    return probs


def _patient_level(
    data: CohortData, indices, probs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    by_patient: dict[str, list[int]] = {}
    for pos, i in enumerate(indices):
        by_patient.setdefault(data.record(i).patient_id, []).append(pos)
    patients = sorted(by_patient)
    scores = np.asarray([max(probs[p] for p in by_patient[pid]) for pid in patients])
    labels = np.asarray(
        [max(data.record(indices[p]).label_one_year for p in by_patient[pid]) for pid in patients]
    )
    return scores, labels, patients


def _safe_auroc(scores, labels) -> float:
    try:
        return auroc(scores, labels)
    except MetricError:
        return float("nan")


def train_fold(
    split: FoldSplit,
    config: TrainConfig,
    data: CohortData,
    log_path=None,
) -> TrainedFold:
    """Train one fold and return the best-validation-AUROC checkpoint state."""
    torch.manual_seed(derive_seed(config.seed, "torch", split.fold_index))
    rng = derive_rng(config.seed, "fold", split.fold_index)

    train_idx = [
        i for i in range(len(data)) if data.record(i).patient_id in split.train_patients
    ]
    val_idx = [
        i for i in range(len(data)) if data.record(i).patient_id in split.val_patients
    ]
    if not train_idx or not val_idx:
        raise ValueError(f"fold {split.fold_index}: empty train or validation side")

    encoder_config = config.encoder_config()
    bundle = ModelBundle(
        encoder_config, config.lora, seed=derive_seed(config.seed, "init", split.fold_index)
    )
    tokenizer = encoder_config.make_tokenizer()

    train_labels = torch.as_tensor(data.labels[train_idx])
    if train_labels.min() != train_labels.max():
        class_weights = inverse_frequency_class_weights(train_labels)
    else:
        class_weights = torch.ones(2)
    loss_weights = LossWeights(
        w_clip=config.w_clip,
        w_ce_image=config.w_ce_image,
        w_ce_text=config.w_ce_text,
        class_weights=class_weights,
    )

    sampler = build_sampler([data.features(i) for i in train_idx])
    sampler_probs = sampler / sampler.sum()

    trainable = bundle.trainable_parameters()
    decay = [p for p in trainable if p.ndim >= 2]
    no_decay = [p for p in trainable if p.ndim < 2]
    optimizer = torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": config.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=config.learning_rate,
    )

    history: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(entry: dict) -> None:
        history.append(entry)
        if log_fh:
            import json

            log_fh.write(json.dumps(entry) + "\n")
            log_fh.flush()

    def evaluate() -> float:
        probs = _nodule_probabilities(bundle, data, val_idx)
        return _safe_auroc(probs, data.labels[val_idx])

    steps_per_epoch = math.ceil(len(train_idx) / config.batch_size)
    best_state = {k: v.detach().clone() for k, v in bundle.state_dict().items()}
    best_val = evaluate()
    best_epoch = 0
    emit(
        {
            "fold": split.fold_index,
            "epoch": 0,
            "step": 0,
            "val_auroc": best_val,
            "temperature": float(bundle.temperature.detach()),
            "lr": config.learning_rate,
        }
    )

    global_step = 0
    for epoch in range(1, config.epochs + 1):
        bundle.train()
        epoch_losses = []
        for _ in range(steps_per_epoch):
            batch = rng.choice(train_idx, size=config.batch_size, replace=True, p=sampler_probs)
            views = torch.stack(
                [torch.from_numpy(data.augmented_stack(int(i), rng).views) for i in batch]
            )
            texts = [data.training_text(int(i), rng) for i in batch]
            tokens = torch.from_numpy(tokenizer.encode_batch(texts))
            labels = torch.as_tensor(data.labels[batch])

            out = bundle(views, tokens)
            terms = total_loss(
                out["image_embedding"],
                out["text_embedding"],
                labels,
                out["image_logits"],
                out["text_logits"],
                out["temperature"],
                loss_weights,
            )
            if not torch.isfinite(terms.total):
                raise TrainingDiverged(
                    global_step, config.learning_rate, terms.detach_floats()
                )
            optimizer.zero_grad(set_to_none=True)
            terms.total.backward()
            optimizer.step()
            global_step += 1
            step_losses = terms.detach_floats()
            epoch_losses.append(step_losses)
            emit(
                {
                    "fold": split.fold_index,
                    "epoch": epoch,
                    "step": global_step,
                    "loss": step_losses,
                    "temperature": float(bundle.temperature.detach()),
                    "lr": config.learning_rate,
                }
            )

        val_auroc = evaluate()
        mean_losses = {
            key: float(np.mean([e[key] for e in epoch_losses]))
            for key in ("clip", "ce_image", "ce_text", "total")
        }
        emit(
            {
                "fold": split.fold_index,
                "epoch": epoch,
                "step": global_step,
                "loss": mean_losses,
                "temperature": float(bundle.temperature.detach()),
                "lr": config.learning_rate,
                "val_auroc": val_auroc,
            }
        )
        # ties go to the later epoch: once validation saturates, keep training
        if not math.isnan(val_auroc) and (math.isnan(best_val) or val_auroc >= best_val):
            best_val = val_auroc
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in bundle.state_dict().items()}

    bundle.load_state_dict(best_state)
    bundle.eval()

    val_probs = _nodule_probabilities(bundle, data, val_idx)
    patient_scores, patient_labels, patients = _patient_level(data, val_idx, val_probs)
    try:
        calibrator = fit_beta_calibration(patient_scores, patient_labels)
    except Exception:
        calibrator = BetaCalibrator(a=1.0, b=1.0, c=0.0)  # identity map fallback
    if log_fh:
        log_fh.close()
    return TrainedFold(
        bundle=bundle,
        fold_index=split.fold_index,
        best_epoch=best_epoch,
        val_auroc=best_val,
        calibrator=calibrator,
        history=history,
        val_patient_scores=dict(zip(patients, patient_scores.tolist())),
    )


@dataclass
class CVResult:
    folds: list[TrainedFold]
    mean_val_auroc: float
    std_val_auroc: float


def run_cv(
    manifest: CohortManifest,
    config: TrainConfig,
    data: CohortData,
    out_dir=None,
) -> CVResult:
    """5-fold (k = config.folds) patient-level cross-validation."""
    splits = make_patient_folds(manifest, config.folds, config.seed)
    if out_dir is not None:
        from .manifest import save_splits

        save_splits(Path(out_dir) / "splits.json", splits)
    folds = []
    for split in splits:
        log_path = None
        if out_dir is not None:
            log_path = Path(out_dir) / f"fold{split.fold_index}" / "train_log.jsonl"
            log_path.parent.mkdir(parents=True, exist_ok=True)
        fold = train_fold(split, config, data, log_path=log_path)
        folds.append(fold)
        if out_dir is not None:
            save_fold_checkpoint(Path(out_dir) / f"fold{split.fold_index}", fold, config)
    vals = np.asarray([f.val_auroc for f in folds], dtype=np.float64)
    return CVResult(
        folds=folds,
        mean_val_auroc=float(np.nanmean(vals)),
        std_val_auroc=float(np.nanstd(vals)),
    )


def save_fold_checkpoint(directory, fold: TrainedFold, config: TrainConfig) -> None:
    meta = {
        "fold_index": fold.fold_index,
        "epoch": fold.best_epoch,
        "val_auroc": fold.val_auroc,
        "calibrator": {"a": fold.calibrator.a, "b": fold.calibrator.b, "c": fold.calibrator.c},
        "train_config": config.to_json_dict(),
        "rng_state": {"seed": config.seed, "fold": fold.fold_index},
    }
    save_checkpoint(directory, fold.bundle, meta)
