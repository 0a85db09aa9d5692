"""Calibrated patient-level ensemble risk scores and zero-shot semantic
inference.

Per-fold probabilities are aggregated to patients by max, remapped by a
monotone Beta calibrator fitted on that fold's validation patients, and the
five calibrated predictions are averaged into the ensemble score.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import semantics
from .model import ModelBundle, risk_probability, stack_to_tensor
from .preprocess import ViewStack

EPS = 1e-6


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class NoduleRisk:
    patient_id: str
    nodule_id: str
    probability: float
    fold_index: int

    def __post_init__(self):
        if not (0.0 <= self.probability <= 1.0):
            raise CalibrationError(f"probability outside [0, 1]: {self.probability}")


@dataclass(frozen=True)
class PatientRisk:
    patient_id: str
    probability: float


def infer_nodule(
    bundle: ModelBundle, stack: ViewStack, patient_id: str = "", nodule_id: str = "",
    fold_index: int = -1,
) -> NoduleRisk:
    """Image-branch malignancy probability for one deterministic view stack."""
    bundle.eval()
    with torch.no_grad():
        views = stack_to_tensor(stack).unsqueeze(0)
        embedding, _ = bundle.image_embedding(views)
        prob = float(risk_probability(bundle.image_risk(embedding))[0])
    return NoduleRisk(
        patient_id=patient_id, nodule_id=nodule_id, probability=prob, fold_index=fold_index
    )


def patient_aggregate(risks: list[NoduleRisk]) -> PatientRisk:
    """Max over one patient's nodule probabilities."""
    if not risks:
        raise CalibrationError("cannot aggregate an empty risk list")
    patients = {r.patient_id for r in risks}
    if len(patients) != 1:
        raise CalibrationError(f"mixed patients in aggregation: {sorted(patients)}")
    return PatientRisk(
        patient_id=risks[0].patient_id,
        probability=max(r.probability for r in risks),
    )


@dataclass
class BetaCalibrator:
    """Monotone probability remapping sigmoid(a ln p - b ln(1-p) + c)."""

    a: float
    b: float
    c: float

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise CalibrationError("calibrator requires a >= 0 and b >= 0")

    def apply(self, probs) -> np.ndarray:
        from scipy.special import expit

        p = np.clip(np.asarray(probs, dtype=np.float64), EPS, 1.0 - EPS)
        z = self.a * np.log(p) - self.b * np.log(1.0 - p) + self.c
        return expit(z)

    def apply_scalar(self, prob: float) -> float:
        return float(self.apply([prob])[0])


def _fit_logistic(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Newton-Raphson maximum-likelihood logistic regression with intercept."""
    from scipy.special import expit

    n, d = features.shape
    design = np.concatenate([features, np.ones((n, 1))], axis=1)
    beta = np.zeros(d + 1)
    for _ in range(100):
        z = design @ beta
        mu = expit(z)
        grad = design.T @ (labels - mu)
        w = np.maximum(mu * (1.0 - mu), 1e-12)
        hessian = design.T @ (design * w[:, None]) + 1e-10 * np.eye(d + 1)
        step = np.linalg.solve(hessian, grad)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-10:
            break
    return beta


def fit_beta_calibration(probs, labels) -> BetaCalibrator:
    """Maximum-likelihood fit on features (ln p, -ln(1-p)).

    Nonnegativity of the two slopes is enforced by refitting with the
    offending feature dropped, which preserves monotonicity of the map.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1:
        raise CalibrationError("probs and labels must be matching 1-D arrays")
    if not np.isin(y, (0.0, 1.0)).all():
        raise CalibrationError("labels must lie in {0, 1}")
    if y.min() == y.max():
        raise CalibrationError("calibration needs both classes present")
    p = np.clip(p, EPS, 1.0 - EPS)
    log_p = np.log(p)
    neg_log_1mp = -np.log(1.0 - p)

    features = np.stack([log_p, neg_log_1mp], axis=1)
    a, b, c = _fit_logistic(features, y)
    if a < 0:
        b, c = _fit_logistic(neg_log_1mp[:, None], y)
        a = 0.0
    elif b < 0:
        a, c = _fit_logistic(log_p[:, None], y)
        b = 0.0
    if a < 0 or b < 0:
        # Anti-correlated data rejects both slopes. A constant map would erase
        # the ranking, so fall back to the shifted identity (slopes 1, ML
        # intercept), which stays strictly increasing.
        c = _fit_offset_intercept(log_p + neg_log_1mp, y)  # offset == logit(p)
        return BetaCalibrator(a=1.0, b=1.0, c=float(c))
    return BetaCalibrator(a=float(a), b=float(b), c=float(c))


def _fit_offset_intercept(offset: np.ndarray, labels: np.ndarray) -> float:
    """ML intercept for a logistic model with a fixed unit-slope offset."""
    from scipy.special import expit

    c = 0.0
    for _ in range(100):
        mu = expit(offset + c)
        grad = float(np.sum(labels - mu))
        hess = float(np.sum(np.maximum(mu * (1 - mu), 1e-12)))
        step = grad / hess
        c += step
        if abs(step) < 1e-12:
            break
    return c


def ensemble(per_fold: list[list[PatientRisk]]) -> list[PatientRisk]:
    """Arithmetic mean per patient of the folds' calibrated probabilities."""
    if not per_fold:
        raise CalibrationError("no fold predictions to ensemble")
    reference = {r.patient_id for r in per_fold[0]}
    sums = {pid: 0.0 for pid in reference}
    for fold_risks in per_fold:
        patients = {r.patient_id for r in fold_risks}
        if patients != reference:
            raise CalibrationError(
                f"patient sets differ across folds: {sorted(reference ^ patients)[:5]}"
            )
        for r in fold_risks:
            sums[r.patient_id] += r.probability
    k = len(per_fold)
    return [
        PatientRisk(patient_id=pid, probability=sums[pid] / k) for pid in sorted(sums)
    ]


# --- zero-shot semantic inference ------------------------------------------------

# Template slot names for the categorical sentence form.
_CATEGORICAL_SLOTS = {
    semantics.MARGIN: "margin",
    semantics.SHAPE: "shape",
    semantics.CONSISTENCY: "consistency",
    semantics.CONSPICUITY: "margin conspicuity",
}

NO_FINDING_SENTENCE = "No findings"


@dataclass
class ZeroShotQuery:
    feature_name: str
    sentences: list[str]
    classes: list[str]

    def __post_init__(self):
        if len(self.sentences) < 2:
            raise CalibrationError("zero-shot query needs at least 2 candidates")
        if len(self.sentences) != len(self.classes):
            raise CalibrationError("sentences and classes must align")


def categorical_query(feature_name: str, classes=None) -> ZeroShotQuery:
    """"This nodule <slot> is <class>." for each candidate class."""
    if feature_name not in _CATEGORICAL_SLOTS:
        raise CalibrationError(f"no categorical template for {feature_name!r}")
    vocabulary = semantics.FEATURE_CLASSES[feature_name]
    chosen = list(classes) if classes is not None else list(vocabulary)
    unknown = set(chosen) - set(vocabulary)
    if unknown:
        raise CalibrationError(f"{feature_name}: unknown classes {sorted(unknown)}")
    slot = _CATEGORICAL_SLOTS[feature_name]
    sentences = [f"This nodule {slot} is {cls.lower()}." for cls in chosen]
    return ZeroShotQuery(feature_name=feature_name, sentences=sentences, classes=chosen)


def binary_query(feature_name: str) -> ZeroShotQuery:
    """"There is <finding>." vs "No findings" for presence features."""
    if feature_name not in semantics.BINARY_FEATURES:
        raise CalibrationError(f"{feature_name!r} is not a presence/absence feature")
    phrase = semantics._ASSOCIATION_PHRASES[feature_name]
    return ZeroShotQuery(
        feature_name=feature_name,
        sentences=[f"There is {phrase}.", NO_FINDING_SENTENCE],
        classes=["Present", "Absent"],
    )


def default_queries() -> list[ZeroShotQuery]:
    queries = [categorical_query(name) for name in _CATEGORICAL_SLOTS]
    queries.extend(binary_query(name) for name in semantics.BINARY_FEATURES)
    return queries


def zero_shot_scores(
    image_embedding: np.ndarray,
    query: ZeroShotQuery,
    bundle: ModelBundle,
    tokenizer,
    use_temperature: bool = True,
) -> np.ndarray:
    """Softmax over cosine similarities between the image embedding and each
    candidate sentence embedding; sums to 1."""
    bundle.eval()
    with torch.no_grad():
        tokens = torch.from_numpy(tokenizer.encode_batch(query.sentences))
        text_emb = bundle.text_embedding(tokens)
        text_emb = torch.nn.functional.normalize(text_emb, dim=-1)
        img = torch.as_tensor(np.asarray(image_embedding), dtype=text_emb.dtype).reshape(-1)
        img = torch.nn.functional.normalize(img, dim=-1)
        sims = text_emb @ img
        tau = bundle.temperature if use_temperature else torch.tensor(1.0)
        probs = torch.softmax(sims / tau, dim=0)
    return probs.numpy()


def image_embedding_of_stack(bundle: ModelBundle, stack: ViewStack) -> np.ndarray:
    bundle.eval()
    with torch.no_grad():
        emb, _ = bundle.image_embedding(stack_to_tensor(stack).unsqueeze(0))
    return emb[0].numpy()


# --- prediction files ---------------------------------------------------------------

def write_patient_predictions(path, risks: list[PatientRisk]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "probability"])
        for r in risks:
            writer.writerow([r.patient_id, repr(r.probability)])


def read_patient_predictions(path) -> list[PatientRisk]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            PatientRisk(patient_id=row["patient_id"], probability=float(row["probability"]))
            for row in reader
        ]


def write_nodule_predictions(path, risks: list[NoduleRisk]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "nodule_id", "fold", "probability"])
        for r in risks:
            writer.writerow([r.patient_id, r.nodule_id, r.fold_index, repr(r.probability)])


def write_zero_shot(path, rows: list[tuple[str, str, str, float]]) -> None:
    """Rows of (nodule_id, feature, class, probability)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["nodule_id", "feature", "class", "probability"])
        for nodule_id, feature, cls, prob in rows:
            writer.writerow([nodule_id, feature, cls, repr(prob)])
