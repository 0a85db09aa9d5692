"""Cohort manifests, patient-level hold-out splits, and cross-validation folds.

The manifest file is UTF-8 CSV with header
``patient_id,nodule_id,volume_uri,cx_mm,cy_mm,cz_mm,label,semantics_uri``;
``semantics_uri`` may be empty. All splitting is done at the patient level so
that no patient's nodules ever straddle a boundary.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import read_json, write_json

MANIFEST_COLUMNS = (
    "patient_id",
    "nodule_id",
    "volume_uri",
    "cx_mm",
    "cy_mm",
    "cz_mm",
    "label",
    "semantics_uri",
)


class ManifestError(ValueError):
    """Raised for malformed manifest files or invalid split requests."""


@dataclass(frozen=True)
class NoduleRecord:
    patient_id: str
    nodule_id: str
    volume_uri: str
    centroid_mm: tuple[float, float, float]
    label_one_year: int
    semantics_uri: str | None = None

    def __post_init__(self):
        if not self.patient_id or not self.nodule_id:
            raise ManifestError("patient_id and nodule_id must be nonempty")
        if not all(math.isfinite(c) for c in self.centroid_mm):
            raise ManifestError(f"non-finite centroid {self.centroid_mm}")
        if self.label_one_year not in (0, 1):
            raise ManifestError(f"label outside {{0,1}}: {self.label_one_year}")

    @property
    def key(self) -> tuple[str, str]:
        return (self.patient_id, self.nodule_id)


@dataclass
class CohortManifest:
    records: list[NoduleRecord]
    name: str = "cohort"

    def __post_init__(self):
        if not self.records:
            raise ManifestError(f"manifest '{self.name}' has no records")
        seen = set()
        for rec in self.records:
            if rec.key in seen:
                raise ManifestError(f"duplicate (patient_id, nodule_id) {rec.key}")
            seen.add(rec.key)

    def __len__(self) -> int:
        return len(self.records)

    def patients(self) -> list[str]:
        """Sorted unique patient ids."""
        return sorted({r.patient_id for r in self.records})

    def patient_label(self, patient_id: str) -> int:
        """Patient-level label: max over the patient's nodule labels."""
        labels = [r.label_one_year for r in self.records if r.patient_id == patient_id]
        if not labels:
            raise KeyError(patient_id)
        return max(labels)

    def subset(self, patient_ids, name: str | None = None) -> "CohortManifest":
        wanted = set(patient_ids)
        recs = [r for r in self.records if r.patient_id in wanted]
        return CohortManifest(recs, name=name or self.name)


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_patients: frozenset[str]
    val_patients: frozenset[str]

    def __post_init__(self):
        if self.train_patients & self.val_patients:
            raise ManifestError(
                f"fold {self.fold_index}: train and validation patients overlap"
            )


def load_manifest(path, name: str | None = None) -> CohortManifest:
    """Load and validate a cohort manifest CSV.

    Every validation failure is reported with the offending 1-based data row.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    records: list[NoduleRecord] = []
    seen: dict[tuple[str, str], int] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        got = tuple(reader.fieldnames or ())
        if got != MANIFEST_COLUMNS:
            raise ManifestError(
                f"bad manifest header {got}; expected {MANIFEST_COLUMNS}"
            )
        for row_idx, row in enumerate(reader, start=1):
            try:
                centroid = tuple(float(row[c]) for c in ("cx_mm", "cy_mm", "cz_mm"))
                label_txt = row["label"].strip()
                if label_txt not in ("0", "1"):
                    raise ManifestError(f"label outside {{0,1}}: {label_txt!r}")
                rec = NoduleRecord(
                    patient_id=row["patient_id"].strip(),
                    nodule_id=row["nodule_id"].strip(),
                    volume_uri=row["volume_uri"].strip(),
                    centroid_mm=centroid,
                    label_one_year=int(label_txt),
                    semantics_uri=row["semantics_uri"].strip() or None,
                )
            except (ValueError, KeyError) as exc:
                raise ManifestError(f"row {row_idx}: {exc}") from exc
            if rec.key in seen:
                raise ManifestError(
                    f"row {row_idx}: duplicate (patient_id, nodule_id) {rec.key} "
                    f"first seen at row {seen[rec.key]}"
                )
            seen[rec.key] = row_idx
            records.append(rec)
    if not records:
        raise ManifestError(f"{path}: manifest has no data rows")
    return CohortManifest(records, name=name or path.stem)


def save_manifest(path, manifest: CohortManifest) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            writer.writerow(
                [
                    r.patient_id,
                    r.nodule_id,
                    r.volume_uri,
                    repr(r.centroid_mm[0]),
                    repr(r.centroid_mm[1]),
                    repr(r.centroid_mm[2]),
                    r.label_one_year,
                    r.semantics_uri or "",
                ]
            )


def absolutize_uris(manifest: CohortManifest, root) -> CohortManifest:
    """Rewrite volume/semantics URIs as absolute paths under ``root`` so the
    manifest stays valid when copied into another directory."""
    root = Path(root)

    def fix(uri):
        if not uri:
            return uri
        path = Path(uri)
        return str(path if path.is_absolute() else (root / path).resolve())

    records = [
        NoduleRecord(
            patient_id=r.patient_id,
            nodule_id=r.nodule_id,
            volume_uri=fix(r.volume_uri),
            centroid_mm=r.centroid_mm,
            label_one_year=r.label_one_year,
            semantics_uri=fix(r.semantics_uri),
        )
        for r in manifest.records
    ]
    return CohortManifest(records, name=manifest.name)


def hold_out_test(
    manifest: CohortManifest, fraction: float, seed: int
) -> tuple[CohortManifest, CohortManifest]:
    """Split off a patient-level test set.

    The test set holds round(fraction * n_patients) patients (half rounds up,
    clamped so both sides stay nonempty), chosen by a seeded shuffle of the
    sorted patient ids.
    """
    if not (0.0 < fraction < 1.0):
        raise ManifestError(f"fraction must lie in (0, 1), got {fraction}")
    patients = manifest.patients()
    if len(patients) < 2:
        raise ManifestError("need at least 2 patients to hold out a test set")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    n_test = int(math.floor(fraction * len(patients) + 0.5))
    n_test = min(max(n_test, 1), len(patients) - 1)
    test_patients = set(order[:n_test])
    train = manifest.subset(
        [p for p in patients if p not in test_patients], name=f"{manifest.name}-train"
    )
    test = manifest.subset(sorted(test_patients), name=f"{manifest.name}-test")
    return train, test


def make_patient_folds(
    manifest: CohortManifest, k: int, seed: int, stratified: bool = False
) -> list[FoldSplit]:
    """Partition patients into k cross-validation folds.

    Validation sets are pairwise disjoint, cover every patient, and their
    sizes differ by at most one. Assignment is a seeded shuffle of the sorted
    patient ids; ``stratified=True`` additionally balances the patient-level
    labels across folds (off by default).
    """
    if k < 2:
        raise ManifestError(f"k must be >= 2, got {k}")
    patients = manifest.patients()
    if len(patients) < k:
        raise ManifestError(f"{len(patients)} patients < k={k}")
    rng = np.random.default_rng(seed)

    if stratified:
        by_label: dict[int, list[str]] = {0: [], 1: []}
        for p in patients:
            by_label[manifest.patient_label(p)].append(p)
        ordered: list[str] = []
        for label in (1, 0):
            group = by_label[label]
            ordered.extend(group[i] for i in rng.permutation(len(group)))
        assignment: dict[int, list[str]] = {i: [] for i in range(k)}
        for pos, p in enumerate(ordered):
            assignment[pos % k].append(p)
        val_sets = [assignment[i] for i in range(k)]
    else:
        order = [patients[i] for i in rng.permutation(len(patients))]
        base, extra = divmod(len(order), k)
        val_sets = []
        start = 0
        for i in range(k):
            size = base + (1 if i < extra else 0)
            val_sets.append(order[start : start + size])
            start += size

    all_patients = set(patients)
    folds = []
    for i, val in enumerate(val_sets):
        val_set = frozenset(val)
        folds.append(
            FoldSplit(
                fold_index=i,
                train_patients=frozenset(all_patients - val_set),
                val_patients=val_set,
            )
        )
    return folds


def save_splits(path, folds: list[FoldSplit]) -> None:
    payload = {
        "folds": [
            {
                "fold_index": f.fold_index,
                "train_patients": sorted(f.train_patients),
                "val_patients": sorted(f.val_patients),
            }
            for f in folds
        ]
    }
    write_json(path, payload)


def load_splits(path) -> list[FoldSplit]:
    payload = read_json(path)
    return [
        FoldSplit(
            fold_index=int(f["fold_index"]),
            train_patients=frozenset(f["train_patients"]),
            val_patients=frozenset(f["val_patients"]),
        )
        for f in payload["folds"]
    ]
