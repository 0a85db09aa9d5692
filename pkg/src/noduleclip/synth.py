"""Synthetic cohort generator: procedurally rendered nodules in noisy lung
backgrounds, with semantic annotations and labels tied to the morphology.

Spiculated nodules carry long radial spikes and label 1; smooth nodules are
near-spherical and label 0. Interior texture follows the annotated
consistency (solid core vs part-solid ground-glass halo). Deterministic for
a fixed seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import semantics as sem
from .manifest import CohortManifest, NoduleRecord, save_manifest
from .nifti import write_nifti
from .preprocess import Volume
from .util import derive_rng

GRID = 64
SPACING_CHOICES = (1.0, 1.1, 1.25)
BACKGROUND_HU = -870.0
SOLID_HU = 25.0
GROUND_GLASS_HU = -600.0


@dataclass
class NoduleTruth:
    patient_id: str
    nodule_id: str
    spiculated: bool
    radius_mm: float
    consistency: str
    label: int


def _radius_field(rng: np.random.Generator, spiculated: bool):
    """Direction-dependent radius multiplier r(d) = 1 + sum_j a_j max(0, d.u_j)^p."""
    if spiculated:
        n_lobes, power = 16, 8.0
        amps = rng.uniform(0.45, 0.95, size=n_lobes)
    else:
        n_lobes, power = 3, 2.0
        amps = rng.uniform(0.0, 0.05, size=n_lobes)
    axes = rng.normal(size=(n_lobes, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)

    def field(directions: np.ndarray) -> np.ndarray:
        dots = directions @ axes.T
        return 1.0 + (np.clip(dots, 0.0, None) ** power) @ amps

    return field, float(amps.max())


def _render_nodule(
    voxels: np.ndarray,
    spacing: float,
    center_mm: np.ndarray,
    radius_mm: float,
    field,
    max_amp: float,
    part_solid: bool,
    rng: np.random.Generator,
) -> None:
    reach = radius_mm * (1.0 + max_amp) + 2.0
    lo = np.maximum(np.floor((center_mm - reach) / spacing).astype(int), 0)
    hi = np.minimum(np.ceil((center_mm + reach) / spacing).astype(int) + 1, voxels.shape)
    grids = [np.arange(lo[a], hi[a]) * spacing - center_mm[a] for a in range(3)]
    gx, gy, gz = np.meshgrid(*grids, indexing="ij")
    offsets = np.stack([gx, gy, gz], axis=-1)
    dist = np.linalg.norm(offsets, axis=-1)
    dist_safe = np.maximum(dist, 1e-9)
    directions = offsets / dist_safe[..., None]
    local_radius = radius_mm * field(directions.reshape(-1, 3)).reshape(dist.shape)
    inside = dist <= local_radius

    box = voxels[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    texture = rng.normal(0.0, 15.0, size=box.shape)
    if part_solid:
        core = dist <= 0.55 * local_radius
        halo = inside & ~core
        box[halo] = GROUND_GLASS_HU + texture[halo]
        box[core] = SOLID_HU + texture[core]
    else:
        box[inside] = SOLID_HU + texture[inside]


def _semantic_features(
    rng: np.random.Generator, spiculated: bool, part_solid: bool, radius_mm: float, max_amp: float
) -> sem.SemanticFeatureSet:
    values: dict = {}
    longest = 2.0 * radius_mm * (1.0 + max_amp)
    values[sem.LONGEST_DIAMETER] = round(longest, 1)
    values[sem.SHORT_DIAMETER] = round(2.0 * radius_mm * rng.uniform(0.85, 1.0), 1)
    if spiculated:
        margin = {"Spiculated"}
        if rng.random() < 0.3:
            margin.add("Lobulated")
        values[sem.MARGIN] = margin
        values[sem.SHAPE] = "Irregular"
        values[sem.SUSPICION] = "High" if rng.random() < 0.6 else "Moderately High"
    else:
        values[sem.MARGIN] = {"Smooth"}
        values[sem.SHAPE] = "Round" if rng.random() < 0.6 else "Ovoid"
        values[sem.SUSPICION] = "Very Low" if rng.random() < 0.6 else "Moderately Low"
    values[sem.CONSISTENCY] = "Part-solid" if part_solid else "Solid"
    values[sem.CONSPICUITY] = (
        "Poorly marginated" if rng.random() < 0.15 else "Well marginated"
    )
    for name in sem.BINARY_FEATURES:
        if name == sem.AIRWAY_CUTOFF and rng.random() < 0.7:
            continue  # mostly missing, mirroring real annotation gaps
        if rng.random() < 0.05:
            continue
        if name in (sem.VASCULAR_CONVERGENCE, sem.SEPTAL_STRETCHING):
            p_present = 0.3 if spiculated else 0.05
        elif name == sem.PLEURAL_ATTACHMENT:
            p_present = 0.3
        elif name == sem.CYST_LIKE_SPACES:
            p_present = 0.08
        else:
            p_present = 0.03
        values[name] = "Present" if rng.random() < p_present else "Absent"
    return sem.SemanticFeatureSet(values)


def generate_cohort(
    out_dir,
    n_patients: int,
    seed: int,
    two_nodule_prob: float = 0.25,
    name: str = "synthetic",
) -> CohortManifest:
    """Write volumes/, semantics.json, manifest.csv, and truth.csv; returns the
    manifest."""
    if n_patients < 10:
        raise ValueError(f"need at least 10 patients, got {n_patients}")
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    rng = derive_rng(seed, "synthetic-cohort")

    records = []
    annotations = {}
    truths = []
    for p in range(n_patients):
        patient_id = f"P{p:04d}"
        n_nodules = 2 if rng.random() < two_nodule_prob else 1
        for n in range(n_nodules):
            nodule_id = f"{patient_id}-N{n}"  # globally unique: prediction CSVs key on it
            spacing = float(SPACING_CHOICES[rng.integers(0, len(SPACING_CHOICES))])
            shape = (GRID, GRID, GRID)
            voxels = BACKGROUND_HU + rng.normal(0.0, 25.0, size=shape)

            extent = (GRID - 1) * spacing
            center_mm = extent / 2.0 + rng.uniform(-6.0, 6.0, size=3)
            spiculated = bool(rng.random() < 0.5)
            part_solid = bool(rng.random() < 0.35)
            radius_mm = float(rng.uniform(6.0, 11.0))
            field, max_amp = _radius_field(rng, spiculated)
            _render_nodule(
                voxels, spacing, center_mm, radius_mm, field, max_amp, part_solid, rng
            )

            uri = f"volumes/{patient_id}_{nodule_id}.nii.gz"
            volume = Volume(
                voxels,
                spacing_mm=np.full(3, spacing),
                origin_mm=np.zeros(3),
            )
            write_nifti(out_dir / uri, volume, dtype="int16")

            label = int(spiculated)
            records.append(
                NoduleRecord(
                    patient_id=patient_id,
                    nodule_id=nodule_id,
                    volume_uri=uri,
                    centroid_mm=tuple(float(c) for c in center_mm),
                    label_one_year=label,
                    semantics_uri="semantics.json",
                )
            )
            annotations[(patient_id, nodule_id)] = _semantic_features(
                rng, spiculated, part_solid, radius_mm, max_amp
            )
            truths.append(
                NoduleTruth(
                    patient_id=patient_id,
                    nodule_id=nodule_id,
                    spiculated=spiculated,
                    radius_mm=radius_mm,
                    consistency="Part-solid" if part_solid else "Solid",
                    label=label,
                )
            )

    manifest = CohortManifest(records, name=name)
    save_manifest(out_dir / "manifest.csv", manifest)
    sem.save_semantics(out_dir / "semantics.json", annotations)
    with open(out_dir / "truth.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["patient_id", "nodule_id", "spiculated", "radius_mm", "consistency", "label"]
        )
        for t in truths:
            writer.writerow(
                [t.patient_id, t.nodule_id, int(t.spiculated), t.radius_mm, t.consistency, t.label]
            )
    return manifest


def load_truth(path) -> dict[tuple[str, str], dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        out = {}
        for row in reader:
            out[(row["patient_id"], row["nodule_id"])] = {
                "spiculated": bool(int(row["spiculated"])),
                "radius_mm": float(row["radius_mm"]),
                "consistency": row["consistency"],
                "label": int(row["label"]),
            }
    return out
