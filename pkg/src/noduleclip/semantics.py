"""Structured semantic-feature handling: the 19-feature nodule vocabulary,
cross-schema harmonization, deterministic report templating, and training-time
text augmentation.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from numbers import Real

import numpy as np

# --- feature vocabulary ------------------------------------------------------

LONGEST_DIAMETER = "Longest Axial Diameter"
SHORT_DIAMETER = "Short Diameter"
MARGIN = "Nodule Margin"
CONSISTENCY = "Nodule Consistency"
SHAPE = "Nodule Shape"
CONSPICUITY = "Nodule Margin Conspicuity"
RETICULATION = "Nodule Reticulation"
CYST_LIKE_SPACES = "Cyst-like Spaces"
NECROSIS = "Necrosis"
ECCENTRIC_CALCIFICATION = "Eccentric Calcification"
CAVITATION = "Cavitation"
BRONCHIECTASIS = "Intra-nodular Bronchiectasis"
AIRWAY_CUTOFF = "Airway Cutoff"
VASCULAR_CONVERGENCE = "Vascular Convergence"
PLEURAL_RETRACTION = "Pleural Retraction"
PLEURAL_ATTACHMENT = "Pleural Attachment"
EMPHYSEMA = "Paracicatricial Emphysema"
SEPTAL_STRETCHING = "Septal Stretching"
SUSPICION = "Level of Suspicion of Lung Cancer"

NUMERIC_FEATURES = (LONGEST_DIAMETER, SHORT_DIAMETER)
BINARY_FEATURES = (
    RETICULATION,
    CYST_LIKE_SPACES,
    NECROSIS,
    ECCENTRIC_CALCIFICATION,
    CAVITATION,
    BRONCHIECTASIS,
    AIRWAY_CUTOFF,
    VASCULAR_CONVERGENCE,
    PLEURAL_RETRACTION,
    PLEURAL_ATTACHMENT,
    EMPHYSEMA,
    SEPTAL_STRETCHING,
)

MARGIN_CLASSES = ("Smooth", "Lobulated", "Spiculated", "Ill-defined", "Notched")
CONSISTENCY_CLASSES = (
    "Peri-cystic",
    "Solid",
    "Pure ground glass",
    "Semiconsolidation",
    "Part-solid",
)
SHAPE_CLASSES = ("Irregular", "Ovoid", "Polygonal", "Round")
CONSPICUITY_CLASSES = ("Well marginated", "Poorly marginated")
PRESENCE_CLASSES = ("Present", "Absent")
SUSPICION_CLASSES = ("Very Low", "Moderately Low", "Intermediate", "Moderately High", "High")

FEATURE_CLASSES: dict[str, tuple[str, ...]] = {
    MARGIN: MARGIN_CLASSES,
    CONSISTENCY: CONSISTENCY_CLASSES,
    SHAPE: SHAPE_CLASSES,
    CONSPICUITY: CONSPICUITY_CLASSES,
    SUSPICION: SUSPICION_CLASSES,
    **{name: PRESENCE_CLASSES for name in BINARY_FEATURES},
}

ALL_FEATURES = NUMERIC_FEATURES + (MARGIN, CONSISTENCY, SHAPE, CONSPICUITY) + BINARY_FEATURES + (
    SUSPICION,
)

# Class-value tokens are never touched by text augmentation.
PROTECTED_TERMS = frozenset(
    token
    for classes in FEATURE_CLASSES.values()
    for value in classes
    for token in value.lower().split()
)

_MISSING_STRINGS = {"", "n/a", "na", "missing", "none"}


class SemanticsError(ValueError):
    pass


def _is_missing(value) -> bool:
    if value is None:
        return True
    if isinstance(value, str) and value.strip().lower() in _MISSING_STRINGS:
        return True
    return False


@dataclass
class SemanticFeatureSet:
    """One value slot per vocabulary feature; absent slots are MISSING.

    Margin is a set (multiple margin characteristics may be annotated);
    diameters are nonnegative floats; the rest are single class labels.
    """

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        clean: dict = {}
        for name, value in self.values.items():
            if name not in ALL_FEATURES:
                raise SemanticsError(f"unknown semantic feature {name!r}")
            if _is_missing(value):
                continue
            if name in NUMERIC_FEATURES:
                value = float(value)
                if not np.isfinite(value) or value < 0:
                    raise SemanticsError(f"{name}: diameter must be >= 0, got {value}")
            elif name == MARGIN:
                if isinstance(value, str):
                    value = [value]
                value = frozenset(str(v) for v in value if not _is_missing(v))
                if not value:
                    continue
                bad = value - set(MARGIN_CLASSES)
                if bad:
                    raise SemanticsError(f"{name}: unknown classes {sorted(bad)}")
            else:
                value = str(value)
                if value not in FEATURE_CLASSES[name]:
                    raise SemanticsError(f"{name}: unknown class {value!r}")
            clean[name] = value
        self.values = clean

    def get(self, name: str):
        """Value for a feature, or None when MISSING."""
        if name not in ALL_FEATURES:
            raise SemanticsError(f"unknown semantic feature {name!r}")
        return self.values.get(name)

    def present_features(self) -> list[str]:
        return [name for name in ALL_FEATURES if name in self.values]

    def present_items(self) -> list[tuple[str, str]]:
        """(feature, class-value) pairs; the margin set contributes one pair
        per annotated class."""
        items = []
        for name in self.present_features():
            value = self.values[name]
            if name == MARGIN:
                items.extend((name, cls) for cls in sorted(value))
            elif name in NUMERIC_FEATURES:
                items.append((name, f"{float(value):g}"))
            else:
                items.append((name, value))
        return items

    def to_json_dict(self) -> dict:
        out = {}
        for name, value in self.values.items():
            if name == MARGIN:
                out[name] = sorted(value)
            else:
                out[name] = value
        return out


def load_semantics(path) -> dict[tuple[str, str], SemanticFeatureSet]:
    """Read annotations keyed by "patient_id/nodule_id" from a JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    out = {}
    for key, values in payload.items():
        patient_id, _, nodule_id = key.partition("/")
        if not patient_id or not nodule_id:
            raise SemanticsError(f"bad semantics key {key!r}; expected 'patient/nodule'")
        out[(patient_id, nodule_id)] = SemanticFeatureSet(values)
    return out


def save_semantics(path, annotations: dict[tuple[str, str], SemanticFeatureSet]) -> None:
    payload = {
        f"{pid}/{nid}": features.to_json_dict()
        for (pid, nid), features in sorted(annotations.items())
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- cross-schema harmonization ----------------------------------------------

LIDC_FEATURES = (
    "internal_structure",
    "calcification",
    "sphericity",
    "margin",
    "lobulation",
    "spiculation",
    "texture",
)
_LIDC_NUMERIC = ("sphericity", "margin", "lobulation", "spiculation", "texture")


def _norm_category(value: str) -> str:
    return re.sub(r"[\s\-_]+", " ", str(value)).strip().lower()


def harmonize_lidc(lidc_record: dict) -> SemanticFeatureSet:
    """Map an LIDC annotation onto the shared vocabulary.

    Rules: internal structure "Air" marks cyst-like spaces Present (else
    Absent); calcification "Non central appearance" marks eccentric
    calcification Present (else Absent); sphericity >3 -> Round else Ovoid;
    margin >=3 -> Well marginated else Poorly marginated; lobulation >=3 adds
    Lobulated and spiculation >=3 adds Spiculated to the margin set; texture
    >4 -> Solid, 2..4 -> Part-solid, <2 -> Pure ground glass. Features without
    a source stay MISSING.
    """
    unknown = set(lidc_record) - set(LIDC_FEATURES)
    if unknown:
        raise SemanticsError(f"unknown LIDC feature name(s): {sorted(unknown)}")
    for name in _LIDC_NUMERIC:
        if name in lidc_record and not _is_missing(lidc_record[name]):
            value = lidc_record[name]
            if not isinstance(value, Real) or not (1.0 <= float(value) <= 5.0):
                raise SemanticsError(f"LIDC {name} score out of range 1-5: {value!r}")

    values: dict = {}
    if not _is_missing(lidc_record.get("internal_structure")):
        is_air = _norm_category(lidc_record["internal_structure"]) == "air"
        values[CYST_LIKE_SPACES] = "Present" if is_air else "Absent"
    if not _is_missing(lidc_record.get("calcification")):
        non_central = _norm_category(lidc_record["calcification"]) == "non central appearance"
        values[ECCENTRIC_CALCIFICATION] = "Present" if non_central else "Absent"
    if not _is_missing(lidc_record.get("sphericity")):
        values[SHAPE] = "Round" if float(lidc_record["sphericity"]) > 3 else "Ovoid"
    if not _is_missing(lidc_record.get("margin")):
        well = float(lidc_record["margin"]) >= 3
        values[CONSPICUITY] = "Well marginated" if well else "Poorly marginated"
    margin_set = set()
    if not _is_missing(lidc_record.get("lobulation")) and float(lidc_record["lobulation"]) >= 3:
        margin_set.add("Lobulated")
    if not _is_missing(lidc_record.get("spiculation")) and float(lidc_record["spiculation"]) >= 3:
        margin_set.add("Spiculated")
    if margin_set:
        values[MARGIN] = margin_set
    if not _is_missing(lidc_record.get("texture")):
        texture = float(lidc_record["texture"])
        if texture > 4:
            values[CONSISTENCY] = "Solid"
        elif texture >= 2:
            values[CONSISTENCY] = "Part-solid"
        else:
            values[CONSISTENCY] = "Pure ground glass"
    return SemanticFeatureSet(values)


def aggregate_annotations(scores: list):
    """Collapse multiple readers' values: lower median for numbers, modal
    class with lexicographic tie-break for categories."""
    if not scores:
        raise SemanticsError("cannot aggregate an empty list of scores")
    if all(isinstance(s, Real) and not isinstance(s, bool) for s in scores):
        ordered = sorted(float(s) for s in scores)
        return ordered[(len(ordered) - 1) // 2]
    counts: dict[str, int] = {}
    for s in scores:
        counts[str(s)] = counts.get(str(s), 0) + 1
    best = max(counts.values())
    return sorted(v for v, c in counts.items() if c == best)[0]


# --- report rendering ----------------------------------------------------------

@dataclass
class NoduleReport:
    findings: list[str]
    impression: str

    def __post_init__(self):
        if not self.findings:
            raise SemanticsError("report findings must be nonempty")

    def findings_text(self) -> str:
        return "\n".join(self.findings)


_BULLET_NAMES = {
    LONGEST_DIAMETER: "Longest axial diameter (mm)",
    SHORT_DIAMETER: "Short diameter (mm)",
    MARGIN: "Nodule margins",
    CONSISTENCY: "Nodule consistency",
    SHAPE: "Nodule shape",
    CONSPICUITY: "Nodule margin conspicuity",
    RETICULATION: "Nodule reticulation",
    CYST_LIKE_SPACES: "Cyst-like spaces",
    NECROSIS: "Necrosis",
    ECCENTRIC_CALCIFICATION: "Eccentric calcification",
    CAVITATION: "Cavitation",
    BRONCHIECTASIS: "Intra nodular bronchiectasis",
    AIRWAY_CUTOFF: "Airway cutoff",
    VASCULAR_CONVERGENCE: "Vascular convergence",
    PLEURAL_RETRACTION: "Pleural retraction",
    PLEURAL_ATTACHMENT: "Pleural attachment",
    EMPHYSEMA: "Paracicatricial emphysema",
    SEPTAL_STRETCHING: "Septal stretching",
    SUSPICION: "Level of suspicion of lung cancer",
}

# Margin adjectives ordered so the most malignancy-salient sits next to
# "margins" in the impression phrase.
_IMPRESSION_MARGIN_ORDER = ("Smooth", "Notched", "Ill-defined", "Lobulated", "Spiculated")

# Noun phrases for "associated with ..." in the impression.
_ASSOCIATION_PHRASES = {
    RETICULATION: "reticulation",
    CYST_LIKE_SPACES: "cyst-like spaces",
    NECROSIS: "necrosis",
    ECCENTRIC_CALCIFICATION: "eccentric calcification",
    CAVITATION: "cavitation",
    BRONCHIECTASIS: "intra-nodular bronchiectasis",
    AIRWAY_CUTOFF: "airway cutoff",
    VASCULAR_CONVERGENCE: "vascular convergence",
    PLEURAL_RETRACTION: "pleural retraction",
    PLEURAL_ATTACHMENT: "pleural attachment",
    EMPHYSEMA: "paracicatricial emphysema",
    SEPTAL_STRETCHING: "septal stretching",
}


def _format_value(name: str, value) -> str:
    if name in NUMERIC_FEATURES:
        return f"{float(value):.1f}"
    if name == MARGIN:
        ordered = [cls for cls in MARGIN_CLASSES if cls in value]
        return ", ".join(ordered)
    return str(value)


def _join_phrases(phrases: list[str]) -> str:
    if len(phrases) == 1:
        return phrases[0]
    if len(phrases) == 2:
        return f"{phrases[0]} and {phrases[1]}"
    return ", ".join(phrases[:-1]) + f", and {phrases[-1]}"


def render_report(features: SemanticFeatureSet, rng: np.random.Generator) -> NoduleReport:
    """Render findings bullets (randomly ordered, one per present feature,
    margins combined) and a templated impression that summarizes size,
    consistency, and salient positive findings without mentioning absences.
    """
    present = features.present_features()
    if not present:
        raise SemanticsError("cannot render a report: all features are MISSING")

    bullets = [
        f"- {_BULLET_NAMES[name]}: {_format_value(name, features.values[name])}"
        for name in present
    ]
    bullets = [bullets[i] for i in rng.permutation(len(bullets))]

    long_d = features.get(LONGEST_DIAMETER)
    short_d = features.get(SHORT_DIAMETER)
    consistency = features.get(CONSISTENCY)
    if long_d is not None and short_d is not None:
        size = f"{long_d:.1f} x {short_d:.1f} mm"
    elif long_d is not None:
        size = f"{long_d:.1f} mm"
    else:
        size = None
    noun = "nodule" if consistency is None else f"{consistency.lower()} nodule"
    if size:
        first = f"A {size}, {noun} is identified."
    else:
        article = "An" if noun[0] in "aeiou" else "A"
        first = f"{article} {noun} is identified."

    sentences = [first]
    descriptors = []
    margin = features.get(MARGIN)
    shape = features.get(SHAPE)
    if margin:
        adjectives = [cls.lower() for cls in _IMPRESSION_MARGIN_ORDER if cls in margin]
        if shape is not None:
            adjectives.insert(0, shape.lower())
        descriptors.append(f"{', '.join(adjectives)} margins")
    elif shape is not None:
        article = "an" if shape[0].lower() in "aeiou" else "a"
        descriptors.append(f"{article} {shape.lower()} shape")
    positives = [
        _ASSOCIATION_PHRASES[name]
        for name in BINARY_FEATURES
        if features.get(name) == "Present"
    ]
    if descriptors and positives:
        sentences.append(
            f"The nodule demonstrates {_join_phrases(descriptors)} and is associated "
            f"with {_join_phrases(positives)}."
        )
    elif descriptors:
        sentences.append(f"The nodule demonstrates {_join_phrases(descriptors)}.")
    elif positives:
        sentences.append(f"The nodule is associated with {_join_phrases(positives)}.")

    suspicion = features.get(SUSPICION)
    if suspicion is not None:
        sentences.append(f"The level of suspicion for lung cancer is {suspicion.lower()}.")

    return NoduleReport(findings=bullets, impression=" ".join(sentences))


# --- text augmentation ---------------------------------------------------------

SYNONYM_TABLE_RESOURCE = "synonyms.json"


@lru_cache(maxsize=1)
def load_synonym_table() -> dict:
    raw = resources.files("noduleclip.assets").joinpath(SYNONYM_TABLE_RESOURCE).read_text("utf-8")
    table = json.loads(raw)
    synonyms = {k.lower(): tuple(v) for k, v in table["synonyms"].items()}
    return {"version": table["version"], "synonyms": synonyms}


_TOKEN_SPLIT = re.compile(r"^(\W*)(.*?)(\W*)$", re.DOTALL)


def augment_text(
    text: str,
    rng: np.random.Generator,
    synonym_prob: float = 0.3,
    crop_prob: float = 0.5,
    min_keep_fraction: float = 0.6,
) -> str:
    """Substitute synonyms from the shipped table and/or crop a contiguous
    token span keeping at least ``min_keep_fraction`` of the tokens.

    Tokens matching protected clinical class terms are never substituted.
    With both probabilities at zero the text is returned unchanged.
    """
    if not text:
        raise SemanticsError("cannot augment empty text")
    tokens = text.split()
    if synonym_prob > 0:
        table = load_synonym_table()["synonyms"]
        out = []
        for token in tokens:
            head, core, tail = _TOKEN_SPLIT.match(token).groups()
            key = core.lower()
            if (
                core
                and key not in PROTECTED_TERMS
                and key in table
                and rng.random() < synonym_prob
            ):
                repl = table[key][rng.integers(0, len(table[key]))]
                if core[0].isupper():
                    repl = repl[0].upper() + repl[1:]
                token = f"{head}{repl}{tail}"
            out.append(token)
        tokens = out
    if crop_prob > 0 and rng.random() < crop_prob and len(tokens) > 1:
        min_keep = int(np.ceil(min_keep_fraction * len(tokens)))
        keep = int(rng.integers(min_keep, len(tokens) + 1))
        start = int(rng.integers(0, len(tokens) - keep + 1))
        tokens = tokens[start : start + keep]
    return " ".join(tokens)


def select_training_text(report: NoduleReport, rng: np.random.Generator) -> str:
    """Draw uniformly between the joined findings and the impression."""
    if rng.integers(0, 2) == 0:
        return report.findings_text()
    return report.impression
