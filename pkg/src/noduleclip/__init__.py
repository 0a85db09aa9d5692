"""Semantic-guided vision-language pipeline for lung-nodule malignancy
prediction: 2.5D CT preprocessing, report templating, a frozen dual encoder
with low-rank adapters and attention-MIL pooling, contrastive plus supervised
training, calibrated patient-level ensembling, and zero-shot semantic
inference."""

from .manifest import (
    CohortManifest,
    FoldSplit,
    NoduleRecord,
    hold_out_test,
    load_manifest,
    make_patient_folds,
)
from .model import EncoderConfig, LoRAConfig, ModelBundle, load_checkpoint, save_checkpoint
from .preprocess import (
    AugmentationConfig,
    ChannelNormalization,
    NoduleCrop,
    ViewStack,
    Volume,
)
from .semantics import NoduleReport, SemanticFeatureSet
from .train import CohortData, TrainConfig, run_cv, train_fold

__version__ = "0.1.0"
