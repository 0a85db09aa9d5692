"""Three-term training loss: symmetric InfoNCE alignment between image and
text embeddings plus class-weighted cross-entropy on each prediction branch.

Embeddings are L2-normalized inside the losses (cosine similarity), so
callers pass raw projection outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class ObjectiveError(ValueError):
    pass


def _as_temperature(temperature) -> torch.Tensor:
    t = temperature if isinstance(temperature, torch.Tensor) else torch.tensor(float(temperature))
    if float(t.detach()) <= 0:
        raise ObjectiveError(f"temperature must be positive, got {float(t.detach())}")
    return t


def _similarity(image_emb: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
    if image_emb.shape != text_emb.shape or image_emb.ndim != 2:
        raise ObjectiveError(
            f"paired embedding batches must share shape (B, D), got "
            f"{tuple(image_emb.shape)} and {tuple(text_emb.shape)}"
        )
    if image_emb.shape[0] < 2:
        raise ObjectiveError("contrastive losses need batch size >= 2")
    img = F.normalize(image_emb, dim=-1)
    txt = F.normalize(text_emb, dim=-1)
    return img @ txt.T


def info_nce_image(image_emb: torch.Tensor, text_emb: torch.Tensor, temperature) -> torch.Tensor:
    """Cross-entropy of each image row against its paired text column."""
    tau = _as_temperature(temperature)
    sim = _similarity(image_emb, text_emb) / tau
    targets = torch.arange(sim.shape[0], device=sim.device)
    return F.cross_entropy(sim, targets)


def info_nce_semantic(image_emb: torch.Tensor, text_emb: torch.Tensor, temperature) -> torch.Tensor:
    """Cross-entropy of each text row against its paired image column."""
    tau = _as_temperature(temperature)
    sim = _similarity(image_emb, text_emb) / tau
    targets = torch.arange(sim.shape[0], device=sim.device)
    return F.cross_entropy(sim.T, targets)


def clip_loss(image_emb: torch.Tensor, text_emb: torch.Tensor, temperature) -> torch.Tensor:
    return 0.5 * (
        info_nce_image(image_emb, text_emb, temperature)
        + info_nce_semantic(image_emb, text_emb, temperature)
    )


def weighted_cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor, class_weights: torch.Tensor
) -> torch.Tensor:
    """Per-sample weights class_weights[label], normalized by the applied
    weight total."""
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ObjectiveError(f"expected (B, 2) logits, got {tuple(logits.shape)}")
    labels = labels.long()
    if labels.min() < 0 or labels.max() > 1:
        raise ObjectiveError("labels must lie in {0, 1}")
    weights = class_weights.to(logits.dtype)
    if weights.shape != (2,) or bool((weights < 0).any()):
        raise ObjectiveError("class_weights must be 2 nonnegative values")
    if float(weights.sum()) == 0.0:
        raise ObjectiveError("class_weights must not both be zero")
    if float(weights[labels].sum()) == 0.0:
        raise ObjectiveError("zero total weight: no sample carries positive class weight")
    return F.cross_entropy(logits, labels, weight=weights)


def inverse_frequency_class_weights(labels: torch.Tensor) -> torch.Tensor:
    """Inverse class-frequency weights renormalized to mean 1.

    Both classes must be present; the rarer class gets the larger weight.
    """
    labels = labels.long()
    counts = torch.bincount(labels, minlength=2).float()
    if bool((counts == 0).any()):
        raise ObjectiveError("both classes must appear to derive class weights")
    weights = 1.0 / counts
    return weights / weights.mean()


@dataclass
class LossWeights:
    w_clip: float = 1.0
    w_ce_image: float = 1.0
    w_ce_text: float = 1.0
    class_weights: torch.Tensor | None = None

    def __post_init__(self):
        if min(self.w_clip, self.w_ce_image, self.w_ce_text) < 0:
            raise ObjectiveError("loss weights must be nonnegative")
        if max(self.w_clip, self.w_ce_image, self.w_ce_text) == 0:
            raise ObjectiveError("at least one loss weight must be positive")


@dataclass
class LossTerms:
    clip: torch.Tensor
    ce_image: torch.Tensor
    ce_text: torch.Tensor
    total: torch.Tensor

    def detach_floats(self) -> dict[str, float]:
        return {
            "clip": float(self.clip.detach()),
            "ce_image": float(self.ce_image.detach()),
            "ce_text": float(self.ce_text.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(
    image_emb: torch.Tensor,
    text_emb: torch.Tensor,
    labels: torch.Tensor,
    image_logits: torch.Tensor,
    text_logits: torch.Tensor,
    temperature,
    weights: LossWeights | None = None,
) -> LossTerms:
    """w_clip * CLIP + w_ce_image * CE(image) + w_ce_text * CE(text)."""
    weights = weights or LossWeights()
    class_weights = (
        weights.class_weights
        if weights.class_weights is not None
        else torch.ones(2, dtype=image_logits.dtype)
    )
    zero = image_emb.new_zeros(())
    contrastive = (
        clip_loss(image_emb, text_emb, temperature) if weights.w_clip > 0 else zero
    )
    ce_image = (
        weighted_cross_entropy(image_logits, labels, class_weights)
        if weights.w_ce_image > 0
        else zero
    )
    ce_text = (
        weighted_cross_entropy(text_logits, labels, class_weights)
        if weights.w_ce_text > 0
        else zero
    )
    total = weights.w_clip * contrastive + weights.w_ce_image * ce_image + weights.w_ce_text * ce_text
    return LossTerms(clip=contrastive, ce_image=ce_image, ce_text=ce_text, total=total)
