"""Dual-encoder network: patch-transformer vision encoder over nine views,
token-transformer text encoder, low-rank adapters on every q/k/v projection,
attention-MIL pooling, projection heads into the shared 256-d space, and two
supervised risk heads with a learnable log-space temperature.

Base encoder weights are frozen; only adapters, MIL, projections, risk heads,
and the temperature train.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .archive import load_archive, save_archive
from .preprocess import ChannelNormalization, ViewStack
from .tokenizer import END_ID, BPETokenizer, ToyTokenizer
from .util import read_json, write_json

EMBED_DIM = 256


class ModelError(ValueError):
    pass


@dataclass
class VisionConfig:
    image_size: int = 224
    patch_size: int = 32
    width: int = 768
    depth: int = 12
    heads: int = 12

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ModelError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.width % self.heads != 0:
            raise ModelError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass
class TextConfig:
    context_length: int = 77
    vocab_size: int = 49408
    width: int = 512
    depth: int = 12
    heads: int = 8
    end_token_id: int = END_ID

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ModelError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass
class LoRAConfig:
    rank: int = 2
    scale: float = 1.0
    dropout: float = 0.25

    def __post_init__(self):
        if self.rank < 1:
            raise ModelError(f"LoRA rank must be >= 1, got {self.rank}")


@dataclass
class EncoderConfig:
    vision: VisionConfig = field(default_factory=VisionConfig)
    text: TextConfig = field(default_factory=TextConfig)
    embed_dim: int = EMBED_DIM
    preset: str = "toy"
    mil_hidden: int = 128
    gated_mil: bool = False
    proj_hidden: int | None = None
    risk_on_projection: bool = True
    temperature_init: float = 0.03
    normalization: ChannelNormalization = field(default_factory=ChannelNormalization)

    def __post_init__(self):
        if self.embed_dim != EMBED_DIM:
            raise ModelError(f"embed_dim must be {EMBED_DIM}, got {self.embed_dim}")

    @classmethod
    def toy(cls, **overrides) -> "EncoderConfig":
        """Small random-init preset for desk-scale training and tests."""
        defaults = dict(
            vision=VisionConfig(image_size=224, patch_size=32, width=96, depth=2, heads=4),
            text=TextConfig(context_length=64, vocab_size=1024, width=96, depth=2, heads=4),
            preset="toy",
            mil_hidden=64,
        )
        defaults.update(overrides)
        return cls(**defaults)

    @classmethod
    def pretrained_compatible(cls, **overrides) -> "EncoderConfig":
        """Shapes matching the upstream ViT-B/32 dual encoder."""
        defaults = dict(
            vision=VisionConfig(image_size=224, patch_size=32, width=768, depth=12, heads=12),
            text=TextConfig(context_length=77, vocab_size=49408, width=512, depth=12, heads=8),
            preset="pretrained-compatible",
            mil_hidden=128,
        )
        defaults.update(overrides)
        return cls(**defaults)

    def to_json_dict(self) -> dict:
        out = asdict(self)
        out["normalization"] = {
            "mean": list(self.normalization.mean),
            "std": list(self.normalization.std),
        }
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "EncoderConfig":
        data = dict(data)
        norm = data.pop("normalization", None)
        cfg = cls(
            vision=VisionConfig(**data.pop("vision")),
            text=TextConfig(**data.pop("text")),
            normalization=ChannelNormalization(
                mean=tuple(norm["mean"]), std=tuple(norm["std"])
            )
            if norm
            else ChannelNormalization(),
            **data,
        )
        return cfg

    def make_tokenizer(self, vocab_file=None):
        if vocab_file is not None:
            return BPETokenizer.from_vocab_file(vocab_file)
        return ToyTokenizer(
            vocab_size=self.text.vocab_size, context_length=self.text.context_length
        )


class LoRALinear(nn.Module):
    """Frozen linear projection plus a trainable low-rank bypass.

    y = W x + b + scale * B (A dropout(x)); B starts at zero so a fresh
    adapter leaves the base projection untouched. Dropout acts on the adapter
    path only and only in training mode.
    """

    def __init__(self, in_features: int, out_features: int, lora: LoRAConfig, bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features), requires_grad=False)
        self.bias = nn.Parameter(torch.zeros(out_features), requires_grad=False) if bias else None
        self.lora_a = nn.Parameter(torch.zeros(lora.rank, in_features))
        self.lora_b = nn.Parameter(torch.zeros(out_features, lora.rank))
        self.scale = lora.scale
        self.adapter_dropout = nn.Dropout(lora.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        base = F.linear(x, self.weight, self.bias)
        delta = F.linear(F.linear(self.adapter_dropout(x), self.lora_a), self.lora_b)
        return base + self.scale * delta


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int, lora: LoRAConfig):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = LoRALinear(width, width, lora)
        self.k_proj = LoRALinear(width, width, lora)
        self.v_proj = LoRALinear(width, width, lora)
        self.out_proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        b, n, w = x.shape
        q = self.q_proj(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        out = out.transpose(1, 2).reshape(b, n, w)
        return self.out_proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, width: int, heads: int, lora: LoRAConfig):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads, lora)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, width * 4), nn.GELU(), nn.Linear(width * 4, width)
        )

    def forward(self, x: torch.Tensor, causal: bool = False) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x), causal=causal)
        x = x + self.mlp(self.ln_2(x))
        return x


class VisionTransformer(nn.Module):
    def __init__(self, cfg: VisionConfig, lora: LoRAConfig):
        super().__init__()
        self.cfg = cfg
        n_patches = (cfg.image_size // cfg.patch_size) ** 2
        self.patch_embed = nn.Conv2d(
            3, cfg.width, kernel_size=cfg.patch_size, stride=cfg.patch_size, bias=False
        )
        self.class_embedding = nn.Parameter(torch.zeros(cfg.width))
        self.positional_embedding = nn.Parameter(torch.zeros(n_patches + 1, cfg.width))
        self.ln_pre = nn.LayerNorm(cfg.width)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads, lora) for _ in range(cfg.depth)
        )
        self.ln_post = nn.LayerNorm(cfg.width)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        b = images.shape[0]
        x = self.patch_embed(images).flatten(2).transpose(1, 2)  # (b, patches, width)
        cls = self.class_embedding.to(x.dtype).expand(b, 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding.to(x.dtype)
        x = self.ln_pre(x)
        for block in self.blocks:
            x = block(x)
        return self.ln_post(x[:, 0])


class TextTransformer(nn.Module):
    def __init__(self, cfg: TextConfig, lora: LoRAConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.width)
        self.positional_embedding = nn.Parameter(torch.zeros(cfg.context_length, cfg.width))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.width, cfg.heads, lora) for _ in range(cfg.depth)
        )
        self.ln_final = nn.LayerNorm(cfg.width)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.shape[1] > self.cfg.context_length:
            raise ModelError(
                f"sequence length {token_ids.shape[1]} exceeds context "
                f"{self.cfg.context_length}"
            )
        if token_ids.min() < 0 or token_ids.max() >= self.cfg.vocab_size:
            raise ModelError("token id out of vocabulary")
        x = self.token_embedding(token_ids)
        x = x + self.positional_embedding[: token_ids.shape[1]].to(x.dtype)
        for block in self.blocks:
            x = block(x, causal=True)
        x = self.ln_final(x)
        eot = (token_ids == self.cfg.end_token_id).float().argmax(dim=1)
        return x[torch.arange(x.shape[0], device=x.device), eot]


class MILAttention(nn.Module):
    """Attention pooling over a bag of view features.

    Plain variant scores each view with w^T tanh(V h); the gated variant
    multiplies by sigmoid(U h). Weights are a softmax over the bag.
    """

    def __init__(self, width: int, hidden: int, gated: bool = False):
        super().__init__()
        self.score_v = nn.Linear(width, hidden)
        self.score_w = nn.Linear(hidden, 1)
        self.score_u = nn.Linear(width, hidden) if gated else None

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if features.ndim != 3:
            raise ModelError(f"expected (batch, views, width), got {tuple(features.shape)}")
        h = torch.tanh(self.score_v(features))
        if self.score_u is not None:
            h = h * torch.sigmoid(self.score_u(features))
        scores = self.score_w(h).squeeze(-1)
        weights = torch.softmax(scores, dim=1)
        pooled = torch.einsum("bv,bvw->bw", weights, features)
        return pooled, weights


def _make_projection(in_dim: int, hidden: int | None) -> nn.Module:
    if hidden is None:
        return nn.Linear(in_dim, EMBED_DIM)
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, EMBED_DIM))


class ModelBundle(nn.Module):
    def __init__(self, config: EncoderConfig, lora: LoRAConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config
        self.lora = lora or LoRAConfig()
        self.visual = VisionTransformer(config.vision, self.lora)
        self.textual = TextTransformer(config.text, self.lora)
        self.mil = MILAttention(config.vision.width, config.mil_hidden, config.gated_mil)
        self.image_proj = _make_projection(config.vision.width, config.proj_hidden)
        self.text_proj = _make_projection(config.text.width, config.proj_hidden)
        risk_in = EMBED_DIM if config.risk_on_projection else None
        self.image_risk = nn.Linear(risk_in or config.vision.width, 2)
        self.text_risk = nn.Linear(risk_in or config.text.width, 2)
        self.log_temperature = nn.Parameter(
            torch.tensor(math.log(config.temperature_init), dtype=torch.float32)
        )
        self._initialize(seed)
        self._freeze_base()

    # -- construction -----------------------------------------------------

    def _initialize(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)

        def normal_(tensor, std):
            with torch.no_grad():
                tensor.normal_(0.0, std, generator=gen)

        for module in self.modules():
            if isinstance(module, nn.LayerNorm):
                with torch.no_grad():
                    module.weight.fill_(1.0)
                    module.bias.zero_()
            elif isinstance(module, LoRALinear):
                normal_(module.weight, module.in_features**-0.5)
                if module.bias is not None:
                    with torch.no_grad():
                        module.bias.zero_()
                normal_(module.lora_a, 0.02)
                with torch.no_grad():
                    module.lora_b.zero_()
            elif isinstance(module, nn.Linear):
                normal_(module.weight, module.in_features**-0.5)
                if module.bias is not None:
                    with torch.no_grad():
                        module.bias.zero_()
            elif isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                normal_(module.weight, fan_in**-0.5)
            elif isinstance(module, nn.Embedding):
                normal_(module.weight, 0.02)
        normal_(self.visual.class_embedding, 0.02)
        normal_(self.visual.positional_embedding, 0.01)
        normal_(self.textual.positional_embedding, 0.01)
        with torch.no_grad():
            self.log_temperature.fill_(math.log(self.config.temperature_init))

    def _freeze_base(self) -> None:
        for name, param in self.named_parameters():
            is_adapter = "lora_a" in name or "lora_b" in name
            in_encoders = name.startswith("visual.") or name.startswith("textual.")
            param.requires_grad = is_adapter or not in_encoders

    # -- parameter bookkeeping ---------------------------------------------

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def base_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if not p.requires_grad]

    def base_state_hash(self) -> str:
        import hashlib

        digest = hashlib.sha256()
        for name, param in sorted(self.named_parameters()):
            if not param.requires_grad:
                digest.update(name.encode())
                digest.update(param.detach().cpu().numpy().tobytes())
        return digest.hexdigest()

    # -- forward pieces ------------------------------------------------------

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    def encode_views(self, views: torch.Tensor) -> torch.Tensor:
        """(B, 9, 3, H, W) -> (B, 9, width), view order preserved."""
        if views.ndim == 4:
            views = views.unsqueeze(0)
        if views.ndim != 5 or views.shape[1] != 9:
            raise ModelError(f"expected (batch, 9, 3, H, W) views, got {tuple(views.shape)}")
        b, v = views.shape[:2]
        flat = views.reshape(b * v, *views.shape[2:])
        feats = self.visual(flat)
        return feats.reshape(b, v, -1)

    def image_embedding(self, views: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """MIL-pooled, projected image embedding plus the attention weights."""
        pooled, weights = self.mil(self.encode_views(views))
        return self.image_proj(pooled), weights

    def encode_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.ndim == 1:
            token_ids = token_ids.unsqueeze(0)
        return self.textual(token_ids)

    def text_embedding(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.text_proj(self.encode_text(token_ids))

    def forward(self, views: torch.Tensor, token_ids: torch.Tensor) -> dict:
        image_emb, attn = self.image_embedding(views)
        text_emb = self.text_embedding(token_ids)
        return {
            "image_embedding": image_emb,
            "text_embedding": text_emb,
            "image_logits": self.image_risk(image_emb),
            "text_logits": self.text_risk(text_emb),
            "attention": attn,
            "temperature": self.temperature,
        }


def predict_risk(feature: torch.Tensor, head: nn.Module) -> torch.Tensor:
    """Two logits; malignancy probability is softmax component 1."""
    return head(feature)


def risk_probability(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)[..., 1]


def trainable_parameter_fraction(bundle: ModelBundle) -> float:
    trainable = sum(p.numel() for p in bundle.parameters() if p.requires_grad)
    total = sum(p.numel() for p in bundle.parameters())
    return trainable / total


def count_parameters(bundle: ModelBundle) -> dict[str, int]:
    trainable = sum(p.numel() for p in bundle.parameters() if p.requires_grad)
    total = sum(p.numel() for p in bundle.parameters())
    return {"trainable": trainable, "frozen": total - trainable, "total": total}


def stack_to_tensor(stack: ViewStack, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(stack.views)).to(dtype)


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_WEIGHTS = "model.tarc"
CHECKPOINT_CONFIG = "config.json"


def save_checkpoint(directory, bundle: ModelBundle, meta: dict | None = None) -> None:
    """Write the full parameter set plus config/meta; round-trips losslessly."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {
        name: param.detach().cpu().numpy() for name, param in bundle.named_parameters()
    }
    save_archive(directory / CHECKPOINT_WEIGHTS, tensors)
    payload = {
        "encoder": bundle.config.to_json_dict(),
        "lora": asdict(bundle.lora),
        "meta": meta or {},
    }
    write_json(directory / CHECKPOINT_CONFIG, payload)


def load_checkpoint(directory) -> tuple[ModelBundle, dict]:
    directory = Path(directory)
    payload = read_json(directory / CHECKPOINT_CONFIG)
    config = EncoderConfig.from_json_dict(payload["encoder"])
    bundle = ModelBundle(config, LoRAConfig(**payload["lora"]))
    tensors, _ = load_archive(directory / CHECKPOINT_WEIGHTS)
    params = dict(bundle.named_parameters())
    if set(tensors) != set(params):
        missing = set(params) ^ set(tensors)
        raise ModelError(f"checkpoint/config mismatch; differing tensors: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, arr in tensors.items():
            if tuple(params[name].shape) != tuple(arr.shape):
                raise ModelError(
                    f"checkpoint/config mismatch on {name}: "
                    f"{tuple(arr.shape)} vs {tuple(params[name].shape)}"
                )
            params[name].copy_(torch.from_numpy(arr))
    bundle.eval()
    return bundle, payload["meta"]


def load_pretrained_weights(bundle: ModelBundle, archive_path) -> None:
    """Load frozen base weights from a flat tensor archive (name -> float32).

    Archive names must match the bundle's parameter names; adapters and heads
    are left at their initialization. Converting an upstream checkpoint into
    this archive format is a documented offline step.
    """
    tensors, _ = load_archive(archive_path)
    params = dict(bundle.named_parameters())
    unknown = set(tensors) - set(params)
    if unknown:
        raise ModelError(f"archive tensors not in model: {sorted(unknown)[:5]}")
    with torch.no_grad():
        for name, arr in tensors.items():
            if tuple(params[name].shape) != tuple(arr.shape):
                raise ModelError(
                    f"shape mismatch for {name}: {tuple(arr.shape)} vs "
                    f"{tuple(params[name].shape)}"
                )
            params[name].copy_(torch.from_numpy(arr))
