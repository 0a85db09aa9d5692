"""CT volume preprocessing: resampling, nodule cropping, intensity windowing,
nine-plane 2.5D slicing, model-input packing, and training augmentation.

Conventions: voxel (i, j, k) of a Volume sits at ``origin_mm + index * spacing_mm``
(axes x, y, z). Crops are 50x50x50 voxels at 1 mm isotropic spacing with the
center voxel at index 25 on each axis. HU windowing maps [-1000, 500] onto
[0, 1]; out-of-volume voxels are filled with -1000 HU (air) so they normalize
to 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

CROP_SIZE = 50
CROP_CENTER = CROP_SIZE // 2
VIEW_SIZE = 224
HU_MIN = -1000.0
HU_MAX = 500.0
PAD_HU = -1000.0
PREPROCESSING_VERSION = "1"

# Plane basis vectors in voxel coordinates (row direction, column direction).
_S = 1.0 / np.sqrt(2.0)
PLANE_BASES: dict[str, tuple[tuple[float, float, float], tuple[float, float, float]]] = {
    "axial": ((1, 0, 0), (0, 1, 0)),
    "coronal": ((1, 0, 0), (0, 0, 1)),
    "sagittal": ((0, 1, 0), (0, 0, 1)),
    "diag_z_xpy": ((0, 0, 1), (_S, _S, 0)),
    "diag_z_xmy": ((0, 0, 1), (_S, -_S, 0)),
    "diag_x_ypz": ((1, 0, 0), (0, _S, _S)),
    "diag_x_ymz": ((1, 0, 0), (0, _S, -_S)),
    "diag_y_xpz": ((0, 1, 0), (_S, 0, _S)),
    "diag_y_xmz": ((0, 1, 0), (_S, 0, -_S)),
}
PLANE_IDS = tuple(PLANE_BASES)


class PreprocessError(ValueError):
    pass


@dataclass
class Volume:
    """A 3D HU-valued grid with physical geometry."""

    voxels: np.ndarray
    spacing_mm: np.ndarray
    origin_mm: np.ndarray

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        self.spacing_mm = np.asarray(self.spacing_mm, dtype=np.float64)
        self.origin_mm = np.asarray(self.origin_mm, dtype=np.float64)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise PreprocessError(f"volume must be 3D, got shape {self.voxels.shape}")
        if self.spacing_mm.shape != (3,) or np.any(self.spacing_mm <= 0):
            raise PreprocessError(f"spacing must be 3 positive values, got {self.spacing_mm}")
        if self.origin_mm.shape != (3,):
            raise PreprocessError(f"origin must be a 3-vector, got {self.origin_mm}")
        if not np.all(np.isfinite(self.voxels)):
            raise PreprocessError("volume contains non-finite voxels")


@dataclass
class NoduleCrop:
    """50^3 crop around a nodule; ``pad_mask`` flags voxels filled from outside
    the source volume."""

    voxels: np.ndarray
    pad_mask: np.ndarray

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        shape = (CROP_SIZE,) * 3
        if self.voxels.shape != shape or self.pad_mask.shape != shape:
            raise PreprocessError(
                f"crop must be {shape}, got {self.voxels.shape}/{self.pad_mask.shape}"
            )


@dataclass
class ViewStack:
    """Nine channel-replicated, normalized 224x224 views of one nodule."""

    views: np.ndarray  # (9, 3, 224, 224) float32
    plane_ids: tuple[str, ...] = PLANE_IDS

    def __post_init__(self):
        self.views = np.asarray(self.views, dtype=np.float32)
        if self.views.shape != (9, 3, VIEW_SIZE, VIEW_SIZE):
            raise PreprocessError(f"view stack must be (9, 3, 224, 224), got {self.views.shape}")
        if len(self.plane_ids) != 9 or len(set(self.plane_ids)) != 9:
            raise PreprocessError("plane_ids must be 9 distinct labels")


@dataclass
class ChannelNormalization:
    """Per-channel affine normalization constants (pretrained model defaults)."""

    mean: tuple[float, float, float] = (0.48145466, 0.4578275, 0.40821073)
    std: tuple[float, float, float] = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class AugmentationConfig:
    jitter_mm: float = 5.0
    flip_prob: float = 0.5
    max_rotation_deg: float = 10.0
    noise_mean: float = 0.0
    noise_std: float = 0.02
    contrast_exponent_range: tuple[float, float] = (-0.02, 0.02)

    def __post_init__(self):
        if self.jitter_mm < 0:
            raise PreprocessError("jitter_mm must be >= 0")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise PreprocessError("flip_prob must lie in [0, 1]")
        if self.noise_std < 0:
            raise PreprocessError("noise_std must be >= 0")
        lo, hi = self.contrast_exponent_range
        if lo > hi:
            raise PreprocessError("contrast_exponent_range must be (lo, hi) with lo <= hi")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(
            jitter_mm=0.0,
            flip_prob=0.0,
            max_rotation_deg=0.0,
            noise_mean=0.0,
            noise_std=0.0,
            contrast_exponent_range=(0.0, 0.0),
        )


def resample_isotropic(
    volume: Volume,
    target_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    interpolation: str = "linear",
) -> Volume:
    """Resample a volume to the target spacing with trilinear interpolation.

    Output axis n satisfies n_out = round(n_in * s_in / s_out), preserving the
    physical extent to within one voxel; edge samples clamp to the boundary.
    """
    if interpolation != "linear":
        raise PreprocessError(f"unsupported interpolation {interpolation!r}")
    target = np.asarray(target_spacing, dtype=np.float64)
    if target.shape != (3,) or np.any(target <= 0):
        raise PreprocessError(f"target spacing must be 3 positive values, got {target}")
    if np.allclose(volume.spacing_mm, target, rtol=0, atol=1e-9):
        return Volume(volume.voxels.copy(), target, volume.origin_mm.copy())

    shape_in = np.asarray(volume.voxels.shape)
    shape_out = np.floor(shape_in * volume.spacing_mm / target + 0.5).astype(int)
    if np.any(shape_out < 1):
        raise PreprocessError(
            f"resampling to {tuple(target)} collapses shape {tuple(shape_in)} "
            f"to {tuple(shape_out)}"
        )
    # Output voxel j sits at j*s_out mm from the origin; map to input index units.
    grids = [
        np.arange(shape_out[a], dtype=np.float64) * target[a] / volume.spacing_mm[a]
        for a in range(3)
    ]
    coords = np.meshgrid(*grids, indexing="ij")
    out = ndimage.map_coordinates(
        volume.voxels.astype(np.float64), coords, order=1, mode="nearest"
    )
    return Volume(out.astype(volume.voxels.dtype, copy=False), target, volume.origin_mm.copy())


def crop_nodule(volume: Volume, centroid_mm) -> NoduleCrop:
    """Extract the 50^3 crop centered on the voxel nearest the centroid.

    Requires a 1 mm isotropic volume. Out-of-bounds voxels are filled with
    -1000 HU and flagged in the pad mask.
    """
    if not np.allclose(volume.spacing_mm, 1.0, rtol=0, atol=1e-6):
        raise PreprocessError(f"crop requires 1 mm isotropic spacing, got {volume.spacing_mm}")
    centroid = np.asarray(centroid_mm, dtype=np.float64)
    idx = np.floor((centroid - volume.origin_mm) / volume.spacing_mm + 0.5).astype(int)
    shape = np.asarray(volume.voxels.shape)
    if np.any(idx < 0) or np.any(idx >= shape):
        raise PreprocessError(
            f"centroid {tuple(centroid)} maps to voxel {tuple(idx)} outside volume "
            f"shape {tuple(shape)}"
        )
    start = idx - CROP_CENTER
    stop = start + CROP_SIZE

    voxels = np.full((CROP_SIZE,) * 3, PAD_HU, dtype=np.float64)
    pad_mask = np.ones((CROP_SIZE,) * 3, dtype=bool)
    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(stop, shape)
    dst_lo = src_lo - start
    dst_hi = dst_lo + (src_hi - src_lo)
    src = tuple(slice(src_lo[a], src_hi[a]) for a in range(3))
    dst = tuple(slice(dst_lo[a], dst_hi[a]) for a in range(3))
    voxels[dst] = volume.voxels[src]
    pad_mask[dst] = False
    return NoduleCrop(voxels, pad_mask)


def clip_normalize(crop: NoduleCrop) -> NoduleCrop:
    """Window HU values to [-1000, 500] and rescale onto [0, 1]."""
    voxels = (np.clip(crop.voxels, HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
    return NoduleCrop(voxels, crop.pad_mask.copy())


def slice_nine_planes(crop: NoduleCrop) -> np.ndarray:
    """Sample nine 50x50 planes through the crop center.

    Three are axis-aligned; six contain one axis plus a face diagonal of the
    orthogonal plane. Oblique planes use trilinear sampling with coordinates
    clamped at the crop boundary, so every output pixel is a convex
    combination of crop voxels.
    """
    offsets = np.arange(CROP_SIZE, dtype=np.float64) - CROP_CENTER
    center = np.full(3, float(CROP_CENTER))
    voxels = crop.voxels.astype(np.float64, copy=False)
    images = np.empty((9, CROP_SIZE, CROP_SIZE), dtype=np.float64)
    for n, (row_dir, col_dir) in enumerate(PLANE_BASES.values()):
        u = np.asarray(row_dir, dtype=np.float64)
        v = np.asarray(col_dir, dtype=np.float64)
        pts = (
            center[:, None, None]
            + u[:, None, None] * offsets[None, :, None]
            + v[:, None, None] * offsets[None, None, :]
        )
        images[n] = ndimage.map_coordinates(voxels, pts, order=1, mode="nearest")
    return images


def to_model_input(
    images: np.ndarray, normalization: ChannelNormalization | None = None
) -> ViewStack:
    """Resize nine 50x50 images to 224x224, replicate to 3 channels, and apply
    the per-channel affine normalization."""
    images = np.asarray(images, dtype=np.float32)
    if images.shape != (9, CROP_SIZE, CROP_SIZE):
        raise PreprocessError(f"expected 9 images of {CROP_SIZE}x{CROP_SIZE}, got {images.shape}")
    norm = normalization or ChannelNormalization()
    with torch.no_grad():
        t = torch.from_numpy(images).unsqueeze(1)  # (9, 1, 50, 50)
        t = F.interpolate(t, size=(VIEW_SIZE, VIEW_SIZE), mode="bilinear", align_corners=False)
        t = t.repeat(1, 3, 1, 1)
        mean = torch.tensor(norm.mean, dtype=torch.float32).view(1, 3, 1, 1)
        std = torch.tensor(norm.std, dtype=torch.float32).view(1, 3, 1, 1)
        t = (t - mean) / std
    return ViewStack(t.numpy())


def deterministic_crop(volume_1mm: Volume, centroid_mm) -> NoduleCrop:
    """The inference-path crop: crop at the centroid, then window to [0, 1]."""
    return clip_normalize(crop_nodule(volume_1mm, centroid_mm))


def preprocess_stack(
    volume: Volume, centroid_mm, normalization: ChannelNormalization | None = None
) -> ViewStack:
    """Full deterministic path: resample to 1 mm, crop, window, slice, pack."""
    vol = resample_isotropic(volume)
    crop = deterministic_crop(vol, centroid_mm)
    return to_model_input(slice_nine_planes(crop), normalization)


def _rotation_matrix(axis: np.ndarray, angle_deg: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    theta = np.deg2rad(angle_deg)
    k = np.array(
        [
            [0, -axis[2], axis[1]],
            [axis[2], 0, -axis[0]],
            [-axis[1], axis[0], 0],
        ]
    )
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def augment(
    volume_1mm: Volume,
    centroid_mm,
    config: AugmentationConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, NoduleCrop]:
    """Stochastic training-path crop.

    Order: centroid jitter, crop, per-axis flips, rotation about a random axis
    (trilinear, -1000 HU fill), HU windowing, additive Gaussian noise, contrast
    power v^(1+e), final clamp to [0, 1]. With a zeroed config the output is
    byte-identical to the deterministic path. All randomness comes from ``rng``.
    """
    centroid = np.asarray(centroid_mm, dtype=np.float64)
    if config.jitter_mm > 0:
        centroid = centroid + rng.uniform(-config.jitter_mm, config.jitter_mm, size=3)

    crop = crop_nodule(volume_1mm, centroid)
    voxels, pad_mask = crop.voxels, crop.pad_mask

    if config.flip_prob > 0:
        for axis in range(3):
            if rng.random() < config.flip_prob:
                voxels = np.flip(voxels, axis=axis)
                pad_mask = np.flip(pad_mask, axis=axis)
        voxels = np.ascontiguousarray(voxels)
        pad_mask = np.ascontiguousarray(pad_mask)

    if config.max_rotation_deg > 0:
        axis = rng.normal(size=3)
        while np.linalg.norm(axis) < 1e-8:
            axis = rng.normal(size=3)
        angle = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)
        rot = _rotation_matrix(axis, angle)
        center = np.full(3, float(CROP_CENTER))
        # affine_transform maps output coords to input: in = M @ out + offset.
        matrix = rot.T
        offset = center - matrix @ center
        voxels = ndimage.affine_transform(
            voxels, matrix, offset=offset, order=1, mode="constant", cval=PAD_HU
        )
        pad_mask = (
            ndimage.affine_transform(
                pad_mask.astype(np.float64),
                matrix,
                offset=offset,
                order=0,
                mode="constant",
                cval=1.0,
            )
            > 0.5
        )

    normalized = clip_normalize(NoduleCrop(voxels, pad_mask))
    voxels = normalized.voxels

    if config.noise_std > 0 or config.noise_mean != 0:
        voxels = voxels + rng.normal(config.noise_mean, config.noise_std, size=voxels.shape)

    lo, hi = config.contrast_exponent_range
    if lo != 0.0 or hi != 0.0:
        exponent = 1.0 + rng.uniform(lo, hi)
        voxels = np.power(np.clip(voxels, 0.0, 1.0), exponent)

    voxels = np.clip(voxels, 0.0, 1.0)
    return centroid, NoduleCrop(voxels, normalized.pad_mask)
