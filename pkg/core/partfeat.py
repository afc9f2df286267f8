"""
Differentiable operators that turn predicted part-mask logits into the
compact features consumed by the classifier heads.

Segmentation logits have shape (..., K+1, H, W): channel 0 is background and
channels 1..K are parts. Row and column indices follow the 1..H / 1..W
convention; normalised outputs absorb the offset.
"""

from dataclasses import dataclass
from typing import Mapping, Sequence, Tuple, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .exceptions import ConfigurationError

# Variance floor keeping d(sqrt)/d(var) finite for saturated masks
SPREAD_FLOOR = 1e-16

HEAD_VARIANTS = ('downsampled', 'bbox', 'pixel', 'two_headed')

SegLogits = Tensor


@dataclass(frozen=True)
class PartFeatures:
    """Head input: variant tag plus the tensor the head consumes"""

    variant: str
    payload: Tensor

    def __post_init__(self):
        if self.variant not in HEAD_VARIANTS:
            raise ConfigurationError(f"unknown feature variant {self.variant!r}")


def num_parts(seg: SegLogits) -> int:
    if seg.ndim < 3:
        raise ConfigurationError(f"segmentation logits need (K+1)×H×W axes, got {seg.shape}")
    k = seg.shape[-3] - 1
    if k < 1:
        raise ConfigurationError("segmentation logits need at least one part channel")
    return k


def _parts(seg: SegLogits) -> Tensor:
    return dc.take(seg, range(1, seg.shape[-3]), axis=-3)


def foreground_mask(seg: SegLogits) -> Tensor:
    """F = sigmoid(sum of part logits - background logit), shape (..., H, W)"""
    num_parts(seg)
    part_sum = dc.reduce_sum(_parts(seg), axis=-3)
    background = dc.reduce_sum(dc.take(seg, [0], axis=-3), axis=-3)
    return dc.sigmoid(part_sum - background)


def part_scores(seg: SegLogits, fg: Tensor) -> Tensor:
    """Foreground-weighted mean of every part's logit map, shape (..., K)"""
    num_parts(seg)
    weights = dc.reshape(fg, fg.shape[:-2] + (1,) + fg.shape[-2:])
    weighted = dc.reduce_sum(_parts(seg) * weights, axis=(-2, -1))
    total = dc.reduce_sum(weights, axis=(-2, -1))
    return weighted / total


def _moments(mass: Tensor, total: Tensor, length: int) -> Tuple[Tensor, Tensor]:
    """Centroid and spread of a marginal mass (..., K, length) on indices 1..length"""
    density = mass / total
    index = np.arange(1, length + 1, dtype=np.float64)
    centroid = dc.reduce_sum(density * index, axis=-1)
    offset = index - dc.reshape(centroid, centroid.shape + (1,))
    variance = dc.reduce_sum(density * (offset * offset), axis=-1)
    return centroid, dc.sqrt(variance + SPREAD_FLOOR)


def part_geometry(seg: SegLogits) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """Per-part (c1, sigma1, c2, sigma2) in index space, each shaped (..., K).

    The mass is the pixelwise softmax with the background channel dropped and
    not renormalised.
    """
    num_parts(seg)
    height, width = seg.shape[-2], seg.shape[-1]
    mass = _parts(dc.softmax_channels(seg))
    row_mass = dc.reduce_sum(mass, axis=-1)                       # (..., K, H)
    col_mass = dc.reduce_sum(mass, axis=-2)                       # (..., K, W)
    total = dc.reduce_sum(row_mass, axis=-1, keepdims=True)       # (..., K, 1)
    c1, sigma1 = _moments(row_mass, total, height)
    c2, sigma2 = _moments(col_mass, total, width)
    return c1, sigma1, c2, sigma2


def bbox_features(seg: SegLogits) -> Tensor:
    """Soft bounding boxes v = [s_i, c1_i, c2_i, sigma1_i, sigma2_i] for i = 1..K, shape (..., 5K)"""
    k = num_parts(seg)
    height, width = seg.shape[-2], seg.shape[-1]
    if height < 2 or width < 2:
        raise ConfigurationError(f"bbox features need H, W ≥ 2, got {height}×{width}")

    scores = part_scores(seg, foreground_mask(seg))
    c1, sigma1, c2, sigma2 = part_geometry(seg)

    # [1, H] -> [-1, 1] for centroids, [0, (H-1)/2] -> [0, 1] for spreads
    c1_norm = (c1 - 1.0) * (2.0 / (height - 1)) - 1.0
    c2_norm = (c2 - 1.0) * (2.0 / (width - 1)) - 1.0
    sigma1_norm = sigma1 * (2.0 / (height - 1))
    sigma2_norm = sigma2 * (2.0 / (width - 1))

    columns = [scores, c1_norm, c2_norm, sigma1_norm, sigma2_norm]
    stacked = dc.concat([dc.reshape(col, col.shape + (1,)) for col in columns], axis=-1)
    return dc.reshape(stacked, stacked.shape[:-2] + (5 * k,))


def downsample_features(seg: SegLogits, pool: int, include_background: bool = True) -> Tensor:
    """Pixelwise softmax, optional background drop, adaptive average pool to pool×pool"""
    num_parts(seg)
    height, width = seg.shape[-2], seg.shape[-1]
    if not 1 <= pool <= min(height, width):
        raise ConfigurationError(f"pool size {pool} outside [1, {min(height, width)}]")
    probs = dc.softmax_channels(seg)
    if not include_background:
        probs = _parts(probs)
    return dc.adaptive_avg_pool(probs, pool, pool)


def class_assignment(part_to_class: Union[Mapping[int, int], Sequence[int]], k: int, n_classes: int) -> np.ndarray:
    """C×K 0/1 matrix: entry (c, i-1) is 1 when part i belongs to class c"""
    if not isinstance(part_to_class, Mapping):
        part_to_class = {i + 1: c for i, c in enumerate(part_to_class)}
    matrix = np.zeros((n_classes, k))
    for part in range(1, k + 1):
        if part not in part_to_class:
            raise ConfigurationError(f"part {part} is not mapped to a class")
        cls = int(part_to_class[part])
        if not 0 <= cls < n_classes:
            raise ConfigurationError(f"part {part} mapped to class {cls} outside [0, {n_classes})")
        matrix[cls, part - 1] = 1.0
    extra = set(int(p) for p in part_to_class) - set(range(1, k + 1))
    if extra:
        raise ConfigurationError(f"part_to_class maps unknown parts {sorted(extra)}")
    return matrix


def pixel_logits(seg: SegLogits, part_to_class: Union[Mapping[int, int], Sequence[int]], n_classes: int) -> Tensor:
    """Sum part logits per class at every pixel, then average over pixels; shape (..., C)"""
    k = num_parts(seg)
    assignment = class_assignment(part_to_class, k, n_classes)
    part_means = dc.reduce_mean(_parts(seg), axis=(-2, -1))      # (..., K)
    return dc.linear(part_means, assignment, np.zeros(n_classes))


def mask_to_logits(mask: np.ndarray, scale: float = 50.0) -> Tensor:
    """Turn a one-hot ground-truth mask into saturated logits for oracle features"""
    return Tensor(np.asarray(mask, dtype=np.float64) * scale)
