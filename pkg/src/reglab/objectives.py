"""Composite training loss: image similarity + gamma * soft Dice
+ lambda * field smoothness, with auxiliary pyramid terms scaled by 2^-level.

The final field is predicted at half resolution; it is upsampled and
upscaled to warp the full-size source image and labels for the main term,
whose smoothness penalty applies to the field as predicted. Sub-level terms
(levels 4, 3, 2) compare level-l downsampled images under the level-l field
and carry similarity and smoothness only.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import torch
import torch.nn.functional as F

from .core import (
    ConfigError,
    DisplacementField,
    LabelMap,
    ShapeError,
    Volume,
    base_grid,
    downsample_tensor,
    resize_field,
    sample_trilinear,
)

SIMILARITY_KINDS = ("lncc", "mse")


@dataclass
class LossWeights:
    gamma: float = 0.5  # Dice term
    lam: float = 0.5  # smoothness term
    similarity_kind: str = "lncc"
    lncc_window: int = 9

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.similarity_kind not in SIMILARITY_KINDS:
            raise ConfigError(f"unknown similarity kind {self.similarity_kind!r}")


def _as_image(x) -> torch.Tensor:
    return x.data if isinstance(x, Volume) else x


def lncc_loss(target, warped, window: int = 9, eps: float = 1e-8) -> torch.Tensor:
    """1 - mean local normalized cross-correlation, in [0, 2].

    Windows are clipped at the borders and statistics use the actual voxel
    count, so identical images score 0 and perfect anticorrelation scores 2
    everywhere, including border windows.
    """
    a = _as_image(target)
    b = _as_image(warped)
    if a.shape != b.shape:
        raise ShapeError(f"image extents differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    k = window
    kernel = torch.ones(1, 1, k, k, k, dtype=a.dtype, device=a.device)
    pad = k // 2

    def box(x):
        return F.conv3d(x[None, None], kernel, padding=pad)[0, 0]

    counts = box(torch.ones_like(a))
    mu_a = box(a) / counts
    mu_b = box(b) / counts
    cross = box(a * b) / counts - mu_a * mu_b
    var_a = (box(a * a) / counts - mu_a * mu_a).clamp(min=0.0)
    var_b = (box(b * b) / counts - mu_b * mu_b).clamp(min=0.0)
    cc = cross / torch.sqrt(var_a * var_b + eps)
    return 1.0 - cc.mean()


def mse_loss(target, warped) -> torch.Tensor:
    """Mean squared intensity difference, in [0, 1] for [0, 1] images."""
    a = _as_image(target)
    b = _as_image(warped)
    if a.shape != b.shape:
        raise ShapeError(f"image extents differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).mean()


def similarity_loss(target, warped, kind: str = "lncc", window: int = 9) -> torch.Tensor:
    if kind == "lncc":
        return lncc_loss(target, warped, window=window)
    if kind == "mse":
        return mse_loss(target, warped)
    raise ConfigError(f"unknown similarity kind {kind!r}")


def one_hot_labels(labels: LabelMap, label_set=None) -> torch.Tensor:
    """Anatomical one-hot encoding (background channel excluded), (L,h,w,d)."""
    label_set = labels.label_set if label_set is None else list(label_set)
    planes = [(labels.data == l).float() for l in label_set]
    if not planes:
        raise ConfigError("label map has no anatomical labels")
    return torch.stack(planes)


def dice_loss(target, warped_soft: torch.Tensor, label_set=None,
              eps: float = 1e-5) -> torch.Tensor:
    """1 - mean soft Dice over anatomical label channels.

    `target` may be a LabelMap (one-hot encoded here) or an already-soft
    one-hot grid matching `warped_soft`'s channels.
    """
    if isinstance(target, LabelMap):
        target = one_hot_labels(target, label_set)
    if target.shape != warped_soft.shape:
        raise ConfigError(
            f"label channels/extents differ: {tuple(target.shape)} vs {tuple(warped_soft.shape)}"
        )
    p = warped_soft.flatten(1)
    q = target.flatten(1)
    dice = (2 * (p * q).sum(1) + eps) / (p.sum(1) + q.sum(1) + eps)
    return 1.0 - dice.mean()


def smoothness_loss(field) -> torch.Tensor:
    """Diffusion regularizer: summed per-channel, per-axis mean squared
    forward differences (edge-truncated)."""
    d = field.data if isinstance(field, DisplacementField) else field
    total = d.new_zeros(())
    for axis in range(3):
        diff = torch.diff(d, dim=axis)
        if diff.numel() == 0:  # single-voxel axis has no gradient entries
            continue
        total = total + diff.pow(2).flatten(0, 2).mean(0).sum()
    return total


def warp_channels(x: torch.Tensor, field: DisplacementField) -> torch.Tensor:
    """Trilinear warp of a (C,h,w,d) stack by a field at the same extents."""
    if tuple(x.shape[1:]) != field.shape:
        raise ShapeError(f"extents differ: {tuple(x.shape[1:])} vs {field.shape}")
    grid = base_grid(field.shape, dtype=x.dtype, device=x.device)
    return sample_trilinear(x, grid + field.data.permute(3, 0, 1, 2))


@dataclass
class AuxTerm:
    level: int
    similarity: torch.Tensor
    smoothness: torch.Tensor
    unscaled: torch.Tensor  # similarity + lam * smoothness
    scale: float  # 2^-level
    scaled: torch.Tensor


@dataclass
class LossBreakdown:
    similarity: torch.Tensor
    dice: torch.Tensor
    smoothness: torch.Tensor
    aux: list
    total: torch.Tensor


def total_loss(
    target: Volume,
    source: Volume,
    labels_t: LabelMap,
    labels_s: LabelMap,
    final_field: DisplacementField,
    per_level,
    weights: LossWeights = None,
):
    """Full composite loss on the half-resolution output plus 2^-level-scaled
    similarity/smoothness terms for the coarser pyramid fields.

    Returns (total, LossBreakdown); the breakdown holds detached terms whose
    weighted sum reproduces the total exactly.
    """
    weights = weights or LossWeights()
    if final_field.level != 1:
        raise ShapeError(f"final field must be at level 1, got {final_field.level}")

    full_field = resize_field(final_field, 0, shape=target.shape)
    warped = warp_channels(source.data[None], full_field)[0]
    sim = similarity_loss(target.data, warped, weights.similarity_kind,
                          weights.lncc_window)

    label_set = sorted(set(labels_t.label_set) | set(labels_s.label_set))
    oh_s = one_hot_labels(labels_s, label_set)
    warped_soft = warp_channels(oh_s, full_field)
    seg = dice_loss(one_hot_labels(labels_t, label_set), warped_soft)

    reg = smoothness_loss(final_field)  # smoothness of the field as predicted
    total = sim + weights.gamma * seg + weights.lam * reg

    aux_terms = []
    for f in per_level:
        if f.level < 2:
            continue
        t_l = downsample_tensor(target.data[None], f.level)[0]
        s_l = downsample_tensor(source.data[None], f.level)[0]
        warped_l = warp_channels(s_l[None], f)[0]
        sim_l = similarity_loss(t_l, warped_l, weights.similarity_kind,
                                weights.lncc_window)
        reg_l = smoothness_loss(f)
        unscaled = sim_l + weights.lam * reg_l
        scale = 2.0 ** (-f.level)
        scaled = scale * unscaled
        total = total + scaled
        aux_terms.append(AuxTerm(f.level, sim_l.detach(), reg_l.detach(),
                                 unscaled.detach(), scale, scaled.detach()))

    breakdown = LossBreakdown(sim.detach(), seg.detach(), reg.detach(),
                              aux_terms, total.detach())
    return total, breakdown
