"""Evaluation metrics: Dice overlap, 90th-percentile boundary distance,
Jacobian-based smoothness (SDlogJ) and folding (NDV), plus the mean
foreground displacement magnitude used in figure annotations.

All metrics are pure functions over full-resolution (level 0) inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import DisplacementField, LabelMap, ShapeError


def dice_score(a: LabelMap, b: LabelMap) -> float:
    """Mean Dice over anatomical labels present in either map."""
    if a.shape != b.shape:
        raise ShapeError(f"label extents differ: {a.shape} vs {b.shape}")
    av = a.data.numpy()
    bv = b.data.numpy()
    labels = sorted(set(a.label_set) | set(b.label_set))
    scores = []
    for l in labels:
        ma = av == l
        mb = bv == l
        denom = ma.sum() + mb.sum()
        if denom == 0:  # absent from both maps: skipped
            continue
        scores.append(2.0 * np.logical_and(ma, mb).sum() / denom)
    return float(np.mean(scores)) if scores else float("nan")


def _boundary(mask: np.ndarray) -> np.ndarray:
    return mask & ~ndimage.binary_erosion(mask)


def hd90(a: LabelMap, b: LabelMap, spacing=None) -> float:
    """90th percentile of pooled bidirectional boundary-to-boundary nearest
    distances, averaged over labels.

    A label present in exactly one map scores the maximal grid diagonal and
    triggers a warning.
    """
    if a.shape != b.shape:
        raise ShapeError(f"label extents differ: {a.shape} vs {b.shape}")
    spacing = (1.0, 1.0, 1.0) if spacing is None else tuple(spacing)
    av = a.data.numpy()
    bv = b.data.numpy()
    diagonal = float(np.sqrt(sum(((n - 1) * s) ** 2 for n, s in zip(a.shape, spacing))))
    values = []
    for l in sorted(set(a.label_set) | set(b.label_set)):
        ma = av == l
        mb = bv == l
        if not ma.any() and not mb.any():
            continue
        if ma.any() != mb.any():
            warnings.warn(f"label {l} present in only one map; scoring grid diagonal")
            values.append(diagonal)
            continue
        ba = _boundary(ma)
        bb = _boundary(mb)
        dist_to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
        dist_to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
        pooled = np.concatenate([dist_to_b[ba], dist_to_a[bb]])
        values.append(float(np.percentile(pooled, 90)))
    return float(np.mean(values)) if values else float("nan")


def jacobian_map(field: DisplacementField) -> np.ndarray:
    """Per-voxel det(grad(x + phi)); central differences in the interior,
    one-sided at the borders. The identity field maps to 1 everywhere."""
    if field.level != 0:
        raise ShapeError(f"jacobian needs a full-resolution field, got level {field.level}")
    phi = field.data.detach().numpy().astype(np.float64)
    jac = np.empty((3, 3) + phi.shape[:3])
    for c in range(3):
        grads = np.gradient(phi[..., c], axis=(0, 1, 2))
        for ax in range(3):
            jac[c, ax] = grads[ax] + (1.0 if ax == c else 0.0)
    return _det3(jac)


def _det3(j: np.ndarray) -> np.ndarray:
    return (
        j[0, 0] * (j[1, 1] * j[2, 2] - j[1, 2] * j[2, 1])
        - j[0, 1] * (j[1, 0] * j[2, 2] - j[1, 2] * j[2, 0])
        + j[0, 2] * (j[1, 0] * j[2, 1] - j[1, 1] * j[2, 0])
    )


def brain_mask(labels: LabelMap) -> np.ndarray:
    """Union of all anatomical labels (the 'within the brain area' region)."""
    return labels.data.numpy() > 0


def _as_mask(mask, shape) -> np.ndarray:
    if isinstance(mask, LabelMap):
        mask = brain_mask(mask)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ShapeError(f"mask extents {mask.shape} differ from field {tuple(shape)}")
    if not mask.any():
        raise ValueError("mask is empty")
    return mask


def sdlogj(jac: np.ndarray, mask) -> float:
    """Standard deviation of log(det J) over the masked voxels (eps-clamped).

    Tables report this value scaled by 10^2.
    """
    mask = _as_mask(mask, jac.shape)
    logs = np.log(np.maximum(jac[mask], 1e-9))
    return float(np.std(logs))


def _one_sided_diffs(phi: np.ndarray):
    """Forward and backward differences per axis; at a border the missing
    side falls back to the only available difference (matching np.gradient's
    border behavior, which keeps 'central' a convex average of these)."""
    fwd, bwd = [], []
    for ax in range(3):
        d = np.diff(phi, axis=ax)
        first = np.take(d, [0], axis=ax)
        last = np.take(d, [-1], axis=ax)
        fwd.append(np.concatenate([d, last], axis=ax))
        bwd.append(np.concatenate([first, d], axis=ax))
    return fwd, bwd


def ndv_pct(field: DisplacementField, mask, mode: str = "simplex") -> float:
    """Percentage of masked voxels whose local Jacobian criterion indicates
    folding.

    'simplex' flags a voxel when any of the 8 one-sided difference
    combinations (forward/backward per axis) has det <= 0 — the digital
    diffeomorphism criterion. 'central' uses the central-difference det only
    and is never stricter.
    """
    if field.level != 0:
        raise ShapeError(f"NDV needs a full-resolution field, got level {field.level}")
    mask = _as_mask(mask, field.shape)
    phi = field.data.detach().numpy().astype(np.float64)
    if mode == "central":
        folded = jacobian_map(field) <= 0
        return float(100.0 * folded[mask].mean())
    if mode != "simplex":
        raise ValueError(f"unknown NDV mode {mode!r}")
    fwd, bwd = _one_sided_diffs(phi)
    folded = np.zeros(phi.shape[:3], dtype=bool)
    for choice in range(8):
        jac = np.empty((3, 3) + phi.shape[:3])
        for ax in range(3):
            diff = fwd[ax] if (choice >> ax) & 1 == 0 else bwd[ax]
            for c in range(3):
                jac[c, ax] = diff[..., c] + (1.0 if ax == c else 0.0)
        folded |= _det3(jac) <= 0
    return float(100.0 * folded[mask].mean())


def mean_displacement(field: DisplacementField, mask) -> float:
    """Mean displacement magnitude (voxels) over the masked voxels."""
    mask = _as_mask(mask, field.shape)
    mags = np.linalg.norm(field.data.detach().numpy(), axis=-1)
    return float(mags[mask].mean())


# ---------------------------------------------------------------------------
# per-pair records and aggregation
# ---------------------------------------------------------------------------

@dataclass
class PairMetrics:
    dsc: float
    hd90: float
    sdlogj: float
    ndv_pct: float
    ndv_pct_central: float
    mean_disp: float


@dataclass
class MetricsReport:
    """mean/sd over evaluation pairs; sdlogj is raw (tables show x10^2)."""

    dsc: tuple
    hd90: tuple
    sdlogj: tuple
    ndv_pct: tuple
    ndv_pct_central: tuple
    mean_disp: tuple
    n_pairs: int

    def __post_init__(self):
        if not (0.0 <= self.dsc[0] <= 1.0):
            raise ValueError(f"mean DSC out of range: {self.dsc[0]}")
        if not (0.0 <= self.ndv_pct[0] <= 100.0):
            raise ValueError(f"mean NDV%% out of range: {self.ndv_pct[0]}")
        if self.hd90[0] < 0 or self.sdlogj[0] < 0:
            raise ValueError("HD90 and SDlogJ must be non-negative")


def evaluate_pair(
    labels_t: LabelMap,
    warped_labels: LabelMap,
    field: DisplacementField,
    mask=None,
    spacing=None,
) -> PairMetrics:
    """All metrics for one registered pair; `field` must be at level 0."""
    mask = brain_mask(labels_t) if mask is None else mask
    jac = jacobian_map(field)
    return PairMetrics(
        dsc=dice_score(labels_t, warped_labels),
        hd90=hd90(labels_t, warped_labels, spacing=spacing),
        sdlogj=sdlogj(jac, mask),
        ndv_pct=ndv_pct(field, mask, mode="simplex"),
        ndv_pct_central=ndv_pct(field, mask, mode="central"),
        mean_disp=mean_displacement(field, mask),
    )


def aggregate(pairs) -> MetricsReport:
    def stat(name):
        vals = np.array([getattr(p, name) for p in pairs], dtype=float)
        return (float(vals.mean()), float(vals.std()))

    return MetricsReport(
        dsc=stat("dsc"),
        hd90=stat("hd90"),
        sdlogj=stat("sdlogj"),
        ndv_pct=stat("ndv_pct"),
        ndv_pct_central=stat("ndv_pct_central"),
        mean_disp=stat("mean_disp"),
        n_pairs=len(pairs),
    )
