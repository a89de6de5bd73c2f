"""Grid types and resampling/warping primitives shared by all other modules.

Conventions (used everywhere):
  * voxel centers sit at integer coordinates 0 .. N-1 along each axis
  * image data is indexed [x, y, z] = axes (H, W, D)
  * displacement channel c moves along data axis c, in voxel units of the
    field's own resolution level (level 0 = full resolution)
  * out-of-bounds sampling replicates the border voxel
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    """Raised when grid extents, levels, or channel counts disagree."""


class ConfigError(ValueError):
    """Raised for inconsistent block/variant configuration."""


def _as_tensor(data, dtype=None) -> torch.Tensor:
    if not torch.is_tensor(data):
        data = torch.as_tensor(data)
    if dtype is not None and data.dtype != dtype:
        data = data.to(dtype)
    return data


@dataclass
class Volume:
    """Dense 3D scalar grid with intensities normalized to [0, 1]."""

    data: torch.Tensor
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if not self.data.dtype.is_floating_point:
            self.data = self.data.float()
        if self.data.ndim != 3:
            raise ShapeError(f"volume must be 3D, got shape {tuple(self.data.shape)}")
        if min(self.data.shape) < 2:
            raise ShapeError(f"all extents must be >= 2, got {tuple(self.data.shape)}")
        lo, hi = self.data.min().item(), self.data.max().item()
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise ValueError(f"intensities must lie in [0,1], found range [{lo}, {hi}]")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)


@dataclass
class LabelMap:
    """Dense 3D integer label grid; background is 0 and is not anatomical."""

    data: torch.Tensor

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if self.data.dtype.is_floating_point:
            raise ValueError("label map must hold integers")
        self.data = self.data.long()
        if self.data.ndim != 3:
            raise ShapeError(f"label map must be 3D, got shape {tuple(self.data.shape)}")
        if self.data.min().item() < 0:
            raise ValueError("labels must be non-negative")

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def label_set(self) -> list:
        """Sorted anatomical labels present in the map (background excluded)."""
        labels = torch.unique(self.data).tolist()
        return [int(l) for l in labels if l != 0]


@dataclass
class DisplacementField:
    """Dense 3-vector grid (h, w, d, 3) in voxel units of its own level."""

    data: torch.Tensor
    level: int = 0

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if not self.data.dtype.is_floating_point:
            self.data = self.data.float()
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ShapeError(
                f"displacement field must be (h,w,d,3), got {tuple(self.data.shape)}"
            )
        if self.level < 0:
            raise ValueError(f"level must be >= 0, got {self.level}")
        if not torch.isfinite(self.data).all():
            raise ValueError("displacement field contains non-finite values")

    @property
    def shape(self) -> tuple:
        """Spatial extents (h, w, d)."""
        return tuple(self.data.shape[:3])


@dataclass
class FeatureMap:
    """C-channel grid (C, h, w, d) at pyramid level `level`."""

    data: torch.Tensor
    level: int = 0

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if self.data.ndim != 4:
            raise ShapeError(f"feature map must be (C,h,w,d), got {tuple(self.data.shape)}")
        if self.data.shape[0] < 1:
            raise ShapeError("feature map needs at least one channel")
        if self.level < 0:
            raise ValueError(f"level must be >= 0, got {self.level}")

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape[1:])


# ---------------------------------------------------------------------------
# tensor-level sampling (models call these directly on raw tensors)
# ---------------------------------------------------------------------------

def base_grid(shape, dtype=torch.float32, device=None) -> torch.Tensor:
    """Integer voxel-center coordinates, shape (3, H, W, D)."""
    axes = [torch.arange(n, dtype=dtype, device=device) for n in shape]
    return torch.stack(torch.meshgrid(*axes, indexing="ij"))


def sample_trilinear(values: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Trilinearly sample `values` (C,H,W,D) at voxel coordinates `points` (3,...).

    Border-clamped; interpolation uses the lerp form v0 + w*(v1-v0) so exact
    grid points reproduce stored values bitwise. Differentiable w.r.t. both
    arguments.
    """
    shape = values.shape[1:]
    idx0, idx1, frac = [], [], []
    for a in range(3):
        p = points[a].clamp(0, shape[a] - 1)
        i0 = p.floor()
        w = p - i0
        i0 = i0.long()
        idx0.append(i0)
        idx1.append((i0 + 1).clamp(max=shape[a] - 1))
        frac.append(w)

    def corner(ix, iy, iz):
        return values[:, ix, iy, iz]

    def lerp(v0, v1, w):
        return v0 + w * (v1 - v0)

    wz = frac[2]
    c00 = lerp(corner(idx0[0], idx0[1], idx0[2]), corner(idx0[0], idx0[1], idx1[2]), wz)
    c01 = lerp(corner(idx0[0], idx1[1], idx0[2]), corner(idx0[0], idx1[1], idx1[2]), wz)
    c10 = lerp(corner(idx1[0], idx0[1], idx0[2]), corner(idx1[0], idx0[1], idx1[2]), wz)
    c11 = lerp(corner(idx1[0], idx1[1], idx0[2]), corner(idx1[0], idx1[1], idx1[2]), wz)
    wy = frac[1]
    c0 = lerp(c00, c01, wy)
    c1 = lerp(c10, c11, wy)
    return lerp(c0, c1, frac[0])


def sample_nearest(values: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor gather of `values` (C,H,W,D) at coordinates (3,...)."""
    shape = values.shape[1:]
    idx = [points[a].clamp(0, shape[a] - 1).round().long() for a in range(3)]
    return values[:, idx[0], idx[1], idx[2]]


def warp_tensor(x: torch.Tensor, disp: torch.Tensor) -> torch.Tensor:
    """Warp channels-first tensor (C,H,W,D) by displacement (3,H,W,D)."""
    grid = base_grid(x.shape[1:], dtype=disp.dtype, device=x.device)
    return sample_trilinear(x, grid + disp)


# ---------------------------------------------------------------------------
# typed operations
# ---------------------------------------------------------------------------

def identity_grid(shape, level: int = 0) -> DisplacementField:
    """All-zero displacement; warping with it is the identity map."""
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ShapeError(f"invalid extents {shape}")
    return DisplacementField(torch.zeros(*shape, 3), level=level)


def _check_extents(a_shape, b_shape, what="operands"):
    if tuple(a_shape) != tuple(b_shape):
        raise ShapeError(f"{what} extents differ: {tuple(a_shape)} vs {tuple(b_shape)}")


def warp_trilinear(source: Volume, field: DisplacementField) -> Volume:
    """Resample `source` at x + phi(x) with trilinear interpolation."""
    _check_extents(source.shape, field.shape, "volume/field")
    warped = warp_tensor(source.data[None], field.data.permute(3, 0, 1, 2))[0]
    return Volume(warped, spacing=source.spacing)


def warp_nearest(labels: LabelMap, field: DisplacementField) -> LabelMap:
    """Gather labels at the nearest voxel of x + phi(x)."""
    _check_extents(labels.shape, field.shape, "labels/field")
    grid = base_grid(labels.shape, dtype=field.data.dtype)
    pts = grid + field.data.permute(3, 0, 1, 2)
    warped = sample_nearest(labels.data[None].float(), pts)[0]
    return LabelMap(warped.round().long())


def _level_extents(shape, from_level: int, to_level: int) -> tuple:
    if to_level >= from_level:
        return tuple(-(-n // 2 ** (to_level - from_level)) for n in shape)
    return tuple(n * 2 ** (from_level - to_level) for n in shape)


def resize_field(
    field: DisplacementField, new_level: int, shape=None
) -> DisplacementField:
    """Resample a field to another pyramid level, rescaling vectors to stay
    metrically consistent in voxels of the new grid.

    `shape` overrides the default extents (old * 2^(level-new_level), or the
    ceiling division when coarsening) for inputs that are not power-of-two.
    """
    if new_level < 0:
        raise ValueError(f"level must be >= 0, got {new_level}")
    if shape is None:
        shape = _level_extents(field.shape, field.level, new_level)
    shape = tuple(int(n) for n in shape)
    scale = 2.0 ** (field.level - new_level)
    if field.level == new_level and shape == field.shape:
        return DisplacementField(field.data.clone(), level=new_level)

    vec = field.data.permute(3, 0, 1, 2)
    axes = []
    for a in range(3):
        old_n, new_n = field.shape[a], shape[a]
        if new_n == 1:
            coords = torch.full((1,), (old_n - 1) / 2.0, dtype=vec.dtype)
        else:
            coords = torch.arange(new_n, dtype=vec.dtype) * ((old_n - 1) / (new_n - 1))
        axes.append(coords)
    pts = torch.stack(torch.meshgrid(*axes, indexing="ij"))
    resampled = sample_trilinear(vec, pts) * scale
    return DisplacementField(resampled.permute(1, 2, 3, 0), level=new_level)


def compose_fields(
    outer: DisplacementField, inner: DisplacementField
) -> DisplacementField:
    """result(x) = inner(x) + outer(x + inner(x)).

    Warping once with the result approximates warping with inner then outer.
    """
    if outer.level != inner.level:
        raise ShapeError(f"field levels differ: {outer.level} vs {inner.level}")
    _check_extents(outer.shape, inner.shape, "outer/inner field")
    grid = base_grid(inner.shape, dtype=inner.data.dtype, device=inner.data.device)
    pts = grid + inner.data.permute(3, 0, 1, 2)
    outer_at = sample_trilinear(outer.data.permute(3, 0, 1, 2), pts)
    return DisplacementField(
        inner.data + outer_at.permute(1, 2, 3, 0), level=inner.level
    )


def compose_disp(outer: torch.Tensor, inner: torch.Tensor) -> torch.Tensor:
    """compose_fields on raw (3,H,W,D) tensors (model-internal fast path)."""
    grid = base_grid(inner.shape[1:], dtype=inner.dtype, device=inner.device)
    return inner + sample_trilinear(outer, grid + inner)


def downsample_volume(v: Volume, level: int) -> Volume:
    """Average-pool by a factor of 2^level; intensities stay in [0, 1]."""
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    if level == 0:
        return Volume(v.data, spacing=v.spacing)
    k = 2 ** level
    pooled = F.avg_pool3d(
        v.data[None, None], kernel_size=k, stride=k, ceil_mode=True,
        count_include_pad=False,
    )[0, 0]
    spacing = tuple(s * k for s in v.spacing)
    return Volume(pooled.clamp(0.0, 1.0), spacing=spacing)


def downsample_tensor(x: torch.Tensor, level: int) -> torch.Tensor:
    """Average-pool a channels-first tensor (C,H,W,D) by 2^level."""
    if level == 0:
        return x
    k = 2 ** level
    return F.avg_pool3d(
        x[None], kernel_size=k, stride=k, ceil_mode=True, count_include_pad=False
    )[0]


def subsample_labels(labels: LabelMap, level: int) -> LabelMap:
    """Nearest (strided) label downsampling by 2^level; keeps labels crisp."""
    if level == 0:
        return LabelMap(labels.data)
    k = 2 ** level
    return LabelMap(labels.data[::k, ::k, ::k])
