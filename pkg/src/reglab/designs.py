"""Registration-specific designs: dual-stream encoding, correlation volumes,
coarse-to-fine motion-pyramid decoding with warping, and iterative refinement.

The decoder runs over pyramid levels [4, 3, 2, 1] (resolutions 1/16 .. 1/2).
At every level the running field is upsampled-and-upscaled, the source
features are warped by it, a residual is predicted by a near-zero-initialized
flow head, and the result is composed onto the running field. The final field
lives at level 1 (half resolution).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    ConfigError,
    DisplacementField,
    FeatureMap,
    ShapeError,
    Volume,
    compose_disp,
    sample_trilinear,
    warp_tensor,
)

GLOBAL = "global"

PYRAMID_LEVELS = (4, 3, 2, 1)
DEFAULT_RADII = {4: GLOBAL, 3: 3, 2: 2, 1: 1}


@dataclass
class CorrelationVolume:
    """Per-voxel match scores: (2r+1)^3 channels in local mode, or one channel
    per source position in global mode."""

    data: torch.Tensor
    radius: object  # int or GLOBAL
    level: int = 0

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"correlation volume must be (K,h,w,d), got {tuple(self.data.shape)}")
        if self.radius != GLOBAL:
            expected = (2 * int(self.radius) + 1) ** 3
            if self.data.shape[0] != expected:
                raise ShapeError(
                    f"radius {self.radius} implies {expected} channels, got {self.data.shape[0]}"
                )
        if not torch.isfinite(self.data).all():
            raise ValueError("correlation scores must be finite")


@dataclass
class FeaturePyramid:
    """Feature maps ordered coarse to fine with levels [4, 3, 2, 1]."""

    maps: list

    def __post_init__(self):
        levels = [m.level for m in self.maps]
        if levels != list(PYRAMID_LEVELS):
            raise ShapeError(f"pyramid levels must be {list(PYRAMID_LEVELS)}, got {levels}")
        for coarse, fine in zip(self.maps, self.maps[1:]):
            expected = tuple(-(-n // 2) for n in fine.shape)
            if coarse.shape != expected:
                raise ShapeError(
                    f"level {coarse.level} extents {coarse.shape} are not a factor-2 "
                    f"step from level {fine.level} extents {fine.shape}"
                )

    def __getitem__(self, level: int) -> FeatureMap:
        return self.maps[PYRAMID_LEVELS.index(level)]


@dataclass
class RefinementState:
    field: DisplacementField
    level: int
    iteration: int = 0


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------

def correlate_tensors(ft: torch.Tensor, fs: torch.Tensor, radius) -> torch.Tensor:
    """Correlation scores between (C,h,w,d) feature tensors.

    Local mode: score(x, delta) = <ft(x), fs(x+delta)> / C for each offset in
    the (2r+1)^3 neighborhood, raster-ordered from (-r,-r,-r); out-of-range
    source offsets contribute zero. Global mode: one channel per source
    position p with score <ft(x), fs(p)> / C.
    """
    c = ft.shape[0]
    if radius == GLOBAL:
        flat_t = ft.reshape(c, -1)
        flat_s = fs.reshape(c, -1)
        scores = (flat_s.transpose(0, 1) @ flat_t) / c
        return scores.reshape(-1, *ft.shape[1:])
    r = int(radius)
    h, w, d = ft.shape[1:]
    padded = F.pad(fs, (r, r, r, r, r, r))
    rows = []
    for dx in range(2 * r + 1):
        for dy in range(2 * r + 1):
            for dz in range(2 * r + 1):
                shifted = padded[:, dx : dx + h, dy : dy + w, dz : dz + d]
                rows.append((ft * shifted).sum(0) / c)
    return torch.stack(rows)


def correlation(f_t: FeatureMap, f_s: FeatureMap, radius) -> CorrelationVolume:
    if f_t.level != f_s.level:
        raise ShapeError(f"feature levels differ: {f_t.level} vs {f_s.level}")
    if f_t.channels != f_s.channels:
        raise ShapeError(f"channel counts differ: {f_t.channels} vs {f_s.channels}")
    if f_t.shape != f_s.shape:
        raise ShapeError(f"feature extents differ: {f_t.shape} vs {f_s.shape}")
    scores = correlate_tensors(f_t.data, f_s.data, radius)
    return CorrelationVolume(scores, radius=radius, level=f_t.level)


def warp_features(f: FeatureMap, field: DisplacementField) -> FeatureMap:
    """Channel-wise trilinear warp (same sampling semantics as the core warp)."""
    if f.level != field.level:
        raise ShapeError(f"levels differ: {f.level} vs {field.level}")
    if f.shape != field.shape:
        raise ShapeError(f"extents differ: {f.shape} vs {field.shape}")
    warped = warp_tensor(f.data, field.data.permute(3, 0, 1, 2))
    return FeatureMap(warped, level=f.level)


# ---------------------------------------------------------------------------
# flow prediction
# ---------------------------------------------------------------------------

class FlowHead(nn.Module):
    """k=3, s=1, 3-output-channel convolution emitting (residual) displacement.

    Weights drawn from Normal(0, 1e-5), bias zero, so a freshly built head
    emits a near-zero field.
    """

    def __init__(self, in_channels: int):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, 3, kernel_size=3, padding=1)
        nn.init.normal_(self.conv.weight, mean=0.0, std=1e-5)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        return self.conv(x)


def flow_head_op(head: FlowHead, x: FeatureMap) -> DisplacementField:
    """Apply a flow head to a feature map, returning a field at its level."""
    out = head(x.data[None])[0]
    return DisplacementField(out.permute(1, 2, 3, 0), level=x.level)


# ---------------------------------------------------------------------------
# dual-stream encoding
# ---------------------------------------------------------------------------

def dual_encode(target: Volume, source: Volume, encoder: nn.Module):
    """Encode both volumes with one weight-shared encoder.

    The encoder maps (1, 1, H, W, D) to a list of feature tensors at levels
    1..4 (fine to coarse). Swapping the inputs swaps the outputs exactly.
    """
    if target.shape != source.shape:
        raise ShapeError(f"volume extents differ: {target.shape} vs {source.shape}")

    def encode(vol):
        feats = encoder(vol.data[None, None])
        maps = [FeatureMap(f[0], level=l) for l, f in enumerate(feats, start=1)]
        return FeaturePyramid(maps[::-1])

    return encode(target), encode(source)


# ---------------------------------------------------------------------------
# pyramid decoding and iterative refinement
# ---------------------------------------------------------------------------

def upsample_disp(disp: torch.Tensor, shape) -> torch.Tensor:
    """Upsample-and-upscale a (3,h,w,d) field one level finer (values x2)."""
    axes = []
    for a in range(3):
        old_n, new_n = disp.shape[1 + a], shape[a]
        if new_n == 1:
            coords = torch.full((1,), (old_n - 1) / 2.0, dtype=disp.dtype, device=disp.device)
        else:
            coords = torch.arange(new_n, dtype=disp.dtype, device=disp.device)
            coords = coords * ((old_n - 1) / (new_n - 1))
        axes.append(coords)
    pts = torch.stack(torch.meshgrid(*axes, indexing="ij"))
    return sample_trilinear(disp, pts) * 2.0


class LevelEstimator(nn.Module):
    """Conv stack + flow head predicting the residual field at one level."""

    def __init__(self, in_channels: int, width: int, n_convs: int = 2, norm: str = "instance"):
        super().__init__()
        from .blocks import _make_norm

        layers = []
        prev = in_channels
        for _ in range(n_convs):
            layers.append(nn.Conv3d(prev, width, 3, padding=1))
            if norm != "none":
                layers.append(_make_norm(norm, width, "instance"))
            layers.append(nn.LeakyReLU(0.2))
            prev = width
        self.convs = nn.Sequential(*layers)
        self.flow = FlowHead(width)

    def forward(self, x):
        return self.flow(self.convs(x))


class PyramidDecoder(nn.Module):
    """Coarse-to-fine flow decoder over levels [4, 3, 2, 1].

    Args:
        feat_channels: per-stream feature channels, ordered by level [4,3,2,1].
        widths: estimator conv widths per level, same order.
        dual: two feature streams (enables warping/correlation inputs).
        warping: warp source features by the running field before matching.
        use_correlation: feed correlation scores (with the target features)
            instead of concatenated features.
        level4_extent: spatial extents of the level-4 grid; required when
            use_correlation is set (global scores become h*w*d input channels).
        radii: correlation radius per level (GLOBAL allowed at level 4).
        iter_levels/iter_steps: levels refined iteratively and the step count,
            sharing the level's estimator weights across steps.
    """

    def __init__(
        self,
        feat_channels,
        widths=(128, 96, 64, 32),
        dual=True,
        warping=True,
        use_correlation=False,
        level4_extent=None,
        radii=None,
        iter_levels=(),
        iter_steps=1,
        convs_per_level=(3, 2, 2, 2),
        norm="instance",
    ):
        super().__init__()
        if use_correlation and not dual:
            raise ConfigError("correlation requires dual feature streams")
        if warping and not dual:
            raise ConfigError("feature warping requires dual feature streams")
        if use_correlation and level4_extent is None:
            raise ConfigError("global correlation needs the level-4 grid extents")
        if iter_levels and not warping:
            raise ConfigError("iterative refinement requires warping")
        bad = [l for l in iter_levels if l not in (2, 1)]
        if bad:
            raise ConfigError(f"iteration supported at levels (2, 1) only, got {bad}")

        self.levels = PYRAMID_LEVELS
        self.dual = dual
        self.warping = warping
        self.use_correlation = use_correlation
        self.level4_extent = tuple(level4_extent) if level4_extent else None
        self.radii = dict(DEFAULT_RADII if radii is None else radii)
        self.iter_levels = tuple(iter_levels)
        self.iter_steps = iter_steps
        self.feat_channels = dict(zip(self.levels, feat_channels))
        self.widths = dict(zip(self.levels, widths))

        self.estimators = nn.ModuleDict()
        for level, n_convs in zip(self.levels, convs_per_level):
            c = self.feat_channels[level]
            if use_correlation:
                corr_ch = self._corr_channels(level)
                in_ch = corr_ch + c + 3
            elif dual:
                in_ch = 2 * c + 3
            else:
                in_ch = c + 3
            self.estimators[str(level)] = LevelEstimator(
                in_ch, self.widths[level], n_convs=n_convs, norm=norm
            )

    def _corr_channels(self, level: int) -> int:
        r = self.radii[level]
        if r == GLOBAL:
            h, w, d = self.level4_extent
            return h * w * d
        return (2 * int(r) + 1) ** 3

    def _level_step(self, level: int, ft, fs, disp):
        """One warp -> match -> residual -> compose step at `level`.

        ft/fs: (C,h,w,d) feature tensors; disp: (3,h,w,d) running field.
        """
        fs_in = warp_tensor(fs, disp) if (self.warping and fs is not None) else fs
        if self.use_correlation:
            scores = correlate_tensors(ft, fs_in, self.radii[level])
            inputs = torch.cat([scores, ft, disp])
        elif self.dual:
            inputs = torch.cat([ft, fs_in, disp])
        else:
            inputs = torch.cat([ft, disp])
        residual = self.estimators[str(level)](inputs[None])[0]
        if self.warping:
            return compose_disp(disp, residual), residual
        return disp + residual, residual

    def forward(self, pyr_t, pyr_s=None, return_trace=False):
        """pyr_t / pyr_s: feature tensors (C,h,w,d) ordered by level [4,3,2,1].

        Returns the level-1 field tensor (3,h,w,d) and the per-level list of
        DisplacementField values [phi_4, phi_3, phi_2, phi_1].
        """
        if self.use_correlation and tuple(pyr_t[0].shape[1:]) != self.level4_extent:
            raise ShapeError(
                f"decoder was built for level-4 extents {self.level4_extent}, "
                f"got {tuple(pyr_t[0].shape[1:])}"
            )
        per_level = []
        trace = []
        disp = None
        for i, level in enumerate(self.levels):
            ft = pyr_t[i]
            fs = pyr_s[i] if pyr_s is not None else None
            if disp is None:
                disp = torch.zeros(3, *ft.shape[1:], dtype=ft.dtype, device=ft.device)
            else:
                disp = upsample_disp(disp, ft.shape[1:])
            steps = self.iter_steps if level in self.iter_levels else 1
            for step in range(steps):
                before = disp
                disp, residual = self._level_step(level, ft, fs, disp)
                if return_trace:
                    trace.append({"level": level, "step": step, "before": before,
                                  "after": disp, "residual": residual})
            per_level.append(DisplacementField(disp.permute(1, 2, 3, 0), level=level))
        if return_trace:
            return disp, per_level, trace
        return disp, per_level

    def refine_level(self, state: RefinementState, ft, fs, n: int) -> RefinementState:
        """Repeat the level step n times with shared head parameters."""
        if n < 1:
            raise ConfigError(f"n must be >= 1, got {n}")
        if state.level not in (2, 1):
            raise ConfigError(f"iterative refinement supports levels (2, 1), got {state.level}")
        disp = state.field.data.permute(3, 0, 1, 2)
        for _ in range(n):
            disp, _ = self._level_step(state.level, ft, fs, disp)
        return RefinementState(
            field=DisplacementField(disp.permute(1, 2, 3, 0), level=state.level),
            level=state.level,
            iteration=state.iteration + n,
        )


def pyramid_decode(decoder: PyramidDecoder, p_t: FeaturePyramid, p_s=None):
    """Decode matched feature pyramids into (final level-1 field, per-level fields)."""
    pyr_t = [m.data for m in p_t.maps]
    pyr_s = [m.data for m in p_s.maps] if p_s is not None else None
    if pyr_s is not None:
        for a, b in zip(p_t.maps, p_s.maps):
            if a.shape != b.shape or a.channels != b.channels:
                raise ShapeError("mismatched feature pyramids")
    disp, per_level = decoder(pyr_t, pyr_s)
    return DisplacementField(disp.permute(1, 2, 3, 0), level=1), per_level


def iterative_refine(
    decoder: PyramidDecoder, state: RefinementState, p_t: FeaturePyramid, p_s: FeaturePyramid, n: int
) -> RefinementState:
    ft = p_t[state.level].data
    fs = p_s[state.level].data
    return decoder.refine_level(state, ft, fs, n)
