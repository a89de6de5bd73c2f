"""Variant registry: assembles blocks and designs into the named registration
architectures, with deterministic construction and parameter accounting.

U-Net variants concatenate target and source at the input; dual-stream
variants encode them separately with halved encoder channels and either fuse
per level into a U-Net decoder or feed a motion-pyramid decoder. All variants
emit the displacement field at half resolution (level 1).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field as dc_field, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import BlockConfig, make_block
from .core import ConfigError, DisplacementField, ShapeError, Volume
from .designs import GLOBAL, FlowHead, PyramidDecoder

VARIANT_NAMES = (
    "VXM", "Pool-Up", "Mam-VXM", "TM", "Mam-TM", "LKU",
    "Dual", "VXM-P", "DP", "DWP", "DWPI", "DWCP", "DWCPI",
)

DESIGN_FLAGS = ("dual", "pyramid", "warping", "correlation", "iteration")

# name -> non-default construction knobs; everything else is the VXM baseline
_VARIANT_TABLE = {
    "VXM": {},
    "Pool-Up": {"pool_up": True},
    "Mam-VXM": {"encoder_block_kind": "selective_ssm"},
    "TM": {"encoder_block_kind": "windowed_attention", "staged": True},
    "Mam-TM": {"encoder_block_kind": "selective_ssm", "staged": True},
    "LKU": {"encoder_block_kind": "large_kernel"},
    "Dual": {"dual": True},
    "VXM-P": {"pyramid": True},
    "DP": {"dual": True, "pyramid": True},
    "DWP": {"dual": True, "pyramid": True, "warping": True},
    "DWPI": {"dual": True, "pyramid": True, "warping": True, "iteration": True},
    "DWCP": {"dual": True, "pyramid": True, "warping": True, "correlation": True},
    "DWCPI": {
        "dual": True, "pyramid": True, "warping": True,
        "correlation": True, "iteration": True,
    },
}


@dataclass
class VariantConfig:
    """Declarative description of one architecture (blocks x designs)."""

    name: str
    encoder_block_kind: str = "conv"
    dual: bool = False
    pyramid: bool = False
    warping: bool = False
    correlation: bool = False
    iteration: bool = False
    pool_up: bool = False
    staged: bool = False
    encoder_channels: tuple = (16, 32, 64, 96, 128)
    decoder_channels: tuple = (128, 96, 64, 32)
    remaining_channels: tuple = (32, 32)
    pyramid_widths: tuple = (128, 96, 64, 32)
    pyramid_convs: tuple = (3, 2, 2, 2)
    radii: tuple = (GLOBAL, 3, 2, 1)
    iteration_levels: tuple = (2, 1)
    iteration_steps: int = 2
    embed_dim: int = 96
    stage_depths: tuple = (2, 2, 4, 2)
    stage_heads: tuple = (4, 4, 8, 8)
    stem_channels: int = 16
    window_size: int = 4
    largest_kernel: int = 5
    state_dim: int = 16
    input_extents: tuple = None
    norm: str = "instance"
    seed: int = 2023

    def __post_init__(self):
        if self.name not in VARIANT_NAMES and self.name != "custom":
            raise ConfigError(f"unknown variant {self.name!r}")
        if self.name != "custom":
            expected = _VARIANT_TABLE[self.name]
            for flag in DESIGN_FLAGS + ("pool_up", "staged", "encoder_block_kind"):
                want = expected.get(flag, VariantConfig.__dataclass_fields__[flag].default)
                if getattr(self, flag) != want:
                    raise ConfigError(
                        f"variant {self.name!r} requires {flag}={want!r}, "
                        f"got {getattr(self, flag)!r}"
                    )
        if self.warping and not (self.dual and self.pyramid):
            raise ConfigError("warping requires dual streams and a motion pyramid")
        if self.correlation and not (self.dual and self.pyramid):
            raise ConfigError("correlation requires dual streams and a motion pyramid")
        if self.iteration and not self.warping:
            raise ConfigError("iterative refinement requires warping")
        if self.correlation and self.input_extents is None:
            raise ConfigError("correlation variants need input_extents (global scores)")
        for t in ("encoder_channels", "decoder_channels", "remaining_channels",
                  "pyramid_widths", "pyramid_convs", "radii", "iteration_levels",
                  "stage_depths", "stage_heads"):
            setattr(self, t, tuple(getattr(self, t)))
        if self.input_extents is not None:
            self.input_extents = tuple(int(n) for n in self.input_extents)
        if self.pyramid and len(self.encoder_channels) != 4:
            raise ConfigError("pyramid variants use a 4-level encoder (levels 1..4)")

    @property
    def design_flags(self) -> dict:
        return {f: getattr(self, f) for f in DESIGN_FLAGS}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "VariantConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def paper_config(name: str, seed: int = 2023) -> VariantConfig:
    """The named variant at paper scale (160x192x224 inputs for correlation)."""
    knobs = dict(_VARIANT_TABLE[name])
    if knobs.get("staged"):
        knobs.update(decoder_channels=(512, 256, 128, 64), remaining_channels=(32,))
    if name == "LKU":
        knobs.update(encoder_channels=(16, 32, 64, 128, 256))
    if knobs.get("dual") and not knobs.get("pyramid"):
        knobs.update(encoder_channels=(8, 16, 32, 48, 64))
    if knobs.get("pyramid"):
        if knobs.get("dual"):
            knobs.update(encoder_channels=(8, 16, 32, 48))
        else:
            knobs.update(encoder_channels=(16, 32, 64, 96))
    if knobs.get("correlation"):
        knobs.update(input_extents=(160, 192, 224))
    return VariantConfig(name=name, seed=seed, **knobs)


def desk_config(name: str, grid: int = 16, seed: int = 2023) -> VariantConfig:
    """Small plans for desk-scale (16^3 / 32^3) training and tests.

    Normalization is off at this scale: the 1-voxel bottleneck grids that
    appear below 32^3 would be zeroed by instance norm.
    """
    knobs = dict(_VARIANT_TABLE[name], norm="none")
    if knobs.get("staged"):
        knobs.update(embed_dim=8, stage_depths=(2, 2, 2, 2), stage_heads=(2, 2, 2, 2),
                     stem_channels=4, decoder_channels=(16, 16, 16, 8),
                     remaining_channels=(8,), window_size=2, state_dim=4)
    elif knobs.get("pyramid"):
        ch = (4, 8, 8, 8) if knobs.get("dual") else (8, 16, 16, 16)
        knobs.update(encoder_channels=ch, pyramid_widths=(16, 16, 16, 16),
                     pyramid_convs=(2, 2, 2, 2), state_dim=4)
    else:
        ch = (4, 8, 8, 8) if knobs.get("dual") else (8, 16, 16, 16)
        knobs.update(encoder_channels=ch, decoder_channels=(16, 16, 16),
                     remaining_channels=(16,), state_dim=4, window_size=2)
    if knobs.get("correlation"):
        knobs.update(input_extents=(grid, grid, grid))
    return VariantConfig(name=name, seed=seed, **knobs)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class PatchMerge(nn.Module):
    """k=2, s=2 conv downsample; odd extents are replicate-padded to even."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, out_channels, 2, 2)

    def forward(self, x):
        pad = [n % 2 for n in x.shape[2:]]
        if any(pad):
            x = F.pad(x, (0, pad[2], 0, pad[1], 0, pad[0]), mode="replicate")
        return self.conv(x)


def _encoder_stage(kind, in_ch, out_ch, cfg: VariantConfig):
    """One downsampling step of a U-Net encoder for the given block kind."""
    if kind in ("conv", "large_kernel"):
        block_cfg = BlockConfig(kind, in_ch, out_ch, stride=1 if cfg.pool_up else 2,
                                largest_kernel=cfg.largest_kernel, norm=cfg.norm)
        block = make_block(block_cfg)
        if cfg.pool_up:
            return nn.Sequential(block, nn.MaxPool3d(2, ceil_mode=True))
        return block
    # attention/SSM blocks are stride-1; pair them with a patch-merge conv
    merge = PatchMerge(in_ch, out_ch)
    block_cfg = BlockConfig(kind, out_ch, out_ch, window_size=cfg.window_size,
                            state_dim=cfg.state_dim, norm=cfg.norm)
    return nn.Sequential(merge, make_block(block_cfg))


class UNetEncoder(nn.Module):
    """Stack of strided stages; returns per-level features, fine to coarse."""

    def __init__(self, in_channels: int, cfg: VariantConfig):
        super().__init__()
        self.out_channels = list(cfg.encoder_channels)
        stages = []
        prev = in_channels
        for c in cfg.encoder_channels:
            stages.append(_encoder_stage(cfg.encoder_block_kind, prev, c, cfg))
            prev = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class StagedEncoder(nn.Module):
    """Patch-embed stage encoder (embed_dim doubling per stage) plus a conv
    stem that provides the half-resolution skip."""

    def __init__(self, in_channels: int, cfg: VariantConfig):
        super().__init__()
        dim = cfg.embed_dim
        self.stem = make_block(BlockConfig("conv", in_channels, cfg.stem_channels,
                                           stride=2, norm=cfg.norm))
        self.patch_embed = nn.Conv3d(in_channels, dim, 4, 4)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        dims = [dim * 2**i for i in range(len(cfg.stage_depths))]
        for i, (depth, heads) in enumerate(zip(cfg.stage_depths, cfg.stage_heads)):
            if cfg.encoder_block_kind == "windowed_attention":
                n_blocks = max(1, depth // 2)  # one block = two attention sub-layers
                block_cfg = BlockConfig("windowed_attention", dims[i], dims[i],
                                        window_size=cfg.window_size, num_heads=heads)
            else:
                n_blocks = depth
                block_cfg = BlockConfig("selective_ssm", dims[i], dims[i],
                                        state_dim=cfg.state_dim)
            self.stages.append(nn.Sequential(*[make_block(copy.copy(block_cfg))
                                               for _ in range(n_blocks)]))
            if i + 1 < len(dims):
                self.merges.append(PatchMerge(dims[i], dims[i + 1]))
        self.out_channels = [cfg.stem_channels] + dims

    def forward(self, x):
        feats = [self.stem(x)]
        y = self.patch_embed(x)
        for i, stage in enumerate(self.stages):
            y = stage(y)
            feats.append(y)
            if i < len(self.merges):
                y = self.merges[i](y)
        return feats


# ---------------------------------------------------------------------------
# U-Net decoder
# ---------------------------------------------------------------------------

class UNetDecoder(nn.Module):
    """Transposed-conv (or trilinear, for Pool-Up) upsampling with skip
    concatenation, ending at half resolution."""

    def __init__(self, skip_channels, cfg: VariantConfig):
        super().__init__()
        widths = cfg.decoder_channels
        if len(widths) != len(skip_channels) - 1:
            raise ConfigError(
                f"decoder needs {len(skip_channels) - 1} widths, got {len(widths)}"
            )
        self.pool_up = cfg.pool_up
        self.ups = nn.ModuleList()
        self.convs = nn.ModuleList()
        prev = skip_channels[-1]
        for skip, w in zip(reversed(skip_channels[:-1]), widths):
            if cfg.pool_up:
                self.ups.append(nn.Identity())
                in_ch = prev + skip
            else:
                self.ups.append(nn.ConvTranspose3d(prev, w, 2, 2))
                in_ch = w + skip
            self.convs.append(make_block(BlockConfig("conv", in_ch, w, norm=cfg.norm)))
            prev = w
        remaining = []
        for w in cfg.remaining_channels:
            remaining.append(make_block(BlockConfig("conv", prev, w, norm=cfg.norm)))
            prev = w
        self.remaining = nn.Sequential(*remaining)
        self.out_channels = prev

    def forward(self, feats):
        x = feats[-1]
        for skip, up, conv in zip(reversed(feats[:-1]), self.ups, self.convs):
            target = skip.shape[2:]
            if self.pool_up:
                x = F.interpolate(x, size=target, mode="trilinear", align_corners=True)
            else:
                x = up(x)
                x = x[:, :, : target[0], : target[1], : target[2]]
            x = conv(torch.cat([x, skip], dim=1))
        return self.remaining(x)


# ---------------------------------------------------------------------------
# the registration model
# ---------------------------------------------------------------------------

def _pad_to_multiple(x: torch.Tensor, m: int = 16) -> torch.Tensor:
    pads = [(-n) % m for n in x.shape[2:]]
    if any(pads):
        x = F.pad(x, (0, pads[2], 0, pads[1], 0, pads[0]))
    return x


def _level4_extent(extents) -> tuple:
    return tuple(-(-int(n) // 16) for n in extents)


class RegistrationModel(nn.Module):
    """One named architecture; predicts the half-resolution field."""

    def __init__(self, config: VariantConfig):
        super().__init__()
        self.config = config
        in_channels = 1 if config.dual else 2
        if config.staged:
            self.encoder = StagedEncoder(in_channels, config)
        else:
            self.encoder = UNetEncoder(in_channels, config)

        if config.pyramid:
            level4 = _level4_extent(config.input_extents) if config.correlation else None
            self.decoder = PyramidDecoder(
                feat_channels=tuple(reversed(self.encoder.out_channels)),
                widths=config.pyramid_widths,
                dual=config.dual,
                warping=config.warping,
                use_correlation=config.correlation,
                level4_extent=level4,
                radii=dict(zip((4, 3, 2, 1), config.radii)),
                iter_levels=config.iteration_levels if config.iteration else (),
                iter_steps=config.iteration_steps if config.iteration else 1,
                convs_per_level=config.pyramid_convs,
                norm=config.norm,
            )
            self.flow = None
        else:
            skips = self.encoder.out_channels
            if config.dual:
                skips = [2 * c for c in skips]  # per-level fusion of the two streams
            self.decoder = UNetDecoder(skips, config)
            self.flow = FlowHead(self.decoder.out_channels)

    def forward(self, target: Volume, source: Volume):
        """Returns (final field at level 1, per-level fields, coarse first)."""
        if target.shape != source.shape:
            raise ShapeError(f"volume extents differ: {target.shape} vs {source.shape}")
        shape = target.shape
        t = _pad_to_multiple(target.data[None, None])
        s = _pad_to_multiple(source.data[None, None])
        if self.config.correlation and t.shape[2:] != tuple(self.config.input_extents):
            raise ShapeError(
                f"correlation variant built for extents {self.config.input_extents}, "
                f"got {tuple(t.shape[2:])} after padding"
            )

        if self.config.dual:
            feats_t = self.encoder(t)
            feats_s = self.encoder(s)
        else:
            feats_t = self.encoder(torch.cat([t, s], dim=1))
            feats_s = None

        if self.config.pyramid:
            pyr_t = [f[0] for f in reversed(feats_t)]
            pyr_s = [f[0] for f in reversed(feats_s)] if feats_s is not None else None
            disp, per_level = self.decoder(pyr_t, pyr_s)
            final = self._crop_field(disp, shape, level=1)
            per_level = [
                self._crop_field(f.data.permute(3, 0, 1, 2), shape, level=f.level)
                for f in per_level
            ]
            return final, per_level

        if self.config.dual:
            fused = [torch.cat([a, b], dim=1) for a, b in zip(feats_t, feats_s)]
        else:
            fused = feats_t
        disp = self.flow(self.decoder(fused))[0]
        return self._crop_field(disp, shape, level=1), []

    @staticmethod
    def _crop_field(disp: torch.Tensor, full_shape, level: int) -> DisplacementField:
        ext = tuple(-(-n // 2**level) for n in full_shape)
        cropped = disp[:, : ext[0], : ext[1], : ext[2]]
        return DisplacementField(cropped.permute(1, 2, 3, 0), level=level)


def build_variant(cfg: VariantConfig) -> RegistrationModel:
    """Deterministic construction: the same seed gives identical parameters."""
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = RegistrationModel(cfg)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: RegistrationModel, path, extra: dict = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "parameters": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path) -> RegistrationModel:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    model = build_variant(VariantConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["parameters"])
    return model
