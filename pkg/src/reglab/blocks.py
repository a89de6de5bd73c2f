"""Interchangeable low-level computational blocks behind one interface.

Four kinds: plain 3D convolution, parallel large-kernel convolution,
shifted-window multi-head self-attention, and a selective state-space scan.
Every block maps (B, C_in, H, W, D) -> (B, C_out, H', W', D'); stride 2
halves each extent (ceiling) and is only supported by the conv kinds —
attention/SSM blocks are stride-1 and are paired with a separate strided
conv for downsampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, FeatureMap

BLOCK_KINDS = ("conv", "large_kernel", "windowed_attention", "selective_ssm")


@dataclass
class BlockConfig:
    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1
    kernel_size: int = 3
    largest_kernel: int = 5
    window_size: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    state_dim: int = 16
    expand: int = 2
    conv_kernel: int = 4
    scan_mode: str = "bidirectional"  # or "forward"
    norm: str = "default"  # instance | layer | none | default
    nonlinearity: str = "default"  # leaky_relu | gelu | none | default

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.kind in ("windowed_attention", "selective_ssm"):
            if self.stride != 1:
                raise ConfigError(f"{self.kind} blocks are stride-1 only")
            if self.in_channels != self.out_channels:
                raise ConfigError(f"{self.kind} blocks need in_channels == out_channels")
        if self.scan_mode not in ("bidirectional", "forward"):
            raise ConfigError(f"unknown scan_mode {self.scan_mode!r}")


class InstanceNorm3dAnySize(nn.Module):
    """Per-channel spatial normalization that also accepts 1-voxel grids
    (torch's InstanceNorm3d rejects those in training mode)."""

    def __init__(self, eps: float = 1e-5):
        super().__init__()
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=(2, 3, 4), keepdim=True)
        var = x.var(dim=(2, 3, 4), keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps)


def _make_norm(norm: str, channels: int, default: str) -> nn.Module:
    norm = default if norm == "default" else norm
    if norm == "instance":
        return InstanceNorm3dAnySize()
    if norm == "layer":
        return nn.GroupNorm(1, channels)
    if norm == "none":
        return nn.Identity()
    raise ConfigError(f"unknown norm {norm!r}")


def _make_nonlinearity(kind: str, default: str) -> nn.Module:
    kind = default if kind == "default" else kind
    if kind == "leaky_relu":
        return nn.LeakyReLU(0.2)
    if kind == "gelu":
        return nn.GELU()
    if kind == "none":
        return nn.Identity()
    raise ConfigError(f"unknown nonlinearity {kind!r}")


class ConvBlock3d(nn.Module):
    """Conv(k=3) + instance norm + LeakyReLU, the plain CNN unit."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.stride = cfg.stride
        k = cfg.kernel_size
        self.conv = nn.Conv3d(cfg.in_channels, cfg.out_channels, k, cfg.stride, k // 2)
        self.norm = _make_norm(cfg.norm, cfg.out_channels, "instance")
        self.act = _make_nonlinearity(cfg.nonlinearity, "leaky_relu")

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class LargeKernelBlock3d(nn.Module):
    """Parallel conv branches with kernels {5, 3, 1} plus identity, summed."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.stride = cfg.stride
        kernels = sorted({cfg.largest_kernel, 3, 1}, reverse=True)
        self.branches = nn.ModuleList(
            nn.Conv3d(cfg.in_channels, cfg.out_channels, k, cfg.stride, k // 2)
            for k in kernels
        )
        self.identity = cfg.in_channels == cfg.out_channels and cfg.stride == 1
        self.norm = _make_norm(cfg.norm, cfg.out_channels, "instance")
        self.act = _make_nonlinearity(cfg.nonlinearity, "leaky_relu")

    def forward(self, x):
        out = sum(branch(x) for branch in self.branches)
        if self.identity:
            out = out + x
        return self.act(self.norm(out))


# ---------------------------------------------------------------------------
# shifted-window attention
# ---------------------------------------------------------------------------

def window_partition(x, ws):
    """(B, H, W, D, C) -> (num_windows*B, ws^3, C)."""
    b, h, w, d, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, d // ws, ws, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7).contiguous()
    return x.view(-1, ws**3, c)


def window_reverse(windows, ws, dims):
    h, w, d = dims
    c = windows.shape[-1]
    x = windows.view(-1, h // ws, w // ws, d // ws, ws, ws, ws, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).contiguous()
    return x.view(-1, h, w, d, c)


class WindowAttention3d(nn.Module):
    """Multi-head self-attention within 3D windows, with relative position bias."""

    def __init__(self, dim, window_size, num_heads):
        super().__init__()
        self.dim = dim
        self.ws = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5

        n = 2 * window_size - 1
        self.rel_bias = nn.Parameter(torch.zeros(n**3, num_heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        coords = torch.stack(
            torch.meshgrid(*[torch.arange(window_size)] * 3, indexing="ij")
        ).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :] + window_size - 1
        index = rel[0] * n * n + rel[1] * n + rel[2]
        self.register_buffer("rel_index", index, persistent=False)

        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, mask=None, return_weights=False):
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.view(-1)].view(n, n, -1)
        attn = attn + bias.permute(2, 0, 1)[None]
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        out = self.proj(out)
        if return_weights:
            return out, attn
        return out


class SwinSubLayer(nn.Module):
    """One (shifted-)window attention sub-layer with residual MLP."""

    def __init__(self, dim, window_size, shift, num_heads, mlp_ratio):
        super().__init__()
        self.ws = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3d(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim)
        )

    def _attn_mask(self, dims, device):
        if self.shift == 0:
            return None
        img = torch.zeros(1, *dims, 1, device=device)
        cnt = 0
        slices = (slice(0, -self.ws), slice(-self.ws, -self.shift), slice(-self.shift, None))
        for sx in slices:
            for sy in slices:
                for sz in slices:
                    img[:, sx, sy, sz, :] = cnt
                    cnt += 1
        win = window_partition(img, self.ws).squeeze(-1)
        diff = win[:, None, :] - win[:, :, None]
        return torch.where(diff == 0, 0.0, -100.0)

    def forward(self, x, return_weights=False):
        # x: (B, H, W, D, C) already padded to window multiples
        dims = x.shape[1:4]
        shortcut = x
        x = self.norm1(x)
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift,) * 3, dims=(1, 2, 3))
        mask = self._attn_mask(dims, x.device)
        win = window_partition(x, self.ws)
        out = self.attn(win, mask, return_weights=return_weights)
        weights = None
        if return_weights:
            out, weights = out
        x = window_reverse(out, self.ws, dims)
        if self.shift:
            x = torch.roll(x, shifts=(self.shift,) * 3, dims=(1, 2, 3))
        x = shortcut + x
        x = x + self.mlp(self.norm2(x))
        if return_weights:
            return x, weights
        return x


class WindowedAttentionBlock3d(nn.Module):
    """Regular-window then shifted-window attention, shape-preserving."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.stride = 1
        self.ws = cfg.window_size
        dim, heads = cfg.in_channels, cfg.num_heads
        self.layers = nn.ModuleList([
            SwinSubLayer(dim, self.ws, 0, heads, cfg.mlp_ratio),
            SwinSubLayer(dim, self.ws, self.ws // 2, heads, cfg.mlp_ratio),
        ])

    def forward(self, x, return_weights=False):
        dims = x.shape[2:]
        pad = [(-n) % self.ws for n in dims]
        x = x.permute(0, 2, 3, 4, 1)
        if any(pad):
            x = F.pad(x, (0, 0, 0, pad[2], 0, pad[1], 0, pad[0]))
        weights = []
        for layer in self.layers:
            x = layer(x, return_weights=return_weights)
            if return_weights:
                x, w = x
                weights.append(w)
        x = x[:, : dims[0], : dims[1], : dims[2]].permute(0, 4, 1, 2, 3)
        if return_weights:
            return x, weights
        return x


# ---------------------------------------------------------------------------
# selective state-space scan
# ---------------------------------------------------------------------------

def selective_scan(u, delta, A, B, C, D=None):
    """Zero-order-hold discretized selective scan, sequential reference form.

    u, delta: (batch, L, d); A: (d, state); B, C: (batch, L, state); D: (d,).
    h_k = exp(delta_k A) h_{k-1} + delta_k B_k u_k ;  y_k = <C_k, h_k> + D u_k.
    """
    batch, length, d = u.shape
    delta_a = torch.exp(delta.unsqueeze(-1) * A)                # (b, L, d, n)
    delta_bu = delta.unsqueeze(-1) * B.unsqueeze(2) * u.unsqueeze(-1)
    h = u.new_zeros(batch, d, A.shape[1])
    ys = []
    for k in range(length):
        h = delta_a[:, k] * h + delta_bu[:, k]
        ys.append(torch.sum(h * C[:, k].unsqueeze(1), dim=-1))
    y = torch.stack(ys, dim=1)
    if D is not None:
        y = y + u * D
    return y


class SelectiveSSMBlock3d(nn.Module):
    """Gated selective-SSM block over the flattened voxel sequence.

    The grid is flattened in raster order (x slowest, z fastest); in
    bidirectional mode the reversed sequence is scanned with its own
    selective parameters and the two outputs are averaged. Pre-norm
    residual, SiLU gating, causal depthwise conv per direction convention.
    """

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.stride = 1
        dim = cfg.in_channels
        inner = cfg.expand * dim
        self.inner = inner
        self.state = cfg.state_dim
        self.dt_rank = max(1, math.ceil(dim / 16))
        self.bidirectional = cfg.scan_mode == "bidirectional"

        self.norm = nn.LayerNorm(dim)
        self.in_proj = nn.Linear(dim, 2 * inner)
        self.conv_k = cfg.conv_kernel
        self.conv = nn.Conv1d(inner, inner, cfg.conv_kernel, groups=inner,
                              padding=cfg.conv_kernel - 1)
        ndir = 2 if self.bidirectional else 1
        self.x_proj = nn.ModuleList(
            nn.Linear(inner, self.dt_rank + 2 * self.state, bias=False)
            for _ in range(ndir)
        )
        self.dt_proj = nn.ModuleList(nn.Linear(self.dt_rank, inner) for _ in range(ndir))
        a_init = torch.arange(1, self.state + 1).float().log().repeat(inner, 1)
        self.A_log = nn.Parameter(torch.stack([a_init.clone() for _ in range(ndir)]))
        self.D = nn.Parameter(torch.ones(ndir, inner))
        self.out_proj = nn.Linear(inner, dim)

    def _scan_direction(self, x, direction):
        # x: (b, L, inner), already conv-mixed along the scan order
        proj = self.x_proj[direction](x)
        dt, b_mat, c_mat = proj.split([self.dt_rank, self.state, self.state], dim=-1)
        delta = F.softplus(self.dt_proj[direction](dt))
        A = -torch.exp(self.A_log[direction])
        return selective_scan(x, delta, A, b_mat, c_mat, self.D[direction])

    def _causal_conv(self, x):
        # left padding only: position k never sees positions > k
        out = self.conv(x.transpose(1, 2))[..., : x.shape[1]]
        return out.transpose(1, 2)

    def forward(self, x):
        b, c, h, w, d = x.shape
        seq = x.permute(0, 2, 3, 4, 1).reshape(b, h * w * d, c)
        res = seq
        seq = self.norm(seq)
        xz = self.in_proj(seq)
        u, z = xz.split(self.inner, dim=-1)

        ys = []
        for direction in range(2 if self.bidirectional else 1):
            ud = torch.flip(u, dims=[1]) if direction == 1 else u
            ud = F.silu(self._causal_conv(ud))
            yd = self._scan_direction(ud, direction)
            if direction == 1:
                yd = torch.flip(yd, dims=[1])
            ys.append(yd)
        y = torch.stack(ys).mean(0) * F.silu(z)
        out = res + self.out_proj(y)
        return out.reshape(b, h, w, d, c).permute(0, 4, 1, 2, 3)


_BLOCK_CLASSES = {
    "conv": ConvBlock3d,
    "large_kernel": LargeKernelBlock3d,
    "windowed_attention": WindowedAttentionBlock3d,
    "selective_ssm": SelectiveSSMBlock3d,
}


def make_block(cfg: BlockConfig) -> nn.Module:
    """Build the block module for a validated config."""
    return _BLOCK_CLASSES[cfg.kind](cfg)


def apply_block(block: nn.Module, x: FeatureMap) -> FeatureMap:
    """Run a block on a feature map, tracking the pyramid level."""
    out = block(x.data[None])[0]
    return FeatureMap(out, level=x.level + (1 if block.stride == 2 else 0))
