"""Volume IO, deterministic pair sampling, and a synthetic diffeomorphic-pair
generator for desk-scale training with known ground-truth fields.

Supported file formats:
  * NIfTI-1 single-file volumes (.nii / .nii.gz), minimal reader/writer
  * raw float32 + JSON header fixtures (fields: shape, dtype, spacing,
    byte_order little-endian, data file name)
  * dataset manifest: JSON list of {volume, labels, subject} entries
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .core import (
    DisplacementField,
    LabelMap,
    Volume,
    compose_disp,
    compose_fields,
    warp_nearest,
    warp_trilinear,
)


class VolumeIOError(IOError):
    """Unknown format, corrupt header, or unresolvable path."""


# ---------------------------------------------------------------------------
# NIfTI-1 (minimal single-file support)
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_NIFTI_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.int32): 8,
                np.dtype(np.float32): 16, np.dtype(np.float64): 64}


def _read_nifti(path: Path):
    raw = gzip.open(path, "rb").read() if path.name.endswith(".gz") else path.read_bytes()
    if len(raw) < 352:
        raise VolumeIOError(f"{path}: truncated NIfTI file")
    for endian in ("<", ">"):
        (sizeof_hdr,) = struct.unpack(endian + "i", raw[0:4])
        if sizeof_hdr == 348:
            break
    else:
        raise VolumeIOError(f"{path}: bad NIfTI header (sizeof_hdr != 348)")
    if raw[344:347] != b"n+1":
        raise VolumeIOError(f"{path}: only single-file NIfTI-1 ('n+1') is supported")
    dim = struct.unpack(endian + "8h", raw[40:56])
    ndim = dim[0]
    if not 3 <= ndim <= 4:
        raise VolumeIOError(f"{path}: expected a 3D volume, got dim[0]={ndim}")
    shape = dim[1:4]
    (datatype, _bitpix) = struct.unpack(endian + "2h", raw[70:74])
    if datatype not in _NIFTI_DTYPES:
        raise VolumeIOError(f"{path}: unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    (vox_offset,) = struct.unpack(endian + "f", raw[108:112])
    slope, inter = struct.unpack(endian + "2f", raw[112:120])
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=int(vox_offset))
    arr = data.reshape(shape, order="F").astype(np.float64)
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr * (slope if slope != 0.0 else 1.0) + inter
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    return arr, spacing


def _write_nifti(path: Path, arr: np.ndarray, spacing=(1.0, 1.0, 1.0)):
    arr = np.asarray(arr)
    code = _NIFTI_CODES.get(arr.dtype)
    if code is None:
        raise VolumeIOError(f"cannot write dtype {arr.dtype} as NIfTI")
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    struct.pack_into("<8h", header, 40, 3, *arr.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, code, arr.dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    header[344:348] = b"n+1\x00"
    body = arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="F")
    payload = bytes(header) + b"\x00" * 4 + body
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


# ---------------------------------------------------------------------------
# raw float32 + JSON header fixtures
# ---------------------------------------------------------------------------

def _read_raw(header_path: Path):
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise VolumeIOError(f"{header_path}: corrupt JSON header ({e})")
    for key in ("shape", "dtype"):
        if key not in header:
            raise VolumeIOError(f"{header_path}: header missing {key!r}")
    if header["dtype"] != "float32":
        raise VolumeIOError(f"{header_path}: fixtures are float32, got {header['dtype']}")
    if header.get("byte_order", "little") != "little":
        raise VolumeIOError(f"{header_path}: fixtures are little-endian")
    data_path = header_path.parent / header.get("data", header_path.stem + ".raw")
    if not data_path.exists():
        raise VolumeIOError(f"{data_path}: raw payload not found")
    arr = np.fromfile(data_path, dtype="<f4").reshape(header["shape"])
    return arr.astype(np.float64), tuple(header.get("spacing", (1.0, 1.0, 1.0)))


def _write_raw(header_path: Path, arr: np.ndarray, spacing=(1.0, 1.0, 1.0)):
    data_path = header_path.with_suffix(".raw")
    header = {
        "shape": list(arr.shape),
        "dtype": "float32",
        "spacing": list(spacing),
        "byte_order": "little",
        "data": data_path.name,
    }
    header_path.write_text(json.dumps(header, indent=2))
    arr.astype("<f4").tofile(data_path)


# ---------------------------------------------------------------------------
# typed load/save
# ---------------------------------------------------------------------------

def _read_any(path: Path):
    if path.name.endswith((".nii", ".nii.gz")):
        return _read_nifti(path)
    if path.suffix == ".json":
        return _read_raw(path)
    if path.suffix == ".raw":
        return _read_raw(path.with_suffix(".json"))
    raise VolumeIOError(f"{path}: unknown volume format")


def load_volume(path, label_path=None):
    """Load a volume (min-max normalized to [0,1]) and optional labels.

    A constant volume normalizes to all zeros.
    """
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"{path}: no such file")
    arr, spacing = _read_any(path)
    lo, hi = arr.min(), arr.max()
    arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    volume = Volume(torch.from_numpy(arr).float(), spacing=spacing)
    labels = None
    if label_path is not None:
        larr, _ = _read_any(Path(label_path))
        labels = LabelMap(torch.from_numpy(np.rint(larr)).long())
        if labels.shape != volume.shape:
            raise VolumeIOError(
                f"{label_path}: label extents {labels.shape} differ from volume {volume.shape}"
            )
    return volume, labels


def save_volume(volume: Volume, path):
    path = Path(path)
    arr = volume.data.numpy().astype(np.float32)
    if path.name.endswith((".nii", ".nii.gz")):
        _write_nifti(path, arr, volume.spacing)
    elif path.suffix == ".json":
        _write_raw(path, arr, volume.spacing)
    else:
        raise VolumeIOError(f"{path}: unknown volume format")


def save_labels(labels: LabelMap, path):
    path = Path(path)
    if not path.name.endswith((".nii", ".nii.gz")):
        raise VolumeIOError(f"{path}: labels are written as NIfTI")
    _write_nifti(path, labels.data.numpy().astype(np.int32))


# ---------------------------------------------------------------------------
# datasets and pair sampling
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    entries: list  # of (volume_path, label_path or None, subject_id)
    split: str = "test"
    name: str = ""


def load_manifest(path) -> Dataset:
    """Manifest: {"name", "split", "entries": [{"volume","labels","subject"}]}."""
    path = Path(path)
    spec = json.loads(path.read_text())
    entries = []
    for e in spec["entries"]:
        vol = (path.parent / e["volume"]).resolve()
        if not vol.exists():
            raise VolumeIOError(f"{vol}: manifest entry does not resolve")
        lab = e.get("labels")
        if lab is not None:
            lab = (path.parent / lab).resolve()
            if not lab.exists():
                raise VolumeIOError(f"{lab}: manifest entry does not resolve")
        entries.append((vol, lab, e.get("subject", vol.stem)))
    return Dataset(entries=entries, split=spec.get("split", "test"), name=spec.get("name", ""))


def sample_pairs(ds: Dataset, n: int, seed: int):
    """Deterministic (target, source) subject-id pairs, never self-pairs."""
    count = len(ds.entries)
    if count < 2:
        raise ValueError(f"need at least 2 entries to sample pairs, have {count}")
    rng = np.random.default_rng(seed)
    ids = [e[2] for e in ds.entries]
    pairs = []
    for _ in range(n):
        t = int(rng.integers(count))
        s = int(rng.integers(count - 1))
        if s >= t:
            s += 1
        pairs.append((ids[t], ids[s]))
    return pairs


# ---------------------------------------------------------------------------
# synthetic diffeomorphic pairs
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """`seed` identifies the pair. With `template_seed` set, pairs are drawn
    from one cohort: a fixed anatomy deformed per subject, like subjects of a
    single brain dataset; otherwise every pair gets its own anatomy. Each
    cohort subject's velocity field carries 0.7 * svf_amplitude so the
    composed between-subject deformation stays on the svf_amplitude scale."""

    shape: tuple = (16, 16, 16)
    svf_amplitude: float = 3.0
    svf_smoothing_sigma: float = 2.0
    integration_steps: int = 7
    noise_sigma: float = 0.02
    n_labels: int = 6
    seed: int = 0
    template_seed: int = None

    def __post_init__(self):
        if self.svf_amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.integration_steps < 1:
            raise ValueError("integration needs at least one step")
        self.shape = tuple(int(n) for n in self.shape)


@dataclass
class SyntheticPair:
    target: Volume
    source: Volume
    labels_t: LabelMap
    labels_s: LabelMap
    gt_field: DisplacementField  # source == warp(target, gt_field) up to noise
    gt_field_inv: DisplacementField  # ideal source->target registration output


def integrate_velocity(velocity: torch.Tensor, steps: int = 7) -> DisplacementField:
    """Scaling-and-squaring exponential of a stationary velocity field.

    velocity: (h, w, d, 3) voxel displacements per unit time.
    """
    disp = (velocity / 2.0**steps).permute(3, 0, 1, 2)
    for _ in range(steps):
        disp = compose_disp(disp, disp)
    return DisplacementField(disp.permute(1, 2, 3, 0), level=0)


def _nested_ellipsoid_labels(shape, rng, n_labels) -> np.ndarray:
    # closely spaced shells so a voxel-scale deformation visibly costs overlap
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1)
    center = np.array(shape) / 2.0 + rng.uniform(-1.5, 1.5, size=3)
    axes_scale = rng.uniform(0.85, 1.15, size=(n_labels, 3))
    base = min(shape) * 0.46
    radii = base * np.linspace(1.0, 0.4, n_labels)
    labels = np.zeros(shape, dtype=np.int64)
    for i in range(n_labels):
        r = radii[i] * axes_scale[i]
        inside = (((grid - center) / r) ** 2).sum(-1) <= 1.0
        labels[inside] = i + 1
    return labels


def _template(shape, rng, n_labels):
    labels = _nested_ellipsoid_labels(shape, rng, n_labels)
    # two texture scales so the similarity signal is dense, not edge-only
    texture = gaussian_filter(rng.standard_normal(shape), sigma=1.0)
    texture += gaussian_filter(rng.standard_normal(shape), sigma=2.5)
    span = np.abs(texture).max()
    if span > 0:
        texture = texture / span * 0.3
    intensity = np.clip(labels / (n_labels + 1.0) + 0.2 + texture, 0.0, 1.0)
    return Volume(torch.from_numpy(intensity).float()), LabelMap(torch.from_numpy(labels))


def _smooth_velocity(shape, rng, amplitude, sigma) -> torch.Tensor:
    """Smoothed seeded noise scaled so the strongest velocity is `amplitude`.

    The smoothed noise is direction-normalized (then re-smoothed) before
    scaling so typical magnitudes sit near the amplitude instead of far below
    it; strain stays low enough that the exponential is fold-free at the
    default settings.
    """
    g = rng.standard_normal((*shape, 3))
    for c in range(3):
        g[..., c] = gaussian_filter(g[..., c], sigma=sigma)
    mag = np.sqrt((g**2).sum(-1, keepdims=True))
    u = g / (mag + 1e-9)
    for c in range(3):
        u[..., c] = gaussian_filter(u[..., c], sigma=1.5)
    peak = np.sqrt((u**2).sum(-1)).max()
    if peak > 0 and amplitude > 0:
        u *= amplitude / peak
    else:
        u[:] = 0.0
    return torch.from_numpy(u).float()


def generate_synthetic_pair(spec: SyntheticSpec) -> SyntheticPair:
    """Seeded target with nested-ellipsoid labels, deformed by the exponential
    of a smoothed random velocity field; the source is the warped target plus
    clipped Gaussian noise, and labels follow by nearest warping.

    In cohort mode (template_seed set) the target itself is a deformed
    instance of the shared template and the pair field composes the two
    subject deformations, so registration is between cohort subjects.
    """
    shape = spec.shape
    rng = np.random.default_rng(
        spec.seed if spec.template_seed is None else spec.template_seed
    )
    target, labels_t = _template(shape, rng, spec.n_labels)

    if spec.template_seed is None:
        vel = _smooth_velocity(shape, rng, spec.svf_amplitude, spec.svf_smoothing_sigma)
        gt_field = integrate_velocity(vel, spec.integration_steps)
        gt_field_inv = integrate_velocity(-vel, spec.integration_steps)
    else:
        rng_i = np.random.default_rng((spec.template_seed, spec.seed, 0))
        rng_j = np.random.default_rng((spec.template_seed, spec.seed, 1))
        amp = 0.7 * spec.svf_amplitude
        v_i = _smooth_velocity(shape, rng_i, amp, spec.svf_smoothing_sigma)
        v_j = _smooth_velocity(shape, rng_j, amp, spec.svf_smoothing_sigma)
        fwd_i = integrate_velocity(v_i, spec.integration_steps)
        target = warp_trilinear(target, fwd_i)
        labels_t = warp_nearest(labels_t, fwd_i)
        # between-subject map; exact group inverse below keeps EPE meaningful
        gt_field = compose_fields(integrate_velocity(-v_j, spec.integration_steps), fwd_i)
        gt_field_inv = compose_fields(
            integrate_velocity(-v_i, spec.integration_steps),
            integrate_velocity(v_j, spec.integration_steps),
        )

    warped = warp_trilinear(target, gt_field)
    noise = rng.normal(0.0, spec.noise_sigma, size=shape) if spec.noise_sigma > 0 else 0.0
    source = Volume(torch.from_numpy(
        np.clip(warped.data.numpy() + noise, 0.0, 1.0)
    ).float())
    labels_s = warp_nearest(labels_t, gt_field)

    return SyntheticPair(target, source, labels_t, labels_s, gt_field, gt_field_inv)
