"""Volume data model, MVOL on-disk format, normalization, minimum filter.

A Volume is a multi-channel 3D float field in LPS order: x = lateral,
y = posterior, z = superior. Data is stored (C, Z, Y, X) with x fastest,
float64 in memory, float32 on disk.

MVOL binary layout (little-endian):
    "MVOL"   4 bytes magic
    0x01    version
    0x00    pad
    u32     C, X, Y, Z
    f32     spacing_x, spacing_y, spacing_z   [mm]
    f32 * C*Z*Y*X   values ordered (c, z, y, x), x fastest

An optional JSON sidecar shares the basename with extension ".json":
    {"sequences": [...], "boxes": [{"min": [x,y,z], "max": [x,y,z],
     "label": ...}], "role": "image"|"mask"|...}
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, DimensionError, FormatError, ValidationError

_MAGIC = b"MVOL"
_VERSION = 1
_HEADER = struct.Struct("<4s2B4I3f")  # 34 bytes


@dataclass(frozen=True)
class Volume:
    """Immutable multi-channel 3D field with voxel spacing in mm."""

    data: np.ndarray  # (C, Z, Y, X) float64
    spacing: tuple[float, float, float]  # (x, y, z)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4:
            raise DimensionError(f"volume data must be (C, Z, Y, X), got {data.shape}")
        if any(s <= 0 for s in self.spacing) or len(self.spacing) != 3:
            raise ValidationError(f"spacing must be three positive floats, got {self.spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        """(X, Y, Z) extents in voxels."""
        c, z, y, x = self.data.shape
        return (x, y, z)

    def channel(self, c: int) -> "Volume":
        return Volume(self.data[c : c + 1].copy(), self.spacing)


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel-index box with a text label."""

    vmin: tuple[int, int, int]  # (x, y, z)
    vmax: tuple[int, int, int]
    label: str = ""

    def __post_init__(self):
        if any(a > b for a, b in zip(self.vmin, self.vmax)):
            raise ValidationError(f"box min {self.vmin} exceeds max {self.vmax}")

    def voxel_count(self) -> int:
        return int(np.prod([b - a + 1 for a, b in zip(self.vmin, self.vmax)]))

    def to_json(self) -> dict:
        return {"min": list(self.vmin), "max": list(self.vmax), "label": self.label}

    @staticmethod
    def from_json(obj: dict) -> "BoundingBox":
        return BoundingBox(tuple(obj["min"]), tuple(obj["max"]), obj.get("label", ""))


# ---------------------------------------------------------------------------
# MVOL read / write


def write_mvol(volume: Volume, path) -> None:
    c, z, y, x = volume.data.shape
    sx, sy, sz = volume.spacing
    header = _HEADER.pack(_MAGIC, _VERSION, 0, c, x, y, z, sx, sy, sz)
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_mvol(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: shorter than an MVOL header")
    magic, version, _pad, c, x, y, z, sx, sy, sz = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if min(c, x, y, z) < 1:
        raise FormatError(f"{path}: zero-sized dimension in header")
    n = c * x * y * z  # Python ints: no overflow
    if len(raw) - _HEADER.size != 4 * n:
        raise FormatError(
            f"{path}: payload holds {len(raw) - _HEADER.size} bytes, "
            f"header implies {4 * n}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, z, y, x)
    return Volume(data.astype(np.float64), (sx, sy, sz))


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_sidecar(path, *, sequences=None, boxes=None, role: str = "image", extra=None) -> None:
    """Write the JSON sidecar next to an MVOL file (same basename)."""
    obj = {
        "sequences": list(sequences) if sequences else [],
        "boxes": [b.to_json() for b in boxes] if boxes else [],
        "role": role,
    }
    if extra:
        obj.update(extra)
    sidecar_path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_sidecar(path) -> dict | None:
    p = sidecar_path(path)
    if not p.exists():
        return None
    return json.loads(p.read_text())


def read_boxes(path) -> list[BoundingBox]:
    side = read_sidecar(path)
    if side is None:
        return []
    return [BoundingBox.from_json(b) for b in side.get("boxes", [])]


# ---------------------------------------------------------------------------
# voxel operations


def normalize(v: Volume, target_mean: float = 0.5, target_std: float = 0.25) -> Volume:
    """Affinely map each channel to the target mean/std.

    Raises DegenerateInputError for a (numerically) constant channel.
    """
    out = np.empty_like(v.data)
    for c in range(v.n_channels):
        ch = v.data[c]
        m = ch.mean()
        s = ch.std()
        if s < 1e-12 * max(1.0, abs(m)):
            raise DegenerateInputError(f"channel {c} is constant; cannot normalize")
        out[c] = (ch - m) / s * target_std + target_mean
    return Volume(out, v.spacing)


def min_filter(v: Volume, kernel: tuple[int, int, int] = (3, 3, 2)) -> Volume:
    """Sliding-window minimum (grayscale erosion) per channel.

    `kernel` is (kx, ky, kz). Odd extents are centered; even extents are
    forward-aligned (a z-window of 2 at slice z covers {z, z+1}). Borders
    replicate, so output dims equal input dims.
    """
    kx, ky, kz = kernel
    x, y, z = v.dims
    if kx < 1 or ky < 1 or kz < 1:
        raise DimensionError(f"kernel extents must be >= 1, got {kernel}")
    if kx > x or ky > y or kz > z:
        raise DimensionError(f"kernel {kernel} exceeds volume dims {v.dims}")
    pads = [((k - 1) // 2, k // 2) for k in (kz, ky, kx)]
    out = np.empty_like(v.data)
    for c in range(v.n_channels):
        padded = np.pad(v.data[c], pads, mode="edge")
        acc = None
        for dz, dy, dx in product(range(kz), range(ky), range(kx)):
            window = padded[dz : dz + z, dy : dy + y, dx : dx + x]
            acc = window.copy() if acc is None else np.minimum(acc, window, out=acc)
        out[c] = acc
    return Volume(out, v.spacing)


def crop(v: Volume, origin: tuple[int, int, int], size: tuple[int, int, int]) -> Volume:
    """Copy the sub-volume at `origin` (x, y, z) of extent `size`."""
    ox, oy, oz = origin
    sx, sy, sz = size
    x, y, z = v.dims
    if min(ox, oy, oz) < 0 or min(sx, sy, sz) < 1:
        raise DimensionError(f"invalid crop origin {origin} / size {size}")
    if ox + sx > x or oy + sy > y or oz + sz > z:
        raise DimensionError(f"crop {origin}+{size} exceeds volume dims {v.dims}")
    return Volume(v.data[:, oz : oz + sz, oy : oy + sy, ox : ox + sx].copy(), v.spacing)


def box_to_mask(box: BoundingBox, dims: tuple[int, int, int], spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Binary single-channel volume: 1 inside the (inclusive) box."""
    x, y, z = dims
    if min(box.vmin) < 0 or box.vmax[0] >= x or box.vmax[1] >= y or box.vmax[2] >= z:
        raise DimensionError(f"box {box} outside volume dims {dims}")
    data = np.zeros((1, z, y, x))
    (x0, y0, z0), (x1, y1, z1) = box.vmin, box.vmax
    data[0, z0 : z1 + 1, y0 : y1 + 1, x0 : x1 + 1] = 1.0
    return Volume(data, spacing)


def boxes_to_mask(boxes, dims, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Union of boxes as a binary mask (all-zero for an empty list)."""
    x, y, z = dims
    data = np.zeros((1, z, y, x))
    for box in boxes:
        data = np.maximum(data, box_to_mask(box, dims, spacing).data)
    return Volume(data, spacing)
