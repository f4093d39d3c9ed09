"""CT volumes, binary masks, nodule records and their on-disk formats.

A volume is stored as two files sharing a stem::

    case001.ctvol.json   {"format": "ctvol", "version": 1, "shape": [z, y, x],
                          "spacing_mm": [dz, dy, dx], "dtype": "int16",
                          "byte_order": "little"}
    case001.ctvol.raw    z*y*x little-endian int16 values, C order

Masks use the same layout with suffix ``.mask`` and ``"dtype": "uint8"``.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

HU_WINDOW = (-1000.0, 400.0)

CHARACTERISTIC_RANGES = {
    "sphericity": (1, 5),
    "margin": (1, 5),
    "spiculation": (1, 5),
    "texture": (1, 5),
    "calcification": (1, 6),
    "internal_structure": (1, 4),
    "lobulation": (1, 5),
    "subtlety": (1, 5),
    "malignancy": (1, 5),
}

_FORMATS = {
    "ctvol": ("int16", np.dtype("<i2")),
    "mask": ("uint8", np.dtype("u1")),
}


class VolumeFormatError(ValueError):
    """Base class for volume/mask file errors; ``code`` is a stable identifier."""

    code = "format"


class MalformedHeaderError(VolumeFormatError):
    code = "malformed_header"


class TruncatedPayloadError(VolumeFormatError):
    code = "truncated_payload"


class PayloadMismatchError(VolumeFormatError):
    code = "shape_payload_mismatch"


class VoxelIndex(NamedTuple):
    slice: int
    row: int
    col: int


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CtVolume:
    """HU volume indexed (slice, row, col) with spacing in mm per axis."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be 3-D with non-empty axes, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if data.dtype != np.int16:
            if np.any(data < -32768) or np.any(data > 32767):
                raise ValueError("HU values do not fit in int16")
            data = np.rint(data).astype(np.int16)
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def slice_area(self) -> int:
        return self.shape[1] * self.shape[2]

    def contains(self, index: Sequence[int]) -> bool:
        return all(0 <= int(i) < n for i, n in zip(index, self.shape))


@dataclass(frozen=True)
class NormalizedVolume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError("normalized volume must be 3-D")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("normalized values must lie in [0, 1]")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def contains(self, index: Sequence[int]) -> bool:
        return all(0 <= int(i) < n for i, n in zip(index, self.shape))


@dataclass(frozen=True)
class BinaryMask3D:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError("mask must be 3-D")
        if data.dtype != np.uint8:
            if not np.isin(data, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")
            data = data.astype(np.uint8)
        elif data.size and data.max() > 1:
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _readonly(data))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def volume(self) -> int:
        return int(self.data.sum())

    def as_bool(self) -> np.ndarray:
        return self.data.astype(bool)


@dataclass(frozen=True)
class NoduleRecord:
    """Nodule annotations: rater mask paths plus characteristic scores.

    ``characteristics`` maps the names in ``CHARACTERISTIC_RANGES`` to scores,
    which may be non-integer when they are rater averages.
    """

    nodule_id: str
    rater_masks: tuple[str, ...]
    diameter_mm: float
    characteristics: dict = field(default_factory=dict)
    attached: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rater_masks", tuple(str(p) for p in self.rater_masks))
        if not 1 <= len(self.rater_masks) <= 4:
            raise ValueError("a nodule record holds 1 to 4 rater masks")
        if not self.diameter_mm > 0:
            raise ValueError("diameter must be positive")
        for name, value in self.characteristics.items():
            if name not in CHARACTERISTIC_RANGES:
                raise ValueError(f"unknown characteristic {name!r}")
            lo, hi = CHARACTERISTIC_RANGES[name]
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")

    def to_json(self) -> dict:
        return {
            "nodule_id": self.nodule_id,
            "rater_masks": list(self.rater_masks),
            "diameter_mm": self.diameter_mm,
            "attached": self.attached,
            "characteristics": dict(self.characteristics),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NoduleRecord":
        return cls(
            nodule_id=obj["nodule_id"],
            rater_masks=tuple(obj["rater_masks"]),
            diameter_mm=float(obj["diameter_mm"]),
            characteristics=dict(obj.get("characteristics", {})),
            attached=bool(obj.get("attached", False)),
        )


# ---------------------------------------------------------------------------
# file formats


def _stem(path, kind: str) -> Path:
    path = Path(path)
    name = path.name
    for suffix in (f".{kind}.json", f".{kind}.raw"):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)])
    return path


def _paths(path, kind: str) -> tuple[Path, Path]:
    stem = _stem(path, kind)
    return stem.with_name(stem.name + f".{kind}.json"), stem.with_name(stem.name + f".{kind}.raw")


def _write(kind: str, array: np.ndarray, path, extra: dict) -> Path:
    dtype_name, dtype = _FORMATS[kind]
    header_path, raw_path = _paths(path, kind)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": kind,
        "version": 1,
        "shape": [int(n) for n in array.shape],
        "dtype": dtype_name,
        "byte_order": "little",
        **extra,
    }
    raw_path.write_bytes(np.ascontiguousarray(array, dtype=dtype).tobytes())
    header_path.write_text(json.dumps(header, indent=2) + "\n")
    return header_path


def _read(kind: str, path) -> tuple[np.ndarray, dict]:
    dtype_name, dtype = _FORMATS[kind]
    header_path, raw_path = _paths(path, kind)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"{header_path}: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != kind:
        raise MalformedHeaderError(f"{header_path}: not a {kind} header")
    shape = header.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or not all(isinstance(n, int) and n >= 1 for n in shape)
    ):
        raise MalformedHeaderError(f"{header_path}: bad shape {shape!r}")
    if header.get("dtype") != dtype_name or header.get("byte_order") != "little":
        raise MalformedHeaderError(f"{header_path}: expected little-endian {dtype_name}")
    payload = raw_path.read_bytes()
    expected = math.prod(shape) * dtype.itemsize
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{raw_path}: {len(payload)} bytes, header implies {expected}"
        )
    if len(payload) != expected:
        raise PayloadMismatchError(
            f"{raw_path}: {len(payload)} bytes, header implies {expected}"
        )
    array = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return array, header


def save_volume(volume: CtVolume, path) -> Path:
    return _write("ctvol", volume.data, path, {"spacing_mm": list(volume.spacing)})


def load_volume(path) -> CtVolume:
    data, header = _read("ctvol", path)
    spacing = header.get("spacing_mm")
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise MalformedHeaderError(f"{path}: bad spacing_mm {spacing!r}")
    try:
        return CtVolume(data.astype(np.int16), tuple(spacing))
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: {exc}") from exc


def save_mask(mask: BinaryMask3D, path) -> Path:
    return _write("mask", mask.data, path, {})


def load_mask(path) -> BinaryMask3D:
    data, _ = _read("mask", path)
    try:
        return BinaryMask3D(data.copy())
    except ValueError as exc:
        raise PayloadMismatchError(f"{path}: {exc}") from exc


def save_record(record: NoduleRecord, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record.to_json(), indent=2) + "\n")
    return path


def load_record(path) -> NoduleRecord:
    return NoduleRecord.from_json(json.loads(Path(path).read_text()))


def resolve_rater_masks(record: NoduleRecord, base_dir) -> list[BinaryMask3D]:
    """Load a record's rater masks; relative paths resolve against ``base_dir``."""
    base = Path(base_dir)
    return [load_mask(p if os.path.isabs(p) else base / p) for p in record.rater_masks]


# ---------------------------------------------------------------------------
# intensity and mask operations


def normalize_hu(volume: CtVolume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> NormalizedVolume:
    if not lo < hi:
        raise ValueError(f"window lower bound {lo} must be below upper bound {hi}")
    scaled = (volume.data.astype(np.float64) - lo) / (hi - lo)
    return NormalizedVolume(np.clip(scaled, 0.0, 1.0), volume.spacing)


def consensus_mask(rater_masks: Sequence[BinaryMask3D]) -> BinaryMask3D:
    """Voxels marked by at least half of the raters (exactly 50% counts)."""
    if len(rater_masks) < 2:
        raise ValueError("consensus needs at least two rater masks")
    shapes = {m.shape for m in rater_masks}
    if len(shapes) != 1:
        raise ValueError(f"rater masks disagree on shape: {sorted(shapes)}")
    votes = np.zeros(rater_masks[0].shape, dtype=np.int32)
    for m in rater_masks:
        votes += m.data
    quorum = math.ceil(len(rater_masks) / 2)
    return BinaryMask3D((votes >= quorum).astype(np.uint8))


_FOUR = ndimage.generate_binary_structure(2, 1)
_EIGHT = ndimage.generate_binary_structure(2, 2)


def boundary_voxels_2d(mask_slice) -> np.ndarray:
    """Boolean map of foreground pixels that touch background through a 4-neighbour.

    Pixels outside the image count as background.
    """
    m = np.asarray(mask_slice).astype(bool)
    if m.ndim != 2:
        raise ValueError("expected a 2-D slice")
    interior = ndimage.binary_erosion(m, structure=_FOUR, border_value=0)
    return m & ~interior


@dataclass(frozen=True)
class Region:
    coords: np.ndarray  # (n, 2) int rows/cols in raster order
    centroid: tuple[float, float]
    area: int

    def mask(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        out[self.coords[:, 0], self.coords[:, 1]] = True
        return out

    @property
    def first_index(self) -> tuple[int, int]:
        return int(self.coords[0, 0]), int(self.coords[0, 1])


def connected_regions_2d(mask_slice) -> list[Region]:
    """8-connected foreground regions, ordered by area (desc), centroid row, centroid col."""
    m = np.asarray(mask_slice).astype(bool)
    if m.ndim != 2:
        raise ValueError("expected a 2-D slice")
    labels, n = ndimage.label(m, structure=_EIGHT)
    if n == 0:
        return []
    coords = np.argwhere(labels > 0)
    owner = labels[coords[:, 0], coords[:, 1]]
    order = np.argsort(owner, kind="stable")
    coords, owner = coords[order], owner[order]
    splits = np.searchsorted(owner, np.arange(1, n + 1))
    regions = []
    for group in np.split(coords, splits[1:]):
        centroid = (float(group[:, 0].mean()), float(group[:, 1].mean()))
        regions.append(Region(group, centroid, len(group)))
    regions.sort(key=lambda r: (-r.area, r.centroid[0], r.centroid[1]))
    return regions
