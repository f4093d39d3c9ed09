"""Multi-view and multi-scale input patches for a target voxel.

Both extractors clamp indices to the volume, so border voxels get replicate
padding and nothing outside the array is ever read.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.interpolate import make_interp_spline

from .volume_store import NormalizedVolume

VIEW_SIZE = 35
SCALE_SIZES = (65, 50, 35)


@dataclass(frozen=True)
class PatchSpec:
    view_size: int = VIEW_SIZE
    scale_sizes: tuple[int, ...] = SCALE_SIZES
    target_size: int = VIEW_SIZE

    def __post_init__(self):
        # 50 is even; its crop spans [c-25, c+24] (see crop_offsets).
        for s in (self.view_size, self.target_size):
            if s % 2 == 0:
                raise ValueError(f"patch size {s} must be odd")
        if any(s < 2 for s in self.scale_sizes) or not self.scale_sizes:
            raise ValueError("scale sizes must be >= 2")

    @property
    def n_scales(self) -> int:
        return len(self.scale_sizes)


DEFAULT_SPEC = PatchSpec()


def crop_offsets(size: int) -> np.ndarray:
    """Offsets from the centre voxel covered by a crop of ``size`` pixels."""
    return np.arange(size) - size // 2


def _check_centers(vol: NormalizedVolume, centers) -> np.ndarray:
    centers = np.atleast_2d(np.asarray(centers, dtype=np.int64))
    if centers.shape[1] != 3:
        raise ValueError("centers must be (slice, row, col) triples")
    shape = np.asarray(vol.shape)
    if np.any(centers < 0) or np.any(centers >= shape):
        bad = centers[np.any((centers < 0) | (centers >= shape), axis=1)][0]
        raise IndexError(f"center {tuple(bad)} outside volume of shape {vol.shape}")
    return centers


def _crop_batch(slices: np.ndarray, z, rows, cols, size: int, shape) -> np.ndarray:
    """Crops (n, size, size) around (rows, cols) on slices z, clamped to the volume."""
    off = crop_offsets(size)
    r = np.clip(rows[:, None] + off[None, :], 0, shape[1] - 1)
    c = np.clip(cols[:, None] + off[None, :], 0, shape[2] - 1)
    return slices[z[:, None, None], r[:, :, None], c[:, None, :]]


def extract_multiview_batch(vol: NormalizedVolume, centers, spec: PatchSpec = DEFAULT_SPEC) -> np.ndarray:
    """(n, 3, view, view) patches from slices z-1, z, z+1."""
    centers = _check_centers(vol, centers)
    z, r, c = centers.T
    out = np.empty((len(centers), 3, spec.view_size, spec.view_size), dtype=np.float32)
    for ch, dz in enumerate((-1, 0, 1)):
        zz = np.clip(z + dz, 0, vol.shape[0] - 1)
        out[:, ch] = _crop_batch(vol.data, zz, r, c, spec.view_size, vol.shape)
    return out


def extract_multiview(vol: NormalizedVolume, center, spec: PatchSpec = DEFAULT_SPEC) -> np.ndarray:
    return extract_multiview_batch(vol, [center], spec)[0]


@lru_cache(maxsize=32)
def _resample_matrix(n_src: int, n_dst: int, order: int) -> np.ndarray:
    """Linear operator (n_dst, n_src) of 1-D spline resampling with corner alignment."""
    dst = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)
    if n_src == n_dst:
        return np.eye(n_src)
    src = np.arange(n_src, dtype=np.float64)
    k = min(order, n_src - 1)
    spline = make_interp_spline(src, np.eye(n_src), k=k, axis=0)
    mat = spline(dst)
    mat.setflags(write=False)
    return mat


def rescale_2d(patch, target_size: int, order: int = 3) -> np.ndarray:
    """Resample a square image (or a stack ``(..., n, n)``) to ``target_size``.

    Uses separable interpolating splines of the given order with not-a-knot
    end conditions, so polynomials up to that degree along each axis are
    reproduced exactly. Sample ``j`` of the output sits at source coordinate
    ``j * (n - 1) / (target_size - 1)``.
    """
    p = np.asarray(patch, dtype=np.float64)
    if p.ndim < 2 or p.shape[-1] != p.shape[-2]:
        raise ValueError(f"expected square image(s), got shape {p.shape}")
    if target_size < 2:
        raise ValueError("target size must be at least 2")
    m = _resample_matrix(p.shape[-1], int(target_size), int(order))
    return np.einsum("ij,...jk,lk->...il", m, p, m)


def extract_multiscale_batch(vol: NormalizedVolume, centers, spec: PatchSpec = DEFAULT_SPEC) -> np.ndarray:
    """(n, n_scales, target, target) rescaled concentric crops of the current slice."""
    centers = _check_centers(vol, centers)
    z, r, c = centers.T
    out = np.empty((len(centers), spec.n_scales, spec.target_size, spec.target_size), dtype=np.float32)
    for ch, size in enumerate(spec.scale_sizes):
        crops = _crop_batch(vol.data, z, r, c, size, vol.shape)
        if size != spec.target_size:
            # cubic overshoot at sharp edges would leave [0, 1]
            crops = np.clip(rescale_2d(crops, spec.target_size), 0.0, 1.0)
        out[:, ch] = crops
    return out


def extract_multiscale(vol: NormalizedVolume, center, spec: PatchSpec = DEFAULT_SPEC) -> np.ndarray:
    return extract_multiscale_batch(vol, [center], spec)[0]


class PatchSource:
    """Serves (multi-view, multi-scale) patch batches for manifest entries."""

    def __init__(self, volumes: Mapping[str, NormalizedVolume], spec: PatchSpec = DEFAULT_SPEC):
        self.volumes = dict(volumes)
        self.spec = spec

    def patches(self, volume_id: str, centers) -> tuple[np.ndarray, np.ndarray]:
        vol = self.volumes[volume_id]
        return (
            extract_multiview_batch(vol, centers, self.spec),
            extract_multiscale_batch(vol, centers, self.spec),
        )

    def batch(self, entries: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Patches and labels for entries exposing volume_id, z, y, x and label."""
        n = len(entries)
        s = self.spec
        mv = np.empty((n, 3, s.view_size, s.view_size), dtype=np.float32)
        ms = np.empty((n, s.n_scales, s.target_size, s.target_size), dtype=np.float32)
        labels = np.fromiter((e.label for e in entries), dtype=np.float32, count=n)
        groups: dict[str, list[int]] = {}
        for i, e in enumerate(entries):
            groups.setdefault(e.volume_id, []).append(i)
        for vid, idx in groups.items():
            centers = [(entries[i].z, entries[i].y, entries[i].x) for i in idx]
            mv[idx], ms[idx] = self.patches(vid, centers)
        return mv, ms, labels


def dump_patch(path, multiview, multiscale, center, volume_id: str, label: int | None = None) -> Path:
    """Write one patch pair as ``<path>.patch.raw`` (float32 LE) + ``<path>.patch.json``."""
    path = Path(path)
    mv = np.ascontiguousarray(multiview, dtype="<f4")
    ms = np.ascontiguousarray(multiscale, dtype="<f4")
    raw = path.with_name(path.name + ".patch.raw")
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(mv.tobytes() + ms.tobytes())
    meta = {
        "volume_id": volume_id,
        "center": [int(v) for v in center],
        "label": None if label is None else int(label),
        "dtype": "float32",
        "byte_order": "little",
        "tensors": {"multiview": list(mv.shape), "multiscale": list(ms.shape)},
    }
    header = path.with_name(path.name + ".patch.json")
    header.write_text(json.dumps(meta, indent=2) + "\n")
    return header


def load_patch(path) -> tuple[np.ndarray, np.ndarray, dict]:
    path = Path(path)
    name = path.name
    for suffix in (".patch.json", ".patch.raw"):
        if name.endswith(suffix):
            path = path.with_name(name[: -len(suffix)])
    meta = json.loads(path.with_name(path.name + ".patch.json").read_text())
    flat = np.frombuffer(path.with_name(path.name + ".patch.raw").read_bytes(), dtype="<f4")
    mv_shape, ms_shape = meta["tensors"]["multiview"], meta["tensors"]["multiscale"]
    n_mv = int(np.prod(mv_shape))
    if flat.size != n_mv + int(np.prod(ms_shape)):
        raise ValueError(f"{path}: payload size does not match header")
    return flat[:n_mv].reshape(mv_shape), flat[n_mv:].reshape(ms_shape), meta
