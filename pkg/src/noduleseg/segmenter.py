"""Seed-box driven segmentation: classify voxels slice by slice, walk outward
from the starting slice, and keep one connected region per slice."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .dbresnet import DBResNet
from .patch_engine import DEFAULT_SPEC, PatchSpec, extract_multiscale_batch, extract_multiview_batch
from .volume_store import BinaryMask3D, NormalizedVolume, Region, connected_regions_2d

STOP_RATIO = 0.30


class UntrainedNetworkError(RuntimeError):
    pass


class SeedBox(NamedTuple):
    """Starting slice plus an inclusive 2-D box (row_min, col_min, row_max, col_max)."""

    z: int
    row_min: int
    col_min: int
    row_max: int
    col_max: int

    @classmethod
    def parse(cls, text: str) -> "SeedBox":
        parts = [int(p) for p in text.split(",")]
        if len(parts) != 5:
            raise ValueError(f"seed box needs z,row_min,col_min,row_max,col_max, got {text!r}")
        return cls(*parts)

    def validate(self, shape) -> None:
        z_n, rows, cols = shape
        if not 0 <= self.z < z_n:
            raise ValueError(f"seed slice {self.z} outside [0, {z_n})")
        if not (0 <= self.row_min <= self.row_max < rows and 0 <= self.col_min <= self.col_max < cols):
            raise ValueError(f"seed box {tuple(self)[1:]} outside slice of size {rows}x{cols}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.row_min + self.row_max) / 2, (self.col_min + self.col_max) / 2

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.row_min, self.row_max + 1), slice(self.col_min, self.col_max + 1)

    def box_mask(self, shape2d) -> np.ndarray:
        m = np.zeros(shape2d, dtype=bool)
        m[self.slices] = True
        return m


@dataclass
class SegmentationResult:
    mask: BinaryMask3D
    areas: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    stop_reasons: dict = field(default_factory=dict)

    @property
    def slices(self) -> list[int]:
        return sorted(self.areas)

    def to_json(self) -> dict:
        return {
            "slices": self.slices,
            "areas": {str(z): a for z, a in sorted(self.areas.items())},
            "stop_reasons": self.stop_reasons,
            "trace": self.trace,
        }


def classify_slice(
    net: DBResNet,
    vol: NormalizedVolume,
    z: int,
    box: SeedBox,
    threshold: float = 0.5,
    spec: PatchSpec = DEFAULT_SPEC,
    batch_size: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Nodule probability and thresholded mask for every voxel in the box.

    Both outputs are full-slice arrays; voxels outside the box are 0.
    """
    if not getattr(net, "is_trained", False):
        raise UntrainedNetworkError("network has not been trained or loaded from a checkpoint")
    SeedBox(z, *box[1:]).validate(vol.shape)
    rs, cs = box.slices
    rows, cols = np.mgrid[rs, cs]
    centers = np.stack([np.full(rows.size, z), rows.ravel(), cols.ravel()], axis=1)
    prob = np.zeros(vol.shape[1:], dtype=np.float64)
    vals = []
    for i in range(0, len(centers), batch_size):
        chunk = centers[i : i + batch_size]
        vals.append(net.predict(extract_multiview_batch(vol, chunk, spec), extract_multiscale_batch(vol, chunk, spec), batch_size))
    prob[rows.ravel(), cols.ravel()] = np.concatenate(vals)
    mask = np.zeros_like(prob, dtype=bool)
    mask[rs, cs] = prob[rs, cs] >= threshold
    return prob, mask


def _distance(region: Region, point) -> float:
    return math.hypot(region.centroid[0] - point[0], region.centroid[1] - point[1])


def select_region_start(mask2d, box: SeedBox) -> Region:
    """Connected region whose centroid is nearest the box centre.

    Ties go to the larger region, then to the region met first in raster order.
    """
    regions = connected_regions_2d(mask2d)
    if not regions:
        raise ValueError("no foreground to select from")
    c = box.center
    return min(regions, key=lambda r: (round(_distance(r, c), 9), -r.area, r.first_index))


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def select_region_follow(mask2d, prev_mask, box: SeedBox | None = None) -> Region:
    """Connected region with the largest Jaccard overlap with ``prev_mask``.

    If no region overlaps, falls back to ``select_region_start`` against ``box``
    (or, without a box, the centroid of ``prev_mask``).
    """
    m = np.asarray(mask2d).astype(bool)
    prev = np.asarray(prev_mask).astype(bool)
    regions = connected_regions_2d(m)
    if not regions:
        raise ValueError("no foreground to select from")
    scored = [(jaccard(r.mask(m.shape), prev), r) for r in regions]
    best_score = max(s for s, _ in scored)
    if best_score <= 0.0:
        if box is None:
            pr, pc = np.argwhere(prev).mean(axis=0) if prev.any() else ((m.shape[0] - 1) / 2, (m.shape[1] - 1) / 2)
            return min(regions, key=lambda r: (round(_distance(r, (pr, pc)), 9), -r.area, r.first_index))
        return select_region_start(m, box)
    return min(scored, key=lambda sr: (-round(sr[0], 12), -sr[1].area, sr[1].first_index))[1]


def should_stop(intersection: int, prev_area: int, ratio: float = STOP_RATIO) -> bool:
    """The walk stops once overlap with the previous slice falls below ``ratio`` of its area."""
    return intersection < ratio * prev_area


def propagate_masks(
    slice_mask: Callable[[int], np.ndarray],
    shape,
    seed: SeedBox,
    stop_ratio: float = STOP_RATIO,
    post: bool = True,
) -> SegmentationResult:
    """Slice walk driven by any per-slice classifier ``slice_mask(z) -> bool (rows, cols)``.

    With ``post`` each slice keeps a single connected region (nearest the box
    centre on the starting slice, best Jaccard match afterwards); without it the
    raw in-box mask is used.
    """
    seed.validate(shape)
    out = np.zeros(shape, dtype=np.uint8)
    box = seed.box_mask(shape[1:])
    areas: dict[int, int] = {}
    trace: list[dict] = []
    stops: dict[str, str] = {}

    def clean(raw: np.ndarray, prev: np.ndarray | None) -> np.ndarray:
        raw = raw & box
        if not post or not raw.any():
            return raw
        region = select_region_start(raw, seed) if prev is None else select_region_follow(raw, prev, seed)
        return region.mask(raw.shape)

    start = clean(np.asarray(slice_mask(seed.z)).astype(bool), None)
    if not start.any():
        trace.append({"z": seed.z, "area": 0, "accepted": False, "reason": "empty_start"})
        return SegmentationResult(BinaryMask3D(out), {}, trace, {"start": "empty_start"})
    out[seed.z] = start
    areas[seed.z] = int(start.sum())
    trace.append({"z": seed.z, "area": areas[seed.z], "accepted": True, "reason": "start"})

    for name, step in (("down", -1), ("up", 1)):
        prev = start
        z = seed.z + step
        reason = "edge"
        while 0 <= z < shape[0]:
            cur = clean(np.asarray(slice_mask(z)).astype(bool), prev)
            area = int(cur.sum())
            if area == 0:
                trace.append({"z": z, "area": 0, "accepted": False, "reason": "empty"})
                reason = "empty"
                break
            inter = int(np.logical_and(cur, prev).sum())
            ratio = inter / int(prev.sum())
            if should_stop(inter, int(prev.sum()), stop_ratio):
                trace.append({"z": z, "area": area, "intersection": inter, "ratio": ratio, "accepted": False, "reason": "overlap"})
                reason = "overlap"
                break
            out[z] = cur
            areas[z] = area
            trace.append({"z": z, "area": area, "intersection": inter, "ratio": ratio, "accepted": True, "reason": "continue"})
            prev = cur
            z += step
        stops[name] = reason
    trace.sort(key=lambda t: t["z"])
    return SegmentationResult(BinaryMask3D(out), areas, trace, stops)


def propagate(
    net: DBResNet,
    vol: NormalizedVolume,
    seed: SeedBox,
    threshold: float = 0.5,
    stop_ratio: float = STOP_RATIO,
    post: bool = True,
    spec: PatchSpec = DEFAULT_SPEC,
    batch_size: int = 256,
) -> SegmentationResult:
    seed.validate(vol.shape)

    def slice_mask(z: int) -> np.ndarray:
        return classify_slice(net, vol, z, seed, threshold, spec, batch_size)[1]

    return propagate_masks(slice_mask, vol.shape, seed, stop_ratio, post)


def intensity_baseline(vol: NormalizedVolume, seed: SeedBox, stop_ratio: float = STOP_RATIO) -> SegmentationResult:
    """Nearest-intensity thresholding inside the box, with the same propagation.

    Each voxel in the box is labelled nodule when its value is closer to the
    bright class mean than the dark one, with class means from a two-means
    split of the starting-slice box.
    """
    seed.validate(vol.shape)
    rs, cs = seed.slices
    vals = vol.data[seed.z, rs, cs].ravel().astype(np.float64)
    lo, hi = vals.min(), vals.max()
    for _ in range(50):
        t = (lo + hi) / 2
        bright, dark = vals[vals >= t], vals[vals < t]
        if not len(bright) or not len(dark):
            break
        new_lo, new_hi = dark.mean(), bright.mean()
        if np.isclose(new_lo, lo) and np.isclose(new_hi, hi):
            break
        lo, hi = new_lo, new_hi
    threshold = (lo + hi) / 2

    def slice_mask(z: int) -> np.ndarray:
        return vol.data[z] >= threshold

    return propagate_masks(slice_mask, vol.shape, seed, stop_ratio, post=True)
