"""Boundary-weighted, class-balanced selection of training voxels.

Per annotated slice, the nodule class gets every boundary voxel plus an equal
number of interior voxels (all voxels for small nodules), and the background
class gets the same count, split between a band hugging the nodule and the
rest of the slice.
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .volume_store import BinaryMask3D, boundary_voxels_2d

log = logging.getLogger(__name__)

NODULE, BACKGROUND = 1, 0


@dataclass(frozen=True)
class SamplerConfig:
    small_diameter_mm: float = 6.0
    band_width: int = 10
    near_fraction: float = 0.5
    seed: int = 0
    max_samples: int | None = None
    # "bws": boundary-weighted; "fraction": fixed share of nodule voxels (ablation baseline)
    strategy: str = "bws"
    nodule_fraction: float = 0.4

    def __post_init__(self):
        if not self.small_diameter_mm > 0:
            raise ValueError("small-nodule threshold must be positive")
        if self.band_width < 1:
            raise ValueError("band width must be at least one voxel")
        if not 0.0 <= self.near_fraction <= 1.0:
            raise ValueError("near fraction must lie in [0, 1]")
        if self.strategy not in ("bws", "fraction"):
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")
        if self.max_samples is not None and self.max_samples < 2:
            raise ValueError("max_samples must allow at least one pair")

    @property
    def far_fraction(self) -> float:
        return 1.0 - self.near_fraction


class SampleEntry(NamedTuple):
    volume_id: str
    z: int
    y: int
    x: int
    label: int
    tag: str


@dataclass
class SampleManifest:
    entries: list[SampleEntry] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def label_counts(self, volume_id: str | None = None) -> tuple[int, int]:
        es = [e for e in self.entries if volume_id is None or e.volume_id == volume_id]
        n_nod = sum(e.label == NODULE for e in es)
        return n_nod, len(es) - n_nod

    def volume_ids(self) -> list[str]:
        return sorted({e.volume_id for e in self.entries})

    def subset(self, volume_ids: Iterable[str]) -> "SampleManifest":
        keep = set(volume_ids)
        return SampleManifest([e for e in self.entries if e.volume_id in keep], list(self.warnings))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["# volume_id\tz\ty\tx\tlabel\ttag"]
        lines += [f"{e.volume_id}\t{e.z}\t{e.y}\t{e.x}\t{e.label}\t{e.tag}" for e in self.entries]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "SampleManifest":
        entries = []
        for line in Path(path).read_text().splitlines():
            if not line or line.startswith("#"):
                continue
            vid, z, y, x, label, tag = line.split("\t")
            entries.append(SampleEntry(vid, int(z), int(y), int(x), int(label), tag))
        return cls(entries)


def estimate_imbalance(r: float, slice_area: float) -> float:
    """Background-to-nodule pixel ratio for a disc of radius ``r`` on a slice."""
    if r <= 0:
        raise ValueError("radius must be positive")
    disc = math.pi * r * r
    if slice_area <= disc:
        raise ValueError("slice area must exceed the nodule disc area")
    return (slice_area - disc) / disc


def _take(rng: np.random.Generator, coords: np.ndarray, k: int) -> np.ndarray:
    if k >= len(coords):
        return coords
    idx = np.sort(rng.choice(len(coords), size=k, replace=False))
    return coords[idx]


def plan_slice_samples(
    gt_slice,
    slice_index: int,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    diameter_mm: float,
    volume_id: str = "",
) -> tuple[list[SampleEntry], list[str]]:
    """Balanced sample entries for one 2-D ground-truth slice.

    Returns the entries and any warnings (for example, a background pool too
    small to match the nodule count, in which case the nodule side is trimmed
    to keep the classes balanced).
    """
    fg = np.asarray(gt_slice).astype(bool)
    total = int(fg.sum())
    if total == 0:
        return [], []
    warnings: list[str] = []
    boundary = boundary_voxels_2d(fg)
    b_coords = np.argwhere(boundary)
    i_coords = np.argwhere(fg & ~boundary)
    n_boundary = len(b_coords)

    if cfg.strategy == "fraction":
        k = max(1, int(round(cfg.nodule_fraction * total)))
        picked = _take(rng, np.argwhere(fg), k)
        pb = boundary[picked[:, 0], picked[:, 1]]
        b_pick, i_pick = picked[pb], picked[~pb]
    elif diameter_mm < cfg.small_diameter_mm:
        b_pick, i_pick = b_coords, i_coords
    else:
        b_pick = b_coords
        i_pick = _take(rng, i_coords, min(n_boundary, total - n_boundary))
    n_nodule = len(b_pick) + len(i_pick)

    # background pools: band within band_width of the nodule, and the rest
    bg = ~fg
    dist = ndimage.distance_transform_edt(bg)
    near_pool = np.argwhere(bg & (dist <= cfg.band_width))
    far_pool = np.argwhere(bg & (dist > cfg.band_width))
    n_near = min(int(round(cfg.near_fraction * n_nodule)), len(near_pool))
    n_far = min(n_nodule - n_near, len(far_pool))
    if n_near + n_far < n_nodule:  # far pool short: top up from the band
        n_near = min(n_nodule - n_far, len(near_pool))
    near_pick = _take(rng, near_pool, n_near)
    far_pick = _take(rng, far_pool, n_far)
    n_bg = len(near_pick) + len(far_pick)
    if n_bg < n_nodule:
        warnings.append(
            f"{volume_id} slice {slice_index}: background pool {n_bg} < {n_nodule} nodule samples"
        )
        drop = n_nodule - n_bg
        keep_i = max(0, len(i_pick) - drop)
        drop -= len(i_pick) - keep_i
        i_pick = i_pick[:keep_i]
        b_pick = b_pick[: len(b_pick) - drop]

    z = int(slice_index)
    entries = [SampleEntry(volume_id, z, int(r), int(c), NODULE, "boundary") for r, c in b_pick]
    entries += [SampleEntry(volume_id, z, int(r), int(c), NODULE, "interior") for r, c in i_pick]
    entries += [SampleEntry(volume_id, z, int(r), int(c), BACKGROUND, "near") for r, c in near_pick]
    entries += [SampleEntry(volume_id, z, int(r), int(c), BACKGROUND, "far") for r, c in far_pick]
    return entries, warnings


def _slice_rng(seed: int, volume_id: str, z: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(volume_id.encode()), z]))


def _sort_key(e: SampleEntry):
    return (e.volume_id, e.z, e.y, e.x)


def plan_dataset(
    cases: Sequence[tuple[str, BinaryMask3D, float]],
    cfg: SamplerConfig = SamplerConfig(),
) -> SampleManifest:
    """Sample manifest over ``(volume_id, gt_mask, diameter_mm)`` cases.

    When ``cfg.max_samples`` is exceeded the plan is thinned per volume, in
    balanced pairs, with quotas proportional to each volume's uncapped share.
    """
    if not cases:
        raise ValueError("dataset is empty")
    entries: list[SampleEntry] = []
    warnings: list[str] = []
    for volume_id, mask, diameter in cases:
        data = mask.data if isinstance(mask, BinaryMask3D) else np.asarray(mask)
        for z in np.flatnonzero(data.reshape(data.shape[0], -1).any(axis=1)):
            es, ws = plan_slice_samples(data[z], int(z), cfg, _slice_rng(cfg.seed, volume_id, int(z)), diameter, volume_id)
            entries += es
            warnings += ws
    for w in warnings:
        log.warning(w)
    if cfg.max_samples is not None and len(entries) > cfg.max_samples:
        entries = _downsample(entries, cfg.max_samples // 2, cfg.seed)
    entries.sort(key=_sort_key)
    return SampleManifest(entries, warnings)


def _downsample(entries: list[SampleEntry], n_pairs: int, seed: int) -> list[SampleEntry]:
    by_volume: dict[str, tuple[list, list]] = {}
    for e in entries:
        nod, bg = by_volume.setdefault(e.volume_id, ([], []))
        (nod if e.label == NODULE else bg).append(e)
    vids = sorted(by_volume)
    pairs = np.array([len(by_volume[v][0]) for v in vids], dtype=np.float64)
    share = pairs * n_pairs / pairs.sum()
    quota = np.floor(share).astype(int)
    # largest remainder, ties broken by volume order
    order = np.argsort(-(share - quota), kind="stable")
    quota[order[: n_pairs - quota.sum()]] += 1
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A3D]))
    out = []
    for v, q in zip(vids, quota):
        nod, bg = by_volume[v]
        for group in (nod, bg):
            idx = np.sort(rng.choice(len(group), size=int(q), replace=False))
            out += [group[i] for i in idx]
    return out
