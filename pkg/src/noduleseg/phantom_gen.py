"""Synthetic chest CT phantoms with a single nodule of a chosen type.

Each phantom is lung parenchyma with a lateral chest wall along the last
columns and one ellipsoidal nodule. Types follow the usual taxonomy:
isolated, juxtapleural (touching the wall), ground-glass (low contrast),
cavitary (air core), calcified (very bright) and small (< 6 mm).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .segmenter import SeedBox
from .volume_store import BinaryMask3D, CtVolume, NoduleRecord

NODULE_TYPES = ("isolated", "juxtapleural", "ggo", "cavitary", "calcified", "small")
SMALL_MAX_MM = 6.0
_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class PhantomSpec:
    nodule_type: str = "isolated"
    diameter_mm: float = 10.0
    shape: tuple[int, int, int] = (24, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lung_hu: float = -800.0
    tissue_hu: float = 40.0
    wall_hu: float = 40.0
    calcified_hu: float = 700.0
    ggo_hu: float = -600.0
    noise_std: float = 20.0
    wall_thickness_mm: float = 8.0
    seed_margin: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.nodule_type not in NODULE_TYPES:
            raise ValueError(f"unknown nodule type {self.nodule_type!r}")
        if self.diameter_mm <= 0:
            raise ValueError("diameter must be positive")
        extent = min(n * s for n, s in zip(self.shape, self.spacing))
        if self.diameter_mm >= extent:
            raise ValueError(f"diameter {self.diameter_mm} mm does not fit a {extent} mm extent")
        if self.nodule_type == "small" and self.diameter_mm >= SMALL_MAX_MM:
            raise ValueError("small nodules must be under 6 mm")
        if self.noise_std < 0:
            raise ValueError("noise std must be non-negative")

    @property
    def nodule_hu(self) -> float:
        return {"ggo": self.ggo_hu, "calcified": self.calcified_hu}.get(self.nodule_type, self.tissue_hu)

    @property
    def wall_col(self) -> int:
        return self.shape[2] - max(1, int(round(self.wall_thickness_mm / self.spacing[2])))


@dataclass
class PhantomCase:
    case_id: str
    spec: PhantomSpec
    volume: CtVolume
    true_mask: BinaryMask3D
    rater_masks: list[BinaryMask3D]
    record: NoduleRecord
    seed_box: SeedBox
    wall_mask: BinaryMask3D
    cavity_mask: BinaryMask3D | None = None
    semi_axes_mm: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))


def _ellipsoid(shape, spacing, center, semi_axes_mm) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = 0.0
    for g, c, s, a in zip(grids, center, spacing, semi_axes_mm):
        acc = acc + ((g - c) * s / a) ** 2
    return acc <= 1.0


def _seed_box(mask: np.ndarray, margin: int) -> SeedBox:
    areas = mask.reshape(mask.shape[0], -1).sum(axis=1)
    z = int(np.argmax(areas))
    rows, cols = np.nonzero(mask[z])
    _, h, w = mask.shape
    return SeedBox(
        z,
        max(0, int(rows.min()) - margin),
        max(0, int(cols.min()) - margin),
        min(h - 1, int(rows.max()) + margin),
        min(w - 1, int(cols.max()) + margin),
    )


def _characteristics(kind: str, axes: np.ndarray, rng: np.random.Generator) -> dict:
    elong = float(axes.max() / axes.min())
    return {
        "sphericity": int(np.clip(round(5 - 10 * (elong - 1)), 1, 5)),
        "margin": 2 if kind == "ggo" else int(rng.integers(4, 6)),
        "spiculation": int(rng.integers(1, 3)),
        "texture": int(rng.integers(1, 3)) if kind == "ggo" else (4 if kind == "cavitary" else 5),
        "calcification": int(rng.integers(1, 6)) if kind == "calcified" else 6,
        "internal_structure": 4 if kind == "cavitary" else 1,
        "lobulation": int(rng.integers(1, 3)),
        "subtlety": {"small": int(rng.integers(2, 4)), "ggo": 3}.get(kind, int(rng.integers(4, 6))),
        "malignancy": int(rng.integers(1, 6)),
    }


def generate(spec: PhantomSpec, case_id: str = "case") -> PhantomCase:
    """Build one phantom; a pure function of ``spec`` (its seed included)."""
    rng = np.random.default_rng(spec.seed)
    shape, spacing = spec.shape, np.asarray(spec.spacing)
    wall_col = spec.wall_col

    jitter = np.exp(rng.normal(0.0, 0.06, size=3))
    jitter = np.clip(jitter / np.prod(jitter) ** (1 / 3), 0.85, 1.15)
    semi = spec.diameter_mm / 2 * jitter
    half_vox = semi / spacing

    lo = np.ceil(half_vox).astype(int) + 1
    hi = np.array(shape) - 2 - np.ceil(half_vox).astype(int)
    if spec.nodule_type == "juxtapleural":
        cx = wall_col - 1 - half_vox[2] + 0.5
    else:
        hi[2] = wall_col - 3 - int(np.ceil(half_vox[2]))
        cx = None
    if np.any(hi < lo):
        raise ValueError(f"a {spec.diameter_mm} mm nodule does not fit in {shape} at {spec.spacing} mm")
    center = [float(rng.integers(lo[i], hi[i] + 1)) for i in range(3)]
    if cx is not None:
        center[2] = cx

    nodule = _ellipsoid(shape, spacing, center, semi)
    if not nodule.any():
        nodule[tuple(int(round(c)) for c in center)] = True
    wall = np.zeros(shape, dtype=bool)
    wall[:, :, wall_col:] = True

    hu = np.full(shape, spec.lung_hu, dtype=np.float64)
    hu[wall] = spec.wall_hu
    hu[nodule] = spec.nodule_hu
    cavity = None
    if spec.nodule_type == "cavitary":
        cavity = _ellipsoid(shape, spacing, center, semi / 2) & nodule
        hu[cavity] = spec.lung_hu
    if spec.noise_std > 0:
        hu += rng.normal(0.0, spec.noise_std, size=shape)
    volume = CtVolume(np.clip(np.rint(hu), -32768, 32767).astype(np.int16), spec.spacing)

    true_mask = BinaryMask3D(nodule.astype(np.uint8))
    raters = simulate_raters(true_mask, seed=int(rng.integers(2**31)))
    record = NoduleRecord(
        nodule_id=case_id,
        rater_masks=tuple(f"{case_id}.rater{k + 1}.mask.json" for k in range(len(raters))),
        diameter_mm=float(spec.diameter_mm),
        characteristics=_characteristics(spec.nodule_type, jitter, rng),
        attached=spec.nodule_type == "juxtapleural",
    )
    return PhantomCase(
        case_id=case_id,
        spec=spec,
        volume=volume,
        true_mask=true_mask,
        rater_masks=raters,
        record=record,
        seed_box=_seed_box(nodule, spec.seed_margin),
        wall_mask=BinaryMask3D(wall.astype(np.uint8)),
        cavity_mask=None if cavity is None else BinaryMask3D(cavity.astype(np.uint8)),
        semi_axes_mm=tuple(float(a) for a in semi),
    )


def simulate_raters(
    true_mask: BinaryMask3D,
    seed: int = 0,
    n_raters: int = 4,
    dilate_rate: float = 0.06,
    erode_rate: float = 0.10,
    flip_rate: float = 0.03,
) -> list[BinaryMask3D]:
    """Independently perturbed copies of ``true_mask``.

    Each rater grows the mask by one voxel where a smooth random field is
    high (``dilate_rate`` of space), shrinks it by one voxel where the field
    is low (``erode_rate``), then flips ``flip_rate`` of the one-voxel shells
    on either side of the true boundary. Every change stays within one voxel
    of the true surface.
    """
    m = true_mask.data.astype(bool)
    if not m.any():
        raise ValueError("cannot simulate raters for an empty mask")
    rng = np.random.default_rng(seed)
    outer = ndimage.binary_dilation(m, structure=_SIX) & ~m
    inner = m & ~ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    shells = outer | inner
    raters = []
    for _ in range(n_raters):
        field_ = ndimage.gaussian_filter(rng.standard_normal(m.shape), sigma=1.5, mode="wrap")
        r = m.copy()
        if dilate_rate > 0:
            r |= outer & (field_ > np.quantile(field_, 1 - dilate_rate))
        if erode_rate > 0:
            r &= ~(inner & (field_ < np.quantile(field_, erode_rate)))
        if flip_rate > 0:
            flips = shells & (rng.random(m.shape) < flip_rate)
            r ^= flips
        if not r.any():
            r = m.copy()
        raters.append(BinaryMask3D(r.astype(np.uint8)))
    return raters


def generate_dataset(
    n_cases: int,
    seed: int = 0,
    base: PhantomSpec = PhantomSpec(),
    types=NODULE_TYPES,
    diameter_range: tuple[float, float] = (6.0, 12.0),
    small_range: tuple[float, float] = (3.0, 5.5),
    prefix: str = "phantom",
) -> list[PhantomCase]:
    """``n_cases`` phantoms cycling through ``types`` with seeded diameters."""
    cases = []
    for i in range(n_cases):
        ss = np.random.SeedSequence([seed, i])
        rng = np.random.default_rng(ss)
        kind = types[i % len(types)]
        lo, hi = small_range if kind == "small" else diameter_range
        diameter = round(float(rng.uniform(lo, hi)), 2)
        spec = replace(base, nodule_type=kind, diameter_mm=diameter, seed=int(ss.generate_state(1)[0]))
        cases.append(generate(spec, f"{prefix}{i:03d}"))
    return cases
