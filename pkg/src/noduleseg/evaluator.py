"""Overlap and surface-distance metrics plus the aggregate report layouts.

Undefined metric values (for example Dice of two empty masks) are returned
as NaN and skipped, with a count, by every aggregate.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume_store import CHARACTERISTIC_RANGES, BinaryMask3D, NoduleRecord

METRICS = ("dsc", "asd", "sen", "ppv")
SMALL_NODULE_MM = 6.0


def _bool(mask) -> np.ndarray:
    if isinstance(mask, BinaryMask3D):
        return mask.data.astype(bool)
    return np.asarray(mask).astype(bool)


def _pair(gt, seg) -> tuple[np.ndarray, np.ndarray]:
    g, s = _bool(gt), _bool(seg)
    if g.shape != s.shape:
        raise ValueError(f"mask shapes differ: {g.shape} vs {s.shape}")
    return g, s


def dsc(gt, seg) -> float:
    g, s = _pair(gt, seg)
    denom = g.sum() + s.sum()
    if denom == 0:
        return math.nan
    return float(2 * np.logical_and(g, s).sum() / denom)


def sen(gt, seg) -> float:
    g, s = _pair(gt, seg)
    n = g.sum()
    return float(np.logical_and(g, s).sum() / n) if n else math.nan


def ppv(gt, seg) -> float:
    g, s = _pair(gt, seg)
    n = s.sum()
    return float(np.logical_and(g, s).sum() / n) if n else math.nan


_SIX = ndimage.generate_binary_structure(3, 1)


def surface_voxels(mask) -> np.ndarray:
    """Foreground voxels with a background 6-neighbour (outside counts as background).

    Equals the per-slice 4-neighbour boundary united with voxels exposed to
    the slice above or below.
    """
    m = _bool(mask)
    if m.ndim == 2:
        m = m[None]
    return m & ~ndimage.binary_erosion(m, structure=_SIX, border_value=0)


def asd(gt, seg, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric mean surface distance in mm."""
    g, s = _pair(gt, seg)
    if not g.any() or not s.any():
        return math.nan
    sp = np.asarray(spacing, dtype=np.float64)
    pg = np.argwhere(surface_voxels(g)) * sp
    ps = np.argwhere(surface_voxels(s)) * sp
    d_gs, _ = cKDTree(ps).query(pg)
    d_sg, _ = cKDTree(pg).query(ps)
    return float(0.5 * (d_gs.mean() + d_sg.mean()))


def mean_std(values) -> tuple[float, float, int]:
    """Mean and population standard deviation over finite values, plus their count."""
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan, 0
    return float(v.mean()), float(v.std()), int(v.size)


@dataclass
class NoduleMetrics:
    nodule_id: str
    dsc: float
    asd: float
    sen: float
    ppv: float

    @property
    def missing(self) -> list[str]:
        return [m for m in METRICS if not math.isfinite(getattr(self, m))]


@dataclass
class MetricReport:
    per_nodule: list[NoduleMetrics] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def summary(self) -> dict[str, dict]:
        out = {}
        for m in METRICS:
            mean, std, n = mean_std([getattr(r, m) for r in self.per_nodule])
            out[m] = {"mean": mean, "std": std, "n": n, "missing": len(self.per_nodule) - n}
        return out

    def values(self, metric: str) -> list[float]:
        return [getattr(r, metric) for r in self.per_nodule]

    def to_json(self) -> dict:
        return {
            "summary": {m: {k: _num(v) if isinstance(v, float) else v for k, v in d.items()} for m, d in self.summary().items()},
            "per_nodule": [
                {"nodule_id": r.nodule_id, **{m: _num(getattr(r, m)) for m in METRICS}} for r in self.per_nodule
            ],
            "warnings": self.warnings,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        rows = [
            NoduleMetrics(r["nodule_id"], *(math.nan if r[m] is None else float(r[m]) for m in METRICS))
            for r in obj["per_nodule"]
        ]
        return cls(rows, list(obj.get("warnings", [])))


def _num(x: float):
    return None if x is None or not math.isfinite(x) else x


def evaluate_nodule(nodule_id: str, gt, seg, spacing=(1.0, 1.0, 1.0)) -> NoduleMetrics:
    return NoduleMetrics(nodule_id, dsc(gt, seg), asd(gt, seg, spacing), sen(gt, seg), ppv(gt, seg))


def evaluate_set(cases: Sequence[tuple]) -> MetricReport:
    """Metrics over ``(nodule_id, gt, seg, spacing)`` tuples.

    A case whose gt or seg is None is recorded with all metrics missing.
    """
    report = MetricReport()
    for nodule_id, gt, seg, spacing in cases:
        if gt is None or seg is None:
            report.warnings.append(f"{nodule_id}: missing {'ground truth' if gt is None else 'prediction'}")
            report.per_nodule.append(NoduleMetrics(nodule_id, math.nan, math.nan, math.nan, math.nan))
            continue
        row = evaluate_nodule(nodule_id, gt, seg, spacing)
        for m in row.missing:
            report.warnings.append(f"{nodule_id}: {m} undefined (empty mask)")
        report.per_nodule.append(row)
    if report.warnings:
        warnings.warn(f"{len(report.warnings)} evaluation warnings; first: {report.warnings[0]}", stacklevel=2)
    return report


# ---------------------------------------------------------------------------
# grouping, consistency, histogram


@dataclass
class GroupingReport:
    characteristics: dict = field(default_factory=dict)  # name -> {score: (mean dsc, count)}
    attachment: dict = field(default_factory=dict)  # "attached"/"non_attached" -> (dsc, asd, count)
    diameter: dict = field(default_factory=dict)  # "lt_6mm"/"ge_6mm" -> (dsc, asd, count)

    def to_json(self) -> dict:
        return {
            "characteristics": {
                k: {str(s): {"dsc": _num(d), "n": n} for s, (d, n) in v.items()} for k, v in self.characteristics.items()
            },
            "attachment": {k: {"dsc": _num(d), "asd": _num(a), "n": n} for k, (d, a, n) in self.attachment.items()},
            "diameter": {k: {"dsc": _num(d), "asd": _num(a), "n": n} for k, (d, a, n) in self.diameter.items()},
        }


def group_by_characteristic(report: MetricReport, records: Mapping[str, NoduleRecord]) -> GroupingReport:
    """Mean DSC per rounded characteristic score and the attachment/diameter splits.

    Nodules without a record are left out of every bucket.
    """
    out = GroupingReport()
    rows = [(r, records.get(r.nodule_id)) for r in report.per_nodule]
    missing = [r.nodule_id for r, rec in rows if rec is None]
    if missing:
        report.warnings.append(f"no record for nodules {missing}")
    rows = [(r, rec) for r, rec in rows if rec is not None]
    for name, (lo, hi) in CHARACTERISTIC_RANGES.items():
        buckets: dict[int, list[float]] = {s: [] for s in range(lo, hi + 1)}
        for r, rec in rows:
            if name in rec.characteristics:
                score = int(math.floor(rec.characteristics[name] + 0.5))
                buckets[score].append(r.dsc)
        out.characteristics[name] = {s: (mean_std(v)[0], len(v)) for s, v in buckets.items()}

    def split(pred) -> tuple[float, float, int]:
        sel = [r for r, rec in rows if pred(rec)]
        return mean_std([r.dsc for r in sel])[0], mean_std([r.asd for r in sel])[0], len(sel)

    out.attachment = {"attached": split(lambda rec: rec.attached), "non_attached": split(lambda rec: not rec.attached)}
    out.diameter = {
        "lt_6mm": split(lambda rec: rec.diameter_mm < SMALL_NODULE_MM),
        "ge_6mm": split(lambda rec: rec.diameter_mm >= SMALL_NODULE_MM),
    }
    return out


@dataclass
class ConsistencyMatrix:
    names: list[str]
    values: np.ndarray  # symmetric, NaN diagonal

    def get(self, a: str, b: str) -> float:
        return float(self.values[self.names.index(a), self.names.index(b)])

    def summary(self, raters: Sequence[str]) -> dict[str, tuple[float, float]]:
        """Mean and std of the unique inter-rater values, and of each other source against the raters."""
        idx = [self.names.index(r) for r in raters]
        pairs = [self.values[i, j] for a, i in enumerate(idx) for j in idx[a + 1 :]]
        out = {"raters": mean_std(pairs)[:2]}
        for k, name in enumerate(self.names):
            if k not in idx:
                out[name] = mean_std([self.values[k, j] for j in idx])[:2]
        return out

    def to_json(self) -> dict:
        return {"names": self.names, "values": [[_num(v) for v in row] for row in self.values]}


def consistency_matrix(sources: Mapping[str, Sequence]) -> ConsistencyMatrix:
    """Mean pairwise DSC across nodules between every pair of mask sources.

    ``sources`` maps a source name to its per-nodule masks, aligned across sources.
    """
    names = list(sources)
    counts = {len(v) for v in sources.values()}
    if len(counts) != 1:
        raise ValueError("every source must provide one mask per nodule")
    k = len(names)
    values = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(i + 1, k):
            d = mean_std([dsc(a, b) for a, b in zip(sources[names[i]], sources[names[j]])])[0]
            values[i, j] = values[j, i] = d
    return ConsistencyMatrix(names, values)


def dsc_histogram(values, bins: int = 10) -> list[tuple[float, float, int]]:
    """(left, right, count) bins over [0, 1]; 1.0 falls in the last bin, NaNs are skipped."""
    v = np.asarray([x for x in values if math.isfinite(x)], dtype=np.float64)
    counts, edges = np.histogram(v, bins=bins, range=(0.0, 1.0))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def write_histogram_csv(hist, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for left, right, n in hist:
            w.writerow([f"{left:.4f}", f"{right:.4f}", n])
    return path


# ---------------------------------------------------------------------------
# text tables


def _pm(mean: float, std: float, scale: float = 1.0) -> str:
    if not math.isfinite(mean):
        return "n/a"
    return f"{mean * scale:.2f} ± {std * scale:.2f}"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    cells = [list(header)] + [list(r) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def format_metric_rows(rows: Mapping[str, MetricReport]) -> str:
    """Method | DSC (%) | ASD (mm) | SEN (%) | PPV (%) with mean ± std per row."""
    body = []
    for name, rep in rows.items():
        s = rep.summary()
        body.append(
            [name, _pm(s["dsc"]["mean"], s["dsc"]["std"], 100), _pm(s["asd"]["mean"], s["asd"]["std"]),
             _pm(s["sen"]["mean"], s["sen"]["std"], 100), _pm(s["ppv"]["mean"], s["ppv"]["std"], 100)]
        )
    return _table(["Method", "DSC (%)", "ASD (mm)", "SEN (%)", "PPV (%)"], body)


def format_consistency(matrix: ConsistencyMatrix, raters: Sequence[str]) -> str:
    summ = matrix.summary(raters)
    body = []
    for i, name in enumerate(matrix.names):
        row = [name]
        for j, other in enumerate(raters):
            v = matrix.values[i, matrix.names.index(other)]
            row.append("–" if not math.isfinite(v) else f"{100 * v:.2f}")
        if name in summ:
            row.append(_pm(*summ[name], 100))
        elif name == raters[(len(raters) - 1) // 2]:  # rater average sits mid-block
            row.append(_pm(*summ["raters"], 100))
        else:
            row.append("")
        body.append(row)
    return _table(["", *raters, "Average"], body)


def format_grouping(group: GroupingReport) -> str:
    max_score = max(hi for _, hi in CHARACTERISTIC_RANGES.values())
    body = []
    for name, buckets in group.characteristics.items():
        row = [name]
        for s in range(1, max_score + 1):
            if s in buckets and buckets[s][1]:
                row.append(f"{100 * buckets[s][0]:.2f} [{buckets[s][1]}]")
            else:
                row.append("–")
        body.append(row)
    table5 = _table(["Characteristic", *map(str, range(1, max_score + 1))], body)
    cols = [
        ("Attached", group.attachment.get("attached")),
        ("Non-attached", group.attachment.get("non_attached")),
        ("Diameter<6mm", group.diameter.get("lt_6mm")),
        ("Diameter>=6mm", group.diameter.get("ge_6mm")),
    ]
    header = [""] + [f"{name} (n={v[2]})" for name, v in cols]
    dsc_row = ["DSC (%)"] + ["n/a" if not math.isfinite(v[0]) else f"{100 * v[0]:.2f}" for _, v in cols]
    asd_row = ["ASD (mm)"] + ["n/a" if not math.isfinite(v[1]) else f"{v[1]:.2f}" for _, v in cols]
    return table5 + "\n\n" + _table(header, [dsc_row, asd_row])


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n")
    return path
