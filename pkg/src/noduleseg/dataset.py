"""Phantom dataset directory layout.

``dataset.json`` lists every case with paths relative to the dataset
directory::

    {"format": "nodule-dataset", "version": 1,
     "cases": [{"id": "phantom000", "split": "train", "type": "isolated",
                "volume": "cases/phantom000.ctvol.json",
                "true_mask": "cases/phantom000.true.mask.json",
                "consensus_mask": "cases/phantom000.consensus.mask.json",
                "nodule": "cases/phantom000.nodule.json",
                "seed_box": [z, row_min, col_min, row_max, col_max]}, ...]}

Rater masks listed in ``<id>.nodule.json`` resolve relative to that file.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .phantom_gen import PhantomCase
from .segmenter import SeedBox
from .volume_store import (
    BinaryMask3D,
    CtVolume,
    NoduleRecord,
    consensus_mask,
    load_mask,
    load_record,
    load_volume,
    resolve_rater_masks,
    save_mask,
    save_record,
    save_volume,
)


@dataclass(frozen=True)
class CaseEntry:
    root: Path
    case_id: str
    split: str
    kind: str
    volume: str
    true_mask: str | None
    consensus_mask: str | None
    nodule: str | None
    seed_box: SeedBox

    def load_volume(self) -> CtVolume:
        return load_volume(self.root / self.volume)

    def load_true_mask(self) -> BinaryMask3D:
        return load_mask(self.root / self.true_mask)

    def load_consensus(self) -> BinaryMask3D:
        if self.consensus_mask:
            return load_mask(self.root / self.consensus_mask)
        return consensus_mask(self.load_raters())

    def load_record(self) -> NoduleRecord:
        return load_record(self.root / self.nodule)

    def load_raters(self) -> list[BinaryMask3D]:
        path = self.root / self.nodule
        return resolve_rater_masks(load_record(path), path.parent)

    def load_gt(self, source: str) -> BinaryMask3D:
        if source == "true":
            return self.load_true_mask()
        if source == "consensus":
            return self.load_consensus()
        raise ValueError(f"unknown ground-truth source {source!r}")


def write_dataset(cases: Sequence[PhantomCase], out_dir, n_test: int = 0) -> Path:
    """Write cases under ``out_dir/cases`` plus ``out_dir/dataset.json``; the last ``n_test`` are test."""
    out = Path(out_dir)
    case_dir = out / "cases"
    entries = []
    for i, case in enumerate(cases):
        cid = case.case_id
        save_volume(case.volume, case_dir / cid)
        save_mask(case.true_mask, case_dir / f"{cid}.true")
        for k, m in enumerate(case.rater_masks):
            save_mask(m, case_dir / f"{cid}.rater{k + 1}")
        save_mask(consensus_mask(case.rater_masks), case_dir / f"{cid}.consensus")
        save_record(case.record, case_dir / f"{cid}.nodule.json")
        entries.append(
            {
                "id": cid,
                "split": "test" if i >= len(cases) - n_test else "train",
                "type": case.spec.nodule_type,
                "volume": f"cases/{cid}.ctvol.json",
                "true_mask": f"cases/{cid}.true.mask.json",
                "consensus_mask": f"cases/{cid}.consensus.mask.json",
                "nodule": f"cases/{cid}.nodule.json",
                "seed_box": list(case.seed_box),
            }
        )
    path = out / "dataset.json"
    path.write_text(json.dumps({"format": "nodule-dataset", "version": 1, "cases": entries}, indent=2) + "\n")
    return path


def load_dataset(path) -> list[CaseEntry]:
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    obj = json.loads(path.read_text())
    if obj.get("format") != "nodule-dataset":
        raise ValueError(f"{path}: not a dataset manifest")
    root = path.parent
    return [
        CaseEntry(
            root=root,
            case_id=c["id"],
            split=c.get("split", "train"),
            kind=c.get("type", "unknown"),
            volume=c["volume"],
            true_mask=c.get("true_mask"),
            consensus_mask=c.get("consensus_mask"),
            nodule=c.get("nodule"),
            seed_box=SeedBox(*c["seed_box"]),
        )
        for c in obj["cases"]
    ]
