"""Stage runners shared by the command line and the ablation harness."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from .boundary_sampler import SampleManifest, plan_dataset
from .config import PipelineConfig
from .dataset import CaseEntry, load_dataset, write_dataset
from .dbresnet import Checkpoint, DBResNet, build
from .evaluator import MetricReport, evaluate_set, format_metric_rows
from .patch_engine import PatchSource
from .phantom_gen import generate_dataset
from .segmenter import SegmentationResult, propagate
from .trainer import train
from .volume_store import BinaryMask3D, CtVolume, normalize_hu

log = logging.getLogger(__name__)


def generate_phantoms(cfg: PipelineConfig, out_dir) -> Path:
    p = cfg.phantom
    cases = generate_dataset(
        p.n_cases,
        seed=p.seed,
        base=cfg.phantom_spec(),
        diameter_range=tuple(p.diameter_range),
        small_range=tuple(p.small_range),
    )
    return write_dataset(cases, out_dir, n_test=p.n_test)


def split_cases(cases: Sequence[CaseEntry], split: str) -> list[CaseEntry]:
    return [c for c in cases if c.split == split]


def normalized(cfg: PipelineConfig, volume: CtVolume):
    return normalize_hu(volume, cfg.volume.hu_lo, cfg.volume.hu_hi)


def plan_manifest(cfg: PipelineConfig, cases: Sequence[CaseEntry]) -> SampleManifest:
    planned = [(c.case_id, c.load_gt(cfg.sampler.gt_source), c.load_record().diameter_mm) for c in cases]
    return plan_dataset(planned, cfg.sampler_config())


def train_network(
    cfg: PipelineConfig,
    cases: Sequence[CaseEntry],
    manifest: SampleManifest | None = None,
    on_epoch: Callable[[str], None] | None = None,
) -> tuple[DBResNet, Checkpoint]:
    if manifest is None:
        manifest = plan_manifest(cfg, cases)
    volumes = {c.case_id: normalized(cfg, c.load_volume()) for c in cases if c.case_id in set(manifest.volume_ids())}
    source = PatchSource(volumes, cfg.patch_spec())
    net = build(cfg.network_config())
    ckpt = train(net, manifest, source, cfg.train_config(), on_epoch=on_epoch)
    return net, ckpt


def segment_case(cfg: PipelineConfig, net: DBResNet, case: CaseEntry) -> SegmentationResult:
    s = cfg.segmenter
    vol = normalized(cfg, case.load_volume())
    return propagate(net, vol, case.seed_box, s.threshold, s.stop_ratio, s.post, cfg.patch_spec(), s.batch_size)


def segment_cases(cfg: PipelineConfig, net: DBResNet, cases: Sequence[CaseEntry]) -> dict[str, SegmentationResult]:
    return {c.case_id: segment_case(cfg, net, c) for c in cases}


def evaluate_cases(
    cfg: PipelineConfig, cases: Sequence[CaseEntry], predictions: dict[str, BinaryMask3D | None]
) -> MetricReport:
    rows = []
    for c in cases:
        spacing = c.load_volume().spacing
        rows.append((c.case_id, c.load_gt(cfg.evaluator.gt_source), predictions.get(c.case_id), spacing))
    return evaluate_set(rows)


@dataclass
class AblationResult:
    rows: dict[str, MetricReport]

    def table(self) -> str:
        return format_metric_rows(self.rows)

    def to_json(self) -> dict:
        return {name: rep.to_json() for name, rep in self.rows.items()}


def run_pipeline(cfg: PipelineConfig, cases: Sequence[CaseEntry]) -> MetricReport:
    """Train on the train split, segment and score the test split."""
    net, _ = train_network(cfg, split_cases(cases, "train"))
    test = split_cases(cases, "test")
    results = segment_cases(cfg, net, test)
    return evaluate_cases(cfg, test, {k: r.mask for k, r in results.items()})


def run_ablation(cfg: PipelineConfig, dataset) -> AblationResult:
    cases = load_dataset(dataset) if not isinstance(dataset, list) else dataset
    rows = {}
    for row in cfg.ablation.rows:
        log.info("ablation row %s", row["name"])
        rows[row["name"]] = run_pipeline(cfg.with_row(row), cases)
    return AblationResult(rows)
