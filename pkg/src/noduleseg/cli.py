"""Command line: ``noduleseg <command> [options]``.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O or file-format
error, 4 numerical failure (non-finite loss or gradient).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluator as ev
from .boundary_sampler import SampleManifest
from .config import ConfigError, PipelineConfig
from .dataset import load_dataset
from .dbresnet import CheckpointError, load_checkpoint, param_count, save_checkpoint
from .pipeline import (
    evaluate_cases,
    generate_phantoms,
    normalized,
    plan_manifest,
    run_ablation,
    segment_case,
    split_cases,
    train_network,
)
from .segmenter import SeedBox, propagate
from .trainer import NonFiniteError
from .volume_store import (
    VolumeFormatError,
    boundary_voxels_2d,
    consensus_mask,
    load_mask,
    load_volume,
    save_mask,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("noduleseg")


class UsageError(ValueError):
    pass


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config, args.set or ())
    print("resolved config:", file=sys.stderr)
    print(cfg.dumps(), file=sys.stderr)
    return cfg


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith("\n") else text + "\n")


def _save_overlays(vol, result, out_dir) -> None:
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for z in result.slices:
        gray = (np.asarray(vol.data[z]) * 255).astype(np.uint8)
        rgb = np.stack([gray] * 3, axis=-1)
        rgb[boundary_voxels_2d(result.mask.data[z])] = (255, 0, 0)
        Image.fromarray(rgb).save(out / f"slice{z:04d}.png")


# -- commands ------------------------------------------------------------------


def cmd_phantom_generate(args) -> int:
    cfg = _config(args)
    path = generate_phantoms(cfg, args.out)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gt_consensus(args) -> int:
    _config(args)
    masks = [load_mask(p) for p in args.masks]
    out = save_mask(consensus_mask(masks), args.out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sample_plan(args) -> int:
    cfg = _config(args)
    cases = split_cases(load_dataset(args.dataset), args.split)
    manifest = plan_manifest(cfg, cases)
    manifest.save(args.out)
    n_nod, n_bg = manifest.label_counts()
    print(f"wrote {args.out}: {len(manifest)} samples ({n_nod} nodule / {n_bg} background)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    cases = split_cases(load_dataset(args.dataset), "train")
    manifest = SampleManifest.load(args.manifest) if args.manifest else None
    log_lines = []

    def on_epoch(line: str) -> None:
        log_lines.append(line)
        print(line, flush=True)

    net, ckpt = train_network(cfg, cases, manifest, on_epoch)
    path = save_checkpoint(ckpt, args.out)
    if args.log:
        _write_text(args.log, "\n".join(log_lines))
    print(f"wrote {path} (best epoch {ckpt.epoch}, val loss {ckpt.val_loss:.6f}, {param_count(net)} parameters)")
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = _config(args)
    net = load_checkpoint(args.checkpoint).restore()
    s = cfg.segmenter
    if args.dataset:
        out_dir = Path(args.out)
        cases = split_cases(load_dataset(args.dataset), args.split)
        for case in cases:
            result = segment_case(cfg, net, case)
            save_mask(result.mask, out_dir / f"{case.case_id}.pred")
            _write_text(out_dir / f"{case.case_id}.trace.json", json.dumps(result.to_json(), indent=2))
            print(f"{case.case_id}: {len(result.slices)} slices, {result.mask.volume} voxels")
        return EXIT_OK
    if not args.volume or not args.seed:
        raise UsageError("segment needs --volume and --seed (or --dataset)")
    try:
        seed = SeedBox.parse(args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    vol = normalized(cfg, load_volume(args.volume))
    try:
        seed.validate(vol.shape)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    result = propagate(net, vol, seed, s.threshold, s.stop_ratio, s.post, cfg.patch_spec(), s.batch_size)
    out = save_mask(result.mask, args.out)
    trace = args.trace or str(Path(args.out)) + ".trace.json"
    _write_text(trace, json.dumps(result.to_json(), indent=2))
    if args.overlay_dir:
        _save_overlays(vol, result, args.overlay_dir)
    print(f"wrote {out}: slices {result.slices}, stop reasons {result.stop_reasons}")
    return EXIT_OK


def _load_predictions(pred_dir, cases) -> dict:
    preds = {}
    for c in cases:
        p = Path(pred_dir) / f"{c.case_id}.pred.mask.json"
        preds[c.case_id] = load_mask(p) if p.exists() else None
    return preds


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    if args.dataset:
        if not args.predictions:
            raise UsageError("evaluate --dataset needs --predictions")
        cases = split_cases(load_dataset(args.dataset), args.split)
        report = evaluate_cases(cfg, cases, _load_predictions(args.predictions, cases))
    else:
        if not args.gt or not args.pred or len(args.gt) != len(args.pred):
            raise UsageError("evaluate needs matching --gt and --pred lists (or --dataset)")
        spacing = tuple(args.spacing) if args.spacing else (1.0, 1.0, 1.0)
        rows = [(Path(g).name.split(".")[0], load_mask(g), load_mask(p), spacing) for g, p in zip(args.gt, args.pred)]
        report = ev.evaluate_set(rows)
    if args.out:
        ev.write_json(report.to_json(), args.out)
    print(ev.format_metric_rows({args.name: report}))
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    report = ev.MetricReport.from_json(json.loads(Path(args.metrics).read_text()))
    sections = [ev.format_metric_rows({args.name: report})]
    hist = ev.dsc_histogram(report.values("dsc"), cfg.evaluator.histogram_bins)
    ev.write_histogram_csv(hist, out / "dsc_histogram.csv")
    if args.dataset:
        cases = split_cases(load_dataset(args.dataset), args.split)
        records = {c.case_id: c.load_record() for c in cases if c.nodule}
        group = ev.group_by_characteristic(report, records)
        ev.write_json(group.to_json(), out / "grouping.json")
        sections.append(ev.format_grouping(group))
        if args.predictions:
            preds = _load_predictions(args.predictions, cases)
            kept = [c for c in cases if preds[c.case_id] is not None]
            raters = [c.load_raters() for c in kept]
            n_r = min(len(r) for r in raters) if raters else 0
            sources = {f"R{k + 1}": [r[k] for r in raters] for k in range(n_r)}
            sources[args.name] = [preds[c.case_id] for c in kept]
            matrix = ev.consistency_matrix(sources)
            ev.write_json(matrix.to_json(), out / "consistency.json")
            sections.append(ev.format_consistency(matrix, [f"R{k + 1}" for k in range(n_r)]))
    text = "\n\n".join(sections)
    _write_text(out / "report.txt", text)
    print(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    result = run_ablation(cfg, args.dataset)
    out = Path(args.out_dir)
    ev.write_json(result.to_json(), out / "ablation.json")
    _write_text(out / "ablation.txt", result.table())
    print(result.table())
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noduleseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="synthetic phantoms").add_subparsers(dest="action", required=True)
    p = phantom.add_parser("generate", help="write a phantom dataset")
    _common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_phantom_generate)

    gt = sub.add_parser("gt", help="ground truth").add_subparsers(dest="action", required=True)
    p = gt.add_parser("consensus", help="50%% consensus of rater masks")
    _common(p)
    p.add_argument("--masks", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gt_consensus)

    sample = sub.add_parser("sample", help="training samples").add_subparsers(dest="action", required=True)
    p = sample.add_parser("plan", help="boundary-weighted sample manifest")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_plan)

    p = sub.add_parser("train", help="train a network")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--manifest", help="sample manifest (planned from the dataset when omitted)")
    p.add_argument("--out", required=True, help="checkpoint path stem")
    p.add_argument("--log", help="write the per-epoch log here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment from a seed box")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume")
    p.add_argument("--seed", help="z,row_min,col_min,row_max,col_max")
    p.add_argument("--dataset", help="segment every case of a split instead")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, help="mask path stem, or output directory with --dataset")
    p.add_argument("--trace")
    p.add_argument("--overlay-dir")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predictions")
    _common(p)
    p.add_argument("--gt", nargs="+")
    p.add_argument("--pred", nargs="+")
    p.add_argument("--spacing", nargs=3, type=float)
    p.add_argument("--dataset")
    p.add_argument("--split", default="test")
    p.add_argument("--predictions", help="directory of <id>.pred.mask files")
    p.add_argument("--name", default="DB-ResNet")
    p.add_argument("--out", help="metrics JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="tables and histogram from a metrics file")
    _common(p)
    p.add_argument("--metrics", required=True)
    p.add_argument("--dataset")
    p.add_argument("--split", default="test")
    p.add_argument("--predictions")
    p.add_argument("--name", default="DB-ResNet")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="run the configured ablation grid")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (OSError, VolumeFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
