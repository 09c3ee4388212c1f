"""Command-line entry point: ``jnn {train,eval,ablate,gen-synthetic,report}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from ..architectures import ABLATION_MASKS, parse_mask
from ..data import ManifestError, SamplingError, SyntheticShapeConfig, generate_synthetic, synthetic_split, write_split
from ..metrics import MetricError
from ..numerics import DimensionError, NumericalError
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, dump_config, load_config
from .training import TrainingError, ablate, evaluate_checkpoint, format_ablation, train, write_report

log = logging.getLogger("jnn")

_EXPECTED = (ConfigError, CheckpointError, TrainingError, ManifestError, SamplingError, MetricError,
             DimensionError, NumericalError, FileNotFoundError)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.mask is not None:
        parse_mask(args.mask)
    return cfg.with_overrides(out=args.out, seed=args.seed, preset=args.preset, mask=args.mask)


def cmd_train(args) -> int:
    cfg = _config(args)
    res = train(cfg)
    out = Path(cfg.out)
    (out / "config.ini").write_text(dump_config(cfg))
    print(f"checkpoint {res.checkpoint}")
    print(f"final_loss {res.losses[-1]:.6g}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if not args.checkpoint:
        raise ConfigError("eval requires --checkpoint")
    result = evaluate_checkpoint(cfg, args.checkpoint)
    write_report(result, cfg.out)
    for k, v in result["metrics"].items():
        print(f"{k} {v:.6g}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    masks = [parse_mask(m) for m in args.masks] if args.masks else list(ABLATION_MASKS)
    rows = ablate(cfg, masks)
    table = format_ablation(rows)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_gen_synthetic(args) -> int:
    out = Path(args.out or "synthetic")
    scfg = SyntheticShapeConfig(n_classes=args.classes, images_per_class=args.per_class,
                                image_size=args.image_size)
    manifest = generate_synthetic(out, scfg, seed=args.seed or 0)
    split = synthetic_split(manifest.classes, args.test_classes)
    write_split(out / "split.txt", split)
    print(f"manifest {out / 'manifest.txt'} ({len(manifest)} images)")
    print(f"split train={','.join(split.train)} test={','.join(split.test)}")
    return 0


def cmd_report(args) -> int:
    """Turn a results.json into plot-ready CSV curves."""
    src = Path(args.results)
    if src.is_dir():
        src = src / "results.json"
    if not src.is_file():
        raise ConfigError(f"results file not found: {src}")
    result = json.loads(src.read_text())
    out = Path(args.out or src.parent)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "roc" in result:
        path = out / "roc.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr", "accuracy", "precision"])
            for p in result["roc"]:
                w.writerow([p["threshold"], p["fpr"], p["tpr"], p["accuracy"], p["precision"]])
        written.append(path)
    if "pr" in result:
        path = out / "pr.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "rank", "recall", "precision"])
            for label, curve in sorted(result["pr"].items()):
                for k, (r, p) in enumerate(curve, 1):
                    w.writerow([label, k, r, p])
        written.append(path)
    if not written:
        raise ConfigError(f"{src}: no ROC or PR curves to export")
    for p in written:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jnn", description="Train and evaluate joint (twin-branch) one-shot recognizers and detectors.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", type=str, help="INI run configuration")
        p.add_argument("--out", type=str, help="output directory")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--preset", choices=("paper", "desk"), help="network scale")
        p.add_argument("--mask", type=str, help='enabled joint layers, e.g. "1,2,4"')
        if checkpoint:
            p.add_argument("--checkpoint", type=str, help="checkpoint file to evaluate (required)")
        return p

    common(sub.add_parser("train", help="train a model from a config")).set_defaults(fn=cmd_train)
    common(sub.add_parser("eval", help="evaluate a checkpoint on the test split"),
           checkpoint=True).set_defaults(fn=cmd_eval)
    p = common(sub.add_parser("ablate", help="train and evaluate several joint masks"))
    p.add_argument("masks", nargs="*", help="masks to compare (default: the ten reference masks)")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gen-synthetic", help="render the seeded synthetic glyph dataset")
    p.add_argument("--out", type=str, help="dataset directory")
    p.add_argument("--seed", type=int, default=0, help="render seed (default: 0)")
    p.add_argument("--classes", type=int, default=8, help="number of glyph classes (default: 8)")
    p.add_argument("--per-class", type=int, default=20, help="images per class (default: 20)")
    p.add_argument("--image-size", type=int, default=112, help="image side in pixels (default: 112)")
    p.add_argument("--test-classes", type=int, default=3, help="classes held out for testing (default: 3)")
    p.set_defaults(fn=cmd_gen_synthetic)

    p = sub.add_parser("report", help="export ROC/PR curves from results.json as CSV")
    p.add_argument("results", help="results.json or the directory holding it")
    p.add_argument("--out", type=str, help="directory for the CSV files (default: next to results.json)")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except _EXPECTED as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except ValueError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
