"""Training and evaluation loops for both tasks, plus the joint-layer ablation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..architectures import JointNetwork, format_mask, parse_mask
from ..data import (ClassSplit, DatasetManifest, DetectionSample, ImageCache, PairSample, _pools,
                    detection_batch, grid_to_pixel, sample_recognition_pair, load_manifest, load_split, preprocess, recognition_batch,
                    sample_detection_pair, validate_split)
from ..detection_math import BBox, assign_targets, bce_pair_loss, decode_grid, total_detection_loss
from ..metrics import (APResult, DetectionRecord, average_precision, iou, mean_ap, nms, pr_curve,
                       roc_sweep)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig

log = logging.getLogger("jnn")


class TrainingError(RuntimeError):
    """Raised when training diverges or breaks the split contract."""


@dataclass
class TrainResult:
    model: JointNetwork
    losses: list[float]
    checkpoint: Path | None = None
    seen_classes: set[str] = field(default_factory=set)


class Inputs:
    """Preprocessed query/target arrays, memoised per (path, crop, size)."""

    def __init__(self, manifest: DatasetManifest, dtype):
        self.images = ImageCache(manifest.root)
        self.dtype = dtype
        self._memo: dict[tuple, np.ndarray] = {}

    def get(self, path: str, size: int, crop=None) -> np.ndarray:
        key = (path, size, crop)
        arr = self._memo.get(key)
        if arr is None:
            arr = preprocess(self.images.get(path), size, crop, self.dtype)
            self._memo[key] = arr
        return arr


def prepare(cfg: RunConfig) -> tuple[DatasetManifest, ClassSplit]:
    cfg.validate()
    manifest = load_manifest(cfg.manifest_path)
    split = load_split(cfg.split_path)
    problems = validate_split(manifest, split)
    if problems:
        raise ConfigError("invalid split: " + "; ".join(problems))
    return manifest, split


def build_model(cfg: RunConfig, seed: int | None = None) -> JointNetwork:
    dtype = np.dtype(cfg.dtype)
    return JointNetwork(cfg.network_spec(), seed=cfg.seed if seed is None else seed, dtype=dtype)


def calibrate(model: JointNetwork, cfg: RunConfig, manifest: DatasetManifest, split: ClassSplit) -> None:
    """Data-dependent init from ``cfg.calibration_pairs`` training pairs.

    The pairs come from their own seeded stream so the training sample
    sequence is the same with or without calibration.
    """
    n = cfg.calibration_pairs
    if n <= 0:
        return
    inputs = Inputs(manifest, model.dtype)
    seed = [cfg.seed, 1]
    if cfg.task == "recognition":
        pairs = recognition_pairs(manifest, split.train, n, seed)
        q, t = _recognition_arrays(pairs, inputs, model.spec.query_size)
    else:
        pairs = detection_pairs(manifest, split.train, n, model.shapes[-1][1][-1], seed)
        q, t = _detection_arrays(pairs, inputs, model.spec.query_size, model.spec.target_size)
    with np.errstate(over="ignore", invalid="ignore"):
        model.calibrate(q, t)


def _clip(params: Sequence[nx.Parameter], max_norm: float) -> None:
    if max_norm <= 0:
        return
    norm = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm


def _recognition_arrays(batch: Sequence[PairSample], inputs: Inputs, size: int):
    q = np.stack([inputs.get(s.query.path, size, s.query_box) for s in batch])
    t = np.stack([inputs.get(s.target.path, size, s.target_box) for s in batch])
    return q, t


def _detection_arrays(batch: Sequence[DetectionSample], inputs: Inputs, qsize: int, tsize: int):
    q = np.stack([inputs.get(s.query.path, qsize, s.query_box) for s in batch])
    t = np.stack([inputs.get(s.target.path, tsize) for s in batch])
    return q, t


def train(cfg: RunConfig, manifest: DatasetManifest | None = None, split: ClassSplit | None = None,
          model: JointNetwork | None = None, save: bool = True) -> TrainResult:
    """Sample -> forward -> loss -> backward -> SGD for ``cfg.epochs`` epochs."""
    if manifest is None or split is None:
        manifest, split = prepare(cfg)
    if model is None:
        model = build_model(cfg)
        calibrate(model, cfg, manifest, split)
    params = model.parameters()
    rng = np.random.default_rng(cfg.seed)
    inputs = Inputs(manifest, model.dtype)
    spec = model.spec
    train_classes = set(split.train)
    test_classes = set(split.test)
    out = Path(cfg.out)
    losses: list[float] = []
    seen: set[str] = set()
    if cfg.task == "detection":
        priors = cfg.anchor_priors
        S = model.shapes[-1][1][-1]
        pools = _pools(manifest, split.train, need_boxes=True)
    else:
        pools = None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for b in range(cfg.batches_per_epoch):
            if cfg.task == "recognition":
                batch = recognition_batch(manifest, split.train, rng, cfg.batch_size)
            else:
                batch = detection_batch(manifest, split.train, rng, cfg.batch_size, S, pools)
            used = {s.query.label for s in batch} | {s.target.label for s in batch}
            leaked = used & test_classes
            if leaked or not used <= train_classes:
                raise TrainingError(f"epoch {epoch}: test-split classes {sorted(leaked)} in a training batch")
            seen |= used
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    if cfg.task == "recognition":
                        q, t = _recognition_arrays(batch, inputs, spec.query_size)
                        loss = bce_pair_loss(model(q, t), np.array([s.y for s in batch]))
                    else:
                        q, t = _detection_arrays(batch, inputs, spec.query_size, spec.target_size)
                        assignments = [assign_targets(s.gt_grid, priors, S) for s in batch]
                        loss = total_detection_loss(model(q, t), assignments, cfg.loss_weights, priors)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise nx.NumericalError("loss is not finite")
                    loss.backward()
                    _clip(params, cfg.grad_clip)
                    nx.sgd_step(params, cfg.lr, cfg.momentum)
            except nx.NumericalError as exc:
                raise TrainingError(f"diverged at epoch {epoch}, batch {b}: {exc}") from None
            total += value
        losses.append(total / cfg.batches_per_epoch)
        log.info("epoch %d loss %.6f (%.1fs)", epoch, losses[-1], time.perf_counter() - t0)
        if save and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0 and epoch < cfg.epochs:
            save_checkpoint(model, out / f"checkpoint_e{epoch}.bin", cfg.digest(), epoch,
                            rng.bit_generator.state)
    ckpt = None
    if save:
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "checkpoint.bin"
        save_checkpoint(model, ckpt, cfg.digest(), cfg.epochs, rng.bit_generator.state)
        (out / "loss_log.txt").write_text("".join(f"{i} {v!r}\n" for i, v in enumerate(losses, 1)))
    return TrainResult(model, losses, ckpt, seen)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def _batched(items: Sequence, n: int):
    for i in range(0, len(items), n):
        yield items[i : i + n]


def score_pairs(model: JointNetwork, pairs: Sequence[PairSample], inputs: Inputs, batch: int = 64) -> np.ndarray:
    scores = []
    for chunk in _batched(pairs, batch):
        q, t = _recognition_arrays(chunk, inputs, model.spec.query_size)
        scores.append(model(q, t).data.reshape(-1))
    return np.concatenate(scores).astype(np.float64)


def recognition_pairs(manifest: DatasetManifest, classes: Sequence[str], n: int, seed: int) -> list[PairSample]:
    rng = np.random.default_rng(seed)
    pools = _pools(manifest, classes)
    return [sample_recognition_pair(manifest, classes, rng, pools=pools) for _ in range(n)]


def detection_pairs(manifest: DatasetManifest, classes: Sequence[str], n: int, S: int, seed: int) -> list[DetectionSample]:
    rng = np.random.default_rng(seed)
    pools = _pools(manifest, classes, need_boxes=True)
    return [sample_detection_pair(manifest, classes, rng, S, pools=pools) for _ in range(n)]


def predict_boxes(model: JointNetwork, samples: Sequence[DetectionSample], inputs: Inputs, priors,
                  conf_threshold: float = 0.005, nms_iou: float = 0.45, batch: int = 16) -> list[list[DetectionRecord]]:
    """Decoded, thresholded and suppressed detections per sample, in target pixels."""
    out = []
    S = model.shapes[-1][1][-1]
    for start, chunk in zip(range(0, len(samples), batch), _batched(samples, batch)):
        q, t = _detection_arrays(chunk, inputs, model.spec.query_size, model.spec.target_size)
        raw = model(q, t).data.astype(np.float64)
        for k, s in enumerate(chunk):
            dec = decode_grid(raw[k], priors).reshape(-1, 5)
            keep = dec[:, 4] >= conf_threshold
            recs = []
            for bx, by, bw, bh, conf in dec[keep]:
                box = grid_to_pixel(BBox(bx, by, bw, bh), s.target.size, S)
                recs.append(DetectionRecord(start + k, s.label, box, float(conf)))
            out.append(nms(recs, nms_iou))
    return out


def localization_rate(model: JointNetwork, samples: Sequence[DetectionSample], inputs: Inputs, priors) -> float:
    """Fraction of positive samples whose most confident box hits a GT at IoU > 0.5."""
    positives = [s for s in samples if s.gt_pixels]
    if not positives:
        return float("nan")
    preds = predict_boxes(model, positives, inputs, priors, conf_threshold=0.0)
    hits = 0
    for s, recs in zip(positives, preds):
        if recs and max(iou(recs[0].box, g) for g in s.gt_pixels) > 0.5:
            hits += 1
    return hits / len(positives)


def evaluate(cfg: RunConfig, model: JointNetwork, manifest: DatasetManifest, split: ClassSplit,
             side: str = "test") -> dict:
    """Score the configured number of seeded pairs drawn from one split side."""
    classes = split.side(side)
    inputs = Inputs(manifest, model.dtype)
    if cfg.task == "recognition":
        pairs = recognition_pairs(manifest, classes, cfg.eval_pairs, cfg.eval_seed)
        scored = {s.query.label for s in pairs} | {s.target.label for s in pairs}
        if not scored <= set(classes):
            raise TrainingError("evaluation drew images outside the requested split side")
        scores = score_pairs(model, pairs, inputs)
        labels = np.array([s.y for s in pairs])
        rep = roc_sweep(scores, labels, cfg.n_thresholds)
        b = rep.best
        return {
            "task": "recognition", "side": side, "pairs": len(pairs),
            "metrics": {"tpr": b.tpr, "fpr": b.fpr, "accuracy": b.accuracy, "precision": b.precision,
                        "auc": rep.auc, "threshold": b.threshold},
            "roc": [vars(p) for p in rep.points],
            "classes_scored": sorted(scored),
        }
    S = model.shapes[-1][1][-1]
    priors = cfg.anchor_priors
    samples = detection_pairs(manifest, classes, cfg.eval_pairs, S, cfg.eval_seed)
    scored = {s.label for s in samples} | {s.target.label for s in samples}
    if not scored <= set(classes):
        raise TrainingError("evaluation drew images outside the requested split side")
    preds = predict_boxes(model, samples, inputs, priors, cfg.conf_threshold, cfg.nms_iou)
    per_class: list[APResult] = []
    curves = {}
    for label in sorted({s.label for s in samples}):
        idx = [i for i, s in enumerate(samples) if s.label == label]
        gts = {i: samples[i].gt_pixels for i in idx}
        recs = [r for i in idx for r in preds[i]]
        res = average_precision(recs, gts, label)
        per_class.append(res)
        rec, prec = pr_curve(recs, gts)
        curves[label] = [[float(r), float(p)] for r, p in zip(rec, prec)]
    metrics = {"mAP": mean_ap(per_class)}
    metrics.update({f"AP_{r.label}": r.ap for r in per_class if r.ap is not None})
    return {
        "task": "detection", "side": side, "pairs": len(samples), "metrics": metrics,
        "per_class": [vars(r) for r in per_class], "pr": curves, "classes_scored": sorted(scored),
    }


def write_report(result: dict, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text("".join(f"{k} {v:.6g}\n" for k, v in result["metrics"].items()))
    (out / "results.json").write_text(json.dumps(result, indent=1, sort_keys=True))


def evaluate_checkpoint(cfg: RunConfig, checkpoint: str | Path) -> dict:
    manifest, split = prepare(cfg)
    model, _ = load_checkpoint(checkpoint, expected_digest=cfg.digest())
    return evaluate(cfg, model, manifest, split, "test")


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------

def ablate(cfg: RunConfig, masks: Sequence[Sequence[bool]], save: bool = False) -> list[tuple[str, float]]:
    """Train and evaluate each joint mask under one seed; rows of (mask, mAP)."""
    if len(masks) < 2:
        raise ConfigError("ablation needs at least two masks")
    if cfg.task != "detection":
        raise ConfigError("ablation is defined for the detection task")
    manifest, split = prepare(cfg)
    rows = []
    for mask in masks:
        sub = replace(cfg, mask=format_mask(mask), out=str(Path(cfg.out) / f"mask_{format_mask(mask).replace(',', '')}"))
        res = train(sub, manifest, split, save=save)
        report = evaluate(sub, res.model, manifest, split)
        rows.append((format_mask(mask), report["metrics"]["mAP"]))
        log.info("mask %s mAP %.4f", rows[-1][0], rows[-1][1])
    return rows


def format_ablation(rows: Sequence[tuple[str, float]]) -> str:
    lines = ["JL1 JL2 JL3 JL4 JL5 mAP"]
    for mask, m in rows:
        on = parse_mask(mask)
        lines.append(" ".join(" x " if f else " . " for f in on) + f" {100 * m:.1f}")
    return "\n".join(lines) + "\n"
