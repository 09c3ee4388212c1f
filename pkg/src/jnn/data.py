"""Manifests, class-disjoint splits, pair sampling and the synthetic glyph set.

Manifest format, one record per line (``#`` starts a comment)::

    @classes circle square triangle      # optional class universe
    images/0001.png circle 12,30,20,22 60,5,18,18

Fields are whitespace separated: a path relative to the dataset root, a
class label, then zero or more ``x,y,w,h`` pixel boxes (top-left corner).
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .detection_math import BBox


class ManifestError(ValueError):
    """Raised for unreadable or invalid manifests."""


class SamplingError(ValueError):
    """Raised when a split cannot supply the requested pairs."""


Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Entry:
    path: str
    label: str
    boxes: tuple[Box, ...] = ()
    size: tuple[int, int] = (0, 0)  # (width, height)


@dataclass
class DatasetManifest:
    root: Path
    entries: list[Entry]
    classes: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def class_counts(self) -> Counter:
        return Counter(e.label for e in self.entries)

    def by_class(self, classes: Iterable[str] | None = None) -> dict[str, list[Entry]]:
        wanted = set(self.classes if classes is None else classes)
        out: dict[str, list[Entry]] = {c: [] for c in sorted(wanted)}
        for e in self.entries:
            if e.label in wanted:
                out[e.label].append(e)
        return out


def _parse_box(tok: str, where: str) -> Box:
    parts = tok.split(",")
    if len(parts) != 4:
        raise ManifestError(f"{where}: box {tok!r} must be x,y,w,h")
    try:
        x, y, w, h = (float(p) for p in parts)
    except ValueError:
        raise ManifestError(f"{where}: box {tok!r} is not numeric") from None
    if w <= 0 or h <= 0:
        raise ManifestError(f"{where}: box {tok!r} has non-positive size")
    return (x, y, w, h)


def load_manifest(path: str | Path, root: str | Path | None = None) -> DatasetManifest:
    """Parse and validate a manifest; errors name the offending line."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = Path(root) if root is not None else path.parent
    declared: tuple[str, ...] | None = None
    entries: list[Entry] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path.name}:{lineno}"
        toks = line.split()
        if toks[0] == "@classes":
            declared = tuple(toks[1:])
            continue
        if len(toks) < 2:
            raise ManifestError(f"{where}: expected 'path label [x,y,w,h ...]'")
        rel, label = toks[0], toks[1]
        boxes = tuple(_parse_box(t, where) for t in toks[2:])
        img = root / rel
        if not img.is_file():
            raise ManifestError(f"{where}: image {rel} does not exist")
        try:
            with Image.open(img) as im:
                size = im.size
        except OSError as exc:
            raise ManifestError(f"{where}: cannot read image {rel}: {exc}") from None
        for b in boxes:
            x, y, w, h = b
            if x < 0 or y < 0 or x + w > size[0] or y + h > size[1]:
                raise ManifestError(f"{where}: box {b} exceeds image bounds {size[0]}x{size[1]}")
        entries.append(Entry(rel, label, boxes, size))
    seen = tuple(sorted({e.label for e in entries}))
    if declared is None:
        declared = seen
    else:
        stray = set(seen) - set(declared)
        if stray:
            raise ManifestError(f"{path.name}: labels {sorted(stray)} not in @classes")
    return DatasetManifest(root, entries, declared)


def write_manifest(path: str | Path, entries: Sequence[Entry], classes: Sequence[str]) -> None:
    lines = ["@classes " + " ".join(classes)]
    for e in entries:
        boxes = " ".join(",".join(f"{v:g}" for v in b) for b in e.boxes)
        lines.append(f"{e.path} {e.label} {boxes}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassSplit:
    train: tuple[str, ...]
    test: tuple[str, ...]

    def side(self, name: str) -> tuple[str, ...]:
        if name not in ("train", "test"):
            raise ValueError(f"split side must be 'train' or 'test', got {name!r}")
        return self.train if name == "train" else self.test


def validate_split(manifest: DatasetManifest | None, split: ClassSplit) -> list[str]:
    """Empty list when the split is class-disjoint and uses declared labels only."""
    problems = []
    overlap = sorted(set(split.train) & set(split.test))
    if overlap:
        problems.append(f"classes in both train and test: {', '.join(overlap)}")
    if manifest is not None:
        unknown = sorted((set(split.train) | set(split.test)) - set(manifest.classes))
        if unknown:
            problems.append(f"classes not declared in manifest: {', '.join(unknown)}")
    return problems


def load_split(path: str | Path) -> ClassSplit:
    """Split file: ``train: a b c`` and ``test: d e`` lines."""
    sides: dict[str, tuple[str, ...]] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, rest = line.partition(":")
        if not sep or key.strip() not in ("train", "test"):
            raise ManifestError(f"{Path(path).name}:{lineno}: expected 'train: ...' or 'test: ...'")
        sides[key.strip()] = tuple(rest.split())
    if set(sides) != {"train", "test"}:
        raise ManifestError(f"{path}: split file needs both train and test lines")
    return ClassSplit(sides["train"], sides["test"])


def write_split(path: str | Path, split: ClassSplit) -> None:
    Path(path).write_text(f"train: {' '.join(split.train)}\ntest: {' '.join(split.test)}\n")


VOC_CLASSES = ("plant", "sofa", "tv", "car", "bottle", "boat", "chair", "person", "bus", "train",
               "horse", "bike", "dog", "bird", "mbike", "table", "cow", "sheep", "cat", "aero")
VOC_SPLIT = ClassSplit(VOC_CLASSES[:16], VOC_CLASSES[16:])


def openlogo_split(n_train: int = 210, n_test: int = 125) -> ClassSplit:
    """Placeholder-named 210/125 split standing in for an OpenLogo class list."""
    names = [f"logo{i:03d}" for i in range(n_train + n_test)]
    return ClassSplit(tuple(names[:n_train]), tuple(names[n_train:]))


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

class ImageCache:
    """Decoded RGB images keyed by manifest path."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self._images: dict[str, Image.Image] = {}

    def get(self, rel: str) -> Image.Image:
        img = self._images.get(rel)
        if img is None:
            try:
                with Image.open(self.root / rel) as im:
                    img = im.convert("RGB")
            except OSError as exc:
                raise ManifestError(f"cannot decode image {rel}: {exc}") from None
            self._images[rel] = img
        return img


def preprocess(image: Image.Image | str | Path, size: int, crop: Box | None = None,
               dtype=np.float64) -> np.ndarray:
    """Optional crop, bilinear stretch to ``size`` x ``size``, CHW floats in [0, 1]."""
    if not isinstance(image, Image.Image):
        try:
            with Image.open(image) as im:
                image = im.convert("RGB")
        except OSError as exc:
            raise ManifestError(f"cannot decode image {image}: {exc}") from None
    if crop is not None:
        x, y, w, h = crop
        image = image.crop((int(math.floor(x)), int(math.floor(y)),
                            int(math.ceil(x + w)), int(math.ceil(y + h))))
    image = image.convert("RGB").resize((size, size), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(dtype)


def pixel_to_grid(box: Box, image_size: tuple[int, int], S: int) -> BBox:
    """Top-left pixel box -> centre-format box in grid-cell units."""
    x, y, w, h = box
    sx, sy = S / image_size[0], S / image_size[1]
    return BBox((x + w / 2) * sx, (y + h / 2) * sy, w * sx, h * sy)


def grid_to_pixel(box: BBox, image_size: tuple[int, int], S: int) -> Box:
    sx, sy = image_size[0] / S, image_size[1] / S
    return ((box.x - box.w / 2) * sx, (box.y - box.h / 2) * sy, box.w * sx, box.h * sy)


# --------------------------------------------------------------------------
# pair sampling
# --------------------------------------------------------------------------

@dataclass
class PairSample:
    query: Entry
    target: Entry
    y: int
    query_box: Box | None = None
    target_box: Box | None = None


@dataclass
class DetectionSample:
    query: Entry
    query_box: Box
    target: Entry
    label: str
    gt_pixels: list[Box] = field(default_factory=list)
    gt_grid: list[BBox] = field(default_factory=list)


def _pools(manifest: DatasetManifest, classes: Sequence[str], need_boxes: bool = False) -> dict[str, list[Entry]]:
    pools = {c: es for c, es in manifest.by_class(classes).items()
             if es and (not need_boxes or any(e.boxes for e in es))}
    if need_boxes:
        pools = {c: [e for e in es if e.boxes] for c, es in pools.items()}
    if len(pools) < 2:
        raise SamplingError(f"need at least 2 populated classes, have {sorted(pools)}")
    return pools


def _pick(rng: np.random.Generator, items: Sequence):
    return items[int(rng.integers(len(items)))]


def _pick_other(rng: np.random.Generator, items: Sequence, avoid):
    if len(items) > 1:
        choices = [e for e in items if e is not avoid]
        return _pick(rng, choices)
    return items[0]


def sample_recognition_pair(manifest: DatasetManifest, classes: Sequence[str], rng: np.random.Generator,
                            query_class: str | None = None, query: Entry | None = None,
                            pools: dict | None = None) -> PairSample:
    """Draw a query and a target that share the query's class with probability 1/2."""
    pools = pools or _pools(manifest, classes)
    qc = query_class or _pick(rng, sorted(pools))
    if qc not in pools:
        raise SamplingError(f"class {qc!r} has no instances on this side")
    q = query or _pick(rng, pools[qc])
    y = int(rng.random() < 0.5)
    if y:
        t = _pick_other(rng, pools[qc], q)
    else:
        tc = _pick(rng, [c for c in sorted(pools) if c != qc])
        t = _pick(rng, pools[tc])
    qb = _pick(rng, q.boxes) if q.boxes else None
    tb = _pick(rng, t.boxes) if t.boxes else None
    return PairSample(q, t, y, qb, tb)


def recognition_batch(manifest: DatasetManifest, classes: Sequence[str], rng: np.random.Generator,
                      batch_size: int) -> list[PairSample]:
    """One query image per batch, each target independently matched with p=1/2."""
    pools = _pools(manifest, classes)
    qc = _pick(rng, sorted(pools))
    q = _pick(rng, pools[qc])
    qb = _pick(rng, q.boxes) if q.boxes else None
    batch = []
    for _ in range(batch_size):
        s = sample_recognition_pair(manifest, classes, rng, qc, q, pools)
        s.query_box = qb
        batch.append(s)
    return batch


def sample_detection_pair(manifest: DatasetManifest, classes: Sequence[str], rng: np.random.Generator,
                          S: int, query_class: str | None = None, pools: dict | None = None,
                          query: Entry | None = None, query_box: Box | None = None) -> DetectionSample:
    """Query crop from one image; target contains the query class with probability 1/2."""
    pools = pools or _pools(manifest, classes, need_boxes=True)
    qc = query_class or (query.label if query is not None else _pick(rng, sorted(pools)))
    if qc not in pools:
        raise SamplingError(f"class {qc!r} has no boxed instance on this side")
    q = query or _pick(rng, pools[qc])
    qbox = query_box or _pick(rng, q.boxes)
    positive = rng.random() < 0.5
    if positive:
        t = _pick_other(rng, pools[qc], q)
        gts = list(t.boxes)
    else:
        tc = _pick(rng, [c for c in sorted(pools) if c != qc])
        t = _pick(rng, pools[tc])
        gts = []
    grid = [pixel_to_grid(b, t.size, S) for b in gts]
    return DetectionSample(q, qbox, t, qc, gts, grid)


def detection_batch(manifest: DatasetManifest, classes: Sequence[str], rng: np.random.Generator,
                    batch_size: int, S: int, pools: dict | None = None) -> list[DetectionSample]:
    """One query crop per batch, each target independently positive with p=1/2."""
    pools = pools or _pools(manifest, classes, need_boxes=True)
    qc = _pick(rng, sorted(pools))
    q = _pick(rng, pools[qc])
    qb = _pick(rng, q.boxes)
    return [sample_detection_pair(manifest, classes, rng, S, qc, pools, q, qb) for _ in range(batch_size)]


# --------------------------------------------------------------------------
# synthetic glyphs
# --------------------------------------------------------------------------

GLYPHS = ("circle", "square", "triangle", "diamond", "cross", "ring", "hexagon", "star",
          "bar", "chevron", "arrow", "heart")

_PALETTE = ((230, 40, 40), (40, 190, 60), (50, 90, 235), (240, 200, 30), (200, 60, 220),
            (30, 210, 210), (250, 130, 20), (140, 90, 40), (250, 250, 250), (120, 240, 120),
            (90, 30, 160), (255, 120, 170))


@dataclass(frozen=True)
class SyntheticShapeConfig:
    n_classes: int = 8
    images_per_class: int = 20
    image_size: int = 112
    min_size: int = 20
    max_size: int = 44
    clutter: int = 6  # random background strokes per image
    color_jitter: int = 20
    color_by_class: bool = True

    def __post_init__(self):
        if not 4 <= self.n_classes <= len(GLYPHS):
            raise ValueError(f"n_classes must be in 4..{len(GLYPHS)}")
        if not 4 <= self.min_size <= self.max_size < self.image_size:
            raise ValueError("glyph size range must fit inside the image")


def _polygon(n: int, r: float, cx: float, cy: float, phase: float) -> list[tuple[float, float]]:
    return [(cx + r * math.cos(phase + 2 * math.pi * k / n), cy + r * math.sin(phase + 2 * math.pi * k / n))
            for k in range(n)]


def glyph_mask(kind: str, w: int, h: int) -> np.ndarray:
    """Binary mask of a glyph drawn to fill a ``w`` x ``h`` box."""
    m = Image.new("L", (w, h), 0)
    d = ImageDraw.Draw(m)
    W, H = w - 1, h - 1
    cx, cy = W / 2, H / 2
    if kind == "circle":
        d.ellipse([0, 0, W, H], fill=255)
    elif kind == "square":
        d.rectangle([0, 0, W, H], fill=255)
    elif kind == "triangle":
        d.polygon([(cx, 0), (W, H), (0, H)], fill=255)
    elif kind == "diamond":
        d.polygon([(cx, 0), (W, cy), (cx, H), (0, cy)], fill=255)
    elif kind == "cross":
        d.rectangle([W * 0.35, 0, W * 0.65, H], fill=255)
        d.rectangle([0, H * 0.35, W, H * 0.65], fill=255)
    elif kind == "ring":
        d.ellipse([0, 0, W, H], fill=255)
        d.ellipse([W * 0.3, H * 0.3, W * 0.7, H * 0.7], fill=0)
    elif kind == "hexagon":
        d.polygon([(W * 0.25, 0), (W * 0.75, 0), (W, cy), (W * 0.75, H), (W * 0.25, H), (0, cy)], fill=255)
    elif kind == "star":
        pts = []
        for k in range(10):
            r = 0.5 if k % 2 == 0 else 0.2
            a = -math.pi / 2 + math.pi * k / 5
            pts.append((cx + r * W * math.cos(a), cy + r * H * math.sin(a)))
        d.polygon(pts, fill=255)
    elif kind == "bar":
        d.rectangle([0, H * 0.3, W, H * 0.7], fill=255)
        d.rectangle([W * 0.4, 0, W * 0.6, H], fill=255)
    elif kind == "chevron":
        d.polygon([(0, 0), (W * 0.45, 0), (W, cy), (W * 0.45, H), (0, H), (W * 0.55, cy)], fill=255)
    elif kind == "arrow":
        d.polygon([(0, H * 0.35), (W * 0.55, H * 0.35), (W * 0.55, 0), (W, cy), (W * 0.55, H),
                   (W * 0.55, H * 0.65), (0, H * 0.65)], fill=255)
    elif kind == "heart":
        d.ellipse([0, 0, W * 0.55, H * 0.55], fill=255)
        d.ellipse([W * 0.45, 0, W, H * 0.55], fill=255)
        d.polygon([(0, H * 0.35), (W, H * 0.35), (cx, H)], fill=255)
    else:
        raise ValueError(f"unknown glyph {kind!r}")
    return np.asarray(m) > 0


def mask_bbox(mask: np.ndarray) -> Box:
    ys, xs = np.nonzero(mask)
    return (float(xs.min()), float(ys.min()), float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1))


def render_synthetic_image(kind: str, class_index: int, cfg: SyntheticShapeConfig,
                           rng: np.random.Generator) -> tuple[np.ndarray, Box, np.ndarray]:
    """One cluttered RGB image holding one glyph; returns (pixels, box, mask)."""
    S = cfg.image_size
    base = rng.integers(60, 140, size=3)
    img = np.clip(base + rng.normal(0, 6, size=(S, S, 3)), 0, 255)
    canvas = Image.fromarray(img.astype(np.uint8))
    d = ImageDraw.Draw(canvas)
    for _ in range(cfg.clutter):
        col = tuple(int(v) for v in np.clip(base + rng.integers(-45, 46, size=3), 0, 255))
        x0, y0, x1, y1 = (int(v) for v in rng.integers(0, S, size=4))
        d.line([(x0, y0), (x1, y1)], fill=col, width=int(rng.integers(1, 4)))
    w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
    h = int(np.clip(round(w * rng.uniform(0.8, 1.25)), cfg.min_size, cfg.max_size))
    gm = glyph_mask(kind, w, h)
    x = int(rng.integers(0, S - w + 1))
    y = int(rng.integers(0, S - h + 1))
    mask = np.zeros((S, S), dtype=bool)
    mask[y : y + h, x : x + w] = gm
    if cfg.color_by_class:
        color = np.array(_PALETTE[class_index % len(_PALETTE)])
    else:
        color = rng.integers(40, 256, size=3)
    color = np.clip(color + rng.integers(-cfg.color_jitter, cfg.color_jitter + 1, size=3), 0, 255)
    out = np.asarray(canvas).copy()
    out[mask] = color.astype(np.uint8)
    return out, mask_bbox(mask), mask


def generate_synthetic(out_dir: str | Path, cfg: SyntheticShapeConfig = SyntheticShapeConfig(),
                       seed: int = 0) -> DatasetManifest:
    """Render the glyph dataset as PNGs plus ``manifest.txt``; fully seeded."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    classes = GLYPHS[: cfg.n_classes]
    entries = []
    for ci, kind in enumerate(classes):
        for k in range(cfg.images_per_class):
            pixels, box, _ = render_synthetic_image(kind, ci, cfg, rng)
            rel = f"images/{kind}_{k:04d}.png"
            Image.fromarray(pixels).save(out / rel, optimize=False)
            entries.append(Entry(rel, kind, (box,), (cfg.image_size, cfg.image_size)))
    write_manifest(out / "manifest.txt", entries, classes)
    return DatasetManifest(out, entries, tuple(classes))


def synthetic_split(classes: Sequence[str], n_test: int) -> ClassSplit:
    """Last ``n_test`` classes are held out."""
    classes = tuple(classes)
    if not 2 <= n_test <= len(classes) - 2:
        raise ValueError("pair sampling needs at least 2 classes on each side")
    return ClassSplit(classes[:-n_test], classes[-n_test:])
