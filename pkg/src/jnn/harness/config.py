"""Run configuration: INI-style ``key = value`` sections mapped onto :class:`RunConfig`."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from ..architectures import NetworkSpec, detector_spec, parse_mask, recognizer_spec
from ..detection_math import AnchorPrior, DEFAULT_PRIORS, LossWeights


class ConfigError(ValueError):
    """Raised for invalid run configurations."""


# section each field is read from
_SECTIONS = {
    "run": ("task", "preset", "seed", "out", "dtype"),
    "model": ("mask", "slope", "priors", "calibration_pairs"),
    "optim": ("lr", "momentum", "epochs", "batch_size", "batches_per_epoch", "grad_clip",
              "checkpoint_every"),
    "loss": ("lambda_coord", "lambda_obj", "lambda_noobj", "iou_target"),
    "data": ("root", "manifest", "split"),
    "eval": ("eval_pairs", "n_thresholds", "nms_iou", "conf_threshold", "eval_seed"),
}


TASK_DEFAULTS = {
    "recognition": {"lr": 0.005, "epochs": 200, "batch_size": 64, "calibration_pairs": 0},
    "detection": {"lr": 0.0001, "epochs": 160, "batch_size": 16, "calibration_pairs": 32},
}
_TYPES = {"lr": float, "epochs": int, "batch_size": int, "calibration_pairs": int}


@dataclass(frozen=True)
class RunConfig:
    task: str = "detection"
    preset: str = "desk"
    seed: int = 0
    out: str = "runs/default"
    dtype: str = "float32"
    mask: str = "1,2,4"
    slope: float = 0.1
    priors: str = " ".join(f"{p.pw:g},{p.ph:g}" for p in DEFAULT_PRIORS)
    calibration_pairs: int | None = None  # pairs for data-dependent init, 0 keeps plain Kaiming init
    lr: float | None = None  # None selects the task default
    momentum: float = 0.9
    epochs: int | None = None
    batch_size: int | None = None
    batches_per_epoch: int = 10
    grad_clip: float = 0.0  # global gradient-norm clip, 0 disables
    checkpoint_every: int = 0  # epochs between interim checkpoints, 0 disables
    lambda_coord: float = 5.0
    lambda_obj: float = 1.0
    lambda_noobj: float = 0.5
    iou_target: bool = False
    root: str = "."
    manifest: str = "manifest.txt"
    split: str = "split.txt"
    eval_pairs: int = 200
    n_thresholds: int = 20
    nms_iou: float = 0.45
    conf_threshold: float = 0.005
    eval_seed: int = 12345

    def __post_init__(self):
        for key, value in TASK_DEFAULTS.get(self.task, {}).items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)

    @property
    def anchor_priors(self) -> tuple[AnchorPrior, ...]:
        out = []
        for tok in self.priors.split():
            pw, ph = (float(v) for v in tok.split(","))
            out.append(AnchorPrior(pw, ph))
        return tuple(out)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_coord, self.lambda_obj, self.lambda_noobj, self.iou_target)

    @property
    def manifest_path(self) -> Path:
        return Path(self.root) / self.manifest

    @property
    def split_path(self) -> Path:
        return Path(self.root) / self.split

    def network_spec(self) -> NetworkSpec:
        if self.task == "recognition":
            return recognizer_spec(self.preset, slope=self.slope)
        return detector_spec(self.preset, parse_mask(self.mask), anchors=len(self.anchor_priors),
                             slope=self.slope)

    def validate(self, check_files: bool = True) -> "RunConfig":
        if self.task not in ("recognition", "detection"):
            raise ConfigError(f"task must be recognition or detection, got {self.task!r}")
        if self.preset not in ("paper", "desk"):
            raise ConfigError(f"preset must be paper or desk, got {self.preset!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.lr is None or self.epochs is None or self.batch_size is None:
            raise ConfigError("lr, epochs and batch_size must be set")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.batches_per_epoch < 1:
            raise ConfigError("epochs, batch_size and batches_per_epoch must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.calibration_pairs == 1 or self.calibration_pairs < 0:
            raise ConfigError("calibration_pairs must be 0 (off) or at least 2")
        try:
            priors = self.anchor_priors
        except ValueError:
            raise ConfigError(f"bad priors {self.priors!r}; expected 'w,h w,h ...'") from None
        if not priors or any(p.pw <= 0 or p.ph <= 0 for p in priors):
            raise ConfigError("anchor priors must be positive")
        self.loss_weights
        self.network_spec()
        if check_files:
            for p in (self.manifest_path, self.split_path):
                if not p.is_file():
                    raise ConfigError(f"referenced file does not exist: {p}")
        return self

    def digest(self) -> str:
        """Hash of the architecture the config describes."""
        blob = json.dumps(self.network_spec().to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read(path)
    defaults = RunConfig()
    values = {}
    known = {k for keys in _SECTIONS.values() for k in keys}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path.name}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in known or key not in _SECTIONS[section]:
                raise ConfigError(f"{path.name}: unknown key {key!r} in [{section}]")
            kind = _TYPES.get(key, type(getattr(defaults, key)))
            values[key] = _coerce(raw, kind, f"{path.name} [{section}] {key}")
    cfg = RunConfig(**values)
    # relative data root and output directory resolve against the config file
    if not Path(cfg.root).is_absolute():
        cfg = replace(cfg, root=str((path.parent / cfg.root).resolve()))
    if "out" in values and not Path(cfg.out).is_absolute():
        cfg = replace(cfg, out=str((path.parent / cfg.out).resolve()))
    return cfg


def _coerce(raw: str, kind: type, where: str):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError
            return low in ("true", "yes", "1")
        if kind in (int, float):
            return kind(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    d = asdict(cfg)
    for section, keys in _SECTIONS.items():
        parser[section] = {k: str(d[k]).lower() if isinstance(d[k], bool) else str(d[k]) for k in keys}
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
