"""Training configuration: a ``key = value`` text file.

Blank lines and lines starting with ``#`` are ignored. Unknown keys are
errors. Every key can be overridden from the command line with the same
name, dashes instead of underscores (``--batch-size``).
"""
import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .model import DEFAULT_MODEL
from .selection import DEFAULT_THRESHOLDS, check_thresholds, read_kv

REGIMES = ("vanilla", "hosvd", "asi")
SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    model: str = DEFAULT_MODEL
    dataset: str = "synthetic:4:500:0"
    regime: str = "vanilla"
    eps: float = 0.8
    budget: Optional[int] = None
    selection: Optional[str] = None
    thresholds: tuple = DEFAULT_THRESHOLDS
    layers: int = 2
    epochs: int = 5
    batch_size: int = 8
    lr: float = 0.2
    schedule: str = "cosine"
    momentum: float = 0.0
    weight_decay: float = 1e-4
    clip: Optional[float] = 2.0
    seed: int = 0
    warm_start: bool = True
    track_error: bool = False
    max_steps: Optional[int] = None
    resume: Optional[str] = None

    def validate(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not 0.0 < self.eps <= 1.0:
            raise ValueError(f"eps must lie in (0, 1], got {self.eps}")
        if self.regime == "asi" and self.budget is None and self.selection is None:
            raise ValueError("asi regime needs a budget or a selection file")
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be non-negative")
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        self.thresholds = check_thresholds(self.thresholds)
        return self

    def to_kv(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                v = "none"
            elif isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out[f.name] = str(v)
        return out

    def digest(self):
        """Hash of the settings that shape the trajectory (excludes resume/max_steps)."""
        kv = {k: v for k, v in self.to_kv().items() if k not in ("resume", "max_steps")}
        text = "\n".join(f"{k}={v}" for k, v in sorted(kv.items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_opt(kind):
    def parse(text):
        return None if text.strip().lower() in ("", "none") else kind(text)
    return parse


PARSERS = {
    "model": str, "dataset": str, "regime": str, "eps": float,
    "budget": _parse_opt(int), "selection": _parse_opt(str),
    "thresholds": lambda t: tuple(float(x) for x in t.split(",") if x.strip()),
    "layers": int, "epochs": int, "batch_size": int, "lr": float, "schedule": str,
    "momentum": float, "weight_decay": float, "clip": _parse_opt(float), "seed": int,
    "warm_start": _parse_bool, "track_error": _parse_bool,
    "max_steps": _parse_opt(int), "resume": _parse_opt(str),
}
assert set(PARSERS) == {f.name for f in fields(TrainConfig)}


def from_mapping(kv, base=None):
    """Apply string-valued settings to ``base`` (default settings if None)."""
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    for k, v in kv.items():
        key = k.replace("-", "_")
        if key not in PARSERS:
            raise KeyError(f"unknown config key {k!r}")
        try:
            setattr(cfg, key, PARSERS[key](v))
        except ValueError as exc:
            raise ValueError(f"bad value for {k}: {exc}") from None
    return cfg.validate()


def load_config(path, overrides=None):
    kv = read_kv(path) if path else {}
    kv.update(overrides or {})
    return from_mapping(kv)


def save_config(cfg, path):
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in cfg.to_kv().items()))
