"""Run configuration: one plain-text key=value file with [section] headers.

Every key is listed in ``registry()`` with its type, default and an origin
tag: ``paper`` for values taken from the published setup, ``desk-scale``
where the CPU-sized preset departs from it, and ``artifact`` for plumbing
choices the method does not constrain.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .losses import LossConfig
from .model import ModelConfig
from .optim import OptimConfig, TrainSchedule


@dataclass
class TrainConfig:
    batch_size: int = 4
    seed: int = 0
    dataset: str = ""
    out: str = ""
    checkpoint_every: int = 10
    precision: str = "f32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")


@dataclass
class ProbeConfig:
    mode: str = "nested"  # or "split"
    folds: int = 5
    inner_fraction: float = 0.2
    c_grid: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0)
    svm_iters: int = 2000
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        self.c_grid = tuple(float(c) for c in self.c_grid)
        if self.mode not in ("nested", "split"):
            raise ValueError(f"probe mode must be nested or split, got {self.mode!r}")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if not 0 < self.inner_fraction < 1 or not 0 < self.test_fraction < 1:
            raise ValueError("split fractions must lie in (0, 1)")
        if not self.c_grid or min(self.c_grid) <= 0:
            raise ValueError("C grid must be non-empty and positive")


SECTIONS = {
    "model": ModelConfig,
    "schedule": TrainSchedule,
    "optim": OptimConfig,
    "augment": AugmentConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
}

# keys whose default is a published value (section, key) -> value
PAPER_VALUES = {
    ("model", "input_side"): 96, ("model", "patch_side"): 8, ("model", "channels"): 4,
    ("model", "enc_dim"): 768, ("model", "enc_blocks"): 12, ("model", "dec_dim"): 512,
    ("model", "dec_blocks"): 8, ("model", "mask_ratio"): 0.75,
    ("schedule", "base_lr"): 1e-3, ("schedule", "warmup_epochs"): 40, ("schedule", "total_epochs"): 1000,
    ("schedule", "lambda1_init"): 0.01,
    ("optim", "weight_decay"): 0.05,
    ("loss", "lambda2"): 10.0,
    ("train", "batch_size"): 4,
    ("probe", "folds"): 5, ("probe", "inner_fraction"): 0.2,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @classmethod
    def paper(cls) -> "RunConfig":
        return cls()

    @classmethod
    def desk(cls) -> "RunConfig":
        return cls(model=ModelConfig.desk(), schedule=TrainSchedule.desk())

    @property
    def epochs(self) -> int:
        return self.schedule.total_epochs

    # -- file form -------------------------------------------------------

    def to_text(self) -> str:
        out = io.StringIO()
        for section in SECTIONS:
            out.write(f"[{section}]\n")
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                out.write(f"{f.name} = {_fmt(getattr(obj, f.name))}\n")
            out.write("\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string(text)
        overrides = []
        for section in parser.sections():
            for key, value in parser.items(section):
                overrides.append((section, key, value))
        return (base or cls.desk()).with_overrides(overrides)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), base)

    def with_overrides(self, items) -> "RunConfig":
        """Apply (section, key, raw string) triples; unknown keys raise KeyError."""
        values = {s: dataclasses.asdict(getattr(self, s)) for s in SECTIONS}
        for section, key, raw in items:
            if section not in SECTIONS:
                raise KeyError(f"unknown config section [{section}]")
            if key not in values[section]:
                raise KeyError(f"unknown config key {section}.{key}")
            values[section][key] = _parse(raw, type(values[section][key]), f"{section}.{key}")
        return RunConfig(**{s: SECTIONS[s](**values[s]) for s in SECTIONS})

    def with_set(self, assignments: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings (the --set flag form)."""
        items = []
        for a in assignments:
            if "=" not in a or "." not in a.split("=", 1)[0]:
                raise ValueError(f"expected section.key=value, got {a!r}")
            lhs, raw = a.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            items.append((section, key.strip(), raw.strip()))
        return self.with_overrides(items)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, kind: type, name: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ValueError(f"bad value for {name}: {raw!r}") from None


@dataclass
class KeyInfo:
    section: str
    key: str
    default: object
    origin: str  # paper | desk-scale | artifact

    def describe(self) -> str:
        return f"{self.section}.{self.key} = {_fmt(self.default)} [{self.origin}]"


def registry(base: RunConfig | None = None) -> list[KeyInfo]:
    """Every config key with its default under ``base`` (desk preset by default)."""
    base = base or RunConfig.desk()
    out = []
    for section in SECTIONS:
        obj = getattr(base, section)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            paper = PAPER_VALUES.get((section, f.name), _MISSING)
            if paper is _MISSING:
                origin = "artifact"
            else:
                origin = "paper" if value == paper else "desk-scale"
            out.append(KeyInfo(section, f.name, value, origin))
    return out


_MISSING = object()
