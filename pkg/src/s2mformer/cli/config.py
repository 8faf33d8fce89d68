"""RunConfig: flat ``key = value`` text covering model, training and data settings.

Blank lines and ``#`` comments are ignored; unknown keys are rejected and
anything absent takes its default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..network.model import ModelConfig
from ..training import SPLIT_MODES, TrainConfig

PRECISIONS = ("float64", "float32")


@dataclass
class DataConfig:
    data_dir: str = ""
    features: str = ""
    split_mode: str = "within_trial"
    holdout_subject: int | None = None
    window_seconds: float = 2.0
    overlap: float = 0.5
    purge_boundary: bool = False
    out_dir: str = "run"
    precision: str = "float64"
    profile_batch: int = 4
    e_ac_pj: float = 0.9

    def __post_init__(self):
        if self.split_mode not in SPLIT_MODES:
            raise ValueError(f"split_mode must be one of {SPLIT_MODES}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}")


SECTIONS = (("model", ModelConfig), ("train", TrainConfig), ("data", DataConfig))


def _fields() -> dict[str, tuple[str, dataclasses.Field]]:
    out = {}
    for section, cls in SECTIONS:
        for f in dataclasses.fields(cls):
            if f.name in out:
                raise AssertionError(f"duplicate config key {f.name}")
            out[f.name] = (section, f)
    return out


def parse_value(kind: str, raw: str):
    raw = raw.strip()
    if raw in ("None", "none", "") and "None" in kind:
        return None
    if kind.startswith("bool"):
        low = raw.lower()
        if low not in ("true", "false", "1", "0"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "1")
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_pairs(cls, pairs: list[tuple[str, str]]) -> "RunConfig":
        known = _fields()
        kw: dict[str, dict] = {s: {} for s, _ in SECTIONS}
        for key, raw in pairs:
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            section, f = known[key]
            try:
                kw[section][key] = parse_value(f.type, raw)
            except ValueError as e:
                raise ValueError(f"config key {key!r}: {e}") from None
        return cls(ModelConfig(**kw["model"]), TrainConfig(**kw["train"]), DataConfig(**kw["data"]))

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        pairs = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {n}: expected key = value")
            key, raw = line.split("=", 1)
            pairs.append((key.strip(), raw.strip()))
        return cls.from_pairs(pairs)

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[tuple[str, str]] = ()) -> "RunConfig":
        pairs = []
        if path is not None:
            base = cls.parse(Path(path).read_text())
            pairs = list(base.pairs())
        return cls.from_pairs(pairs + list(overrides))

    def pairs(self):
        for section, _ in SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                yield k, str(v)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.pairs())
