"""Pipeline configuration: one JSON document, overridable from the command line."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .encode import EncodeOptions
from .model import ModelConfig, TrainConfig

CONFIG_ENV = "MIDISEG_CONFIG"


@dataclass
class EncodeConfig:
    k: int = 3
    seed: int = 0
    overtones: bool = True
    drum_split: bool = True

    @property
    def options(self) -> EncodeOptions:
        return EncodeOptions(overtones=self.overtones, drum_split=self.drum_split)


@dataclass
class EvalConfig:
    threshold: float = 0.5
    tolerances_seconds: tuple[float, ...] = (0.5, 3.0)
    tolerance_bars: int = 1
    margin_bars: int = 16
    decoder: str = "threshold"  # or "peak_pick"

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.margin_bars < 0:
            raise ValueError("margin_bars must be non-negative")
        if self.decoder not in ("threshold", "peak_pick"):
            raise ValueError(f"unknown decoder {self.decoder!r}")
        self.tolerances_seconds = tuple(float(t) for t in self.tolerances_seconds)


@dataclass
class PathConfig:
    corpus_dir: str = ""
    annotations: str = ""
    run_dir: str = "run"


@dataclass
class PipelineConfig:
    paths: PathConfig = field(default_factory=PathConfig)
    encode: EncodeConfig = field(default_factory=EncodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {
            "paths": asdict(self.paths),
            "encode": asdict(self.encode),
            "train": asdict(self.train),
            "model": self.model.to_dict(),
            "eval": asdict(self.eval),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            paths=_build(PathConfig, d.get("paths", {})),
            encode=_build(EncodeConfig, d.get("encode", {})),
            train=_build(TrainConfig, d.get("train", {})),
            model=ModelConfig.from_dict({**ModelConfig().to_dict(), **d.get("model", {})}),
            eval=_build(EvalConfig, d.get("eval", {})),
        )

    def digest(self) -> str:
        """Hash of everything except paths, so relocating a run keeps its identity."""
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, section: str, **values) -> "PipelineConfig":
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        return replace(self, **{section: replace(getattr(self, section), **values)})


def _build(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def load_config(path: str | os.PathLike | None = None) -> PipelineConfig:
    """Read a config file; falls back to $MIDISEG_CONFIG, then to defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return PipelineConfig()
    with open(path, encoding="utf-8") as fh:
        return PipelineConfig.from_dict(json.load(fh))


def save_config(config: PipelineConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
