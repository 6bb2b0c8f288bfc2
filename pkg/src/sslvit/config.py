"""Run configuration: one JSON document with sections {vit, distill, fewshot,
retrieval, data, seed}. Every key is optional and defaults are documented on
the section dataclasses; unknown keys are rejected for typo safety."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .distill import DistillConfig
from .errors import ConfigError
from .fewshot import FewshotConfig
from .retrieval import RetrievalConfig
from .vit import ViTConfig

SECTIONS = ("vit", "distill", "fewshot", "retrieval", "data", "seed")


@dataclass
class DataConfig:
    num_classes: int = 8
    per_class: int = 16
    image_size: int = 32
    channels: int = 1
    noise_sigma: float = 0.1
    max_shift: int = 2

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


def _strict(cls, doc: dict, section: str):
    unknown = set(doc) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}' section: {sorted(unknown)}")
    return cls(**doc)


@dataclass
class RunConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    fewshot: FewshotConfig = field(default_factory=FewshotConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int | None = None

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("seed is required for commands that train or sample "
                              "(set \"seed\" in the config or pass --seed)")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        return int(self.seed)

    def to_dict(self) -> dict:
        return {
            "vit": self.vit.to_dict(),
            "distill": {f: getattr(self.distill, f)
                        for f in self.distill.__dataclass_fields__},
            "fewshot": self.fewshot.to_dict(),
            "retrieval": self.retrieval.to_dict(),
            "data": self.data.to_dict(),
            "seed": self.seed,
        }


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"config must be a JSON object, got {type(doc).__name__}")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}; "
                          f"valid sections: {list(SECTIONS)}")
    seed = doc.get("seed")
    if seed is not None and not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    return RunConfig(
        vit=_strict(ViTConfig, doc.get("vit", {}), "vit"),
        distill=_strict(DistillConfig, doc.get("distill", {}), "distill"),
        fewshot=_strict(FewshotConfig, doc.get("fewshot", {}), "fewshot"),
        retrieval=_strict(RetrievalConfig, doc.get("retrieval", {}), "retrieval"),
        data=_strict(DataConfig, doc.get("data", {}), "data"),
        seed=seed,
    )


def load_config_file(path: str) -> dict:
    """Read a JSON config file, reporting line/column on parse failure."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: "
                          f"{e.msg}") from None
