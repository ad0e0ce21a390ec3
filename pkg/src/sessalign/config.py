"""Run configuration: one TOML file with a mandatory root seed.

Sections map onto the component config dataclasses.  Unknown sections or
keys are rejected by name.  The root seed is pushed into every component
(datagen, train, tta) so that all randomness derives from it; the only
environment override is ``RUN_SEED``.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .align_train import TrainConfig
from .augment import AugmentPolicy
from .datagen import GenConfig
from .lm_decode import LmConfig
from .model import EncoderConfig
from .tta import TtaConfig


class ConfigError(ValueError):
    pass


@dataclass
class ReportConfig:
    wd_max_frames: int = 5000
    embedding_dump_frames: int = 2000


SECTIONS = {
    "datagen": GenConfig,
    "augment": AugmentPolicy,
    "model": EncoderConfig,
    "train": TrainConfig,
    "lm": LmConfig,
    "tta": TtaConfig,
    "report": ReportConfig,
}
SEEDED = ("datagen", "train", "tta")
# fields filled in from elsewhere and therefore not settable in a section
DERIVED_KEYS = {"seed", "n_channels", "vocab_size", "n_domain_heads"}


def _build(section: str, cls, raw: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    bad = sorted(k for k in raw if k not in fields or k in DERIVED_KEYS)
    if bad:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(bad)}")
    kw = {}
    for k, v in raw.items():
        default = fields[k].default
        kw[k] = tuple(v) if isinstance(v, list) and isinstance(default, tuple) else v
    try:
        obj = cls(**kw)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}]: {e}") from e
    return obj


@dataclass
class RunConfig:
    seed: int
    name: str = "run"
    datagen: GenConfig = field(default_factory=GenConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    tta: TtaConfig = field(default_factory=TtaConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def __post_init__(self):
        for s in SEEDED:
            setattr(self, s, dataclasses.replace(getattr(self, s), seed=self.seed))

    @classmethod
    def from_dict(cls, doc: dict, env_seed: bool = True) -> "RunConfig":
        doc = dict(doc)
        extra = sorted(k for k in doc if k not in SECTIONS and k not in ("seed", "name"))
        if extra:
            raise ConfigError(f"unknown top-level key(s): {', '.join(extra)}")
        seed = os.environ.get("RUN_SEED") if env_seed else None
        if seed is None:
            if "seed" not in doc:
                raise ConfigError("missing mandatory top-level key: seed")
            seed = doc["seed"]
        try:
            seed = int(seed)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"seed must be an integer, got {seed!r}") from e
        parts = {}
        for sec, klass in SECTIONS.items():
            raw = doc.get(sec, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"[{sec}] must be a table")
            parts[sec] = _build(sec, klass, raw)
        return cls(seed=seed, name=str(doc.get("name", "run")), **parts)

    @classmethod
    def load(cls, path, env_seed: bool = True) -> "RunConfig":
        try:
            doc = tomli.loads(Path(path).read_text())
        except (OSError, tomli.TOMLDecodeError) as e:
            raise ConfigError(f"{path}: {e}") from e
        return cls.from_dict(doc, env_seed)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "name": self.name}
        for sec in SECTIONS:
            d = dataclasses.asdict(getattr(self, sec))
            out[sec] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()
                        if k not in DERIVED_KEYS}
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def echo(self, path) -> None:
        Path(path).write_text(self.dumps())
