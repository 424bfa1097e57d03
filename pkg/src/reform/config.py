"""Run configuration: one TOML document with a section per module."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .encoder import EncoderProvider
from .rpg import RESTAURANT_FACTORS, FactorSet, LlmBackendConfig
from .synth import SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    reviews: str = ""
    format: str = "jsonl"
    k_core: int = 3
    factors: str = ""  # optional factor-set JSON overriding the restaurant factors
    n_max: int = 100
    template: str = ""  # optional prompt template file


@dataclass
class EvalConfig:
    ks: list = field(default_factory=lambda: [10, 20])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    baseline: str = "no_mfa_mlp"


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    workers: int = 4
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    llm: LlmBackendConfig = field(default_factory=LlmBackendConfig)
    encoder: EncoderProvider = field(default_factory=EncoderProvider)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    base_dir: str = "."  # directory relative paths are resolved against; not hashed

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("base_dir")
        return out

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    @property
    def out(self) -> Path:
        return self.path(self.output_dir)

    def factor_set(self) -> FactorSet:
        if self.data.factors:
            return FactorSet.load(self.path(self.data.factors))
        return RESTAURANT_FACTORS


SECTIONS = {"data": DataConfig, "synth": SynthConfig, "llm": LlmBackendConfig,
            "encoder": EncoderProvider, "train": TrainConfig, "eval": EvalConfig}


def _build(cls, raw: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def from_dict(raw: dict, base_dir=".") -> RunConfig:
    raw = dict(raw)
    parts = {}
    for name, cls in SECTIONS.items():
        section = raw.pop(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        parts[name] = _build(cls, section, name)
    top = {f.name for f in fields(RunConfig)} - set(SECTIONS) - {"base_dir"}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = RunConfig(**raw, **parts, base_dir=str(base_dir))
    if cfg.synth.seed != cfg.seed and "seed" not in raw.get("synth", {}):
        cfg.synth = replace(cfg.synth, seed=cfg.seed)
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return from_dict(raw, p.parent)


def override(cfg: RunConfig, section: str, **kw) -> RunConfig:
    """Copy of ``cfg`` with non-None keyword values replaced in ``section``."""
    kw = {k: v for k, v in kw.items() if v is not None}
    if not kw:
        return cfg
    if section == "":
        return replace(cfg, **kw)
    try:
        return replace(cfg, **{section: replace(getattr(cfg, section), **kw)})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def require_path(cfg: RunConfig, p: str, what: str) -> Path:
    if not p:
        raise ConfigError(f"{what} is not set")
    q = cfg.path(p)
    if not q.exists():
        raise ConfigError(f"{what} not found: {q}")
    return q
