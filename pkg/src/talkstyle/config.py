"""JSON run configuration: strict parsing, defaults and validation.

Every error names the offending key path (``molora.ranks``, ``train.foo``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .expradapter import ExprConfig
from .synthcorpus import FIXTURE_STYLES, StyleSpec
from .vqpose import VQConfig


@dataclass
class CorpusSection:
    styles: list = field(default_factory=lambda: ["calm", "excited"])
    n_per_style: int = 10
    T: int = 100


@dataclass
class ModelSection:
    d: int = 64
    heads: int = 4
    kernel: int = 5
    d_style: int = 16
    audio_layers: int = 2
    style_layers: int = 2
    decoder_layers: int = 3
    id_layers: int = 3
    gpt_layers: int = 2


@dataclass
class MoLoRASection:
    ranks: list = field(default_factory=lambda: [4, 8, 16, 32])
    scales: list | None = None


@dataclass
class TrainSection:
    pretrain_steps: int = 3000
    adapt_steps: int = 30
    vq_steps: int = 2000
    posegpt_steps: int = 3000
    lr: float = 1e-3
    adapt_lr: float = 1e-3
    vq_lr: float = 2e-3
    posegpt_lr: float = 1e-3
    batch_size: int = 8
    crop: int = 48
    posegpt_crop: int = 16  # codes per training window; 0 trains on whole clips
    tf_fraction: float = 0.5


@dataclass
class RunConfig:
    seed: int
    corpus: str | None = None
    out_dir: str | None = None
    corpus_gen: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    molora: MoLoRASection = field(default_factory=MoLoRASection)
    vq: VQConfig = field(default_factory=VQConfig)
    train: TrainSection = field(default_factory=TrainSection)

    def expr_config(self) -> ExprConfig:
        m = self.model
        return ExprConfig(
            d=m.d, heads=m.heads, kernel=m.kernel, d_style=m.d_style,
            audio_layers=m.audio_layers, style_layers=m.style_layers,
            decoder_layers=m.decoder_layers, id_layers=m.id_layers,
        )

    def style_specs(self) -> list[StyleSpec]:
        return [_style(s, f"corpus_gen.styles[{i}]") for i, s in enumerate(self.corpus_gen.styles)]

    def to_json(self) -> dict:
        return asdict(self)


SECTIONS = {
    "corpus_gen": CorpusSection,
    "model": ModelSection,
    "molora": MoLoRASection,
    "vq": VQConfig,
    "train": TrainSection,
}


def _style(entry: Any, where: str) -> StyleSpec:
    if isinstance(entry, str):
        if entry not in FIXTURE_STYLES:
            raise ConfigError(f"{where}: unknown style {entry!r} (fixtures: {sorted(FIXTURE_STYLES)})")
        return FIXTURE_STYLES[entry]
    if isinstance(entry, dict):
        try:
            spec = StyleSpec.from_json(entry)
            spec.validate()
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        return spec
    raise ConfigError(f"{where}: expected a fixture name or a style object")


def _reject_duplicates(pairs: list[tuple[str, Any]]) -> dict:
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError(f"{k}: duplicate key")
        out[k] = v
    return out


def _check_type(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif default is None:
        ok = value is None or isinstance(value, (list, str))
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def _section(cls: type, raw: Any, where: str) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    obj = cls()
    names = {f.name for f in fields(cls)}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"{where}.{key}: unknown key")
        setattr(obj, key, _check_type(value, getattr(obj, key), f"{where}.{key}"))
    return obj


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a JSON object")
    known = {f.name for f in fields(RunConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{key}: unknown key")
    if "seed" not in raw or raw["seed"] is None:
        raise ConfigError("seed: required")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {seed!r}")
    cfg = RunConfig(seed=seed)
    for key in ("corpus", "out_dir"):
        if raw.get(key) is not None:
            if not isinstance(raw[key], str):
                raise ConfigError(f"{key}: expected a path string")
            setattr(cfg, key, raw[key])
    for key, cls in SECTIONS.items():
        if key in raw:
            setattr(cfg, key, _section(cls, raw[key], key))
    validate(cfg)
    return cfg


def _positive(value: Any, where: str) -> None:
    if value <= 0:
        raise ConfigError(f"{where}: must be positive, got {value}")


def validate(cfg: RunConfig) -> RunConfig:
    m, t, v = cfg.model, cfg.train, cfg.vq
    for name in ("d", "heads", "kernel", "d_style"):
        _positive(getattr(m, name), f"model.{name}")
    if m.d % m.heads:
        raise ConfigError(f"model.heads: {m.heads} does not divide model.d={m.d}")
    if m.kernel % 2 == 0:
        raise ConfigError(f"model.kernel: must be odd, got {m.kernel}")
    ranks = cfg.molora.ranks
    if not all(isinstance(r, int) and not isinstance(r, bool) for r in ranks):
        raise ConfigError(f"molora.ranks: expected integers, got {ranks}")
    if any(r <= 0 for r in ranks) or len(set(ranks)) != len(ranks):
        raise ConfigError(f"molora.ranks: must be positive and distinct, got {ranks}")
    bad = [r for r in ranks if m.d % r]
    if bad:
        raise ConfigError(f"molora.ranks: {bad} do not divide the adapted layer width {m.d}")
    if cfg.molora.scales is not None and len(cfg.molora.scales) != len(ranks):
        raise ConfigError("molora.scales: one scale per rank is required")
    for name in ("M", "d_z", "w", "hidden"):
        _positive(getattr(v, name), f"vq.{name}")
    for name in ("gamma", "alpha1", "alpha2"):
        if getattr(v, name) < 0:
            raise ConfigError(f"vq.{name}: must be non-negative")
    for name in ("pretrain_steps", "adapt_steps", "vq_steps", "posegpt_steps", "posegpt_crop"):
        if getattr(t, name) < 0:
            raise ConfigError(f"train.{name}: must be non-negative")
    for name in ("lr", "adapt_lr", "vq_lr", "posegpt_lr", "batch_size", "crop"):
        _positive(getattr(t, name), f"train.{name}")
    if not 0.0 <= t.tf_fraction <= 1.0:
        raise ConfigError("train.tf_fraction: must lie in [0, 1]")
    _positive(cfg.corpus_gen.n_per_style, "corpus_gen.n_per_style")
    if cfg.corpus_gen.T < v.w:
        raise ConfigError(f"corpus_gen.T: must be at least vq.w={v.w}")
    cfg.style_specs()
    return cfg


def parse_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text(), object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)


def require_path(cfg: RunConfig, key: str, must_exist: bool = True) -> Path:
    """Resolve a path-valued key, failing with its name when unset or missing."""
    value = getattr(cfg, key)
    if value is None:
        raise ConfigError(f"{key}: required for this command")
    path = Path(value)
    if must_exist and not path.exists():
        raise ConfigError(f"{key}: {path} does not exist")
    return path
