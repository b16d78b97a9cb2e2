"""INI experiment configuration with strict validation.

One file fully determines a run.  Every section and key is optional except
``[experiment] kind``; unknown sections or keys are rejected before any
compute happens.

Example::

    [experiment]
    kind = sweep-gamma
    seed = 0

    [backbone]
    gamma = 0.7

    [train]
    steps = 200
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .pipeline import BackboneConfig
from .synthdata import IMAGE_SIZE, STRUCTURE_CHANNELS
from .training import TrainConfig

__all__ = ["ConfigError", "ExperimentConfig", "PretrainConfig", "CorpusConfig", "EvalConfig", "load_config", "parse_config"]

KINDS = ("train", "sample", "ablate-gate", "ablate-embed", "compare-strategies", "sweep-gamma")


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class PretrainConfig:
    """Base-model stand-in: trains backbone, style, content and gate weights before any fine-tuning.

    The structure projection is excluded so its zero-initialized output
    layer survives into fine-tuning.
    """

    steps: int = 2000
    learning_rate: float = 3e-3
    batch_size: int = 4
    corpus_seed: int = 5
    corpus_size: int = 64
    n_subjects: int = 1
    checkpoint: str = ""


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    size: int = 32
    n_subjects: int = 2
    n_styles: int = 4


@dataclass(frozen=True)
class EvalConfig:
    seed: int = 1
    size: int = 32
    n_subjects: int = 2
    noise_seeds: int = 2
    clip_x0: float = 1.0
    dump_images: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    seed: int = 0
    checkpoint: str = ""
    out: str = ""
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; choose from {', '.join(KINDS)}")
        bb = self.backbone
        # the synthetic encoders pool the image onto a square grid
        if bb.height != bb.width_cells or IMAGE_SIZE % bb.height:
            raise ConfigError(f"[backbone] needs height == width_cells dividing {IMAGE_SIZE}, got {bb.height}x{bb.width_cells}")
        if bb.structure_channels != STRUCTURE_CHANNELS:
            raise ConfigError(f"[backbone] structure_channels must be {STRUCTURE_CHANNELS} for the synthetic structure encoder")
        if bb.width < 3:
            raise ConfigError("[backbone] width must be at least 3 to hold RGB latents")
        if self.eval.noise_seeds < 1 or self.eval.size < 1 or self.corpus.size < 1 or self.corpus.n_styles < 1:
            raise ConfigError("corpus and eval sizes, n_styles and eval noise_seeds must be >= 1")
        for section, n in (("corpus", self.corpus.n_subjects), ("eval", self.eval.n_subjects), ("pretrain", self.pretrain.n_subjects)):
            if not 1 <= n <= 4:
                raise ConfigError(f"[{section}] n_subjects must be in 1..4, got {n}")
            if n > bb.blocks:
                raise ConfigError(f"[{section}] {n} subjects cannot be cycled over {bb.blocks} blocks")

    def as_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()

    def override(self, **changes) -> "ExperimentConfig":
        """Apply CLI overrides: ``seed``, ``out``, ``alpha``, ``gamma``."""
        out = self
        if changes.get("seed") is not None:
            seed = int(changes["seed"])
            out = dataclasses.replace(out, seed=seed, train=dataclasses.replace(out.train, seed=seed))
        if changes.get("out") is not None:
            out = dataclasses.replace(out, out=str(changes["out"]))
        bb = {k: float(changes[k]) for k in ("alpha", "gamma") if changes.get(k) is not None}
        if bb:
            try:
                out = dataclasses.replace(out, backbone=dataclasses.replace(out.backbone, **bb))
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return out


_SECTIONS = {
    "backbone": BackboneConfig,
    "train": TrainConfig,
    "pretrain": PretrainConfig,
    "corpus": CorpusConfig,
    "eval": EvalConfig,
}
_EXPERIMENT_KEYS = {"kind": str, "seed": int, "checkpoint": str, "out": str}


def _convert(raw: str, default: Any, where: str):
    kind = type(default)
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind.__name__}") from None


def _parse_sites(raw: str, where: str) -> tuple[bool, ...] | None:
    raw = raw.strip()
    if raw in ("", "all"):
        return None
    try:
        return tuple(bool(int(v)) for v in raw.split(","))
    except ValueError:
        raise ConfigError(f"{where}: expected a comma list of 0/1 flags, got {raw!r}") from None


def _build(cls, items: dict[str, str], section: str, extra: dict[str, Any] | None = None):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls() if cls is not ExperimentConfig else None
    values: dict[str, Any] = dict(extra or {})
    for key, raw in items.items():
        where = f"[{section}] {key}"
        if key not in fields:
            raise ConfigError(f"{where}: unknown key")
        if cls is BackboneConfig and key == "spm_sites":
            values[key] = _parse_sites(raw, where)
            continue
        values[key] = _convert(raw, getattr(defaults, key), where)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    sections = set(parser.sections())
    unknown = sections - set(_SECTIONS) - {"experiment"}
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    if "experiment" not in sections or "kind" not in parser["experiment"]:
        raise ConfigError(f"{source}: [experiment] kind is required")
    exp = dict(parser["experiment"])
    top: dict[str, Any] = {}
    for key, raw in exp.items():
        if key not in _EXPERIMENT_KEYS:
            raise ConfigError(f"[experiment] {key}: unknown key")
        try:
            top[key] = _EXPERIMENT_KEYS[key](raw.strip())
        except ValueError:
            raise ConfigError(f"[experiment] {key}: cannot read {raw!r}") from None
    built = {name: _build(cls, dict(parser[name]) if name in sections else {}, name) for name, cls in _SECTIONS.items()}
    # the experiment seed drives the training stream unless [train] pins its own
    if "seed" in top and not (("train" in sections) and "seed" in parser["train"]):
        built["train"] = dataclasses.replace(built["train"], seed=top["seed"])
    try:
        return ExperimentConfig(**top, **built)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text, str(path))
    return _resolve_paths(cfg, Path(path).resolve().parent)


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    """Relative checkpoint paths are read against the config file's directory."""

    def fix(p: str) -> str:
        return str(base / p) if p and not Path(p).is_absolute() else p

    pre = dataclasses.replace(cfg.pretrain, checkpoint=fix(cfg.pretrain.checkpoint))
    return dataclasses.replace(cfg, checkpoint=fix(cfg.checkpoint), pretrain=pre)
