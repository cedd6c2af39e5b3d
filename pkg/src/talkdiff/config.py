"""Run configuration: sectioned ``key = value`` text files.

Configs are parsed, validated and frozen before any work begins; a short
digest of the frozen values is embedded in every artifact a run writes, so
outputs can always be traced back to their exact settings.  The only
environment override honored is ``TALKDIFF_SEED`` (an integer replacing
``run.seed``); everything else must be in the file or on the command line.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional

from .adapters import SUPPORTED_KERNELS
from .audio import FEATURE_DIM_EXTRA
from .bench import BenchDims
from .diffusion import ADAPTER_KINDS, TrainCfg
from .faces import SceneCfg

SEED_ENV_VAR = "TALKDIFF_SEED"


class ConfigError(ValueError):
    """Raised for unreadable, unknown or out-of-range configuration values."""


@dataclass(frozen=True)
class ModelCfg:
    channels: int = 16
    attn_dim: int = 32
    heads: int = 4
    blocks: int = 3
    time_dim: int = 16
    zero_conv_kernel: int = 1

    def __post_init__(self):
        if min(self.channels, self.attn_dim, self.heads, self.blocks, self.time_dim) < 1:
            raise ConfigError("model dimensions must be >= 1")
        if self.attn_dim % self.heads != 0:
            raise ConfigError(f"attn_dim {self.attn_dim} not divisible by heads {self.heads}")
        if self.zero_conv_kernel not in SUPPORTED_KERNELS:
            raise ConfigError(f"zero_conv_kernel must be one of {SUPPORTED_KERNELS}")
        if self.time_dim % 2 != 0:
            raise ConfigError("time_dim must be even")


@dataclass(frozen=True)
class ScheduleCfg:
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.timesteps < 2:
            raise ConfigError("timesteps must be >= 2")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ConfigError("need 0 < beta_start <= beta_end < 1")


@dataclass(frozen=True)
class DataCfg:
    height: int = 32
    width: int = 32
    frames: int = 16
    sample_rate: int = 16000
    fps: int = 25
    dft_bins: int = 8
    n_samples: int = 200

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ConfigError("height and width must be >= 16")
        if self.frames < 6:
            raise ConfigError("frames must be >= 6 (sync metric needs 2*max_lag + 2)")
        if self.sample_rate < 1 or self.fps < 1 or self.n_samples < 1:
            raise ConfigError("sample_rate, fps and n_samples must be >= 1")
        window = self.sample_rate // self.fps
        if window < 2 * self.dft_bins:
            raise ConfigError(f"window ({window}) must be >= 2 * dft_bins ({self.dft_bins})")

    @property
    def audio_dim(self) -> int:
        return self.dft_bins + FEATURE_DIM_EXTRA


@dataclass(frozen=True)
class SampleCfg:
    steps: int = 40

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sample steps must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    """Frozen top-level configuration; build with :func:`load_run_config`."""

    adapter: str = "semi"
    seed: int = 0
    model: ModelCfg = field(default_factory=ModelCfg)
    schedule: ScheduleCfg = field(default_factory=ScheduleCfg)
    train: TrainCfg = field(default_factory=TrainCfg)
    data: DataCfg = field(default_factory=DataCfg)
    sampling: SampleCfg = field(default_factory=SampleCfg)
    scene: SceneCfg = field(default_factory=SceneCfg)
    bench: BenchDims = field(default_factory=BenchDims)

    def __post_init__(self):
        if self.adapter not in ADAPTER_KINDS:
            raise ConfigError(f"adapter must be one of {ADAPTER_KINDS}, got {self.adapter!r}")
        if self.sampling.steps > self.schedule.timesteps:
            raise ConfigError("sample steps cannot exceed schedule timesteps")

    def digest(self) -> str:
        lines = sorted(f"{k} = {v}" for k, v in self.flat_items())
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

    def flat_items(self):
        yield "run.adapter", self.adapter
        yield "run.seed", self.seed
        for section, obj in (("model", self.model), ("schedule", self.schedule),
                             ("train", self.train), ("data", self.data),
                             ("sample", self.sampling), ("scene", self.scene),
                             ("bench", self.bench)):
            for f in fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)


_SECTION_CLASSES = {
    "model": ModelCfg,
    "schedule": ScheduleCfg,
    "train": TrainCfg,
    "data": DataCfg,
    "sample": SampleCfg,
    "scene": SceneCfg,
    "bench": BenchDims,
}
_SECTION_ATTRS = {"model": "model", "schedule": "schedule", "train": "train",
                  "data": "data", "sample": "sampling", "scene": "scene",
                  "bench": "bench"}


def _coerce(section: str, key: str, raw: str, target_type):
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {target_type.__name__}") from exc


def load_run_config(path: Optional[str] = None,
                    overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """Parse, validate and freeze a run config.

    ``overrides`` maps ``section.key`` to raw string values and is applied
    after the file (used for command-line flags).  Unknown sections or keys
    are rejected.  ``TALKDIFF_SEED`` in the environment replaces run.seed.
    """
    raw: Dict[str, Dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            raw[section] = dict(parser.items(section))
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override key must be section.key, got {dotted!r}")
        section, key = dotted.split(".", 1)
        raw.setdefault(section, {})[key] = str(value)

    run_items = raw.pop("run", {})
    adapter = run_items.pop("adapter", "semi")
    seed = _coerce("run", "seed", run_items.pop("seed", "0"), int)
    if run_items:
        raise ConfigError(f"unknown keys in [run]: {sorted(run_items)}")
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        seed = _coerce("run", "seed", env_seed, int)

    kwargs = {"adapter": adapter, "seed": seed}
    for section, items in raw.items():
        cls = _SECTION_CLASSES.get(section)
        if cls is None:
            raise ConfigError(f"unknown config section [{section}]")
        valid = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, value in items.items():
            if key not in valid:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            default = getattr(cls(), key)
            values[key] = _coerce(section, key, value, type(default))
        try:
            kwargs[_SECTION_ATTRS[section]] = cls(**values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid [{section}] config: {exc}") from exc
    # sections with TrainCfg-style validation raise plain ValueError; unify
    try:
        cfg = RunConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    # seed flows into the train loop unless the file pinned one explicitly
    if "train" not in raw or "seed" not in raw.get("train", {}):
        object.__setattr__(cfg.train, "seed", cfg.seed)
    return cfg


def write_config(cfg: RunConfig, path) -> None:
    """Serialize a frozen config back to disk (canonical section order)."""
    lines = ["[run]", f"adapter = {cfg.adapter}", f"seed = {cfg.seed}", ""]
    for section, obj in (("model", cfg.model), ("schedule", cfg.schedule),
                         ("train", cfg.train), ("data", cfg.data),
                         ("sample", cfg.sampling), ("scene", cfg.scene),
                         ("bench", cfg.bench)):
        lines.append(f"[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")
