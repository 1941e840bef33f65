"""Run configuration: flat ``key = value`` INI sections, typed by dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    seed: int = 1234
    n_diffusion: int = 5000
    n_train: int = 3000
    n_dev: int = 200
    n_test: int = 600
    ambiguous_fraction: float = 0.5
    lexicon: str = "strict"


@dataclass
class DiffusionConfig:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.1
    hidden: int = 128
    ctx_dim: int = 32
    time_dim: int = 16
    skip: bool = False
    batch_size: int = 64
    lr: float = 1e-3
    max_epochs: int = 100
    min_improvement: float = 0.01
    patience: int = 3
    n_val: int = 500


@dataclass
class DDPOConfig:
    rl_steps: int = 200
    contexts_per_step: int = 32
    samples_per_context: int = 2
    lr: float = 1e-5
    clip_norm: float = 1.0
    noise_scale: float = 1.0
    baseline_decay: float = 0.9
    n_holdout: int = 256


@dataclass
class TranslatorSection:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 3e-4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_layers: int = 2
    n_visual: int = 4
    capture_batches: int = 50
    joint_loss: bool = True
    update_denoiser: bool = True
    denoiser_lr: float = 1e-5
    curve_points: int = 10
    max_decode: int = 16


@dataclass
class AblationConfig:
    use_diffusion: bool = True
    use_real_scenes: bool = False
    use_scene_encoder: bool = True


SECTIONS = {
    "data": DataConfig,
    "diffusion": DiffusionConfig,
    "ddpo": DDPOConfig,
    "translator": TranslatorSection,
    "ablation": AblationConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    ddpo: DDPOConfig = field(default_factory=DDPOConfig)
    translator: TranslatorSection = field(default_factory=TranslatorSection)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @property
    def scene_source(self) -> str:
        """``oracle`` if real scenes are switched on, else ``generated`` or ``none``."""
        if self.ablation.use_real_scenes:
            return "oracle"
        return "generated" if self.ablation.use_diffusion else "none"

    def items(self) -> list[tuple[str, object]]:
        out = []
        for sec in SECTIONS:
            obj = getattr(self, sec)
            out += [(f"{sec}.{f.name}", getattr(obj, f.name)) for f in fields(obj)]
        return out

    def to_text(self) -> str:
        lines = []
        for sec in SECTIONS:
            lines.append(f"[{sec}]")
            obj = getattr(self, sec)
            lines += [f"{f.name} = {_fmt(getattr(obj, f.name))}" for f in fields(obj)]
            lines.append("")
        return "\n".join(lines)

    def hash(self, sections=tuple(SECTIONS)) -> str:
        text = "\n".join(f"{k}={_fmt(v)}" for k, v in self.items() if k.split(".")[0] in sections)
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def replace(self, **overrides) -> "RunConfig":
        """Copy with ``section__key=value`` overrides."""
        new = RunConfig(**{s: dataclasses.replace(getattr(self, s)) for s in SECTIONS})
        for k, v in overrides.items():
            new.set(k.replace("__", "."), v)
        return new

    def set(self, dotted: str, value) -> None:
        sec, _, key = dotted.partition(".")
        if sec not in SECTIONS or not key:
            raise ConfigError(f"unknown config key {dotted!r}")
        obj = getattr(self, sec)
        types = {f.name: f.type for f in fields(obj)}
        if key not in types:
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(obj, key, _coerce(value, types[key], dotted))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(value, typ, key):
    typ = typ if isinstance(typ, str) else typ.__name__
    if not isinstance(value, str):
        return value
    try:
        if typ == "bool":
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None


def validate(cfg: RunConfig) -> None:
    d = cfg.data
    if d.n_diffusion <= 0 or d.n_train <= 0 or d.n_dev <= 0 or d.n_test <= 0:
        raise ConfigError("dataset sizes must be positive")
    if not 0.0 <= d.ambiguous_fraction <= 1.0:
        raise ConfigError("data.ambiguous_fraction must lie in [0, 1]")
    f = cfg.diffusion
    if f.T < 2 or not 0 < f.beta_start <= f.beta_end < 1:
        raise ConfigError("diffusion schedule out of range")
    if not 0.0 <= cfg.ddpo.noise_scale <= 1.0:
        raise ConfigError("ddpo.noise_scale must lie in [0, 1]")
    if cfg.ddpo.rl_steps < 0:
        raise ConfigError("ddpo.rl_steps must be >= 0")
    if cfg.ddpo.noise_scale == 0 and (cfg.ddpo.rl_steps > 0 or cfg.translator.joint_loss):
        raise ConfigError("policy-gradient updates need ddpo.noise_scale > 0")
    t = cfg.translator
    if t.d_model % t.n_heads:
        raise ConfigError("translator.d_model must be divisible by n_heads")
    if t.capture_batches < 1:
        raise ConfigError("translator.capture_batches must be >= 1")


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.optionxform = str  # keys are case-sensitive (e.g. "T")
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for sec in parser.sections():
            for key, val in parser.items(sec):
                cfg.set(f"{sec}.{key}", val)
    for ov in overrides:
        key, eq, val = ov.partition("=")
        if not eq:
            raise ConfigError(f"override {ov!r} is not key=value")
        cfg.set(key.strip(), val.strip())
    validate(cfg)
    return cfg


def diff(a: RunConfig, b: RunConfig) -> set[str]:
    """Dotted keys whose values differ."""
    return {k for (k, va), (_, vb) in zip(a.items(), b.items()) if va != vb}
