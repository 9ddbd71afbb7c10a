"""Run configuration: dataclasses for every tunable piece plus strict YAML loading."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


class DegradationLabel(str, Enum):
    # definition order is the tie-break order for classification
    RAINDROP = "raindrop"
    HAZE = "haze"
    NOISE = "noise"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, name: str) -> "DegradationLabel":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(label.value for label in cls)
            raise ConfigError(f"unknown degradation {name!r} (expected one of: {valid})") from None


@dataclass
class EncoderConfig:
    embed_dim: int = 128
    text_layers: int = 2
    text_width: int = 128
    text_heads: int = 4
    context_length: int = 32
    vocab_size: int = 4096
    image_size: int = 64
    image_patch: int = 8
    image_layers: int = 2
    image_width: int = 128
    image_heads: int = 4
    predictor_width: int = 32

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"encoder.{f.name} must be positive")
        if self.text_width % self.text_heads or self.image_width % self.image_heads:
            raise ConfigError("encoder widths must be divisible by their head counts")
        if self.embed_dim % self.text_heads:
            raise ConfigError("encoder.embed_dim must be divisible by encoder.text_heads")
        if self.context_length < 2:
            raise ConfigError("encoder.context_length must leave room for BOT/EOT")
        if self.vocab_size <= 3:
            raise ConfigError("encoder.vocab_size must exceed the 3 reserved ids")
        if self.image_size < self.image_patch:
            raise ConfigError("encoder.image_size must be at least one patch")

    @classmethod
    def toy(cls) -> "EncoderConfig":
        return cls()

    @classmethod
    def vit_b32(cls) -> "EncoderConfig":
        """Shape-compatible with CLIP ViT-B/32 for weight import."""
        return cls(
            embed_dim=512,
            text_layers=12,
            text_width=512,
            text_heads=8,
            context_length=77,
            vocab_size=49408,
            image_size=224,
            image_patch=32,
            image_layers=12,
            image_width=768,
            image_heads=12,
            predictor_width=64,
        )


ENCODER_PRESETS = {"toy": EncoderConfig.toy, "vit_b32": EncoderConfig.vit_b32}

LORA_TARGETS = ("query", "value")


@dataclass
class LoraAdapterConfig:
    rank: int = 4
    scale: float = 1.0
    targets: tuple[str, ...] = LORA_TARGETS

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.rank < 1:
            raise ConfigError("lora.rank must be >= 1")
        if not self.targets or any(t not in LORA_TARGETS for t in self.targets):
            raise ConfigError(f"lora.targets must be a non-empty subset of {LORA_TARGETS}")


@dataclass
class ScheduleConfig:
    steps: int = 100
    lam: float = 0.2
    terminal: float = 1e-4

    def __post_init__(self):
        if self.steps < 1 or self.lam <= 0 or not 0 < self.terminal < 1:
            raise ConfigError("schedule: steps >= 1, lam > 0 and 0 < terminal < 1 required")


PREDICTIONS = ("eps", "x0")


@dataclass
class UNetConfig:
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    # downsampling factors at which SCA/ICA blocks are inserted
    attn_resolutions: tuple[int, ...] = (2, 4)
    num_res_blocks: int = 1
    cond_dim: int = 128
    num_heads: int = 4
    prompt_len: int = 4
    use_sca: bool = True
    use_ica: bool = True
    # network target: the residual x0 - mu ("x0") or the noise ("eps")
    prediction: str = "x0"

    def __post_init__(self):
        if self.prediction not in PREDICTIONS:
            raise ConfigError(f"unet.prediction must be one of {PREDICTIONS}")
        self.channel_mults = tuple(self.channel_mults)
        self.attn_resolutions = tuple(self.attn_resolutions)
        if not self.channel_mults or min(self.channel_mults) <= 0:
            raise ConfigError("unet.channel_mults must be positive")
        for name in ("base_channels", "num_res_blocks", "cond_dim", "num_heads", "prompt_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"unet.{name} must be positive")
        if self.base_channels % 4:
            raise ConfigError("unet.base_channels must be divisible by 4 (group norm)")
        for mult in self.channel_mults:
            if (self.base_channels * mult) % self.num_heads:
                raise ConfigError("unet channels must be divisible by unet.num_heads")

    @property
    def variant(self) -> str:
        if self.use_sca and self.use_ica:
            return "both"
        if self.use_sca:
            return "sca"
        if self.use_ica:
            return "ica"
        return "none"


@dataclass
class HazeParams:
    airlight: tuple[float, float] = (0.7, 1.0)
    beta: tuple[float, float] = (1.0, 2.5)
    grid: int = 8

    def __post_init__(self):
        self.airlight = tuple(self.airlight)
        self.beta = tuple(self.beta)
        lo, hi = self.airlight
        if not 0.6 <= lo <= hi <= 1.0:
            raise ConfigError("haze.airlight must lie within [0.6, 1]")
        if not 0 < self.beta[0] <= self.beta[1]:
            raise ConfigError("haze.beta must be a positive range")
        if self.grid < 2:
            raise ConfigError("haze.grid must be >= 2")


@dataclass
class RaindropParams:
    count: tuple[int, int] = (4, 10)
    radius: tuple[float, float] = (3.0, 7.0)
    coverage: tuple[float, float] = (0.05, 0.35)
    blur_sigma: float = 1.2
    displacement: float = 0.6
    alpha: float = 0.9

    def __post_init__(self):
        self.count = tuple(self.count)
        self.radius = tuple(self.radius)
        self.coverage = tuple(self.coverage)
        if not 0 <= self.count[0] <= self.count[1]:
            raise ConfigError("raindrop.count must be a non-negative range")
        if not 0 < self.radius[0] <= self.radius[1]:
            raise ConfigError("raindrop.radius must be a positive range")
        if not 0 <= self.coverage[0] <= self.coverage[1] <= 1:
            raise ConfigError("raindrop.coverage must be a range within [0, 1]")
        if self.blur_sigma < 0 or not 0 < self.alpha <= 1:
            raise ConfigError("raindrop.blur_sigma >= 0 and 0 < raindrop.alpha <= 1 required")


@dataclass
class SynthParams:
    noise_sigma: float = 50 / 255
    haze: HazeParams = field(default_factory=HazeParams)
    raindrop: RaindropParams = field(default_factory=RaindropParams)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.noise_sigma <= 1:
            raise ConfigError("synth.noise_sigma must lie in (0, 1]")


@dataclass
class CorpusConfig:
    """Procedural toy scenes used when no real GT directory is supplied."""

    n_train: int = 100
    n_test: int = 32
    image_size: int = 64
    caption_corruption: float = 0.3


@dataclass
class Stage1Config:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    alpha: float = 0.5
    temperature_init: float = 0.07
    symmetric: bool = False
    freeze_image_encoder: bool = True
    keep_epoch_checkpoints: bool = False

    @classmethod
    def paper(cls) -> "Stage1Config":
        return cls(epochs=300, batch_size=256, lr=3e-5)


@dataclass
class Stage2Config:
    steps: int = 20000
    batch_size: int = 8
    patch_size: int = 64
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    hflip: bool = True
    vflip: bool = True
    loss: str = "l1"
    teacher_forcing: bool = True
    text_mode: str = "caption"
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.loss not in ("l1", "l2"):
            raise ConfigError("stage2.loss must be l1 or l2")
        if self.text_mode not in TEXT_MODES:
            raise ConfigError(f"stage2.text_mode must be one of {TEXT_MODES}")

    @classmethod
    def paper(cls) -> "Stage2Config":
        return cls(steps=150_000, batch_size=48, patch_size=256, lr=1e-4)


TEXT_MODES = ("caption", "fixed", "null")
FIXED_CAPTION = "This is a photo"


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lora: LoraAdapterConfig = field(default_factory=LoraAdapterConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    synth: SynthParams = field(default_factory=SynthParams)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)

    def __post_init__(self):
        if self.unet.cond_dim != self.encoder.embed_dim:
            raise ConfigError(
                f"unet.cond_dim ({self.unet.cond_dim}) must equal encoder.embed_dim ({self.encoder.embed_dim})"
            )
        if self.lora.rank > min(self.encoder.text_width, self.encoder.embed_dim):
            raise ConfigError("lora.rank must not exceed min(text_width, embed_dim)")

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:8]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    return obj


def from_dict(cls, data: dict, prefix: str = ""):
    """Build dataclass ``cls`` from nested plain data, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = from_dict(hint, value, prefix=f"{prefix}{key}.")
        elif typing.get_origin(hint) is tuple:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{prefix}{key} must be a list")
            kwargs[key] = tuple(value)
        elif hint is float and isinstance(value, int) and not isinstance(value, bool):
            kwargs[key] = float(value)
        elif hint in (int, float, str, bool) and not isinstance(value, hint):
            raise ConfigError(f"{prefix}{key} must be of type {hint.__name__}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None = None, preset: str | None = None) -> RunConfig:
    """Load a RunConfig from YAML (or the toy defaults), applying VLMIR_SEED."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    if preset is not None:
        if preset not in ENCODER_PRESETS:
            raise ConfigError(f"unknown encoder preset {preset!r}")
        data.setdefault("encoder", {})
        base = dataclasses.asdict(ENCODER_PRESETS[preset]())
        data["encoder"] = {**base, **data["encoder"]}
        data.setdefault("unet", {}).setdefault("cond_dim", data["encoder"]["embed_dim"])
    config = from_dict(RunConfig, data)
    env_seed = os.environ.get("VLMIR_SEED")
    if env_seed is not None:
        try:
            config.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"VLMIR_SEED must be an integer, got {env_seed!r}") from None
    return config


def resolve_device(default: str = "cpu") -> str:
    return os.environ.get("VLMIR_DEVICE", default)
