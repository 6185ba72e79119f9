"""Experiment configuration: nested dataclasses, key=value files and dotted overrides.

Every key has a default; ``ExperimentConfig().to_text()`` lists them all.
Layer stacks are written as comma-separated ``a:b:c`` triples, for example
``encoder.layers=64:10:5,64:8:4``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .encoder import EncoderConfig
from .errors import ConfigError, PathError
from .objectives import ContrastiveConfig, DecoderConfig
from .signal_io import SynthConfig

OBJECTIVES = ("vqvae", "vqwav2vec-kmeans", "vqwav2vec-gumbel")


@dataclass(frozen=True)
class QuantizerConfig:
    """``init`` is "uniform" (bounded by 1/sqrt(D/G)) or "data" (codewords
    copied from encoder outputs on a few training utterances)."""

    K: int = 320
    G: int = 2
    beta: float = 0.25
    commitment: float = 1.0
    tau_start: float = 2.0
    tau_end: float = 0.5
    tau_decay: float = 0.995
    hard: bool = True
    noise_scale: float = 1.0
    init: str = "uniform"

    def __post_init__(self):
        if self.init not in ("uniform", "data"):
            raise ConfigError(f"unknown quantizer.init {self.init!r}")
        if self.K < 1 or self.G < 1:
            raise ConfigError("quantizer.K and quantizer.G must be >= 1")


@dataclass(frozen=True)
class ScheduleSpec:
    """``cosine`` anneals lr_peak -> lr_final; ``warmup-then-cosine`` first ramps
    linearly from lr_init to lr_peak over ``warmup_updates``."""

    kind: str = "warmup-then-cosine"
    lr_init: float = 1e-7
    lr_peak: float = 2e-3
    lr_final: float = 1e-5
    warmup_updates: int = 20

    def __post_init__(self):
        if self.kind not in ("cosine", "warmup-then-cosine"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if min(self.lr_init, self.lr_peak, self.lr_final) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lr_final > self.lr_peak:
            raise ConfigError("lr_final must not exceed lr_peak")


# Paper-scale schedules; kept as named presets, never exercised at desk scale.
PAPER_VQVAE_SCHEDULE = ScheduleSpec("cosine", 2e-4, 2e-4, 1e-6, 0)
PAPER_VQWAV2VEC_SCHEDULE = ScheduleSpec("warmup-then-cosine", 1e-7, 1e-4, 1e-5, 500)


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "vqwav2vec-kmeans"
    updates: int = 300
    batch_size: int = 8
    segment_length: int = 4800
    seed: int = 0
    diversity_weight: float = 0.1
    optimizer: str = "adam"
    grad_clip: float = 5.0
    codebook_lr_scale: float = 1.0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.updates < 1 or self.batch_size < 1:
            raise ConfigError("updates and batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.diversity_weight < 0:
            raise ConfigError("diversity_weight must be >= 0")
        if self.codebook_lr_scale <= 0:
            raise ConfigError("codebook_lr_scale must be positive")


@dataclass(frozen=True)
class EvalConfig:
    n_utterances: int = 40
    seed_offset: int = 10_000
    n_triplets: int = 5000
    mode: str = "pooled"
    per_group_codes: bool = False


@dataclass(frozen=True)
class SweepConfig:
    codebooks: str = "4x8,8x8,320x2,512x1"


PAPER_SCALE_TRAIN = {
    "vqvae": TrainConfig(objective="vqvae", updates=300_000, batch_size=64, segment_length=512),
    "vqwav2vec-kmeans": TrainConfig(objective="vqwav2vec-kmeans", updates=300_000, batch_size=20, segment_length=150_000),
    "vqwav2vec-gumbel": TrainConfig(objective="vqwav2vec-gumbel", updates=300_000, batch_size=20, segment_length=150_000),
}

SECTIONS = {
    "data": SynthConfig,
    "encoder": EncoderConfig,
    "quantizer": QuantizerConfig,
    "decoder": DecoderConfig,
    "contrastive": ContrastiveConfig,
    "schedule": ScheduleSpec,
    "train": TrainConfig,
    "eval": EvalConfig,
    "sweep": SweepConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        # the decoder is always conditioned on full latent frames
        if self.decoder.condition_dim != self.encoder.dim:
            object.__setattr__(self, "decoder", replace(self.decoder, condition_dim=self.encoder.dim))
        if self.encoder.dim % self.quantizer.G:
            raise ConfigError(f"encoder dim {self.encoder.dim} is not divisible by quantizer.G={self.quantizer.G}")
        if self.schedule.warmup_updates >= self.train.updates and self.schedule.kind == "warmup-then-cosine":
            raise ConfigError("schedule.warmup_updates must be smaller than train.updates")

    # -- flat key/value view -------------------------------------------------
    def items(self):
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def to_text(self) -> str:
        return "\n".join(f"{k}={format_value(v)}" for k, v in self.items()) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:12]

    def with_overrides(self, overrides) -> "ExperimentConfig":
        """Apply ``key=value`` strings, ``(key, value)`` pairs or a mapping of dotted keys."""
        if isinstance(overrides, dict):
            pairs = list(overrides.items())
        else:
            pairs = [o if isinstance(o, tuple) else parse_assignment(o) for o in overrides]
        by_section = {}
        for key, raw in pairs:
            section, _, name = key.partition(".")
            cls = SECTIONS.get(section)
            if cls is None or name not in {f.name for f in dataclasses.fields(cls)}:
                raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid_keys())}")
            hint = typing.get_type_hints(cls)[name]
            by_section.setdefault(section, {})[name] = coerce(raw, hint, key)
        kwargs = {}
        for section, changes in by_section.items():
            try:
                kwargs[section] = replace(getattr(self, section), **changes)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{section}: {exc}") from exc
        try:
            return replace(self, **kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path, overrides=()):
        path = Path(path)
        if not path.exists():
            raise PathError(f"no such config file: {path}")
        pairs = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            pairs.append(parse_assignment(line))
        return cls().with_overrides(pairs).with_overrides(list(overrides))

    @classmethod
    def from_text(cls, text):
        pairs = [parse_assignment(l) for l in text.splitlines() if l.strip() and not l.startswith("#")]
        return cls().with_overrides(pairs)


def valid_keys():
    return [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in dataclasses.fields(cls)]


def parse_assignment(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(":".join(str(x) for x in t) for t in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def coerce(raw, hint, key):
    if not isinstance(raw, str):
        return raw
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is tuple:
            return tuple(tuple(int(x) for x in item.split(":")) for item in raw.split(",") if item)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_codebooks(spec: str):
    """``"4x8,320x2"`` -> ``[(4, 8), (320, 2)]`` as (K, G) pairs."""
    out = []
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            k, g = item.lower().split("x")
            out.append((int(k), int(g)))
        except ValueError as exc:
            raise ConfigError(f"bad codebook spec {item!r}; expected KxG") from exc
    return out


def provenance_header(config: ExperimentConfig, seed=None) -> str:
    seed = config.train.seed if seed is None else seed
    return f"# vqspeech {__version__} config_hash={config.config_hash()} seed={seed}"
