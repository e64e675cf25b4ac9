"""Flat ``section.key=value`` configuration with typed sections."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class SpeechEncoderConfig:
    feature_dim: int = 16
    dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    checkpoint: str = ""


@dataclass
class TextLMConfig:
    dim: int = 96
    num_layers: int = 2
    num_heads: int = 4
    vocab_size: int = 32
    checkpoint: str = ""


@dataclass
class AdapterConfig:
    num_layers: int = 2
    num_heads: int = 4


@dataclass
class SubsampleConfig:
    rate: int = 4
    mode: str = "strided"
    eval_mode: str = "strided"


@dataclass
class SpeechifierConfig:
    noise_std: float = 0.1
    min_frames: int = 3
    max_frames: int = 6


@dataclass
class PretrainConfig:
    speech_steps: int = 3000
    speech_batch_size: int = 32
    speech_lr: float = 2e-3
    speech_corpus: int = 4000
    speech_ctc_weight: float = 1.0
    lm_steps: int = 4000
    lm_batch_size: int = 64
    lm_lr: float = 2e-3
    lm_corpus: int = 40000
    lm_embed_noise: float = 1.0
    held_out: int = 300


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 2e-3
    lr_schedule: str = "cosine"
    mask: str = "adapter_only"
    eval_every: int = 500
    checkpoint_every: int = 1000


@dataclass
class CorpusConfig:
    recognize: int = 10000
    translate: int = 10000
    instruct: int = 10000
    held_out: int = 200
    instruct_fill: int = 4
    dir: str = ""


@dataclass
class BiasConfig:
    entities: int = 200
    split_size: int = 150
    finetune_size: int = 3000
    finetune_steps: int = 1000
    finetune_lr: float = 3e-4


@dataclass
class AblateConfig:
    depths: str = "1,2,4"
    steps: int = 2000


@dataclass
class CascadeConfig:
    size: int = 200
    corruption: str = "0,0.1,0.2,0.4"


@dataclass
class Config:
    seed: int = 0
    precision: str = "f32"
    speech_encoder: SpeechEncoderConfig = field(default_factory=SpeechEncoderConfig)
    text_lm: TextLMConfig = field(default_factory=TextLMConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    subsample: SubsampleConfig = field(default_factory=SubsampleConfig)
    speechifier: SpeechifierConfig = field(default_factory=SpeechifierConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    bias: BiasConfig = field(default_factory=BiasConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)

    # ------------------------------------------------------------ parsing

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "Config":
        cfg = cls()
        for key, value in pairs.items():
            cfg.set(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "Config":
        pairs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            pairs[key] = value
        return cls.from_pairs(pairs)

    @classmethod
    def from_file(cls, path: str | Path) -> "Config":
        return cls.from_text(Path(path).read_text())

    def set(self, key: str, value) -> None:
        section, _, name = key.rpartition(".")
        target = getattr(self, section, None) if section else self
        if (not dataclasses.is_dataclass(target)
                or name not in {f.name for f in dataclasses.fields(target)}
                or dataclasses.is_dataclass(getattr(target, name))):
            raise ConfigError(f"unknown config key {key!r}")
        kind = type(getattr(target, name))
        try:
            setattr(target, name, kind(value))
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from exc

    def validate(self) -> None:
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.subsample.mode not in ("random", "strided") or self.subsample.eval_mode not in ("random", "strided"):
            raise ConfigError("subsample modes are 'random' or 'strided'")
        if self.subsample.rate < 1:
            raise ConfigError("subsample.rate must be >= 1")
        if self.train.steps < 0 or self.train.batch_size < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
        if self.train.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.train.lr_schedule!r}")
        if self.train.mask not in ("adapter_only", "adapter_plus_lm_encoder", "all"):
            raise ConfigError(f"unknown mask preset {self.train.mask!r}")
        if self.corpus.instruct_fill < 0:
            raise ConfigError("corpus.instruct_fill must be >= 0")
        if self.text_lm.vocab_size != 32:
            raise ConfigError("text_lm.vocab_size is fixed at 32 by the synthetic vocabulary")

    # ------------------------------------------------------------ output

    def items(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for g in dataclasses.fields(value):
                    yield f"{f.name}.{g.name}", getattr(value, g.name)
            else:
                yield f.name, value

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())

    def copy(self) -> "Config":
        return Config.from_text(self.to_text())

    def fingerprint(self, sections: tuple[str, ...] = ("speech_encoder", "text_lm", "adapter")) -> bytes:
        """SHA-256 over the architecture keys of the given sections (paths excluded)."""
        lines = [f"{k}={v}" for k, v in self.items()
                 if k.split(".")[0] in sections and not k.endswith(".checkpoint")]
        return hashlib.sha256("\n".join(lines).encode()).digest()


def parse_list(text: str, kind=float) -> list:
    return [kind(x) for x in text.replace(" ", "").split(",") if x]
