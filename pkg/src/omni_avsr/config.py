"""Flat, typed experiment configuration with a diff-able text format.

The on-disk form is `[section]` headers with `key = value` lines; parsing is
strict (unknown sections/keys are errors) and parse(serialize(x)) is a fixed
point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig
from .data import VOCAB


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    n_utts: int = 2000
    min_words: int = 2
    max_words: int = 3
    d_raw: int = 16
    jitter: float = 0.1


@dataclass
class BackboneSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 192
    d_enc: int = 64
    d_proj: int = 64


@dataclass
class LoraSection:
    variant: str = "ST"
    rank: int = 48
    alpha: float = 8.0


@dataclass
class MenuSection:
    audio_rates: str = "4,16"
    video_rates: str = "2,5"

    def audio(self) -> list[int]:
        return [int(x) for x in self.audio_rates.split(",")]

    def video(self) -> list[int]:
        return [int(x) for x in self.video_rates.split(",")]


@dataclass
class WeightsSection:
    asr: float = 1.0
    vsr: float = 1.5
    avsr: float = 1.0


@dataclass
class OptimSection:
    lr_max: float = 2e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.01
    total_steps: int = 28000
    batch_size: int = 8
    pretrain_steps: int = 2500
    pretrain_batch_size: int = 8
    noise_prob: float = 0.3
    noise_snrs: str = "5,0,-5"
    noise_jitter_audio: float = 0.1
    noise_jitter_video: float = 0.1


@dataclass
class DecodeSection:
    beam_width: int = 5
    temperature: float = 0.6
    max_new_tokens: int = 24


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    lora: LoraSection = field(default_factory=LoraSection)
    menu: MenuSection = field(default_factory=MenuSection)
    weights: WeightsSection = field(default_factory=WeightsSection)
    optim: OptimSection = field(default_factory=OptimSection)
    decode: DecodeSection = field(default_factory=DecodeSection)

    def backbone_config(self) -> BackboneConfig:
        b = self.backbone
        return BackboneConfig(d_model=b.d_model, n_layers=b.n_layers,
                              n_heads=b.n_heads, d_ff=b.d_ff,
                              vocab_size=VOCAB.size, max_len=b.max_len)

    def validate(self):
        if self.corpus.n_utts < 1:
            raise ConfigError("corpus.n_utts must be >= 1")
        if not 1 <= self.corpus.min_words <= self.corpus.max_words:
            raise ConfigError("corpus word range invalid")
        if self.lora.variant not in ("S", "T", "ST"):
            raise ConfigError(f"unknown lora variant {self.lora.variant!r}")
        if self.optim.total_steps < 1 or self.optim.batch_size < 1:
            raise ConfigError("optimizer steps/batch must be >= 1")
        if self.decode.beam_width < 1 or self.decode.temperature <= 0:
            raise ConfigError("decode config invalid")
        self.backbone_config()
        return self


def serialize(cfg: RunConfig) -> str:
    lines = ["[run]", f"seed = {cfg.seed}"]
    for f in fields(cfg):
        if f.name == "seed":
            continue
        section = getattr(cfg, f.name)
        lines.append("")
        lines.append(f"[{f.name}]")
        for sf in fields(section):
            v = getattr(section, sf.name)
            lines.append(f"{sf.name} = {v!r}" if isinstance(v, str) else f"{sf.name} = {v}")
    return "\n".join(lines) + "\n"


def parse(text: str) -> RunConfig:
    cfg = RunConfig()
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg) if f.name != "seed"}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current != "run" and current not in sections:
                raise ConfigError(f"line {lineno}: unknown section [{current}]")
            continue
        if "=" not in line or current is None:
            raise ConfigError(f"line {lineno}: expected 'key = value' inside a section")
        key, value = (s.strip() for s in line.split("=", 1))
        if current == "run":
            if key != "seed":
                raise ConfigError(f"line {lineno}: unknown key {key!r} in [run]")
            cfg.seed = int(value)
            continue
        section = sections[current]
        matching = [sf for sf in fields(section) if sf.name == key]
        if not matching:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{current}]")
        sf = matching[0]
        try:
            if sf.type in ("int", int):
                parsed = int(value)
            elif sf.type in ("float", float):
                parsed = float(value)
            else:
                parsed = value.strip("'\"")
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from e
        setattr(section, key, parsed)
    return cfg.validate()


def load(path) -> RunConfig:
    return parse(Path(path).read_text())


def save(path, cfg: RunConfig):
    Path(path).write_text(serialize(cfg))
