"""Trainable modality frontends: encode, average-pool compress, project.

Encoders here stand in for the pretrained audio/video encoders of the full
system; at this scale they are a single linear+relu+norm layer trained
end-to-end. One encoder and one projector per modality, shared across tasks
and compression rates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class LengthError(ValueError):
    pass


@dataclass
class CompressionRate:
    value: int

    def __post_init__(self):
        self.value = int(self.value)
        if self.value < 1:
            raise ValueError(f"compression rate must be >= 1, got {self.value}")


@dataclass
class RateMenu:
    audio_rates: list[int]
    video_rates: list[int]

    def __post_init__(self):
        for name, rates in (("audio", self.audio_rates), ("video", self.video_rates)):
            if not rates:
                raise ValueError(f"{name} rate menu is empty")
            if any(r < 1 for r in rates):
                raise ValueError(f"{name} rates must be >= 1: {rates}")
            if sorted(set(rates)) != list(rates):
                raise ValueError(f"{name} rates must be strictly increasing: {rates}")

    @classmethod
    def default(cls) -> "RateMenu":
        return cls(audio_rates=[4, 16], video_rates=[2, 5])


@dataclass
class TokenStream:
    modality: str  # "audio" | "video"
    frames: Tensor  # (L, d)
    frame_rate: float


class ModalityEncoder:
    """d_raw -> d_enc, length preserving: linear + relu + layer norm."""

    def __init__(self, modality: str, d_raw: int, d_enc: int, rng: np.random.Generator):
        self.modality = modality
        self.w = Tensor(rng.normal(0, 1 / np.sqrt(d_raw), size=(d_raw, d_enc)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(d_enc), requires_grad=True)
        self.ln_g = Tensor(np.ones(d_enc), requires_grad=True)
        self.ln_b = Tensor(np.zeros(d_enc), requires_grad=True)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/w": self.w, f"{prefix}/b": self.b,
                f"{prefix}/ln_g": self.ln_g, f"{prefix}/ln_b": self.ln_b}

    def encode(self, raw: np.ndarray, frame_rate: float) -> TokenStream:
        if raw.shape[0] < 1:
            raise LengthError("cannot encode an empty stream")
        x = T.relu(T.add(T.matmul(Tensor(raw), self.w), self.b))
        x = T.layer_norm(x, self.ln_g, self.ln_b, eps=1e-8)
        return TokenStream(self.modality, x, frame_rate)


def compress(stream: TokenStream, rate: CompressionRate | int) -> TokenStream:
    """Average pooling along time; a trailing partial window is averaged over
    its true size. Rate 1 is the identity."""
    r = rate.value if isinstance(rate, CompressionRate) else int(rate)
    if r == 1:
        return stream
    return TokenStream(stream.modality, T.avg_pool_time(stream.frames, r),
                       stream.frame_rate / r)


class Projector:
    """d_enc -> d_model via two linear layers with a relu in between."""

    def __init__(self, d_enc: int, d_proj: int, d_model: int, rng: np.random.Generator):
        self.w1 = Tensor(rng.normal(0, 1 / np.sqrt(d_enc), size=(d_enc, d_proj)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(d_proj), requires_grad=True)
        self.w2 = Tensor(rng.normal(0, 1 / np.sqrt(d_proj), size=(d_proj, d_model)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/w1": self.w1, f"{prefix}/b1": self.b1,
                f"{prefix}/w2": self.w2, f"{prefix}/b2": self.b2}

    def project(self, stream: TokenStream) -> Tensor:
        h = T.relu(T.add(T.matmul(stream.frames, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)
