"""Composition of backbone, adapters and frontends behind one handle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, BackboneConfig, OmniLoraVariant
from .data import VOCAB, AUDIO_FRAME_RATE, VIDEO_FRAME_RATE
from .frontend import ModalityEncoder, Projector, TokenStream
from .tensor import Tensor


@dataclass
class ModelDims:
    d_raw: int = 16
    d_enc: int = 32
    d_proj: int = 64


class OmniModel:
    def __init__(self, cfg: BackboneConfig, dims: ModelDims, rng: np.random.Generator,
                 variant: OmniLoraVariant | None = None):
        self.cfg = cfg
        self.dims = dims
        self.vocab = VOCAB
        self.backbone = Backbone(cfg, rng)
        self.audio_encoder = ModalityEncoder("audio", dims.d_raw, dims.d_enc, rng)
        self.video_encoder = ModalityEncoder("video", dims.d_raw, dims.d_enc, rng)
        self.audio_projector = Projector(dims.d_enc, dims.d_proj, cfg.d_model, rng)
        self.video_projector = Projector(dims.d_enc, dims.d_proj, cfg.d_model, rng)
        self.variant = variant

    def frontend_parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.audio_encoder.named_parameters("frontend/audio_enc"))
        params.update(self.video_encoder.named_parameters("frontend/video_enc"))
        params.update(self.audio_projector.named_parameters("frontend/audio_proj"))
        params.update(self.video_projector.named_parameters("frontend/video_proj"))
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        params = dict(self.backbone.base_parameters())
        params.update(self.frontend_parameters())
        if self.variant is not None:
            params.update(self.variant.named_parameters())
        return params

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def encode_audio(self, raw: np.ndarray) -> TokenStream:
        return self.audio_encoder.encode(raw, AUDIO_FRAME_RATE)

    def encode_video(self, raw: np.ndarray) -> TokenStream:
        return self.video_encoder.encode(raw, VIDEO_FRAME_RATE)

    def project(self, stream: TokenStream) -> Tensor:
        proj = self.audio_projector if stream.modality == "audio" else self.video_projector
        return proj.project(stream)
