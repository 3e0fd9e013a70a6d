"""Encoder + decoder bundle with named parameter groups."""

from __future__ import annotations

import numpy as np

from .decoder import Decoder, DecoderConfig
from .encoder import Encoder, EncoderConfig, EncoderOutput
from .nn import Parameter
from .tensor import Tensor


class CaptionModel:
    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, rng: np.random.Generator):
        if dec_cfg.enc_dim != enc_cfg.out_dim:
            raise ValueError(f"decoder enc_dim {dec_cfg.enc_dim} != encoder width {enc_cfg.out_dim}")
        self.encoder = Encoder(enc_cfg, rng)
        self.decoder = Decoder(dec_cfg, rng)

    @property
    def vocab_size(self) -> int:
        return self.decoder.cfg.vocab_size

    def encode(self, images: Tensor) -> EncoderOutput:
        return self.encoder(images)

    def param_groups(self) -> dict[str, dict[str, Parameter]]:
        return {
            "encoder": dict(self.encoder.named_parameters("encoder.")),
            "decoder": dict(self.decoder.named_parameters("decoder.")),
        }

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for group in self.param_groups().values():
            out.update(group)
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None
