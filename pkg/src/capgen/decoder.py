"""Attention LSTM caption decoder.

Each step attends over the encoder grid with the hidden state from the
previous step (unscaled dot-product scores), feeds ``[embed(token);
h_attended]`` through the LSTM, and predicts the next token from
``[h_new; h_attended]``.  All tensors carry a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderOutput
from .errors import ConfigError, UsageError
from .nn import Linear, Module, uniform
from .tensor import Tensor

END_ID = 2


@dataclass
class DecoderConfig:
    vocab_size: int
    enc_dim: int
    embed_dim: int = 32
    hidden_dim: int = 64
    num_layers: int = 1

    def __post_init__(self):
        for name in ("vocab_size", "enc_dim", "embed_dim", "hidden_dim", "num_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"decoder {name} must be positive")
        if self.vocab_size <= END_ID:
            raise ConfigError(f"vocab_size {self.vocab_size} leaves no room for the pad/start/end markers")


@dataclass
class DecoderState:
    """Per-layer hidden and cell states ``[B, H]``; ``alpha`` is the last attention ``[B, L]``."""

    hs: tuple
    cs: tuple
    alpha: Tensor | None = None

    @property
    def h(self) -> Tensor:
        return self.hs[-1]

    @property
    def c(self) -> Tensor:
        return self.cs[-1]

    def select(self, rows) -> "DecoderState":
        """Detached state made of the given batch rows (used to reorder beams)."""
        rows = np.asarray(rows)
        pick = lambda t: Tensor._wrap(t.data[rows])  # noqa: E731
        alpha = None if self.alpha is None else pick(self.alpha)
        return DecoderState(tuple(pick(h) for h in self.hs), tuple(pick(c) for c in self.cs), alpha)


@dataclass
class AttentionOutput:
    h_attended: Tensor
    alpha: Tensor


class LSTMLayer(Module):
    """Gate layout along the 4H axis: input, forget, candidate, output."""

    def __init__(self, rng, d_in: int, hidden: int):
        self.w_x = uniform(rng, (d_in, 4 * hidden), hidden)
        self.w_h = uniform(rng, (hidden, 4 * hidden), hidden)
        self.bias = uniform(rng, (4 * hidden,), hidden)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, layer: LSTMLayer) -> tuple[Tensor, Tensor]:
    hidden = h.shape[-1]
    z = T.add(T.matmul(x, layer.w_x), T.matmul(h, layer.w_h))
    z = T.add(z, T.expand(layer.bias, z.shape))
    gate = lambda k: z[:, k * hidden:(k + 1) * hidden]  # noqa: E731
    i, f, g, o = T.sigmoid(gate(0)), T.sigmoid(gate(1)), T.tanh(gate(2)), T.sigmoid(gate(3))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    return T.mul(o, T.tanh(c_new)), c_new


class Decoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        n, e, h, d = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.enc_dim
        self.embedding = uniform(rng, (n, e), n)
        self.att_proj = uniform(rng, (h, d), h) if h != d else None
        self.layers = [LSTMLayer(rng, e + d if i == 0 else h, h) for i in range(cfg.num_layers)]
        self.init_h = [Linear(rng, d, h) for _ in range(cfg.num_layers)]
        self.init_c = [Linear(rng, d, h) for _ in range(cfg.num_layers)]
        self.out = Linear(rng, h + d, n)

    def attend(self, h: Tensor, enc: EncoderOutput) -> AttentionOutput:
        feats = enc.features
        b, length, d = feats.shape
        if length == 0:
            raise UsageError("cannot attend over an empty feature grid")
        q = T.matmul(h, self.att_proj) if self.att_proj is not None else h
        scores = T.reshape(T.matmul(feats, T.reshape(q, (b, d, 1))), (b, length))
        alpha = T.softmax(scores, axis=-1)
        attended = T.matmul(T.reshape(alpha, (b, 1, length)), feats)
        return AttentionOutput(T.reshape(attended, (b, d)), alpha)

    def lstm_step(self, x: Tensor, state: DecoderState) -> DecoderState:
        hs, cs = [], []
        inp = x
        for layer, h, c in zip(self.layers, state.hs, state.cs):
            h_new, c_new = lstm_cell(inp, h, c, layer)
            hs.append(h_new)
            cs.append(c_new)
            inp = h_new
        return DecoderState(tuple(hs), tuple(cs))

    def init_state(self, enc: EncoderOutput) -> DecoderState:
        pooled = T.mean(enc.features, axis=1)
        hs = tuple(T.tanh(lin(pooled)) for lin in self.init_h)
        cs = tuple(T.tanh(lin(pooled)) for lin in self.init_c)
        return DecoderState(hs, cs)

    def _check_ids(self, ids: np.ndarray) -> None:
        n = self.cfg.vocab_size
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise UsageError(f"token id outside vocabulary of size {n}")

    def decode_step(self, token_ids, state: DecoderState, enc: EncoderOutput) -> tuple[Tensor, DecoderState]:
        """Consume one token per batch row and return next-token logits ``[B, N]``."""
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        self._check_ids(ids)
        att = self.attend(state.h, enc)
        x = T.concat([T.take(self.embedding, ids), att.h_attended], axis=-1)
        new = self.lstm_step(x, state)
        logits = self.out(T.concat([new.h, att.h_attended], axis=-1))
        new.alpha = att.alpha
        return logits, new

    def teacher_forced_forward(self, tokens, enc: EncoderOutput) -> tuple[Tensor, Tensor]:
        """Logits ``[B, T-1, N]`` for ``tokens[:, 1:]`` and attention rows ``[B, T-1, L]``.

        Step t consumes ``tokens[:, t]``; rows past a caption's end see padding
        and are expected to be masked by the loss.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] < 2:
            raise UsageError("teacher forcing needs at least a start token and one target")
        if tokens.shape[0] != enc.batch:
            raise UsageError(f"{tokens.shape[0]} token rows for {enc.batch} encoded images")
        self._check_ids(tokens)
        state = self.init_state(enc)
        logits, alphas = [], []
        for t in range(tokens.shape[1] - 1):
            step_logits, state = self.decode_step(tokens[:, t], state, enc)
            logits.append(step_logits)
            alphas.append(state.alpha)
        return T.stack(logits, axis=1), T.stack(alphas, axis=1)


def attend(h: Tensor, enc: EncoderOutput, decoder: Decoder) -> AttentionOutput:
    return decoder.attend(h, enc)


def decode_step(token_ids, state: DecoderState, enc: EncoderOutput, decoder: Decoder):
    return decoder.decode_step(token_ids, state, enc)
