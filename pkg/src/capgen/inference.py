"""Greedy and beam-search caption generation, and attention-map export."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .decoder import DecoderState
from .encoder import EncoderOutput
from .errors import ConfigError, DataError
from .imageio import write_pgm
from .tensor import Tensor
from .vocab import END_ID, PAD_ID, START_ID


@dataclass
class DecodeConfig:
    beam_width: int = 2
    max_len: int = 30  # generated tokens, end marker included

    def __post_init__(self):
        if self.beam_width < 1:
            raise ConfigError("beam width must be >= 1")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")


@dataclass
class Beam:
    tokens: tuple[int, ...]
    logprob: float
    state: DecoderState | None
    finished: bool = False
    alphas: tuple[np.ndarray, ...] = field(default=(), repr=False)

    def sort_key(self):
        return (-self.logprob, self.tokens)


def _merge_states(states: list[DecoderState]) -> DecoderState:
    cat = lambda ts: Tensor._wrap(np.concatenate([t.data for t in ts]))  # noqa: E731
    layers = range(len(states[0].hs))
    return DecoderState(
        tuple(cat([s.hs[i] for s in states]) for i in layers),
        tuple(cat([s.cs[i] for s in states]) for i in layers),
    )


def _step(model, ids, state: DecoderState, enc: EncoderOutput):
    with T.no_grad():
        logits, new = model.decoder.decode_step(ids, state, enc)
        logp = T.log_softmax(logits, axis=-1).data
    return logp, new


def _single(enc: EncoderOutput) -> EncoderOutput:
    if enc.batch != 1:
        raise ConfigError(f"decode one image at a time (got a batch of {enc.batch})")
    return enc


def greedy_decode(model, enc: EncoderOutput, cfg: DecodeConfig) -> Beam:
    """Arg-max token per step (smallest id on ties) until the end marker or ``max_len``."""
    enc = _single(enc)
    with T.no_grad():
        state = model.decoder.init_state(enc)
    tokens, total, alphas = [START_ID], 0.0, []
    for _ in range(cfg.max_len):
        logp, state = _step(model, [tokens[-1]], state, enc)
        tok = int(np.argmax(logp[0]))
        total += float(logp[0, tok])
        tokens.append(tok)
        alphas.append(state.alpha.data[0])
        if tok == END_ID:
            break
    return Beam(tuple(tokens), total, state, tokens[-1] == END_ID, tuple(alphas))


def beam_search(model, enc: EncoderOutput, cfg: DecodeConfig) -> Beam:
    """Keep the ``k`` best partial captions by summed log-probability.

    Finished beams stay in the pool and compete with extensions; the search
    stops once every kept beam has emitted the end marker or ``max_len``
    tokens were generated, and the best kept beam is returned either way.
    Ties are broken by the token sequence (lexicographically smaller wins).
    No length normalisation is applied.
    """
    enc = _single(enc)
    k = cfg.beam_width
    with T.no_grad():
        init = model.decoder.init_state(enc)
    pool = [Beam((START_ID,), 0.0, init)]
    for _ in range(cfg.max_len):
        live = [b for b in pool if not b.finished]
        if not live:
            break
        logp, new_state = _step(
            model, [b.tokens[-1] for b in live], _merge_states([b.state for b in live]), enc.select([0] * len(live))
        )
        candidates = [b for b in pool if b.finished]
        for row, beam in enumerate(live):
            lp = logp[row]
            # only a beam's own top-k extensions can survive the global cut
            order = np.lexsort((np.arange(lp.size), -lp))[:k]
            for tok in order:
                tok = int(tok)
                candidates.append(
                    Beam(
                        beam.tokens + (tok,),
                        beam.logprob + float(lp[tok]),
                        (row,),  # resolved below for survivors only
                        tok == END_ID,
                        beam.alphas + (new_state.alpha.data[row],),
                    )
                )
        candidates.sort(key=Beam.sort_key)
        pool = candidates[:k]
        for b in pool:
            if isinstance(b.state, tuple):
                b.state = new_state.select(list(b.state))
    return min(pool, key=Beam.sort_key)


def decode(model, enc: EncoderOutput, cfg: DecodeConfig) -> Beam:
    return greedy_decode(model, enc, cfg) if cfg.beam_width == 1 else beam_search(model, enc, cfg)


def words_and_alphas(beam: Beam, vocab) -> tuple[list[str], list[np.ndarray]]:
    """Caption words paired with the attention map that produced each one."""
    words, maps = [], []
    for tok, alpha in zip(beam.tokens[1:], beam.alphas):
        if tok == END_ID:
            break
        if tok in (PAD_ID, START_ID):
            continue
        words.append(vocab.itos[tok])
        maps.append(alpha)
    return words, maps


def _safe_name(token: str) -> str:
    return "".join("_" if ch in '/\\\0' else ch for ch in token) or "_"


def attention_map(alpha: np.ndarray, grid_h: int, grid_w: int, image_size: int) -> np.ndarray:
    """``uint8 [image_size, image_size]`` map: min-max scaled, nearest-neighbour upsampled.

    A constant ``alpha`` (max == min) maps to all zeros.
    """
    grid = np.asarray(alpha, dtype=np.float64).reshape(grid_h, grid_w)
    lo, hi = grid.min(), grid.max()
    scaled = np.zeros_like(grid) if hi == lo else (grid - lo) / (hi - lo) * 255.0
    rows = np.arange(image_size) * grid_h // image_size
    cols = np.arange(image_size) * grid_w // image_size
    return np.rint(scaled[rows][:, cols]).astype(np.uint8)


def export_attention(alphas, grid_h: int, grid_w: int, image_size: int, out_dir, words) -> list[Path]:
    """Write one ``{idx}_{word}.pgm`` per word; ``alphas[i]`` is the map used to emit ``words[i]``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for idx, (alpha, word) in enumerate(zip(alphas, words)):
            path = out / f"{idx}_{_safe_name(word)}.pgm"
            write_pgm(path, attention_map(alpha, grid_h, grid_w, image_size))
            paths.append(path)
    except OSError as e:
        raise DataError(f"cannot write attention maps to {out}: {e}") from e
    return paths
