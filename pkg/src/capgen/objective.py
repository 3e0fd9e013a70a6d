"""Training loss: cross-entropy plus a weighted pass over corrupted inputs.

``total = main + beta * fake`` where ``main`` is the teacher-forced loss on
the clean caption and ``fake`` is the loss of a second teacher-forced pass
whose *inputs* were randomly corrupted but whose targets stay clean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderOutput
from .errors import ConfigError, UsageError
from .tensor import Tensor
from .vocab import NUM_SPECIALS, PAD_ID


@dataclass
class NoiseConfig:
    beta: float = 0.1
    corruption_rate: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("noise beta must be non-negative")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ConfigError("noise corruption rate must lie in [0, 1]")


@dataclass
class LossBreakdown:
    main: Tensor
    fake: Tensor | None
    total: Tensor
    beta: float

    def values(self) -> dict[str, float]:
        return {
            "main": self.main.item(),
            "fake": 0.0 if self.fake is None else self.fake.item(),
            "total": self.total.item(),
        }


def cross_entropy(logits: Tensor, targets, pad_id: int = PAD_ID) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over non-pad positions.

    ``logits`` is ``[..., N]`` and ``targets`` has the leading shape of ``logits``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise UsageError(f"targets {targets.shape} do not match logits {logits.shape}")
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise UsageError("every target position is padding")
    if targets[keep].max() >= logits.shape[-1] or targets[keep].min() < 0:
        raise UsageError(f"target id outside {logits.shape[-1]} classes")
    picked = T.gather(T.log_softmax(logits, axis=-1), np.where(keep, targets, 0))
    masked = T.mul(picked, Tensor(keep, dtype=logits.dtype))
    return T.div_scalar(T.neg(T.sum(masked)), float(count))


def corrupt_targets(tokens, cfg: NoiseConfig, rng: np.random.Generator, vocab_size: int):
    """Replace each non-special position, with probability ``rate``, by a different non-special id.

    Returns ``(corrupted, changed_mask)``.  Special markers (pad/start/end/unk)
    are never touched.  Random draws are taken for every position so the
    stream consumption does not depend on the data.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    hit = rng.random(tokens.shape) < cfg.corruption_rate
    n_regular = vocab_size - NUM_SPECIALS
    offsets = rng.integers(0, max(n_regular - 1, 1), size=tokens.shape)
    eligible = tokens >= NUM_SPECIALS
    changed = hit & eligible if n_regular > 1 else np.zeros_like(hit)
    # draw from the n_regular - 1 ids that differ from the original
    replacement = NUM_SPECIALS + offsets
    replacement = np.where(replacement >= tokens, replacement + 1, replacement)
    return np.where(changed, replacement, tokens), changed


def combined_loss(model, enc: EncoderOutput, tokens, cfg: NoiseConfig, rng: np.random.Generator) -> LossBreakdown:
    """Clean and corrupted teacher-forced passes on one tape, combined as ``main + beta * fake``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    targets = tokens[:, 1:]
    logits, _ = model.decoder.teacher_forced_forward(tokens, enc)
    main = cross_entropy(logits, targets)
    if not cfg.enabled:
        return LossBreakdown(main, None, main, 0.0)
    corrupted, _ = corrupt_targets(tokens, cfg, rng, model.vocab_size)
    fake_logits, _ = model.decoder.teacher_forced_forward(corrupted, enc)
    fake = cross_entropy(fake_logits, targets)
    return LossBreakdown(main, fake, T.add(main, T.scale(fake, cfg.beta)), cfg.beta)
