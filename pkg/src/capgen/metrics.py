"""Corpus-level BLEU-4 with a single reference per hypothesis."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

from .errors import UsageError


@dataclass
class BleuReport:
    bleu4: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_json(self) -> dict:
        return {
            "bleu4": self.bleu4,
            "p": list(self.precisions),
            "bp": self.brevity_penalty,
            "hyp_len": self.hyp_len,
            "ref_len": self.ref_len,
        }

    def as_dict(self) -> dict:
        return asdict(self)


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    if n < 1:
        raise UsageError("n-gram order must be >= 1")
    tokens = tuple(tokens)
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


def bleu4(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], smoothing: str = "none") -> BleuReport:
    """Clipped n-gram precisions (n = 1..4) pooled over the corpus, uniform weights.

    ``smoothing="add_one"`` uses (matches + 1) / (total + 1) for every order,
    which keeps tiny corpora from collapsing to zero.  Unsmoothed, any zero
    precision makes the score 0.  An empty hypothesis side gives BP = 0.
    """
    if smoothing not in ("none", "add_one"):
        raise UsageError(f"unknown smoothing {smoothing!r}")
    if len(hypotheses) != len(references):
        raise UsageError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    if not hypotheses:
        raise UsageError("BLEU of an empty corpus is undefined")
    matches, totals = [0] * 4, [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            h, r = ngram_counts(hyp, n), ngram_counts(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(0, len(hyp) - n + 1)
    if smoothing == "add_one":
        precisions = [(m + 1) / (t + 1) for m, t in zip(matches, totals)]
    else:
        precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    else:
        bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    if min(precisions) > 0:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / 4)
    else:
        score = 0.0
    return BleuReport(score, precisions, bp, hyp_len, ref_len)
