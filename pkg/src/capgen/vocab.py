"""Caption cleaning, whitespace tokenization and the token/id map."""

from __future__ import annotations

import logging
import unicodedata
from collections import Counter
from typing import Iterable, Sequence

from .errors import UsageError

log = logging.getLogger(__name__)

PAD_ID, START_ID, END_ID, UNK_ID = 0, 1, 2, 3
SPECIALS = ("<pad>", "<start>", "<end>", "<unk>")
NUM_SPECIALS = len(SPECIALS)


def _drop(ch: str) -> bool:
    cat = unicodedata.category(ch)
    return cat.startswith("P") or cat == "Nd"


def _clean_once(text: str) -> str:
    text = unicodedata.normalize("NFC", text).lower()
    text = "".join(" " if _drop(ch) else ch for ch in text)
    return unicodedata.normalize("NFC", " ".join(text.split()))


def clean_caption(raw: str) -> str:
    """Lowercase, strip punctuation and decimal digits, collapse whitespace.

    Punctuation becomes a word boundary, so "a,b" yields "a b".  Diacritics are
    kept (NFC).  A second pass is applied until the text stops changing, which
    covers the rare cases where lowercasing or removal exposes a new
    composition.
    """
    text = _clean_once(raw)
    for _ in range(4):
        again = _clean_once(text)
        if again == text:
            break
        text = again
    return text


def tokenize(caption: str, preprocess: bool = True) -> list[str]:
    """Word tokens; with ``preprocess=False`` the raw caption is only split on whitespace."""
    return (clean_caption(caption) if preprocess else caption).split()


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        """``tokens`` are the regular words in id order, starting at id 4."""
        self.itos = list(SPECIALS) + list(tokens)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise UsageError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def size(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi and self.stoi[token] >= NUM_SPECIALS

    def words(self) -> list[str]:
        return self.itos[NUM_SPECIALS:]

    def encode(self, tokens: Iterable[str] | str) -> list[int]:
        if isinstance(tokens, str):
            tokens = tokens.split()
        ids = [self.stoi.get(t, UNK_ID) for t in tokens]
        # a literal "<pad>" in the text is an ordinary unknown word
        ids = [UNK_ID if i < NUM_SPECIALS else i for i in ids]
        return [START_ID] + ids + [END_ID]

    def decode_tokens(self, ids: Iterable[int]) -> list[str]:
        """Words for ``ids``; stops at the end marker, drops pad/start, keeps ``<unk>``."""
        out = []
        for i in ids:
            i = int(i)
            if i == END_ID:
                break
            if i in (PAD_ID, START_ID):
                continue
            out.append(self.itos[i])
        return out

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode_tokens(ids))


def build_vocab(captions: Iterable[str | Sequence[str]], min_count: int = 1) -> Vocab:
    """Words with frequency >= ``min_count``, ordered by (frequency desc, token)."""
    counts: Counter[str] = Counter()
    for cap in captions:
        counts.update(cap.split() if isinstance(cap, str) else cap)
    if not counts:
        raise UsageError("cannot build a vocabulary from zero tokens")
    kept = [(tok, n) for tok, n in counts.items() if n >= min_count and tok not in SPECIALS]
    kept.sort(key=lambda kv: (-kv[1], kv[0]))
    return Vocab([tok for tok, _ in kept])
