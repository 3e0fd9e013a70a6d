"""Dataset records, image loading/augmentation and k-fold splitting.

Dataset layout::

    root/
      captions.jsonl   # {"id": ..., "file": "images/x.ppm", "caption": ...} per line
      images/*.ppm
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .imageio import read_ppm
from .vocab import PAD_ID, Vocab, tokenize

log = logging.getLogger(__name__)

MEAN = np.array([0.485, 0.456, 0.406])
STD = np.array([0.229, 0.224, 0.225])


@dataclass
class CaptionRecord:
    id: str
    image_file: str
    caption: str


def read_records(root) -> list[CaptionRecord]:
    root = Path(root)
    path = root / "captions.jsonl"
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"cannot read {path}: {e}") from e
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = CaptionRecord(str(obj["id"]), str(obj["file"]), str(obj["caption"]))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"{path}:{lineno}: malformed record ({e})") from e
        resolved = (root / rec.image_file).resolve()
        if root.resolve() not in resolved.parents:
            raise DataError(f"{path}:{lineno}: image {rec.image_file!r} escapes the dataset root")
        records.append(rec)
    return records


def caption_tokens(records, preprocess: bool = True) -> tuple[list[CaptionRecord], list[list[str]]]:
    """Tokenize captions, dropping (with a warning) records that end up empty."""
    kept, tokens = [], []
    for rec in records:
        toks = tokenize(rec.caption, preprocess)
        if not toks:
            log.warning("dropping record %s: caption is empty after cleaning", rec.id)
            continue
        kept.append(rec)
        tokens.append(toks)
    return kept, tokens


def pad_batch(sequences: list[list[int]], pad_id: int = PAD_ID) -> np.ndarray:
    width = max(len(s) for s in sequences)
    out = np.full((len(sequences), width), pad_id, dtype=np.int64)
    for i, s in enumerate(sequences):
        out[i, : len(s)] = s
    return out


def encode_captions(tokens: list[list[str]], vocab: Vocab) -> list[list[int]]:
    return [vocab.encode(t) for t in tokens]


# -- images ------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of ``[H, W, C]`` to ``[size, size, C]`` (no antialiasing)."""
    h, w = img.shape[:2]

    def axis(n_in):
        pos = np.clip((np.arange(size) + 0.5) * n_in / size - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(h)
    x0, x1, wx = axis(w)
    img = img.astype(np.float64)
    top = img[y0][:, x0] * (1 - wx)[None, :, None] + img[y0][:, x1] * wx[None, :, None]
    bot = img[y1][:, x0] * (1 - wx)[None, :, None] + img[y1][:, x1] * wx[None, :, None]
    return top * (1 - wy)[:, None, None] + bot * wy[:, None, None]


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1]


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[top:top + size, left:left + size]


def normalize(img01: np.ndarray) -> np.ndarray:
    """``[H, W, 3]`` in [0, 1] to a channel-first normalised ``[3, H, W]`` float32 array."""
    return ((img01 - MEAN) / STD).transpose(2, 0, 1).astype(np.float32)


def resize_side(image_size: int) -> int:
    """Resize target before cropping: 256 for 224 inputs, scaled alike for other sizes."""
    return int(round(image_size * 256 / 224))


def augment(img: np.ndarray, image_size: int, rng: np.random.Generator | None,
            flip_p: float = 0.5, crop_p: float = 0.5) -> np.ndarray:
    """Train mode when ``rng`` is given: flip with ``flip_p``, random crop with ``crop_p``
    (center crop otherwise).  Eval mode (``rng=None``) always center-crops."""
    if rng is None:
        return center_crop(img, image_size)
    flip, crop = rng.random() < flip_p, rng.random() < crop_p
    if flip:
        img = hflip(img)
    return random_crop(img, image_size, rng) if crop else center_crop(img, image_size)


class ImageCache:
    """Resized images in [0, 1], keyed by path; decoding and resizing happen once."""

    def __init__(self, image_size: int):
        self.image_size = image_size
        self._cache: dict[str, np.ndarray] = {}

    def resized(self, path) -> np.ndarray:
        key = str(path)
        if key not in self._cache:
            pixels, maxval = read_ppm(path)
            self._cache[key] = resize_bilinear(pixels / maxval, resize_side(self.image_size))
        return self._cache[key]

    def load(self, path, train_mode: bool, rng: np.random.Generator | None = None) -> np.ndarray:
        if train_mode and rng is None:
            raise UsageError("train-mode loading needs a random source")
        img = augment(self.resized(path), self.image_size, rng if train_mode else None)
        return normalize(img)


def load_and_augment(image_file, train_mode: bool, rng: np.random.Generator | None = None,
                     image_size: int = 224) -> np.ndarray:
    """Read a PPM, resize, (randomly) crop/flip, scale to [0, 1] and normalise to ``[3, S, S]``."""
    return ImageCache(image_size).load(image_file, train_mode, rng)


# -- folds -------------------------------------------------------------------


def kfold_split(n: int, k: int = 4, seed: int = 0) -> list[list[int]]:
    """Seeded shuffle then round-robin: disjoint, covering, sizes within 1."""
    if k < 1:
        raise UsageError("k must be >= 1")
    if n < k:
        raise UsageError(f"cannot split {n} samples into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [sorted(int(i) for i in perm[f::k]) for f in range(k)]
