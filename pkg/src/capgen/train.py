"""k-fold training loop, evaluation and JSON Lines logging."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import RunConfig, component_rng, derive_seed
from .data import ImageCache, caption_tokens, kfold_split, pad_batch, read_records
from .errors import NumericError, UsageError
from .inference import DecodeConfig, decode
from .metrics import BleuReport, bleu4
from .model import CaptionModel
from .objective import combined_loss
from .optim import Adam, ParamGroup, cawr_factor
from .vocab import Vocab, build_vocab


class JsonlLog:
    def __init__(self, path: Path | None):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            path.write_text("", encoding="utf-8")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


@dataclass
class Dataset:
    root: Path
    records: list
    tokens: list[list[str]]

    @classmethod
    def load(cls, root, preprocess: bool = True) -> "Dataset":
        root = Path(root)
        records, tokens = caption_tokens(read_records(root), preprocess)
        if not records:
            raise UsageError(f"no usable records in {root}")
        return cls(root, records, tokens)

    def image_path(self, i: int) -> Path:
        return self.root / self.records[i].image_file

    def __len__(self) -> int:
        return len(self.records)


def fold_plan(n: int, folds: int, seed: int) -> list[tuple[list[int], list[int]]]:
    """``(train indices, held-out indices)`` per fold; a single fold trains on everything."""
    if folds == 1:
        return [(list(range(n)), [])]
    parts = kfold_split(n, folds, derive_seed(seed, "folds"))
    return [
        (sorted(i for j, p in enumerate(parts) if j != f for i in p), parts[f])
        for f in range(folds)
    ]


def evaluate(model: CaptionModel, vocab: Vocab, data: Dataset, indices, cache: ImageCache,
             decode_cfg: DecodeConfig) -> tuple[BleuReport, list[list[str]]]:
    hyps, refs = [], []
    for i in indices:
        image = T.Tensor(cache.load(data.image_path(i), train_mode=False)[None])
        with T.no_grad():
            enc = model.encode(image)
        hyps.append(vocab.decode_tokens(decode(model, enc, decode_cfg).tokens))
        refs.append(data.tokens[i])
    return bleu4(hyps, refs), hyps


def train_fold(cfg: RunConfig, data: Dataset, train_idx: list[int], fold: int, log: JsonlLog,
               cache: ImageCache) -> tuple[CaptionModel, Vocab, Adam]:
    seed = cfg["train.seed"]
    vocab = build_vocab([data.tokens[i] for i in train_idx], cfg["train.min_count"])
    enc_cfg = cfg.encoder()
    model = CaptionModel(enc_cfg, cfg.decoder(vocab.size), component_rng(seed, "init", fold))
    groups = model.param_groups()
    opt = Adam(
        [
            ParamGroup("encoder", cfg["optim.lr_encoder"], groups["encoder"]),
            ParamGroup("decoder", cfg["optim.lr_decoder"], groups["decoder"]),
        ],
        weight_decay=cfg["optim.weight_decay"],
    )
    batch = cfg["train.batch_size"]
    steps_per_epoch = math.ceil(len(train_idx) / batch)
    sched = cfg.scheduler(steps_per_epoch)
    noise_cfg = cfg.noise()
    augment = cfg["data.augment"]
    shuffle_rng = component_rng(seed, "shuffle", fold)
    noise_rng = component_rng(seed, "noise", fold)
    aug_rng = component_rng(seed, "augment", fold)
    encoded = {i: vocab.encode(data.tokens[i]) for i in train_idx}

    step = 0
    for epoch in range(cfg["train.epochs"]):
        order = shuffle_rng.permutation(np.asarray(train_idx))
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            images = np.stack([cache.load(data.image_path(i), augment, aug_rng if augment else None) for i in idx])
            tokens = pad_batch([encoded[i] for i in idx])
            factor = cawr_factor(step, sched)
            with T.Tape():
                enc = model.encode(T.Tensor(images))
                losses = combined_loss(model, enc, tokens, noise_cfg, noise_rng)
                T.backward(losses.total)
            values = losses.values()
            record = {"event": "step", "fold": fold, "epoch": epoch, "step": step, "lr_factor": factor, **values}
            log.write(record)
            if not all(math.isfinite(v) for v in values.values()):
                raise NumericError(f"non-finite loss at fold {fold} step {step}")
            opt.step(factor)
            opt.zero_grad()
            step += 1
    return model, vocab, opt


def train(cfg: RunConfig, data_dir, out_dir) -> list[Path]:
    """Train one model per fold; writes ``fold{i}.ckpt``, ``train_log.jsonl`` and ``config.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log = JsonlLog(out / "train_log.jsonl")
    log.write({"event": "config", "config": cfg.to_dict()})
    data = Dataset.load(data_dir, cfg["data.preprocess"])
    cache = ImageCache(cfg["encoder.image_size"])
    paths = []
    for fold, (train_idx, held_idx) in enumerate(fold_plan(len(data), cfg["train.folds"], cfg["train.seed"])):
        model, vocab, opt = train_fold(cfg, data, train_idx, fold, log, cache)
        path = out / f"fold{fold}.ckpt"
        checkpoint.save(path, checkpoint.from_model(cfg, vocab, model, fold, opt))
        paths.append(path)
        if held_idx:
            report, _ = evaluate(model, vocab, data, held_idx, cache, cfg.decode())
            log.write({"event": "fold_eval", "fold": fold, "beam": cfg["decode.beam"], **report.to_json()})
    return paths
