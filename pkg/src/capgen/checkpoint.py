"""Checkpoint file format.

Layout: magic ``VCKP``, u32 LE format version, u32 LE length of a UTF-8 JSON
header (config, vocabulary, fold, optimizer step), then records of
``u32 name length, UTF-8 name, tensor`` in the VCAP tensor format until EOF.
Optimizer moments, when saved, use the names ``optim.m/<param>`` and
``optim.v/<param>``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import CapgenError, CheckpointError
from .model import CaptionModel
from .optim import Adam
from .tensor import read_tensor, write_tensor
from .vocab import Vocab

MAGIC = b"VCKP"
VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    vocab: Vocab
    fold: int
    tensors: dict[str, np.ndarray]
    optim_t: int | None = None
    extra: dict = field(default_factory=dict)

    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "format_version": VERSION,
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.words(),
        "fold": ckpt.fold,
        "optim_t": ckpt.optim_t,
    }
    head = json.dumps(header, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(head)))
    buf.write(head)
    for name, array in ckpt.tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, array)
    return buf.getvalue()


def save(path, ckpt: Checkpoint) -> None:
    try:
        Path(path).write_bytes(checkpoint_bytes(ckpt))
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e


def from_model(config: RunConfig, vocab: Vocab, model: CaptionModel, fold: int = 0,
               optimizer: Adam | None = None) -> Checkpoint:
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    optim_t = None
    if optimizer is not None:
        optim_t = optimizer.state.t
        for name in model.named_parameters():
            if name in optimizer.state.m:
                tensors[f"optim.m/{name}"] = optimizer.state.m[name]
                tensors[f"optim.v/{name}"] = optimizer.state.v[name]
    return Checkpoint(config, vocab, fold, tensors, optim_t)


def load(path) -> Checkpoint:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    stream = io.BytesIO(payload)
    if stream.read(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, head_len = struct.unpack("<II", stream.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(stream.read(head_len).decode("utf-8"))
        config = RunConfig(header["config"])
        vocab = Vocab(header["vocab"])
        tensors = {}
        while stream.tell() < len(payload):
            (n,) = struct.unpack("<I", stream.read(4))
            name = stream.read(n).decode("utf-8")
            tensors[name] = read_tensor(stream)
    except CheckpointError:
        raise
    except (CapgenError, struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint ({e})") from e
    return Checkpoint(config, vocab, int(header["fold"]), tensors, header.get("optim_t"))


def build_model(ckpt: Checkpoint) -> CaptionModel:
    """Instantiate the model described by the checkpoint and copy its parameters in."""
    cfg = ckpt.config
    model = CaptionModel(cfg.encoder(), cfg.decoder(ckpt.vocab.size), np.random.default_rng(0))
    params = model.named_parameters()
    stored = ckpt.parameters()
    if set(params) != set(stored):
        missing = sorted(set(params) - set(stored))
        unexpected = sorted(set(stored) - set(params))
        raise CheckpointError(f"parameter names differ: missing {missing[:3]}, unexpected {unexpected[:3]}")
    for name, p in params.items():
        if p.shape != stored[name].shape:
            raise CheckpointError(f"{name}: checkpoint shape {stored[name].shape} != model shape {p.shape}")
        p.data = stored[name].astype(p.dtype).copy()
    return model
