"""Run configuration: a flat map of dotted keys with full defaults.

A JSON config may use either dotted keys (``{"noise.beta": 0.2}``) or nested
sections (``{"noise": {"beta": 0.2}}``).  Unknown keys are rejected.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import numpy as np

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .inference import DecodeConfig
from .objective import NoiseConfig
from .optim import SchedulerConfig

DEFAULTS: dict[str, object] = {
    "encoder.image_size": 224,
    "encoder.patch_size": 4,
    "encoder.embed_dim": 32,
    "encoder.stages": [[2, 2], [2, 4]],
    "encoder.window_size": 4,
    "encoder.mlp_ratio": 2.0,
    "encoder.use_relative_bias": True,
    "decoder.embed_dim": 32,
    "decoder.hidden_dim": 64,
    "decoder.num_layers": 1,
    "noise.beta": 0.1,
    "noise.rate": 0.1,
    "noise.enabled": True,
    "optim.lr_encoder": 1e-4,
    "optim.lr_decoder": 4e-4,
    "optim.weight_decay": 1e-6,
    "sched.T0": None,
    "sched.T_mult": 1.0,
    "sched.eta_min": 0.0,
    "train.batch_size": 16,
    "train.epochs": 10,
    "train.seed": 0,
    "train.folds": 4,
    "train.min_count": 1,
    "decode.beam": 2,
    "decode.max_len": 30,
    "data.augment": True,
    "data.preprocess": True,
}


def _flatten(obj: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in obj.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, full + "."))
        else:
            flat[full] = value
    return flat


def _check_type(key: str, value, default) -> object:
    if key == "sched.T0":
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{key} must be an integer or null")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        value = float(value)
    elif isinstance(default, list):
        if not isinstance(value, list) or not all(
            isinstance(s, list) and len(s) == 2 and all(isinstance(v, int) for v in s) for s in value
        ):
            raise ConfigError(f"{key} must be a list of [blocks, heads] pairs")
    return value


class RunConfig:
    def __init__(self, overrides: dict | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        for key, value in _flatten(overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = _check_type(key, value, DEFAULTS[key])
        self._validate()

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        merged = _flatten(obj)
        merged.update(overrides or {})
        return cls(merged)

    def replace(self, **dotted) -> "RunConfig":
        """Copy with overrides given as ``section__key=value`` keyword arguments."""
        merged = dict(self.values)
        merged.update({k.replace("__", "."): v for k, v in dotted.items()})
        return RunConfig(merged)

    def __getitem__(self, key: str):
        return self.values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self.values == other.values

    def _validate(self) -> None:
        self.encoder()
        self.noise()
        self.scheduler()
        self.decode()
        for key in ("train.batch_size", "train.folds", "train.min_count", "decoder.embed_dim",
                    "decoder.hidden_dim", "decoder.num_layers"):
            if self.values[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.values["train.epochs"] < 0:
            raise ConfigError("train.epochs must be >= 0")
        for key in ("optim.lr_encoder", "optim.lr_decoder"):
            if self.values[key] <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.values["optim.weight_decay"] < 0:
            raise ConfigError("optim.weight_decay must be >= 0")

    def encoder(self) -> EncoderConfig:
        v = self.values
        return EncoderConfig(
            image_size=v["encoder.image_size"],
            patch_size=v["encoder.patch_size"],
            embed_dim=v["encoder.embed_dim"],
            stages=[tuple(s) for s in v["encoder.stages"]],
            window_size=v["encoder.window_size"],
            mlp_ratio=v["encoder.mlp_ratio"],
            use_relative_bias=v["encoder.use_relative_bias"],
        )

    def decoder(self, vocab_size: int) -> DecoderConfig:
        v = self.values
        return DecoderConfig(
            vocab_size=vocab_size,
            enc_dim=self.encoder().out_dim,
            embed_dim=v["decoder.embed_dim"],
            hidden_dim=v["decoder.hidden_dim"],
            num_layers=v["decoder.num_layers"],
        )

    def noise(self) -> NoiseConfig:
        v = self.values
        return NoiseConfig(beta=v["noise.beta"], corruption_rate=v["noise.rate"], enabled=v["noise.enabled"])

    def scheduler(self, steps_per_epoch: int | None = None) -> SchedulerConfig:
        v = self.values
        t0 = v["sched.T0"] if v["sched.T0"] is not None else steps_per_epoch
        return SchedulerConfig(T0=t0, T_mult=v["sched.T_mult"], eta_min=v["sched.eta_min"])

    def decode(self) -> DecodeConfig:
        return DecodeConfig(beam_width=self.values["decode.beam"], max_len=self.values["decode.max_len"])

    def to_dict(self) -> dict:
        """Nested form, e.g. ``{"noise": {"beta": 0.1, ...}, ...}``."""
        nested: dict = {}
        for key, value in self.values.items():
            section, name = key.split(".", 1)
            nested.setdefault(section, {})[name] = copy.deepcopy(value)
        return nested

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def __repr__(self) -> str:
        return f"RunConfig({self.to_json()})"


def derive_seed(master: int, component: str, fold: int | None = None) -> int:
    """``master XOR blake2b-64(component:fold)``: independent, stable per-component streams."""
    digest = hashlib.blake2b(f"{component}:{fold}".encode(), digest_size=8).digest()
    return (int(master) ^ int.from_bytes(digest, "little")) & 0xFFFFFFFFFFFFFFFF


def component_rng(master: int, component: str, fold: int | None = None) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, component, fold))
