import json
import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from capgen import tensor as T
from capgen.decoder import Decoder, DecoderConfig
from capgen.encoder import EncoderOutput
from capgen.synthetic import make_toy_dataset

sys.path.insert(0, str(Path(__file__).parent))

# Toy overfit setup: one-stage encoder on 32x32 images, learning rates 10x the
# full-size defaults (1e-4 / 4e-4) with the same 1:4 ratio, one 500-step cosine.
TOY_CONFIG_PATH = Path(__file__).parent.parent / "configs" / "toy.json"

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _debug_checks():
    T.set_debug(True)
    yield
    T.set_debug(False)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    return make_toy_dataset(tmp_path_factory.mktemp("toy"))


@pytest.fixture(scope="session")
def toy_config_file():
    return TOY_CONFIG_PATH


@pytest.fixture(scope="session")
def overfit_run(toy_data, toy_config_file, tmp_path_factory):
    """Train the toy overfit model once per session through the CLI entry point."""
    from capgen.cli import main

    out = tmp_path_factory.mktemp("overfit")
    t0 = time.perf_counter()
    code = main(["train", "--data", str(toy_data), "--out", str(out), "--config", str(toy_config_file)])
    seconds = time.perf_counter() - t0
    assert code == 0
    return SimpleNamespace(out=out, ckpt=out / "fold0.ckpt", seconds=seconds, data=toy_data)


def quick_train(data, config_file, out, *flags, epochs=2):
    """A few-epoch toy run through the CLI; returns the exit code."""
    from capgen.cli import main

    return main(["train", "--data", str(data), "--out", str(out), "--config", str(config_file),
                 "--epochs", str(epochs), *flags])


def read_log(out):
    with open(Path(out) / "train_log.jsonl", encoding="utf-8") as f:
        return [json.loads(line) for line in f]


def tiny_decoder(rng, vocab_size=5, enc_dim=6, embed_dim=4, hidden_dim=5, num_layers=1):
    """A stand-in model exposing ``.decoder`` and ``.vocab_size`` for decoding tests."""
    cfg = DecoderConfig(vocab_size, enc_dim, embed_dim, hidden_dim, num_layers)
    return SimpleNamespace(decoder=Decoder(cfg, rng), vocab_size=vocab_size)


def random_encoding(rng, length=4, dim=6, batch=1, scale=1.0):
    feats = rng.uniform(-scale, scale, size=(batch, length, dim))
    return EncoderOutput(T.Tensor(feats), 1, length)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
