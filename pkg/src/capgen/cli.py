"""``capgen`` command line: train | caption | eval | attention.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import checkpoint
from . import tensor as T
from .config import RunConfig
from .data import ImageCache
from .errors import CapgenError
from .inference import DecodeConfig, decode, export_attention, greedy_decode, words_and_alphas
from .train import Dataset, evaluate, train

log = logging.getLogger("capgen")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="capgen", description="Image captioning: windowed-attention encoder + attention LSTM.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model per cross-validation fold")
    p.add_argument("--data", required=True, help="dataset root (captions.jsonl + images/)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON config; every key has a default")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--beam", type=int, help="beam width for held-out evaluation")
    p.add_argument("--max-len", type=int)
    p.add_argument("--no-noise", action="store_true", help="disable the corrupted-input loss term")
    p.add_argument("--no-augment", action="store_true", help="disable flip/crop augmentation")
    p.add_argument("--no-preprocess", action="store_true", help="keep captions raw (no cleaning)")
    p.add_argument("--no-beam", action="store_true", help="greedy decoding (same as --beam 1)")

    p = sub.add_parser("caption", help="caption one image")
    p.add_argument("ckpt")
    p.add_argument("image")
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", type=int)

    p = sub.add_parser("eval", help="corpus BLEU-4 over a dataset")
    p.add_argument("ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", help="optional JSON Lines file with one caption per image")

    p = sub.add_parser("attention", help="write one attention map (PGM) per generated word")
    p.add_argument("ckpt")
    p.add_argument("image")
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int)
    return parser


def _train_config(args) -> RunConfig:
    overrides = {}
    for flag, key in (("seed", "train.seed"), ("folds", "train.folds"), ("epochs", "train.epochs"),
                      ("beam", "decode.beam"), ("max_len", "decode.max_len")):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    if args.no_noise:
        overrides["noise.enabled"] = False
    if args.no_augment:
        overrides["data.augment"] = False
    if args.no_preprocess:
        overrides["data.preprocess"] = False
    if args.no_beam:
        overrides["decode.beam"] = 1
    if args.config:
        return RunConfig.from_file(args.config, overrides)
    return RunConfig(overrides)


def _decode_config(ckpt, args) -> DecodeConfig:
    base = ckpt.config.decode()
    beam = getattr(args, "beam", None)
    return DecodeConfig(
        beam_width=base.beam_width if beam is None else beam,
        max_len=base.max_len if args.max_len is None else args.max_len,
    )


def _encode_image(model, ckpt, path):
    cache = ImageCache(ckpt.config["encoder.image_size"])
    with T.no_grad():
        return model.encode(T.Tensor(cache.load(path, train_mode=False)[None]))


def cmd_train(args) -> int:
    cfg = _train_config(args)
    paths = train(cfg, args.data, args.out)
    for p in paths:
        print(p)
    return 0


def cmd_caption(args) -> int:
    ckpt = checkpoint.load(args.ckpt)
    model = checkpoint.build_model(ckpt)
    enc = _encode_image(model, ckpt, args.image)
    beam = decode(model, enc, _decode_config(ckpt, args))
    print(ckpt.vocab.decode(beam.tokens))
    return 0


def cmd_eval(args) -> int:
    ckpt = checkpoint.load(args.ckpt)
    model = checkpoint.build_model(ckpt)
    data = Dataset.load(args.data, ckpt.config["data.preprocess"])
    cache = ImageCache(ckpt.config["encoder.image_size"])
    report, hyps = evaluate(model, ckpt.vocab, data, range(len(data)), cache, _decode_config(ckpt, args))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            for rec, hyp in zip(data.records, hyps):
                f.write(json.dumps({"id": rec.id, "caption": " ".join(hyp)}, ensure_ascii=False) + "\n")
    print(json.dumps(report.to_json()))
    return 0


def cmd_attention(args) -> int:
    ckpt = checkpoint.load(args.ckpt)
    model = checkpoint.build_model(ckpt)
    enc = _encode_image(model, ckpt, args.image)
    cfg = _decode_config(ckpt, args)
    beam = greedy_decode(model, enc, cfg)
    words, maps = words_and_alphas(beam, ckpt.vocab)
    paths = export_attention(maps, enc.grid_h, enc.grid_w,
                             ckpt.config["encoder.image_size"], args.out, words)
    print(" ".join(words))
    for p in paths:
        print(p)
    return 0


COMMANDS = {"train": cmd_train, "caption": cmd_caption, "eval": cmd_eval, "attention": cmd_attention}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help and usage errors
        return int(e.code or 0)
    try:
        return COMMANDS[args.command](args)
    except CapgenError as e:
        print(f"capgen: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
