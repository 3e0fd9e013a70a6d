"""Tiny synthetic dataset of coloured-block images with short captions.

    python -m capgen.synthetic OUT_DIR [--size 32]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from .imageio import write_ppm

# (background, block colour, block box as fractions (top, left, bottom, right), caption)
TOY_SAMPLES = [
    ((20, 20, 20), (230, 30, 30), (0.1, 0.1, 0.6, 0.6), "Khối đỏ bên trái."),
    ((20, 20, 20), (30, 200, 60), (0.4, 0.4, 0.9, 0.9), "Khối xanh lá bên phải"),
    ((40, 40, 90), (240, 220, 40), (0.25, 0.25, 0.75, 0.75), "Hai khối vàng ở giữa!"),
    ((90, 40, 40), (245, 245, 245), (0.0, 0.3, 0.5, 0.7), "người đeo khẩu trang trắng"),
    ((30, 70, 30), (40, 80, 230), (0.5, 0.0, 1.0, 0.5), "Bác sĩ mặc áo xanh dương"),
    ((200, 200, 200), (150, 40, 200), (0.2, 0.6, 0.8, 1.0), "chai nước rửa tay màu tím"),
    ((120, 90, 20), (30, 220, 220), (0.6, 0.2, 1.0, 0.8), "Bệnh viện có 3 giường trống"),
    ((10, 60, 110), (250, 140, 20), (0.0, 0.0, 1.0, 0.4), "Nhân viên y tế: cam!"),
]


def block_image(size: int, background, colour, box) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = background
    top, left, bottom, right = (int(round(f * size)) for f in box)
    img[top:bottom, left:right] = colour
    return img


def make_toy_dataset(root, size: int = 32, samples=TOY_SAMPLES) -> Path:
    """Write ``images/*.ppm`` and ``captions.jsonl`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (bg, fg, box, caption) in enumerate(samples):
        rel = f"images/toy{i}.ppm"
        write_ppm(root / rel, block_image(size, bg, fg, box))
        lines.append(json.dumps({"id": f"toy{i}", "file": rel, "caption": caption}, ensure_ascii=False))
    (root / "captions.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out")
    parser.add_argument("--size", type=int, default=32)
    args = parser.parse_args(argv)
    make_toy_dataset(args.out, args.size)


if __name__ == "__main__":
    main()
