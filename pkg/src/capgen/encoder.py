"""Hierarchical windowed-attention image encoder (Swin style).

Token grids are carried as ``[B, Hg, Wg, D]`` tensors.  A stage is a run of
blocks alternating plain and cyclically shifted window attention; stages are
joined by 2x2 patch merging, which halves the grid and doubles the width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import LayerNorm, Linear, Module, Parameter
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass
class EncoderConfig:
    image_size: int = 224
    patch_size: int = 4
    embed_dim: int = 32
    stages: list = field(default_factory=lambda: [(2, 2), (2, 4)])
    window_size: int = 4
    mlp_ratio: float = 2.0
    use_relative_bias: bool = True

    def __post_init__(self):
        self.stages = [tuple(int(v) for v in s) for s in self.stages]
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not self.stages:
            raise ConfigError("encoder needs at least one stage")
        side, dim = self.image_size // self.patch_size, self.embed_dim
        for i, (blocks, heads) in enumerate(self.stages):
            if blocks < 1 or heads < 1:
                raise ConfigError(f"stage {i}: blocks and heads must be positive")
            if side % self.window_size:
                raise ConfigError(f"stage {i}: grid side {side} not divisible by window_size {self.window_size}")
            if dim % heads:
                raise ConfigError(f"stage {i}: width {dim} not divisible by {heads} heads")
            if i + 1 < len(self.stages):
                if side % 2:
                    raise ConfigError(f"stage {i}: odd grid side {side} cannot be merged")
                side, dim = side // 2, dim * 2
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def out_dim(self) -> int:
        return self.embed_dim * 2 ** (len(self.stages) - 1)

    @property
    def out_side(self) -> int:
        return self.image_size // self.patch_size // 2 ** (len(self.stages) - 1)


@dataclass
class EncoderOutput:
    """Encoder feature grid flattened row-major to ``[B, L, D]``."""

    features: Tensor
    grid_h: int
    grid_w: int

    @property
    def batch(self) -> int:
        return self.features.shape[0]

    @property
    def length(self) -> int:
        return self.features.shape[1]

    def select(self, rows) -> "EncoderOutput":
        """Detached copy holding the given batch rows (repeats allowed)."""
        return EncoderOutput(Tensor._wrap(self.features.data[np.asarray(rows)]), self.grid_h, self.grid_w)


# -- grid plumbing -----------------------------------------------------------


def _as_batched(x: Tensor) -> Tensor:
    return T.reshape(x, (1,) + x.shape) if x.ndim == 3 else x


def window_partition(x: Tensor, window: int) -> Tensor:
    """``[B, Hg, Wg, D]`` (or ``[Hg, Wg, D]``) to ``[B*nW, M*M, D]``.

    Windows are numbered row-major within each image, images batch-major.
    Token (r, c) lands in window (r // M, c // M) at offset (r % M) * M + c % M.
    """
    x = _as_batched(x)
    b, hg, wg, d = x.shape
    if hg % window or wg % window:
        raise ConfigError(f"grid {hg}x{wg} not divisible by window {window}")
    y = T.reshape(x, (b, hg // window, window, wg // window, window, d))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (-1, window * window, d))


def window_reverse(windows: Tensor, window: int, grid_h: int, grid_w: int) -> Tensor:
    """Inverse of :func:`window_partition`; always returns ``[B, Hg, Wg, D]``."""
    if grid_h % window or grid_w % window:
        raise ConfigError(f"grid {grid_h}x{grid_w} not divisible by window {window}")
    d = windows.shape[-1]
    y = T.reshape(windows, (-1, grid_h // window, grid_w // window, window, window, d))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (-1, grid_h, grid_w, d))


def cyclic_shift(x: Tensor, shift: int, inverse: bool = False) -> Tensor:
    """Roll the grid axes by (-s, -s); ``inverse=True`` rolls back by (+s, +s)."""
    if shift == 0:
        return x
    s = shift if inverse else -shift
    return T.roll(x, (s, s), (-3, -2))


def shifted_window_mask(grid_h: int, grid_w: int, window: int, shift: int) -> np.ndarray:
    """Additive ``[nW, M*M, M*M]`` bias blocking pairs that came from different regions.

    After the cyclic roll, windows on the bottom/right edge hold tokens that
    were not adjacent in the image; those pairs get ``MASK_VALUE``.
    """
    labels = np.zeros((grid_h, grid_w), dtype=np.int64)
    bands = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    count = 0
    for hs in bands:
        for ws in bands:
            labels[hs, ws] = count
            count += 1
    lw = labels.reshape(grid_h // window, window, grid_w // window, window)
    lw = lw.transpose(0, 2, 1, 3).reshape(-1, window * window)
    differs = lw[:, :, None] != lw[:, None, :]
    return np.where(differs, MASK_VALUE, 0.0)


def relative_position_index(window: int) -> np.ndarray:
    """``[M*M, M*M]`` index into a ``(2M-1)^2`` bias table, keyed by (dr, dc)."""
    rows, cols = np.meshgrid(np.arange(window), np.arange(window), indexing="ij")
    coords = np.stack([rows.ravel(), cols.ravel()])
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


# -- layers ------------------------------------------------------------------


class PatchEmbed(Module):
    def __init__(self, rng, patch_size: int, embed_dim: int, image_size: int):
        self.patch_size = patch_size
        self.image_size = image_size
        self.proj = Linear(rng, 3 * patch_size * patch_size, embed_dim)

    def __call__(self, images: Tensor) -> Tensor:
        """``[B, 3, H, W]`` (or ``[3, H, W]``) to a ``[B, H/p, W/p, D0]`` token grid."""
        if images.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        b, ch, h, w = images.shape
        p = self.patch_size
        if ch != 3 or h != self.image_size or w != self.image_size:
            raise ConfigError(f"expected images of shape [B, 3, {self.image_size}, {self.image_size}], got {images.shape}")
        y = T.reshape(images, (b, 3, h // p, p, w // p, p))
        y = T.transpose(y, (0, 2, 4, 1, 3, 5))
        y = T.reshape(y, (b, h // p, w // p, 3 * p * p))
        return self.proj(y)


def patch_embed(image: Tensor, embed: PatchEmbed) -> Tensor:
    """Flattened ``[(H/p)(W/p), D0]`` patch tokens for a single ``[3, H, W]`` image."""
    grid = embed(image)
    return T.reshape(grid, (-1, grid.shape[-1]))


class WindowAttention(Module):
    def __init__(self, rng, dim: int, heads: int, window: int, use_relative_bias: bool = True):
        if dim % heads:
            raise ShapeError(f"width {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.window = dim, heads, window
        self.qkv = Linear(rng, dim, 3 * dim)
        self.proj = Linear(rng, dim, dim)
        self.relative_bias = (
            Parameter(np.zeros(((2 * window - 1) ** 2, heads))) if use_relative_bias else None
        )
        self._rel_index = relative_position_index(window).reshape(-1)

    def scores(self, tokens: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Pre-softmax scores ``[nWB, h, N, N]`` and values ``[nWB, h, N, d]``."""
        nwb, n, dim = tokens.shape
        if dim != self.dim:
            raise ShapeError(f"window tokens have width {dim}, layer expects {self.dim}")
        hd = dim // self.heads
        qkv = T.reshape(self.qkv(tokens), (nwb, n, 3, self.heads, hd))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        s = T.matmul(T.scale(q, hd**-0.5), T.transpose(k, (0, 1, 3, 2)))
        if self.relative_bias is not None:
            bias = T.take(self.relative_bias, self._rel_index)
            bias = T.transpose(T.reshape(bias, (n, n, self.heads)), (2, 0, 1))
            s = T.add(s, T.expand(bias, s.shape))
        if mask is not None:
            nw = mask.shape[0]
            tiled = np.broadcast_to(mask[None, :, None], (nwb // nw, nw, self.heads, n, n))
            s = T.add(s, Tensor(tiled.reshape(s.shape), dtype=s.dtype))
        return s, v

    def __call__(self, tokens: Tensor, mask: np.ndarray | None = None, return_weights: bool = False):
        s, v = self.scores(tokens, mask)
        attn = T.softmax(s, axis=-1)
        out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        out = self.proj(T.reshape(out, tokens.shape))
        return (out, attn) if return_weights else out


def window_attention(tokens: Tensor, layer: WindowAttention, mask: np.ndarray | None = None) -> Tensor:
    return layer(tokens, mask)


class Mlp(Module):
    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class SwinBlock(Module):
    def __init__(self, rng, dim, heads, window, shift, grid, mlp_ratio, use_relative_bias):
        self.window = window
        # a single window already sees the whole grid, shifting would only wrap it
        self.shift = 0 if grid <= window else shift
        self.grid = grid
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(rng, dim, heads, window, use_relative_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio))
        self._mask = shifted_window_mask(grid, grid, window, self.shift) if self.shift else None

    def __call__(self, x: Tensor) -> Tensor:
        y = cyclic_shift(self.norm1(x), self.shift)
        y = self.attn(window_partition(y, self.window), self._mask)
        y = cyclic_shift(window_reverse(y, self.window, self.grid, self.grid), self.shift, inverse=True)
        x = T.add(x, y)
        return T.add(x, self.mlp(self.norm2(x)))


class PatchMerge(Module):
    """Concatenate each 2x2 neighbourhood (order: (0,0), (1,0), (0,1), (1,1)) and project 4D -> 2D."""

    def __init__(self, rng, dim: int):
        self.reduction = Linear(rng, 4 * dim, 2 * dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = _as_batched(x)
        b, hg, wg, d = x.shape
        if hg % 2 or wg % 2:
            raise ConfigError(f"cannot merge odd grid {hg}x{wg}")
        y = T.reshape(x, (b, hg // 2, 2, wg // 2, 2, d))
        y = T.transpose(y, (0, 1, 3, 4, 2, 5))
        return self.reduction(T.reshape(y, (b, hg // 2, wg // 2, 4 * d)))


def patch_merge(x: Tensor, layer: PatchMerge) -> Tensor:
    return layer(x)


class Stage(Module):
    def __init__(self, rng, dim, blocks, heads, grid, cfg: EncoderConfig):
        shift = cfg.window_size // 2
        self.blocks = [
            SwinBlock(rng, dim, heads, cfg.window_size, shift if i % 2 else 0, grid, cfg.mlp_ratio, cfg.use_relative_bias)
            for i in range(blocks)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(rng, cfg.patch_size, cfg.embed_dim, cfg.image_size)
        grid, dim = cfg.image_size // cfg.patch_size, cfg.embed_dim
        self.stages, self.merges = [], []
        for i, (blocks, heads) in enumerate(cfg.stages):
            self.stages.append(Stage(rng, dim, blocks, heads, grid, cfg))
            if i + 1 < len(cfg.stages):
                self.merges.append(PatchMerge(rng, dim))
                grid, dim = grid // 2, dim * 2
        self.norm = LayerNorm(dim)

    def __call__(self, images: Tensor) -> EncoderOutput:
        return encode(images, self)


def encode(images: Tensor, encoder: Encoder) -> EncoderOutput:
    """Run patch embedding, every stage (merging in between) and a final layer norm."""
    x = encoder.patch_embed(images)
    for i, stage in enumerate(encoder.stages):
        x = stage(x)
        if i < len(encoder.merges):
            x = encoder.merges[i](x)
    x = encoder.norm(x)
    b, gh, gw, d = x.shape
    return EncoderOutput(T.reshape(x, (b, gh * gw, d)), gh, gw)
