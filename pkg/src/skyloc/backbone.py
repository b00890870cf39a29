"""Symmetric encoder-bottleneck-decoder dense feature extractor.

Token grids flow through pairs of windowed-attention blocks: a plain
window-partitioned block followed by one whose windows are cyclically
shifted by half a window, with additive masking so tokens never attend
across a wrapped seam.  The encoder halves resolution and doubles channels
per stage (patch merging), the decoder mirrors it (patch expansion) and
fuses the matching encoder tokens back in through skip connections, so the
output map sits at the patch stride with `base_dim` channels.

All forward functions are written against the autodiff tensor type; passing
weights that do not require gradients runs them as plain numpy. Forward
passes are pure functions of (image, weights), safe to run per image in
parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError

NEG_MASK = -1e30  # additive logit mask; exp underflows to exactly 0.0


@dataclass
class ArchConfig:
    """Architecture hyperparameters of the feature extractor."""

    patch_size: int = 4
    base_dim: int = 32
    window: int = 7
    encoder_stages: int = 3
    heads: tuple[int, ...] = (2, 4, 8, 16)  # per encoder stage, last entry = bottleneck
    mlp_ratio: float = 2.0
    output_stride: int = 4
    in_channels: int = 1

    def __post_init__(self):
        if self.patch_size < 1 or self.window < 1 or self.encoder_stages < 1:
            raise ConfigError("patch_size, window and encoder_stages must be >= 1")
        if self.output_stride != self.patch_size:
            raise ConfigError(
                "the decoder mirrors the encoder back to the patch grid, so "
                f"output_stride ({self.output_stride}) must equal patch_size ({self.patch_size})"
            )
        if len(self.heads) != self.encoder_stages + 1:
            raise ConfigError(
                f"heads must list {self.encoder_stages} encoder stages plus the bottleneck"
            )
        for i, h in enumerate(self.heads):
            if self.stage_dim(i) % h != 0:
                raise ConfigError(f"stage {i} dim {self.stage_dim(i)} not divisible by {h} heads")

    def stage_dim(self, stage: int) -> int:
        """Channel width at encoder stage `stage` (== encoder_stages -> bottleneck)."""
        return self.base_dim * (2**stage)


@dataclass
class DenseFeatureMap:
    """Per-pixel descriptor volume at a fixed stride below the input image."""

    values: np.ndarray  # (h, w, n)
    stride: int
    image_size: tuple[int, int]  # original (H, W) before any padding

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


# -- weight bookkeeping --------------------------------------------------------


def _block_spec(prefix: str, dim: int, heads: int, cfg: ArchConfig) -> dict[str, tuple[int, ...]]:
    b = cfg.window
    hidden = int(dim * cfg.mlp_ratio)
    return {
        f"{prefix}.ln1.g": (dim,),
        f"{prefix}.ln1.b": (dim,),
        f"{prefix}.attn.wq": (dim, dim),
        f"{prefix}.attn.bq": (dim,),
        f"{prefix}.attn.wk": (dim, dim),
        f"{prefix}.attn.bk": (dim,),
        f"{prefix}.attn.wv": (dim, dim),
        f"{prefix}.attn.bv": (dim,),
        f"{prefix}.attn.wo": (dim, dim),
        f"{prefix}.attn.bo": (dim,),
        f"{prefix}.attn.bias": (heads, 2 * b - 1, 2 * b - 1),
        f"{prefix}.ln2.g": (dim,),
        f"{prefix}.ln2.b": (dim,),
        f"{prefix}.mlp.w1": (dim, hidden),
        f"{prefix}.mlp.b1": (hidden,),
        f"{prefix}.mlp.w2": (hidden, dim),
        f"{prefix}.mlp.b2": (dim,),
    }


def weight_spec(cfg: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map for every parameter of the extractor."""
    spec: dict[str, tuple[int, ...]] = {}
    p, c0 = cfg.patch_size, cfg.base_dim
    spec["patch_embed.w"] = (p * p * cfg.in_channels, c0)
    spec["patch_embed.b"] = (c0,)
    for i in range(cfg.encoder_stages):
        dim = cfg.stage_dim(i)
        for j in (0, 1):
            spec.update(_block_spec(f"enc{i}.blk{j}", dim, cfg.heads[i], cfg))
        spec[f"merge{i}.w"] = (4 * dim, 2 * dim)
        spec[f"merge{i}.b"] = (2 * dim,)
    bdim = cfg.stage_dim(cfg.encoder_stages)
    for j in (0, 1):
        spec.update(_block_spec(f"bottleneck.blk{j}", bdim, cfg.heads[-1], cfg))
    for i in range(cfg.encoder_stages):
        din = cfg.stage_dim(cfg.encoder_stages - i)
        dout = din // 2
        spec[f"expand{i}.w"] = (din, 2 * din)
        spec[f"expand{i}.b"] = (2 * din,)
        spec[f"dec{i}.fuse.w"] = (2 * dout, dout)
        spec[f"dec{i}.fuse.b"] = (dout,)
        stage = cfg.encoder_stages - 1 - i
        for j in (0, 1):
            spec.update(_block_spec(f"dec{i}.blk{j}", dout, cfg.heads[stage], cfg))
    return spec


def init_weights(cfg: ArchConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded init: truncated normal (sigma 0.02, clipped at 2 sigma) for
    projections, ones for LN gains, zeros for biases and bias tables."""
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    for name, shape in weight_spec(cfg).items():
        if name.endswith((".g",)):
            weights[name] = np.ones(shape)
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2", ".bias")):
            weights[name] = np.zeros(shape)
        else:
            w = rng.normal(scale=0.02, size=shape)
            weights[name] = np.clip(w, -0.04, 0.04)
    return weights


def validate_weights(weights: dict, cfg: ArchConfig) -> None:
    """Reject missing, unknown, or mis-shaped arrays, naming the offender."""
    spec = weight_spec(cfg)
    for name, shape in spec.items():
        if name not in weights:
            raise ConfigError(f"missing weight array: {name}")
        got = tuple(np.shape(weights[name].data if isinstance(weights[name], T.Tensor) else weights[name]))
        if got != shape:
            raise ConfigError(f"weight {name} has shape {got}, expected {shape}")
    unknown = set(weights) - set(spec)
    if unknown:
        raise ConfigError(f"unknown weight arrays: {sorted(unknown)}")


def _w(weights: dict, name: str) -> T.Tensor:
    try:
        v = weights[name]
    except KeyError:
        raise ConfigError(f"missing weight array: {name}") from None
    return v if isinstance(v, T.Tensor) else T.Tensor(v)


# -- token grid plumbing --------------------------------------------------------


def patch_embed(image: np.ndarray, weights: dict, cfg: ArchConfig):
    """Flatten non-overlapping patches and project them to `base_dim` tokens.

    Images whose extents are not patch multiples are reflect-padded on the
    bottom/right first.  Returns (tokens, (pad_y, pad_x)).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.size == 0:
        raise ShapeError("empty image")
    if image.shape[2] != cfg.in_channels:
        raise ConfigError(f"image has {image.shape[2]} channels, config expects {cfg.in_channels}")
    p = cfg.patch_size
    hh, ww = image.shape[:2]
    pad_y, pad_x = (-hh) % p, (-ww) % p
    if pad_y or pad_x:
        image = np.pad(image, ((0, pad_y), (0, pad_x), (0, 0)), mode="reflect")
    hp, wp = image.shape[0] // p, image.shape[1] // p
    x = image.reshape(hp, p, wp, p, image.shape[2]).transpose(0, 2, 1, 3, 4).reshape(hp, wp, -1)
    tokens = T.add(T.matmul(T.Tensor(x), _w(weights, "patch_embed.w")), _w(weights, "patch_embed.b"))
    return tokens, (pad_y, pad_x)


def window_partition(tokens: T.Tensor, b: int) -> T.Tensor:
    """(h, w, c) -> (num_windows, b*b, c); extents must be multiples of b."""
    h, w, c = tokens.shape
    if h % b or w % b:
        raise ShapeError(f"grid {h}x{w} not divisible by window {b}")
    x = T.reshape(tokens, (h // b, b, w // b, b, c))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, ((h // b) * (w // b), b * b, c))


def window_merge(windows: T.Tensor, h: int, w: int, b: int) -> T.Tensor:
    """Inverse of `window_partition`."""
    c = windows.shape[-1]
    x = T.reshape(windows, (h // b, w // b, b, b, c))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (h, w, c))


def relative_bias_index(b: int) -> np.ndarray:
    """(b^2, b^2) lookup into a flattened (2b-1)^2 relative-position table."""
    coords = np.stack(np.meshgrid(np.arange(b), np.arange(b), indexing="ij"), axis=-1).reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :]  # offsets in [-b+1, b-1]
    return (rel[..., 0] + b - 1) * (2 * b - 1) + (rel[..., 1] + b - 1)


def window_attention(
    windows: T.Tensor,
    weights: dict,
    prefix: str,
    heads: int,
    b: int,
    mask: np.ndarray | None = None,
) -> T.Tensor:
    """Multi-head attention inside each window with relative position bias.

    `mask` is an optional additive (num_windows, b*b, b*b) logit mask.
    """
    nw, nt, c = windows.shape
    if nt != b * b:
        raise ShapeError(f"windows carry {nt} tokens, expected {b * b}")
    d = c // heads

    def proj(kind):
        y = T.add(T.matmul(windows, _w(weights, f"{prefix}.attn.w{kind}")), _w(weights, f"{prefix}.attn.b{kind}"))
        y = T.reshape(y, (nw, nt, heads, d))
        return T.transpose(y, (0, 2, 1, 3))  # (nw, heads, nt, d)

    q, k, v = proj("q"), proj("k"), proj("v")
    logits = T.div(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), math.sqrt(d))
    table = T.reshape(_w(weights, f"{prefix}.attn.bias"), (heads, (2 * b - 1) ** 2))
    bias = table[:, relative_bias_index(b)]  # (heads, nt, nt)
    logits = T.add(logits, bias)
    if mask is not None:
        logits = T.add(logits, mask[:, None, :, :])
    attn = T.softmax(logits, axis=-1)
    out = T.matmul(attn, v)  # (nw, heads, nt, d)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (nw, nt, c))
    return T.add(T.matmul(out, _w(weights, f"{prefix}.attn.wo")), _w(weights, f"{prefix}.attn.bo"))


def _seam_mask(h: int, w: int, hp: int, wp: int, b: int, shift: int) -> np.ndarray | None:
    """Additive attention mask for a padded, cyclically shifted (hp, wp) grid.

    Cells may attend each other only when contiguous in the original grid:
    same wrap band on both axes, and both inside the real (h, w) extent.
    Returns None when nothing needs masking.
    """
    if shift == 0 and hp == h and wp == w:
        return None
    ys = (np.arange(hp) + shift) % hp  # pre-roll row of each post-roll row
    xs = (np.arange(wp) + shift) % wp
    band_y = (ys < shift).astype(np.int64)
    band_x = (xs < shift).astype(np.int64)
    gid = band_y[:, None] * 2 + band_x[None, :]
    valid = (ys[:, None] < h) & (xs[None, :] < w)
    gid = np.where(valid, gid, -1)
    win = gid.reshape(hp // b, b, wp // b, b).transpose(0, 2, 1, 3).reshape(-1, b * b)
    mask = np.where(win[:, :, None] == win[:, None, :], 0.0, NEG_MASK)
    return mask


def swin_block(
    tokens: T.Tensor,
    weights: dict,
    prefix: str,
    heads: int,
    b: int,
    shift: int,
) -> T.Tensor:
    """LN -> (shifted) window attention -> residual -> LN -> MLP -> residual."""
    h, w, _ = tokens.shape
    x = tokens
    y = T.layer_norm(x, _w(weights, f"{prefix}.ln1.g"), _w(weights, f"{prefix}.ln1.b"))
    pad_y, pad_x = (-h) % b, (-w) % b
    hp, wp = h + pad_y, w + pad_x
    if pad_y or pad_x:
        y = T.pad2d(y, 0, pad_y, 0, pad_x)
    if shift:
        y = T.roll2d(y, -shift, -shift)
    mask = _seam_mask(h, w, hp, wp, b, shift)
    y = window_merge(window_attention(window_partition(y, b), weights, prefix, heads, b, mask), hp, wp, b)
    if shift:
        y = T.roll2d(y, shift, shift)
    if pad_y or pad_x:
        y = y[:h, :w, :]
    x = T.add(x, y)
    z = T.layer_norm(x, _w(weights, f"{prefix}.ln2.g"), _w(weights, f"{prefix}.ln2.b"))
    z = T.add(T.matmul(z, _w(weights, f"{prefix}.mlp.w1")), _w(weights, f"{prefix}.mlp.b1"))
    z = T.gelu(z)
    z = T.add(T.matmul(z, _w(weights, f"{prefix}.mlp.w2")), _w(weights, f"{prefix}.mlp.b2"))
    return T.add(x, z)


def swin_block_pair(tokens: T.Tensor, weights: dict, prefix: str, heads: int, b: int) -> T.Tensor:
    """A plain-window block followed by its half-window-shifted twin."""
    x = swin_block(tokens, weights, f"{prefix}.blk0", heads, b, shift=0)
    return swin_block(x, weights, f"{prefix}.blk1", heads, b, shift=b // 2)


def patch_merge(tokens: T.Tensor, weights: dict, prefix: str) -> T.Tensor:
    """Concatenate 2x2 neighborhoods (TL, TR, BL, BR) and project 4C -> 2C."""
    h, w, c = tokens.shape
    if h % 2 or w % 2:
        raise ShapeError(f"patch_merge requires even extents, got {h}x{w}")
    parts = [tokens[0::2, 0::2, :], tokens[0::2, 1::2, :], tokens[1::2, 0::2, :], tokens[1::2, 1::2, :]]
    x = T.concat(parts, axis=-1)
    return T.add(T.matmul(x, _w(weights, f"{prefix}.w")), _w(weights, f"{prefix}.b"))


def patch_expand(tokens: T.Tensor, weights: dict, prefix: str) -> T.Tensor:
    """Double channels with a linear layer, then unfold each token into a
    2x2 spatial block of half-width tokens (raster order TL, TR, BL, BR)."""
    h, w, d = tokens.shape
    if d % 2:
        raise ShapeError(f"patch_expand requires an even channel count, got {d}")
    x = T.add(T.matmul(tokens, _w(weights, f"{prefix}.w")), _w(weights, f"{prefix}.b"))
    half = d // 2
    x = T.reshape(x, (h, w, 2, 2, half))
    x = T.transpose(x, (0, 2, 1, 3, 4))
    return T.reshape(x, (2 * h, 2 * w, half))


def skip_fuse(decoder_tokens: T.Tensor, encoder_tokens: T.Tensor, weights: dict, prefix: str) -> T.Tensor:
    """Channel-concat the skip tokens and project 2D -> D."""
    if decoder_tokens.shape[:2] != encoder_tokens.shape[:2]:
        raise ShapeError(
            f"skip extents disagree: {decoder_tokens.shape[:2]} vs {encoder_tokens.shape[:2]}"
        )
    x = T.concat([decoder_tokens, encoder_tokens], axis=-1)
    return T.add(T.matmul(x, _w(weights, f"{prefix}.w")), _w(weights, f"{prefix}.b"))


# -- full forward ---------------------------------------------------------------


def forward_features(
    image: np.ndarray,
    weights: dict,
    cfg: ArchConfig,
    trace: list | None = None,
) -> T.Tensor:
    """Encoder -> bottleneck -> decoder forward; returns the (h, w, n) token map.

    Token grids at odd extents are zero-padded (with seam masking) before
    windowing and right/bottom zero-padded before each merge; the matching
    crop happens on the way back up, so output extents always mirror the
    patch grid of the (reflect-padded) input image.  When `trace` is given,
    (stage name, grid shape) pairs are appended as the grid moves.
    """

    def note(name, t):
        if trace is not None:
            trace.append((name, t.shape))

    tokens, _ = patch_embed(image, weights, cfg)
    note("embed", tokens)
    b = cfg.window
    skips: list[T.Tensor] = []
    sizes: list[tuple[int, int]] = []
    for i in range(cfg.encoder_stages):
        tokens = swin_block_pair(tokens, weights, f"enc{i}", cfg.heads[i], b)
        skips.append(tokens)
        h, w, _ = tokens.shape
        sizes.append((h, w))
        if h % 2 or w % 2:
            tokens = T.pad2d(tokens, 0, h % 2, 0, w % 2)
        tokens = patch_merge(tokens, weights, f"merge{i}")
        note(f"merge{i}", tokens)
    tokens = swin_block_pair(tokens, weights, "bottleneck", cfg.heads[-1], b)
    note("bottleneck", tokens)
    for i in range(cfg.encoder_stages):
        stage = cfg.encoder_stages - 1 - i
        tokens = patch_expand(tokens, weights, f"expand{i}")
        h, w = sizes[stage]
        tokens = tokens[:h, :w, :]
        tokens = skip_fuse(tokens, skips[stage], weights, f"dec{i}.fuse")
        tokens = swin_block_pair(tokens, weights, f"dec{i}", cfg.heads[stage], b)
        note(f"dec{i}", tokens)
    return tokens


def extract_dense_features(image: np.ndarray, weights: dict, cfg: ArchConfig) -> DenseFeatureMap:
    """Inference entry point: deterministic numpy feature map at the patch stride."""
    validate_weights(weights, cfg)
    image = np.asarray(image, dtype=np.float64)
    hh, ww = image.shape[:2]
    out = forward_features(image, weights, cfg)
    return DenseFeatureMap(values=out.data, stride=cfg.output_stride, image_size=(hh, ww))


def attention_cost(h: int, w: int, c: int, b: int) -> tuple[int, int]:
    """FLOP counts (global MSA, windowed MSA) for an h x w token grid of width c."""
    if min(h, w, c, b) <= 0:
        raise ValueError("attention_cost arguments must be positive")
    hw = h * w
    msa = 4 * hw * c * c + 2 * hw * hw * c
    wmsa = 4 * hw * c * c + 2 * b * b * hw * c
    return msa, wmsa
