"""Toy Swin-style backbone: windowed attention with cyclic shift and LoRA on W_q / W_v.

Feature maps are ``(N, H, W, C)`` arrays. Parameters live in a flat
``name -> ndarray`` mapping; forward functions read them as autograd
tensors from a mapping with the same keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ArgumentError, ShapeError
from .linalg import Rng

MASK_VALUE = -1e9
LN_EPS = 1e-5


@dataclass(frozen=True)
class StageConfig:
    dim: int
    depth: int
    heads: int
    window: int
    resolution: int

    def __post_init__(self):
        if self.depth % 2:
            raise ArgumentError(f"stage depth must be even, got {self.depth}")
        if self.dim % self.heads:
            raise ArgumentError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def effective_window(self) -> int:
        return min(self.window, self.resolution)

    @property
    def shift(self) -> int:
        # Once a single window covers the map there is nothing to shift.
        return 0 if self.resolution <= self.window else self.window // 2


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch: int = 4
    in_chans: int = 1
    dims: tuple[int, ...] = (16, 32, 64, 128)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    heads: tuple[int, ...] = (2, 2, 2, 2)
    window: int = 4
    mlp_ratio: int = 4
    ranks: tuple[int, ...] = (8, 8, 8, 8)
    init_std: float = 0.02
    lora_std: float = 0.02
    stages: tuple[StageConfig, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.dims)
        if not (len(self.depths) == len(self.heads) == len(self.ranks) == n):
            raise ArgumentError("dims, depths, heads and ranks must have equal length")
        for i in range(1, n):
            if self.dims[i] != 2 * self.dims[i - 1]:
                raise ArgumentError("each stage must double the channel count")
        grid = self.image_size // self.patch
        if self.image_size % (self.patch * 2 ** (n - 1)):
            raise ShapeError(
                f"image size {self.image_size} not divisible by patch*2^{n - 1} = {self.patch * 2 ** (n - 1)}"
            )
        stages = []
        for i in range(n):
            res = grid // 2**i
            st = StageConfig(self.dims[i], self.depths[i], self.heads[i], self.window, res)
            if res % st.effective_window:
                raise ShapeError(f"stage {i} resolution {res} not divisible by window {st.effective_window}")
            if not 1 <= self.ranks[i] <= self.dims[i]:
                raise ArgumentError(f"stage {i} rank {self.ranks[i]} outside [1, {self.dims[i]}]")
            stages.append(st)
        object.__setattr__(self, "stages", tuple(stages))

    @property
    def grid(self) -> int:
        return self.image_size // self.patch


# ---------------------------------------------------------------------------
# Window machinery
# ---------------------------------------------------------------------------


def _as_tensor(x):
    return (x, False) if isinstance(x, Tensor) else (Tensor(x), True)


def window_partition(x, m: int):
    """``(N, H, W, C) -> (N * nW, m*m, C)``; windows row-major, tokens row-major within."""
    t, raw = _as_tensor(x)
    if t.data.ndim == 3:
        t = ag.reshape(t, (1,) + t.shape)
    n, h, w, c = t.shape
    if h % m or w % m:
        raise ShapeError(f"feature map {h}x{w} not divisible by window {m}")
    out = ag.reshape(t, (n, h // m, m, w // m, m, c))
    out = ag.transpose(out, (0, 1, 3, 2, 4, 5))
    out = ag.reshape(out, (n * (h // m) * (w // m), m * m, c))
    return out.data if raw else out


def window_unpartition(windows, m: int, h: int, w: int):
    """Inverse of :func:`window_partition`, returning ``(N, H, W, C)``."""
    t, raw = _as_tensor(windows)
    c = t.shape[-1]
    n = t.shape[0] // ((h // m) * (w // m))
    out = ag.reshape(t, (n, h // m, w // m, m, m, c))
    out = ag.transpose(out, (0, 1, 3, 2, 4, 5))
    out = ag.reshape(out, (n, h, w, c))
    return out.data if raw else out


def cyclic_shift(x, dy: int, dx: int):
    """Toroidal roll of the patch grid: content at row ``i`` moves to row ``i + dy``."""
    t, raw = _as_tensor(x)
    axes = (0, 1) if t.data.ndim == 3 else (1, 2)
    out = ag.roll(t, (dy, dx), axes)
    return out.data if raw else out


@lru_cache(maxsize=None)
def relative_position_index(m: int) -> np.ndarray:
    """``(m*m, m*m)`` indices into a ``(2m-1)^2``-row bias table."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    index = rel[0] * (2 * m - 1) + rel[1]
    index.setflags(write=False)
    return index


@lru_cache(maxsize=None)
def shifted_window_mask(h: int, w: int, m: int, s: int) -> np.ndarray:
    """Additive ``(nW, m*m, m*m)`` mask blocking token pairs that wrapped around."""
    region = np.zeros((h, w))
    cnt = 0
    for hs in (slice(0, -m), slice(-m, -s), slice(-s, None)):
        for ws in (slice(0, -m), slice(-m, -s), slice(-s, None)):
            region[hs, ws] = cnt
            cnt += 1
    win = window_partition(region[None, :, :, None], m)[..., 0]
    mask = np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def lora_dense(x: Tensor, p, prefix: str, merged: bool = False, scale: float = 1.0) -> Tensor:
    """Dense layer at ``prefix``; uses the LoRA path when an adapter pair is present."""
    bias = p.get(prefix + ".bias")
    if not merged and prefix + ".lora_A" in p:
        return ag.lora_linear(x, p[prefix + ".weight"], p[prefix + ".lora_A"], p[prefix + ".lora_B"], bias, scale)
    return ag.linear(x, p[prefix + ".weight"], bias)


def window_attention(x: Tensor, p, prefix: str, heads: int, mask=None, merged: bool = False) -> Tensor:
    """Multi-head self-attention inside windows, ``(B, T, C) -> (B, T, C)``."""
    b, t, c = x.shape
    if c % heads:
        raise ShapeError(f"channels {c} not divisible by {heads} heads")
    m = int(round(t**0.5))
    if m * m != t:
        raise ShapeError(f"window token count {t} is not a square")
    dh = c // heads

    def split(z):
        return ag.transpose(ag.reshape(z, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split(lora_dense(x, p, prefix + ".wq", merged))
    k = split(ag.linear(x, p[prefix + ".wk.weight"], p.get(prefix + ".wk.bias")))
    v = split(lora_dense(x, p, prefix + ".wv", merged))
    bias = ag.gather_bias(p[prefix + ".rel_bias_table"], relative_position_index(m))
    out = ag.attention(q, k, v, bias, mask)
    out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (b, t, c))
    return ag.linear(out, p[prefix + ".wo.weight"], p.get(prefix + ".wo.bias"))


def layer_norm(x: Tensor, p, prefix: str) -> Tensor:
    return ag.layer_norm(x, p[prefix + ".weight"], p[prefix + ".bias"], LN_EPS)


def swin_block(x: Tensor, p, prefix: str, stage: StageConfig, shifted: bool, merged: bool = False) -> Tensor:
    """LN -> (S)W-MSA -> residual -> LN -> MLP -> residual on ``(N, H, W, C)``."""
    n, h, w, c = x.shape
    m = stage.effective_window
    s = stage.shift if shifted else 0
    y = layer_norm(x, p, prefix + ".norm1")
    mask = None
    if s:
        y = cyclic_shift(y, -s, -s)
        mask = shifted_window_mask(h, w, m, s)
    y = window_partition(y, m)
    y = window_attention(y, p, prefix + ".attn", stage.heads, mask, merged)
    y = window_unpartition(y, m, h, w)
    if s:
        y = cyclic_shift(y, s, s)
    x = ag.add(x, y)
    y = layer_norm(x, p, prefix + ".norm2")
    y = ag.gelu(ag.linear(y, p[prefix + ".mlp.fc1.weight"], p[prefix + ".mlp.fc1.bias"]))
    y = ag.linear(y, p[prefix + ".mlp.fc2.weight"], p[prefix + ".mlp.fc2.bias"])
    return ag.add(x, y)


def swin_block_pair_forward(x, p, prefix: str, stage: StageConfig, pair: int = 0, merged: bool = False):
    """Regular-window block followed by its shifted-window partner."""
    t, raw = _as_tensor(x)
    t = swin_block(t, p, f"{prefix}.blocks.{2 * pair}", stage, False, merged)
    t = swin_block(t, p, f"{prefix}.blocks.{2 * pair + 1}", stage, True, merged)
    return t.data if raw else t


def merge_neighbourhoods(x):
    """Concatenate each 2x2 neighbourhood: ``(N, H, W, C) -> (N, H/2, W/2, 4C)``.

    Channel blocks are ordered (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
    """
    t, raw = _as_tensor(x)
    n, h, w, c = t.shape
    if h % 2 or w % 2:
        raise ShapeError(f"patch merging needs even extents, got {h}x{w}")
    out = ag.reshape(t, (n, h // 2, 2, w // 2, 2, c))
    out = ag.transpose(out, (0, 1, 3, 4, 2, 5))
    out = ag.reshape(out, (n, h // 2, w // 2, 4 * c))
    return out.data if raw else out


def patch_merging(x, p, prefix: str):
    t, raw = _as_tensor(x)
    out = ag.linear(merge_neighbourhoods(t), p[prefix + ".reduction.weight"])
    return out.data if raw else out


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(N, H, W)`` or ``(N, H, W, Cin)`` images to ``(N, H/p, W/p, p*p*Cin)`` patches."""
    if images.ndim == 3:
        images = images[..., None]
    n, h, w, cin = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    x = images.reshape(n, h // patch, patch, w // patch, patch, cin)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(n, h // patch, w // patch, patch * patch * cin)


def backbone_forward(images, p, cfg: BackboneConfig, merged: bool = False) -> list:
    """Run all stages; returns one normalised ``(N, H_i, W_i, C_i)`` map per stage."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.shape[1] != cfg.image_size or images.shape[2] != cfg.image_size:
        raise ShapeError(f"expected {cfg.image_size}x{cfg.image_size} images, got {images.shape[1:3]}")
    x = Tensor(patchify(images, cfg.patch))
    x = ag.linear(x, p["backbone.patch_embed.weight"], p["backbone.patch_embed.bias"])
    x = layer_norm(x, p, "backbone.patch_embed.norm")
    outs = []
    for i, st in enumerate(cfg.stages):
        prefix = f"backbone.stages.{i}"
        if i > 0:
            x = patch_merging(x, p, prefix + ".downsample")
        for pair in range(st.depth // 2):
            x = swin_block_pair_forward(x, p, prefix, st, pair, merged)
        outs.append(layer_norm(x, p, f"backbone.norms.{i}"))
    return outs


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------


def _normal(rng: Rng, shape, std: float) -> np.ndarray:
    return std * rng.normals(int(np.prod(shape))).reshape(shape)


def init_backbone(cfg: BackboneConfig, rng: Rng) -> dict[str, np.ndarray]:
    """Base (non-LoRA) backbone parameters in a stable order."""
    p: dict[str, np.ndarray] = {}
    std = cfg.init_std

    def dense(name, d, k, bias=True):
        p[name + ".weight"] = _normal(rng, (d, k), std)
        if bias:
            p[name + ".bias"] = np.zeros(d)

    def norm(name, d):
        p[name + ".weight"] = np.ones(d)
        p[name + ".bias"] = np.zeros(d)

    c0 = cfg.dims[0]
    dense("backbone.patch_embed", c0, cfg.patch * cfg.patch * cfg.in_chans)
    norm("backbone.patch_embed.norm", c0)
    for i, st in enumerate(cfg.stages):
        prefix = f"backbone.stages.{i}"
        c = st.dim
        if i > 0:
            dense(prefix + ".downsample.reduction", c, 2 * c, bias=False)
        m = st.effective_window
        for b in range(st.depth):
            bp = f"{prefix}.blocks.{b}"
            norm(bp + ".norm1", c)
            for name in ("wq", "wk", "wv", "wo"):
                dense(f"{bp}.attn.{name}", c, c)
            p[bp + ".attn.rel_bias_table"] = _normal(rng, ((2 * m - 1) ** 2, st.heads), std)
            norm(bp + ".norm2", c)
            dense(bp + ".mlp.fc1", cfg.mlp_ratio * c, c)
            dense(bp + ".mlp.fc2", c, cfg.mlp_ratio * c)
        norm(f"backbone.norms.{i}", c)
    return p


def backbone_lora_targets(cfg: BackboneConfig) -> list[tuple[str, int]]:
    """``(prefix, rank)`` for every W_q / W_v in the backbone."""
    out = []
    for i, st in enumerate(cfg.stages):
        for b in range(st.depth):
            for name in ("wq", "wv"):
                out.append((f"backbone.stages.{i}.blocks.{b}.attn.{name}", cfg.ranks[i]))
    return out
