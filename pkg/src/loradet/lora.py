"""LoRA over a dense linear layer.

Column convention throughout: inputs are ``k x n`` (one sample per column),
outputs ``d x n``. The frozen weight ``w`` is ``d x k``, the adapter pair is
``b`` (``d x r``) and ``a`` (``r x k``), and the layer computes
``w @ x + b @ (a @ x) + bias``.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ArgumentError, ShapeError, StateError
from .linalg import Rng, as_matrix, gaussian_matrix, svd, truncate_svd

DEFAULT_STDDEV = 0.02


@dataclass
class LoraLinear:
    w: np.ndarray
    a: np.ndarray
    b: np.ndarray
    bias: np.ndarray | None = None
    merged: bool = False
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.shape

    def delta(self) -> np.ndarray:
        return self.scale * (self.b @ self.a)


def _check_rank(d: int, k: int, rank: int) -> None:
    if not 1 <= rank <= min(d, k):
        raise ArgumentError(f"rank {rank} outside [1, min({d}, {k})]")


def lora_init(
    w,
    rank: int,
    stddev: float = DEFAULT_STDDEV,
    rng: Rng | None = None,
    bias=None,
) -> LoraLinear:
    """Wrap a frozen weight with a Gaussian ``a`` and an all-zero ``b``."""
    w = as_matrix(w, copy=True)
    d, k = w.shape
    _check_rank(d, k, rank)
    rng = rng if rng is not None else Rng(0)
    a = gaussian_matrix(rank, k, stddev, rng)
    b = np.zeros((d, rank))
    if bias is not None:
        bias = np.array(bias, dtype=np.float64).reshape(d)
    return LoraLinear(w=w, a=a, b=b, bias=bias)


def _bias_col(layer: LoraLinear) -> np.ndarray | float:
    return 0.0 if layer.bias is None else layer.bias[:, None]


def lora_forward(layer: LoraLinear, x) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[0] != layer.w.shape[1]:
        raise ShapeError(f"input has {x.shape[0]} rows, layer expects {layer.w.shape[1]}")
    out = layer.w @ x
    if not layer.merged:
        out = out + layer.scale * (layer.b @ (layer.a @ x))
    return out + _bias_col(layer)


def lora_backward(layer: LoraLinear, x, upstream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(grad_a, grad_b, grad_x)`` for an unmerged layer.

    The base weight is frozen, so no gradient is produced for it.
    """
    x = as_matrix(x)
    g = as_matrix(upstream)
    d, k = layer.w.shape
    if x.shape[0] != k or g.shape != (d, x.shape[1]):
        raise ShapeError(f"x {x.shape} / upstream {g.shape} inconsistent with layer {layer.w.shape}")
    if layer.merged:
        raise StateError("cannot backpropagate into a merged layer")
    ax = layer.a @ x
    btg = layer.b.T @ g
    grad_b = layer.scale * (g @ ax.T)
    grad_a = layer.scale * (btg @ x.T)
    grad_x = layer.w.T @ g + layer.scale * (layer.a.T @ btg)
    return grad_a, grad_b, grad_x


def lora_merge(layer: LoraLinear) -> np.ndarray:
    """Fold ``b @ a`` into ``w`` in place and return the merged weight."""
    if layer.merged:
        raise StateError("layer is already merged")
    layer.w = layer.w + layer.delta()
    layer.merged = True
    return layer.w


def lora_unmerge(layer: LoraLinear) -> np.ndarray:
    if not layer.merged:
        raise StateError("layer is not merged")
    layer.w = layer.w - layer.delta()
    layer.merged = False
    return layer.w


def lora_from_svd(delta_w, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Split the rank-``rank`` truncation of ``delta_w`` evenly into ``(b, a)``.

    Both factors carry the square root of the kept singular values, so
    ``b @ a`` equals the truncated reconstruction.
    """
    delta_w = as_matrix(delta_w)
    d, k = delta_w.shape
    _check_rank(d, k, rank)
    u_r, sigma_r, vt_r = truncate_svd(svd(delta_w), rank)
    root = np.sqrt(np.diag(sigma_r))
    return u_r * root, root[:, None] * vt_r


@dataclass(frozen=True)
class ParamBudget:
    dense_count: int
    lora_count: int
    compressed_ratio: float

    @property
    def ratio_exact(self) -> Fraction:
        return Fraction(self.lora_count, self.dense_count)

    @property
    def reduces(self) -> bool:
        return self.lora_count < self.dense_count


def param_budget(d: int, k: int, rank: int) -> ParamBudget:
    """Parameter counts of a dense ``d x k`` matrix versus its rank-``rank`` pair."""
    for name, v in (("d", d), ("k", k), ("rank", rank)):
        if int(v) != v or v < 1:
            raise ArgumentError(f"{name} must be a positive integer, got {v}")
    _check_rank(d, k, rank)
    dense = d * k
    lora = rank * (d + k)
    return ParamBudget(dense_count=dense, lora_count=lora, compressed_ratio=lora / dense)
