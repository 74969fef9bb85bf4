"""
Separable Catmull-Rom (a = -0.5) resampling.

Weights follow the usual SR-benchmark imresize convention: output sample x
maps to input coordinate (x + 0.5) / factor - 0.5, the kernel is widened by
1/factor when shrinking with antialiasing, each row of weights is normalised
to unit sum, and taps falling outside the image are clamped to the border
(edge replication). Resampling is a pair of matrix products, so it is exact
for constants and differentiable w.r.t. the input tensor.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch

CUBIC_A = -0.5


def cubic_kernel(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = ((a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0) * (ax <= 1.0)
    far = (a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a) * ((ax > 1.0) & (ax <= 2.0))
    return near + far


@lru_cache(maxsize=256)
def _weight_matrix(in_size: int, out_size: int, antialias: bool) -> np.ndarray:
    factor = out_size / in_size
    kernel_scale = min(factor, 1.0) if antialias else 1.0
    width = 4.0 / kernel_scale

    out_idx = np.arange(out_size, dtype=np.float64)
    centre = (out_idx + 0.5) / factor - 0.5
    left = np.floor(centre - width / 2.0).astype(np.int64)
    taps = int(np.ceil(width)) + 2

    indices = left[:, None] + np.arange(taps, dtype=np.int64)[None, :]
    weights = kernel_scale * cubic_kernel((centre[:, None] - indices) * kernel_scale)
    weights = weights / weights.sum(axis=1, keepdims=True)
    indices = np.clip(indices, 0, in_size - 1)

    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.repeat(np.arange(out_size), taps)
    np.add.at(matrix, (rows, indices.ravel()), weights.ravel())
    matrix.setflags(write=False)
    return matrix


def weight_matrix(in_size: int, out_size: int, antialias: bool) -> np.ndarray:
    """(out_size, in_size) resampling matrix along one axis."""
    if in_size < 1 or out_size < 1:
        raise ValueError(f"sizes must be positive, got {in_size} -> {out_size}")
    return _weight_matrix(int(in_size), int(out_size), bool(antialias))


def resize_tensor(x: torch.Tensor, out_h: int, out_w: int, antialias: bool = True) -> torch.Tensor:
    """Resample the last two dims of `x` (…, H, W) to (out_h, out_w)."""
    in_h, in_w = x.shape[-2], x.shape[-1]
    if (in_h, in_w) == (out_h, out_w):
        return x
    rows = torch.as_tensor(weight_matrix(in_h, out_h, antialias), dtype=x.dtype, device=x.device)
    cols = torch.as_tensor(weight_matrix(in_w, out_w, antialias), dtype=x.dtype, device=x.device)
    return torch.matmul(torch.matmul(rows, x), cols.transpose(0, 1))


def upsample_tensor(x: torch.Tensor, scale: int) -> torch.Tensor:
    return resize_tensor(x, x.shape[-2] * scale, x.shape[-1] * scale, antialias=False)


def downsample_tensor(x: torch.Tensor, scale: int) -> torch.Tensor:
    return resize_tensor(x, x.shape[-2] // scale, x.shape[-1] // scale, antialias=True)
