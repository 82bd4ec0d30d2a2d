"""Reference 2-D convolution (correlation, SAME padding) and split forwards.

Feature maps are ``(H, W, C)`` arrays and kernels ``(F1, F2, I, O)`` arrays.
Products are accumulated in float64; the result is cast back to the common
storage dtype of the inputs so a float32 pipeline rounds between layers.
"""
from __future__ import annotations

import math

import numpy as np

from jointsvd.errors import DimensionError
from jointsvd.tensor import as_tensor4


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) zero padding that yields ``ceil(size / stride)`` outputs."""
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def as_feature_map(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or min(x.shape) < 1:
        raise DimensionError(f"expected an (H, W, C) feature map, got shape {x.shape}")
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return x


def conv2d(x, w, stride_h: int = 1, stride_w: int = 1) -> np.ndarray:
    """Direct SAME-padded cross-correlation with independent strides per axis.

    ``y[h, w, o] = sum_{f1, f2, i} w[f1, f2, i, o] * xpad[h*sh + f1, w*sw + f2, i]``
    """
    x = as_feature_map(x)
    w = as_tensor4(w)
    f1, f2, ci, co = w.shape
    h, wd, c = x.shape
    if c != ci:
        raise DimensionError(f"channel mismatch: input has {c}, kernel expects {ci}")
    if stride_h < 1 or stride_w < 1:
        raise ValueError("strides must be >= 1")
    ph = same_padding(h, f1, stride_h)
    pw = same_padding(wd, f2, stride_w)
    xp = np.pad(x.astype(np.float64, copy=False), (ph, pw, (0, 0)))
    ho, wo = math.ceil(h / stride_h), math.ceil(wd / stride_w)
    w64 = w.astype(np.float64, copy=False)
    out = np.zeros((ho, wo, co))
    for a in range(f1):
        rows = xp[a: a + stride_h * (ho - 1) + 1: stride_h]
        for b in range(f2):
            patch = rows[:, b: b + stride_w * (wo - 1) + 1: stride_w, :]
            out += patch @ w64[a, b]
    return out.astype(np.result_type(x.dtype, w.dtype), copy=False)


def forward_split(x, u, v, stride: int = 1) -> np.ndarray:
    """Vertical ``(F1, 1, I, r)`` conv with strides ``[s, 1]``, then horizontal ``(1, F2, r, O)`` with ``[1, s]``."""
    u = as_tensor4(u)
    v = as_tensor4(v)
    if u.shape[1] != 1 or v.shape[0] != 1:
        raise DimensionError(
            f"split factors must be (F1,1,I,r) and (1,F2,r,O), got {u.shape} and {v.shape}"
        )
    if u.shape[3] != v.shape[2]:
        raise DimensionError(f"chain mismatch: vertical factor outputs {u.shape[3]} channels, "
                             f"horizontal factor expects {v.shape[2]}")
    mid = conv2d(x, u, stride, 1)
    return conv2d(mid, v, 1, stride)


def forward_dual(x, right, left, stride: int = 1) -> np.ndarray:
    """Sum of two split paths; ``right`` and ``left`` are ``(u, v)`` kernel pairs."""
    a = forward_split(x, *right, stride=stride)
    b = forward_split(x, *left, stride=stride)
    if a.shape != b.shape:
        raise DimensionError(f"dual paths disagree on output shape: {a.shape} vs {b.shape}")
    return a + b


def max_abs_diff(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))
