"""Float32 compute kernels with numba and pure-numpy backends.

Every kernel accumulates in a fixed ascending order over the reduction
axis, so for identical inputs the numba backend, the numpy backend, and a
naive sequential loop produce bit-identical float32 results.  The backend
is chosen at import time from the ``CACHEDIFF_BACKEND`` environment
variable (``numba`` or ``numpy``; default numba when available) and can be
switched at runtime with :func:`set_backend`.

Nonlinear elementwise math (exp, sigmoid) always runs through numpy so
that both backends share one libm; only the reduction-heavy kernels
(matmul, conv2d) have separate implementations.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .errors import ConfigError

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return wrap


ENV_BACKEND = "CACHEDIFF_BACKEND"
_BACKENDS = ("numba", "numpy")


def _f32(x: np.ndarray, name: str, ndim: int) -> np.ndarray:
    if not isinstance(x, np.ndarray):
        raise ValueError(f"{name} must be a numpy array, got {type(x).__name__}")
    if x.dtype != np.float32:
        raise ValueError(f"{name} must be float32, got {x.dtype}")
    if x.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dims, got shape {x.shape}")
    return np.ascontiguousarray(x)


# ---------------------------------------------------------------------------
# matmul


@njit(cache=True)
def _matmul_nb(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


def _matmul_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = a.shape[1]
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for p in range(k):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


@njit(cache=True)
def _matmul_batch_nb(a, b):
    bn, m, k = a.shape
    n = b.shape[2]
    out = np.zeros((bn, m, n), dtype=np.float32)
    for bi in range(bn):
        for i in range(m):
            for p in range(k):
                aip = a[bi, i, p]
                for j in range(n):
                    out[bi, i, j] += aip * b[bi, p, j]
    return out


def _matmul_batch_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = a.shape[2]
    out = np.zeros((a.shape[0], a.shape[1], b.shape[2]), dtype=np.float32)
    for p in range(k):
        out += a[:, :, p : p + 1] * b[:, p : p + 1, :]
    return out


_IMPLS = {
    "numba": (_matmul_nb, _matmul_batch_nb),
    "numpy": (_matmul_np, _matmul_batch_np),
}

_active = os.environ.get(ENV_BACKEND, "numba" if HAS_NUMBA else "numpy")
if _active not in _BACKENDS:
    raise ConfigError(f"{ENV_BACKEND} must be one of {_BACKENDS}, got {_active!r}")
if _active == "numba" and not HAS_NUMBA:
    _active = "numpy"


def active_backend() -> str:
    """Name of the backend currently in use."""
    return _active


def set_backend(name: str) -> None:
    """Switch kernel backend at runtime (used by tests and benchmarks)."""
    global _active
    if name not in _BACKENDS:
        raise ConfigError(f"unknown backend {name!r}, expected one of {_BACKENDS}")
    if name == "numba" and not HAS_NUMBA:
        raise ConfigError("numba backend requested but numba is not installed")
    _active = name


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Float32 matrix product with fixed ascending-k accumulation."""
    a = _f32(a, "a", 2)
    b = _f32(b, "b", 2)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _IMPLS[_active][0](a, b)


def matmul_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matmul over a leading axis, one fixed-order product per item."""
    a = _f32(a, "a", 3)
    b = _f32(b, "b", 3)
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"matmul_batch shape mismatch: {a.shape} @ {b.shape}")
    return _IMPLS[_active][1](a, b)


def _im2col(x: np.ndarray, stride: int) -> tuple[np.ndarray, int, int]:
    """Patch matrix (h_out*w_out, c_in*9) with columns ordered (ci, ky, kx)."""
    c_in, h, wid = x.shape
    pad = np.zeros((c_in, h + 2, wid + 2), dtype=np.float32)
    pad[:, 1 : h + 1, 1 : wid + 1] = x
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    patches = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c_in * 9))
    return patches, ho, wo


def conv2d(x: np.ndarray, w: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """3x3 convolution, zero padding 1, stride 1 or 2, per-channel bias.

    Lowered to a patch matmul so the accumulation order per output element
    is ascending over (ci, ky, kx); the bias is added after the products.
    """
    x = _f32(x, "x", 3)
    w = _f32(w, "w", 4)
    bias = _f32(bias, "bias", 1)
    if w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects 3x3 kernels, got {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"conv2d channel mismatch: x {x.shape} vs w {w.shape}")
    if bias.shape[0] != w.shape[0]:
        raise ValueError(f"conv2d bias mismatch: {bias.shape} vs {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    patches, ho, wo = _im2col(x, stride)
    wmat = np.ascontiguousarray(w.reshape(w.shape[0], -1).T)
    out = matmul(patches, wmat) + bias[None, :]
    return np.ascontiguousarray(out.T).reshape(w.shape[0], ho, wo)


def conv2d_frames(x: np.ndarray, w: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Apply the 3x3 convolution to each frame of a (f,c,h,w) stack.

    All frames share one patch matmul; per-element results are identical
    to frame-by-frame :func:`conv2d` calls.
    """
    x = _f32(x, "x", 4)
    w = _f32(w, "w", 4)
    bias = _f32(bias, "bias", 1)
    if w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1] or bias.shape[0] != w.shape[0]:
        raise ValueError(f"conv2d_frames shape mismatch: x {x.shape}, w {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d_frames stride must be 1 or 2, got {stride}")
    f, c_in, h, wid = x.shape
    pad = np.zeros((f, c_in, h + 2, wid + 2), dtype=np.float32)
    pad[:, :, 1 : h + 1, 1 : wid + 1] = x
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    patches = np.ascontiguousarray(
        win.transpose(0, 2, 3, 1, 4, 5).reshape(f * ho * wo, c_in * 9)
    )
    wmat = np.ascontiguousarray(w.reshape(w.shape[0], -1).T)
    out = matmul(patches, wmat) + bias[None, :]
    return np.ascontiguousarray(
        out.reshape(f, ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
    )


# ---------------------------------------------------------------------------
# shared numpy ops (identical under both backends by construction)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Elementwise logistic function in float32.

    Inputs are clamped to +-30 before exponentiation.  At the clamp the
    output is within 1e-13 of the true limit, stays a normal float32
    (no subnormals leaking into downstream kernels), and cannot overflow.
    """
    z = np.clip(x, np.float32(-30.0), np.float32(30.0))
    return (np.float32(1.0) / (np.float32(1.0) + np.exp(-z))).astype(np.float32, copy=False)


def silu(x: np.ndarray) -> np.ndarray:
    """Elementwise x * sigmoid(x)."""
    return x * sigmoid(x)


def upsample_nearest(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x spatial upsampling of a (c,h,w) array."""
    x = _f32(x, "x", 3)
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    The denominator is formed by a fixed-order matmul with a ones vector so
    the summation order matches a naive left-to-right loop on any backend.
    """
    x = _f32(x, "x", 2)
    if x.shape[1] == 0:
        raise ValueError("softmax_rows needs at least one column")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    denom = matmul(e, np.ones((x.shape[1], 1), dtype=np.float32))
    return e / denom


def attention_probs(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Softmax(q @ k.T / sqrt(d)) attention weights."""
    q = _f32(q, "q", 2)
    k = _f32(k, "k", 2)
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"attention dim mismatch: q {q.shape} vs k {k.shape}")
    scale = np.float32(1.0 / math.sqrt(q.shape[1]))
    scores = matmul(q, np.ascontiguousarray(k.T)) * scale
    return softmax_rows(scores)


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Single-head attention: softmax(q k^T / sqrt(d)) @ v."""
    v = _f32(v, "v", 2)
    if v.shape[0] != k.shape[0]:
        raise ValueError(f"attention length mismatch: k {k.shape} vs v {v.shape}")
    return matmul(attention_probs(q, k), v)


def attention_batch(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched single-head attention over a leading axis.

    Per-item results are bit-identical to :func:`scaled_dot_attention` on
    each slice; the batch runs as three batched kernel invocations.
    """
    q = _f32(q, "q", 3)
    k = _f32(k, "k", 3)
    v = _f32(v, "v", 3)
    if not (q.shape[0] == k.shape[0] == v.shape[0]):
        raise ValueError("attention_batch batch mismatch")
    if q.shape[2] != k.shape[2] or k.shape[1] != v.shape[1]:
        raise ValueError(f"attention_batch shape mismatch: {q.shape}, {k.shape}, {v.shape}")
    scale = np.float32(1.0 / math.sqrt(q.shape[2]))
    kt = np.ascontiguousarray(k.transpose(0, 2, 1))
    scores = matmul_batch(q, kt) * scale
    bn, lq, lk = scores.shape
    probs = softmax_rows(np.ascontiguousarray(scores.reshape(bn * lq, lk)))
    return matmul_batch(np.ascontiguousarray(probs.reshape(bn, lq, lk)), v)
