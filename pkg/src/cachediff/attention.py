"""Attention sites with an optional foreground-restricted fast path.

Each attention layer carries three sites, applied in order:

* ``reference`` - spatial self-attention per frame where K/V concatenate
  the noisy tokens with static reference tokens;
* ``audio`` - cross-attention per frame against audio tokens;
* ``temporal`` - per-location attention across the frame axis.

The restricted path computes attention only for foreground queries (for
the reference site also only foreground K/V rows) and fills background
rows from a cache written at the most recent full pass.  With an all-ones
mask the restricted path degenerates to the full path bit-exactly because
both run the same kernel sequence on identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CacheMissError, InvariantError
from .kernels import attention_batch, attention_probs, matmul
from .masks import ForegroundMask
from .profiler import FlopLog

SITES = ("reference", "audio", "temporal")


@dataclass
class DfaContext:
    """Restriction context for one layer/site: mask plus cached background rows."""

    mask: ForegroundMask
    bg: np.ndarray | None


def select_tokens(x: np.ndarray, index: np.ndarray) -> np.ndarray:
    """Gather rows of x along the leading axis; index must be ascending and unique."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"index must be 1-d, got shape {idx.shape}")
    if idx.size:
        if idx[0] < 0 or idx[-1] >= x.shape[0]:
            raise ValueError(f"index out of range for {x.shape[0]} rows")
        if (np.diff(idx) <= 0).any():
            raise ValueError("index must be strictly ascending")
    return np.ascontiguousarray(x[idx])


def merge_tokens(
    a_fg: np.ndarray, a_bg: np.ndarray | None, mask: ForegroundMask
) -> np.ndarray:
    """Scatter foreground and cached background rows back to full length."""
    L = mask.num_fg + mask.num_bg
    if a_fg.shape[0] != mask.num_fg:
        raise InvariantError(f"merge: {a_fg.shape[0]} fg rows for {mask.num_fg} fg sites")
    if mask.num_bg == 0:
        return np.ascontiguousarray(a_fg)
    if a_bg is None:
        raise CacheMissError("merge: background rows required but no cache present")
    if a_bg.shape[0] != mask.num_bg or a_bg.shape[1:] != a_fg.shape[1:]:
        raise InvariantError(
            f"merge: bg shape {a_bg.shape} incompatible with fg shape {a_fg.shape}"
        )
    out = np.empty((L,) + a_fg.shape[1:], dtype=np.float32)
    out[mask.fg_index] = a_fg
    out[mask.bg_index] = a_bg
    return out


def _attn(q: np.ndarray, k: np.ndarray, v: np.ndarray, log: FlopLog, layer: str):
    """Shared probs+apply sequence; returns (output, probs) and logs costs."""
    lq, d = q.shape
    lk = k.shape[0]
    probs = attention_probs(q, k)
    out = matmul(probs, v)
    if log is not None:
        log.add("attention_scores", layer, (lq, lk, d))
        log.add("elementwise", layer, (lq * lk,))
        log.add("softmax", layer, (lq, lk))
        log.add("attention_apply", layer, (lq, lk, d))
    return out, probs


def _proj(x: np.ndarray, w: np.ndarray, log: FlopLog, layer: str) -> np.ndarray:
    out = matmul(x, w)
    if log is not None:
        log.add("matmul", layer, (x.shape[0], x.shape[1], w.shape[1]))
    return out


def reference_site(
    x_tok: np.ndarray,
    ref_tok: np.ndarray,
    weights: dict[str, np.ndarray],
    prefix: str,
    *,
    removal: bool = False,
    dfa: DfaContext | None = None,
    log: FlopLog | None = None,
    hooks=None,
    frame: int = 0,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Spatial self-attention with reference K/V concatenation.

    Returns the pre-residual delta (tokens @ output projection) and, on
    the full path, the background rows of the attention output for cache
    writeback (None on the restricted path).
    """
    wq, wk, wv, wo = (weights[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo"))
    layer = prefix
    if dfa is None:
        q = _proj(x_tok, wq, log, layer)
        k = _proj(x_tok, wk, log, layer)
        v = _proj(x_tok, wv, log, layer)
        if not removal:
            k = np.concatenate([k, _proj(ref_tok, wk, log, layer)])
            v = np.concatenate([v, _proj(ref_tok, wv, log, layer)])
        a, probs = _attn(q, k, v, log, layer)
        if hooks is not None:
            hooks.on_attention(layer, "reference", frame, probs, a, x_tok.shape[0])
        return _proj(a, wo, log, layer), a
    mask = dfa.mask
    if mask.num_fg == 0:
        a = merge_tokens(np.empty((0, wo.shape[0]), dtype=np.float32), dfa.bg, mask)
        return _proj(a, wo, log, layer), None
    x_f = select_tokens(x_tok, mask.fg_index)
    q = _proj(x_f, wq, log, layer)
    k = _proj(x_f, wk, log, layer)
    v = _proj(x_f, wv, log, layer)
    if not removal:
        ref_f = select_tokens(ref_tok, mask.fg_index)
        k = np.concatenate([k, _proj(ref_f, wk, log, layer)])
        v = np.concatenate([v, _proj(ref_f, wv, log, layer)])
    a_f, _ = _attn(q, k, v, log, layer)
    a = merge_tokens(a_f, dfa.bg, mask)
    return _proj(a, wo, log, layer), None


def audio_site(
    x_tok: np.ndarray,
    audio_tok: np.ndarray,
    weights: dict[str, np.ndarray],
    prefix: str,
    *,
    dfa: DfaContext | None = None,
    log: FlopLog | None = None,
    hooks=None,
    frame: int = 0,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Cross-attention against audio tokens; only queries are restricted."""
    wq, wk, wv, wo = (weights[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo"))
    layer = prefix
    k = _proj(audio_tok, wk, log, layer)
    v = _proj(audio_tok, wv, log, layer)
    if dfa is None:
        q = _proj(x_tok, wq, log, layer)
        a, probs = _attn(q, k, v, log, layer)
        if hooks is not None:
            hooks.on_attention(layer, "audio", frame, probs, a, x_tok.shape[0])
        return _proj(a, wo, log, layer), a
    mask = dfa.mask
    if mask.num_fg == 0:
        a = merge_tokens(np.empty((0, wo.shape[0]), dtype=np.float32), dfa.bg, mask)
        return _proj(a, wo, log, layer), None
    q = _proj(select_tokens(x_tok, mask.fg_index), wq, log, layer)
    a_f, _ = _attn(q, k, v, log, layer)
    a = merge_tokens(a_f, dfa.bg, mask)
    return _proj(a, wo, log, layer), None


def temporal_site(
    x_loc: np.ndarray,
    weights: dict[str, np.ndarray],
    prefix: str,
    *,
    dfa: DfaContext | None = None,
    log: FlopLog | None = None,
    hooks=None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Attention over the frame axis, one sequence per spatial location.

    ``x_loc`` has shape (L, f, c); the restricted path runs foreground
    locations only and merges cached background sequences.
    """
    wq, wk, wv, wo = (weights[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo"))
    layer = prefix
    L, f, c = x_loc.shape
    d = wq.shape[1]

    def _site_attn(tokens: np.ndarray) -> np.ndarray:
        n = tokens.shape[0]
        flat = np.ascontiguousarray(tokens.reshape(n * f, c))
        q = _proj(flat, wq, log, layer).reshape(n, f, d)
        k = _proj(flat, wk, log, layer).reshape(n, f, d)
        v = _proj(flat, wv, log, layer).reshape(n, f, d)
        out = attention_batch(q, k, v)
        if log is not None:
            log.add("attention_scores", layer, (n * f, f, d))
            log.add("elementwise", layer, (n * f * f,))
            log.add("softmax", layer, (n * f, f))
            log.add("attention_apply", layer, (n * f, f, d))
        return out

    if dfa is None:
        a = _site_attn(x_loc)
        if hooks is not None:
            hooks.on_attention(layer, "temporal", None, None, a, L)
        delta = _proj(np.ascontiguousarray(a.reshape(L * f, d)), wo, log, layer)
        return delta.reshape(L, f, c), a
    mask = dfa.mask
    if mask.num_fg == 0:
        a = merge_tokens(np.empty((0, f, d), dtype=np.float32), dfa.bg, mask)
    else:
        a_f = _site_attn(select_tokens(x_loc, mask.fg_index))
        a = merge_tokens(a_f, dfa.bg, mask)
    delta = _proj(np.ascontiguousarray(a.reshape(L * f, d)), wo, log, layer)
    return delta.reshape(L, f, c), None
