"""Analytic FLOPs accounting and diagnostic metrics.

Costs follow fixed conventions: matmul ``2*m*k*n``; 3x3 conv2d
``2*c_out*c_in*9*h_out*w_out``; attention scores and apply ``2*Lq*Lk*d``
each; softmax ``5*Lq*Lk``; elementwise one per element (a fused update
like ``a*z + b*eps`` counts each scalar multiply and add separately).
Diagnostic metrics (L2 series, cosine matrices, attention mass) run in
float64; they feed CSV outputs, not the bit-exact compute path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvariantError

_COSTS = {
    "matmul": lambda d: 2 * d[0] * d[1] * d[2],
    "conv2d": lambda d: 2 * d[0] * d[1] * 9 * d[2] * d[3],
    "attention_scores": lambda d: 2 * d[0] * d[1] * d[2],
    "attention_apply": lambda d: 2 * d[0] * d[1] * d[2],
    "softmax": lambda d: 5 * d[0] * d[1],
    "elementwise": lambda d: d[0],
}

_ARITY = {
    "matmul": 3,
    "conv2d": 4,
    "attention_scores": 3,
    "attention_apply": 3,
    "softmax": 2,
    "elementwise": 1,
}


def count_flops(tag: str, dims: Sequence[int]) -> int:
    """FLOPs for one operator invocation under the package conventions."""
    if tag not in _COSTS:
        raise ValueError(f"unknown operator tag {tag!r}")
    if len(dims) != _ARITY[tag]:
        raise ValueError(f"tag {tag!r} takes {_ARITY[tag]} dims, got {tuple(dims)}")
    return int(_COSTS[tag](tuple(int(d) for d in dims)))


class FlopLog:
    """Per-forward operator log: (tag, layer, flops) triples."""

    def __init__(self):
        self.events: list[tuple[str, str, int]] = []

    def add(self, tag: str, layer: str, dims: Sequence[int]) -> None:
        self.events.append((tag, layer, count_flops(tag, dims)))

    def total(self) -> int:
        return sum(e[2] for e in self.events)


@dataclass
class FlopLedger:
    """Run-level ledger of (tag, layer, timestep, flops) events."""

    rows: list[tuple[str, str, int, int]] = field(default_factory=list)

    def add(self, tag: str, layer: str, t: int, dims: Sequence[int]) -> None:
        self.rows.append((tag, layer, int(t), count_flops(tag, dims)))

    def extend(self, log: FlopLog, t: int) -> None:
        self.rows.extend((tag, layer, int(t), n) for tag, layer, n in log.events)

    def total(self, tags: Iterable[str] | None = None) -> int:
        if tags is None:
            return sum(r[3] for r in self.rows)
        wanted = set(tags)
        return sum(r[3] for r in self.rows if r[0] in wanted)

    def per_step(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for _, _, t, n in self.rows:
            out[t] = out.get(t, 0) + n
        return out

    def by_layer(self, tags: Iterable[str] | None = None) -> dict[str, int]:
        wanted = None if tags is None else set(tags)
        out: dict[str, int] = {}
        for tag, layer, _, n in self.rows:
            if wanted is None or tag in wanted:
                out[layer] = out.get(layer, 0) + n
        return out


def speedup(baseline_seconds: float, accelerated_seconds: float) -> float:
    """Latency ratio rounded to two decimals."""
    if baseline_seconds <= 0 or accelerated_seconds <= 0:
        raise ValueError("latencies must be positive")
    return round(baseline_seconds / accelerated_seconds, 2)


def rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    """Relative L2 error of a against reference b, computed in float64."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    da = a.astype(np.float64).ravel()
    db = b.astype(np.float64).ravel()
    denom = max(float(np.linalg.norm(db)), 1e-12)
    return float(np.linalg.norm(da - db)) / denom


def l2_series(snapshots: Sequence[np.ndarray]) -> np.ndarray:
    """L2 distances between consecutive snapshots, float64, length S-1."""
    if len(snapshots) < 2:
        raise ValueError("need at least two snapshots")
    flat = [s.astype(np.float64).ravel() for s in snapshots]
    return np.array(
        [float(np.linalg.norm(flat[i + 1] - flat[i])) for i in range(len(flat) - 1)]
    )


def cosine_matrix(snapshots: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise cosine similarities of snapshots; zero-norm input raises."""
    if len(snapshots) < 1:
        raise ValueError("need at least one snapshot")
    x = np.stack([s.astype(np.float64).ravel() for s in snapshots])
    norms = np.linalg.norm(x, axis=1)
    if (norms == 0.0).any():
        raise InvariantError("cosine_matrix: zero-norm snapshot")
    return (x @ x.T) / np.outer(norms, norms)


def fg_attention_mass(
    weights: np.ndarray, groups: dict[str, np.ndarray]
) -> dict[str, float]:
    """Mean attention mass per key group for foreground-query rows.

    ``weights`` holds one softmax row per foreground query; ``groups``
    must partition the key axis.  Each result is the mean over rows of the
    summed weight falling in that group.  Rows are renormalized after a
    loose sanity check, so single-precision softmax rounding (which grows
    with the key count) never leaks into the reported masses and the
    groups always split exactly one unit of mass.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] == 0:
        raise ValueError(f"weights must be a non-empty 2-d array, got {w.shape}")
    sums = w.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise InvariantError("fg_attention_mass: rows must sum to 1")
    w = w / sums[:, None]
    seen = np.zeros(w.shape[1], dtype=np.int64)
    for idx in groups.values():
        seen[np.asarray(idx, dtype=np.int64)] += 1
    if not (seen == 1).all():
        raise InvariantError("fg_attention_mass: groups must partition the key axis")
    return {
        name: float(w[:, np.asarray(idx, dtype=np.int64)].sum(axis=1).mean())
        for name, idx in groups.items()
    }


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write a CSV with a single header row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
