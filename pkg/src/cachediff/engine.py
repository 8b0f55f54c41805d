"""Denoising orchestration: caching, estimation, parallel prediction.

A run walks a timestep plan block by block.  The block's key step runs
the full network, caches the U31 feature, the predicted noise, and (for
restricted-attention variants) background attention rows.  Non-key steps
run the truncated subnet only.  Their inputs are either reused from the
post-key latent or estimated by unrolling the deterministic update with
the key noise; the subnet evaluations are then independent and are
dispatched as one parallel phase.  A second, cheap sequential phase
applies the sampler updates using the true latents.

Worker parallelism never changes results: tasks are merged in submission
order and all kernels are deterministic, so worker count only affects
the modeled latency.  On hosts where threads serialize, the modeled
latency still reflects the dispatch overhead plus the longest worker bin.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import CacheMissError, ConfigError, InvariantError
from .masks import ForegroundMask, downsample_mask
from .profiler import FlopLedger, FlopLog
from .schedule import (
    Block,
    NoiseSchedule,
    TimestepPlan,
    ddim_step_skipping,
)
from .tensor_io import checksum
from .unet import Conditioning, LayerDfa, ToyUNet, UNetConfig

VARIANTS = ("baseline", "lcp", "lcp_dfa", "lcp_dfa_rm")


@dataclass(frozen=True)
class Strategy:
    """Inference strategy selection."""

    variant: str = "baseline"
    estimation: bool = True
    workers: int = 1
    dispatch_overhead_ns: int = 200_000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.dispatch_overhead_ns < 0:
            raise ConfigError("dispatch_overhead_ns must be >= 0")

    @property
    def uses_cache(self) -> bool:
        return self.variant != "baseline"

    @property
    def uses_dfa(self) -> bool:
        return self.variant in ("lcp_dfa", "lcp_dfa_rm")

    @property
    def uses_removal(self) -> bool:
        return self.variant == "lcp_dfa_rm"


@dataclass
class BlockCache:
    """Features cached at one key step."""

    key_t: int
    f_u31: np.ndarray
    eps_key: np.ndarray
    z_after_key: np.ndarray
    bg: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)


class CacheStore:
    """Write-once per-clip cache keyed by key timestep."""

    def __init__(self):
        self._entries: dict[int, BlockCache] = {}

    def put(self, entry: BlockCache) -> None:
        if entry.key_t in self._entries:
            raise InvariantError(f"cache overwrite at key timestep {entry.key_t}")
        self._entries[entry.key_t] = entry

    def get(self, key_t: int) -> BlockCache:
        if key_t not in self._entries:
            raise CacheMissError(f"no cache entry for key timestep {key_t}")
        return self._entries[key_t]

    def __len__(self) -> int:
        return len(self._entries)


def estimate_input_latents(
    z_after_key: np.ndarray,
    eps_key: np.ndarray,
    nonkeys: tuple[int, ...],
    sched: NoiseSchedule,
) -> list[np.ndarray]:
    """Estimated subnet inputs for nonkeys[1:].

    Unrolls the deterministic update along the non-key timesteps, reusing
    the key step's noise prediction at every hop.  ``z_after_key`` is the
    true input of the first non-key step; each further input is estimated
    from the previous one.
    """
    if len(nonkeys) < 2:
        return []
    out = []
    prev = z_after_key
    for j in range(len(nonkeys) - 1):
        prev = ddim_step_skipping(prev, eps_key, nonkeys[j], nonkeys[j + 1], sched)
        out.append(prev)
    return out


class ParallelRunner:
    """Deterministic task pool with an analytic latency model.

    Results are collected in submission order regardless of completion
    order.  Modeled block latency is the dispatch overhead plus the
    largest per-worker bin under round-robin assignment of measured task
    walls.
    """

    def __init__(self, workers: int, dispatch_overhead_ns: int):
        self.workers = workers
        self.dispatch_overhead_ns = dispatch_overhead_ns
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def run(self, tasks) -> tuple[list, list[int], int]:
        def timed(fn):
            t0 = time.perf_counter_ns()
            out = fn()
            return out, time.perf_counter_ns() - t0

        if self._pool is None:
            pairs = [timed(fn) for fn in tasks]
        else:
            futures = [self._pool.submit(timed, fn) for fn in tasks]
            pairs = [f.result() for f in futures]
        results = [p[0] for p in pairs]
        walls = [p[1] for p in pairs]
        bins = [0] * self.workers
        for i, w in enumerate(walls):
            bins[i % self.workers] += w
        modeled = self.dispatch_overhead_ns + (max(bins) if walls else 0)
        return results, walls, modeled

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()


def _check_finite(z: np.ndarray, what: str) -> None:
    if not np.isfinite(z).all():
        raise InvariantError(f"non-finite latent after {what}")


def _layer_masks(cfg: UNetConfig, mask: ForegroundMask) -> dict[str, ForegroundMask]:
    return {
        layer: downsample_mask(mask, h, w) for layer, (_, h, w) in cfg.attn_info().items()
    }


def _dfa_from_cache(
    masks: dict[str, ForegroundMask], entry: BlockCache
) -> dict[str, LayerDfa]:
    out = {}
    for layer, m in masks.items():
        out[layer] = LayerDfa(
            mask=m,
            reference=entry.bg.get((layer, "reference")),
            audio=entry.bg.get((layer, "audio")),
            temporal=entry.bg.get((layer, "temporal")),
        )
    return out


def denoise_clip(
    model: ToyUNet,
    sched: NoiseSchedule,
    plan: TimestepPlan,
    strategy: Strategy,
    z_T: np.ndarray,
    cond: Conditioning,
    *,
    clip_id: int = 0,
    hooks=None,
    runner: ParallelRunner | None = None,
) -> tuple[np.ndarray, dict, FlopLedger]:
    """Denoise one clip; returns final latent, report, and FLOPs ledger."""
    cfg = model.cfg
    if z_T.shape[0] != 1:
        raise ConfigError(f"denoise_clip expects batch 1, got {z_T.shape}")
    _check_finite(z_T, "initialization")
    eff_plan = plan if strategy.uses_cache else plan.singleton()
    masks = _layer_masks(cfg, cond.mask) if strategy.uses_dfa else None
    store = CacheStore()
    own_runner = runner is None
    if own_runner:
        runner = ParallelRunner(strategy.workers, strategy.dispatch_overhead_ns)
    ledger = FlopLedger()
    per_step: list[dict] = []
    modeled_total = 0
    z = z_T
    n_update = z.size
    blocks = eff_plan.blocks
    try:
        for bi, block in enumerate(blocks):
            boundary = blocks[bi + 1].key if bi + 1 < len(blocks) else 0
            z, modeled = _run_block(
                model, sched, block, boundary, strategy, z, cond,
                store, masks, ledger, per_step, hooks, runner, n_update,
            )
            modeled_total += modeled
    finally:
        if own_runner:
            runner.close()
    report = {
        "clip": clip_id,
        "strategy": {
            "variant": strategy.variant,
            "estimation": strategy.estimation,
            "workers": strategy.workers,
            "dispatch_overhead_ns": strategy.dispatch_overhead_ns,
        },
        "plan": {
            "sampled": list(eff_plan.sampled),
            "t_thresh": eff_plan.t_thresh,
            "num_blocks": len(blocks),
        },
        "per_step": per_step,
        "totals": {
            "flops": sum(s["flops"] for s in per_step),
            "wall_ns": sum(s["wall_ns"] for s in per_step),
            "modeled_wall_ns": modeled_total,
        },
        "valid_frames": cond.valid_frames,
        "final_checksum": checksum(z),
    }
    if report["totals"]["flops"] != ledger.total():
        raise InvariantError("per-step flops do not sum to the ledger total")
    return z, report, ledger


def _run_block(
    model, sched, block: Block, boundary: int, strategy: Strategy, z, cond,
    store: CacheStore, masks, ledger: FlopLedger, per_step: list, hooks, runner,
    n_update: int,
):
    """Execute one block (key step plus optional non-key phase)."""
    if hooks is not None:
        hooks.begin_step(block.key, "key")
    want_bg = strategy.uses_dfa and bool(block.nonkeys)
    bg_data: dict[tuple[str, str], np.ndarray] = {}

    def bg_sink(layer, site, frame, a_full):
        m = masks[layer]
        rows = a_full[m.bg_index]
        if site == "temporal":
            bg_data[(layer, site)] = rows
        else:
            slot = bg_data.get((layer, site))
            if slot is None:
                slot = np.empty((model.cfg.frames,) + rows.shape, dtype=np.float32)
                bg_data[(layer, site)] = slot
            slot[frame] = rows

    log = FlopLog()
    t0 = time.perf_counter_ns()
    trace = model.forward(
        z, block.key, cond,
        log=log,
        bg_sink=bg_sink if want_bg else None,
        hooks=hooks,
        removal_active=strategy.uses_removal,
    )
    if hooks is not None:
        hooks.on_step(block.key, z, trace.eps, trace.f_u31)
    t_next = block.nonkeys[0] if block.nonkeys else boundary
    z_next = ddim_step_skipping(z, trace.eps, block.key, t_next, sched)
    _check_finite(z_next, f"key step t={block.key}")
    log.add("elementwise", "scheduler", (3 * n_update,))
    key_wall = time.perf_counter_ns() - t0
    ledger.extend(log, block.key)
    per_step.append(
        {"t": block.key, "kind": "key", "flops": log.total(), "wall_ns": key_wall}
    )
    if not block.nonkeys:
        return z_next, key_wall

    entry = BlockCache(
        key_t=block.key,
        f_u31=trace.f_u31,
        eps_key=trace.eps,
        z_after_key=z_next,
        bg=bg_data,
    )
    store.put(entry)
    dfa = _dfa_from_cache(masks, entry) if strategy.uses_dfa else None

    # Subnet inputs: the first non-key step always sees its true latent;
    # later steps see estimates (if eligible) or the same post-key latent.
    estimating = strategy.estimation and block.estimation_eligible
    est_walls = [0] * len(block.nonkeys)
    est_logs: list[FlopLog] = [FlopLog() for _ in block.nonkeys]
    inputs = [entry.z_after_key]
    if estimating and len(block.nonkeys) > 1:
        prev = entry.z_after_key
        for j in range(len(block.nonkeys) - 1):
            e0 = time.perf_counter_ns()
            prev = ddim_step_skipping(
                prev, entry.eps_key, block.nonkeys[j], block.nonkeys[j + 1], sched
            )
            est_walls[j + 1] = time.perf_counter_ns() - e0
            est_logs[j + 1].add("elementwise", "scheduler", (3 * n_update,))
            inputs.append(prev)
    else:
        inputs.extend([entry.z_after_key] * (len(block.nonkeys) - 1))

    def make_task(j: int):
        t_j = block.nonkeys[j]
        z_j = inputs[j]

        def task():
            tlog = FlopLog()
            eps = model.subnet(
                entry.f_u31, z_j, t_j, cond,
                log=tlog, dfa=dfa, removal_active=strategy.uses_removal,
            )
            return eps, tlog

        return task

    results, walls, modeled_phase1 = runner.run([make_task(j) for j in range(len(block.nonkeys))])

    cur = entry.z_after_key
    phase2_walls = []
    for j, t_j in enumerate(block.nonkeys):
        if hooks is not None:
            hooks.begin_step(t_j, "nonkey")
        t_to = block.nonkeys[j + 1] if j + 1 < len(block.nonkeys) else boundary
        eps_j, tlog = results[j]
        p0 = time.perf_counter_ns()
        cur = ddim_step_skipping(cur, eps_j, t_j, t_to, sched)
        _check_finite(cur, f"non-key step t={t_j}")
        phase2_walls.append(time.perf_counter_ns() - p0)
        tlog.add("elementwise", "scheduler", (3 * n_update,))
        tlog.events.extend(est_logs[j].events)
        ledger.extend(tlog, t_j)
        per_step.append(
            {
                "t": t_j,
                "kind": "nonkey",
                "flops": tlog.total(),
                "wall_ns": walls[j] + est_walls[j] + phase2_walls[j],
            }
        )
    modeled = key_wall + modeled_phase1 + sum(est_walls) + sum(phase2_walls)
    return cur, modeled


def segment_condition(
    cfg: UNetConfig,
    audio_full: np.ndarray,
    ref: dict[str, np.ndarray],
    mask: ForegroundMask,
) -> list[Conditioning]:
    """Split run-length audio into per-clip conditioning with zero padding.

    The final clip is padded up to the clip length; its ``valid_frames``
    records how many frames carry real conditioning.
    """
    if audio_full.ndim != 3 or audio_full.shape[0] < 1:
        raise ConfigError(f"audio must be (frames, tokens, dim), got {audio_full.shape}")
    f = cfg.frames
    total = audio_full.shape[0]
    out = []
    for start in range(0, total, f):
        chunk = audio_full[start : start + f]
        valid = chunk.shape[0]
        if valid < f:
            pad = np.zeros((f - valid,) + chunk.shape[1:], dtype=np.float32)
            chunk = np.concatenate([chunk, pad])
        cond = Conditioning(ref=ref, audio=np.ascontiguousarray(chunk), mask=mask, valid_frames=valid)
        cond.validate(cfg)
        out.append(cond)
    return out


_TIMING_KEYS = ("wall_ns", "modeled_wall_ns", "workers")


def canonical_report(report: dict) -> dict:
    """Determinism-comparison form: wall-clock fields and worker count removed.

    The scrub is recursive so nested clip reports and per-step entries are
    canonicalized the same way as the top level.
    """

    def scrub(node):
        if isinstance(node, dict):
            return {k: scrub(v) for k, v in node.items() if k not in _TIMING_KEYS}
        if isinstance(node, list):
            return [scrub(v) for v in node]
        return node

    return scrub(report)
