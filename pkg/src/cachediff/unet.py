"""Miniature deterministic video UNet.

Latents are float32 with axes (batch, channel, frame, height, width).
The encoder halves resolution three times; the decoder mirrors it with
skip connections.  Attention modules (reference, audio, temporal sites)
sit at the bottleneck ``M``, the mid-resolution decoder block ``U2``, and
the final decoder sublayer ``U32``.

The last decoder stage is split into three sublayers: ``U30`` consumes
the first encoder skip, ``U31`` refines, and ``U32`` consumes the
``conv_in`` feature.  The output of ``U31`` is the cacheable feature: a
truncated forward pass (:meth:`ToyUNet.subnet`) reproduces the tail of
the network exactly from that feature plus a fresh latent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from .errors import ConfigError
from .kernels import conv2d, conv2d_frames, matmul, silu, upsample_nearest
from .masks import ForegroundMask
from .profiler import FlopLog
from .rng import Rng

ATTN_SITES = {"reference": "ref", "audio": "aud", "temporal": "tmp"}
ATTN_LAYERS = ("M", "U2", "U32")


@dataclass(frozen=True)
class UNetConfig:
    """Static architecture description."""

    latent_channels: int = 4
    base_channels: tuple[int, int, int, int] = (16, 32, 48, 64)
    height: int = 16
    width: int = 16
    frames: int = 4
    audio_tokens: int = 6
    audio_dim: int = 8
    head_dim: int = 8
    time_dim: int = 64
    attention_layers: tuple[str, ...] = ("M", "U2", "U32")
    removal_set: tuple[str, ...] = ("M", "U2")

    def __post_init__(self):
        if len(self.base_channels) != 4 or any(c < 1 for c in self.base_channels):
            raise ConfigError(f"base_channels needs 4 positive ints, got {self.base_channels}")
        if self.height % 8 or self.width % 8 or self.height < 8 or self.width < 8:
            raise ConfigError(f"height/width must be multiples of 8, got {self.height}x{self.width}")
        for v, name in (
            (self.latent_channels, "latent_channels"),
            (self.frames, "frames"),
            (self.audio_tokens, "audio_tokens"),
            (self.audio_dim, "audio_dim"),
            (self.head_dim, "head_dim"),
        ):
            if v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if self.time_dim % 2 or self.time_dim < 2:
            raise ConfigError(f"time_dim must be even and >= 2, got {self.time_dim}")
        bad = set(self.attention_layers) - set(ATTN_LAYERS)
        if bad:
            raise ConfigError(f"attention_layers {sorted(bad)} not in {ATTN_LAYERS}")
        if set(self.removal_set) - set(self.attention_layers):
            raise ConfigError("removal_set must be a subset of attention_layers")

    def attn_info(self) -> dict[str, tuple[int, int, int]]:
        """(channels, height, width) for each attention layer."""
        c0, c1, _, c3 = self.base_channels
        table = {
            "M": (c3, self.height // 8, self.width // 8),
            "U2": (c1, self.height // 2, self.width // 2),
            "U32": (c0, self.height, self.width),
        }
        return {k: table[k] for k in self.attention_layers}


@dataclass
class Conditioning:
    """Per-clip conditioning: reference tokens, audio tokens, mask."""

    ref: dict[str, np.ndarray]
    audio: np.ndarray
    mask: ForegroundMask
    valid_frames: int

    def validate(self, cfg: UNetConfig) -> None:
        for layer, (c, h, w) in cfg.attn_info().items():
            tok = self.ref.get(layer)
            if tok is None or tok.shape != (h * w, c):
                got = None if tok is None else tok.shape
                raise ConfigError(f"reference tokens for {layer} must be {(h * w, c)}, got {got}")
        want = (cfg.frames, cfg.audio_tokens, cfg.audio_dim)
        if self.audio.shape != want:
            raise ConfigError(f"audio tokens must be {want}, got {self.audio.shape}")
        if self.mask.shape != (cfg.height, cfg.width):
            raise ConfigError(f"mask must be {cfg.height}x{cfg.width}, got {self.mask.shape}")
        if not (1 <= self.valid_frames <= cfg.frames):
            raise ConfigError(f"valid_frames must be in [1, {cfg.frames}], got {self.valid_frames}")


@dataclass
class LayerDfa:
    """Restriction state for one attention layer (mask at layer resolution)."""

    mask: ForegroundMask
    reference: np.ndarray | None = None
    audio: np.ndarray | None = None
    temporal: np.ndarray | None = None


@dataclass
class ForwardTrace:
    """Outputs of a full forward pass."""

    eps: np.ndarray
    f_u31: np.ndarray
    bg_outputs: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# weights


def _res_spec(prefix: str, cin: int, cout: int, td: int):
    spec = [
        (f"{prefix}.conv1.w", (cout, cin, 3, 3), cin * 9),
        (f"{prefix}.conv1.b", (cout,), None),
        (f"{prefix}.temb.w", (td, cout), td),
        (f"{prefix}.temb.b", (cout,), None),
        (f"{prefix}.conv2.w", (cout, cout, 3, 3), cout * 9),
        (f"{prefix}.conv2.b", (cout,), None),
    ]
    if cin != cout:
        spec.append((f"{prefix}.skip.w", (cin, cout), cin))
    return spec


def _conv_spec(name: str, cin: int, cout: int):
    return [(f"{name}.w", (cout, cin, 3, 3), cin * 9), (f"{name}.b", (cout,), None)]


def _attn_spec(layer: str, c: int, d: int, da: int):
    spec = []
    for site, kdim in (("ref", c), ("aud", da), ("tmp", c)):
        spec += [
            (f"{layer}.{site}.wq", (c, d), c),
            (f"{layer}.{site}.wk", (kdim, d), kdim),
            (f"{layer}.{site}.wv", (kdim, d), kdim),
            (f"{layer}.{site}.wo", (d, c), d),
        ]
    return spec


def weight_spec(cfg: UNetConfig) -> list[tuple[str, tuple[int, ...], int | None]]:
    """Canonical ordered list of (name, shape, fan_in); fan_in None means zeros."""
    c0, c1, c2, c3 = cfg.base_channels
    cl, td, d, da = cfg.latent_channels, cfg.time_dim, cfg.head_dim, cfg.audio_dim
    spec = [("time.affine.w", (td, td), td), ("time.affine.b", (td,), None)]
    spec += _conv_spec("conv_in", cl, c0)
    enc = [("D0", c0), ("D1", c1), ("D2", c2), ("D3", c3)]
    for i, (blk, c) in enumerate(enc):
        spec += _res_spec(f"{blk}.res0", c, c, td)
        spec += _res_spec(f"{blk}.res1", c, c, td)
        if i < 3:
            spec += _conv_spec(f"down{i}", c, cfg.base_channels[i + 1])
    spec += _res_spec("M.res0", c3, c3, td)
    if "M" in cfg.attention_layers:
        spec += _attn_spec("M", c3, d, da)
    spec += _res_spec("M.res1", c3, c3, td)
    dec = [("U0", c3, c2), ("U1", c2, c1), ("U2", c1, c0)]
    for i, (blk, c, cnext) in enumerate(dec):
        spec += _res_spec(f"{blk}.res0", 2 * c, c, td)
        spec += _res_spec(f"{blk}.res1", c, c, td)
        if blk == "U2" and "U2" in cfg.attention_layers:
            spec += _attn_spec("U2", c, d, da)
        spec += _conv_spec(f"up{i}", c, cnext)
    spec += _res_spec("U30.res", 2 * c0, c0, td)
    spec += _res_spec("U31.res", c0, c0, td)
    spec += _res_spec("U32.res", 2 * c0, c0, td)
    if "U32" in cfg.attention_layers:
        spec += _attn_spec("U32", c0, d, da)
    spec += _conv_spec("head", c0, cl)
    return spec


def init_weights(cfg: UNetConfig, seed: int) -> tuple[dict[str, np.ndarray], list[str]]:
    """Draw weights in manifest order: normals scaled 1/sqrt(fan_in), zero biases."""
    rng = Rng(seed)
    weights: dict[str, np.ndarray] = {}
    order: list[str] = []
    for name, shape, fan_in in weight_spec(cfg):
        if fan_in is None:
            weights[name] = np.zeros(shape, dtype=np.float32)
        else:
            weights[name] = rng.normal(shape, scale=1.0 / math.sqrt(fan_in))
        order.append(name)
    return weights, order


def constant_model_weights(cfg: UNetConfig, value: float) -> dict[str, np.ndarray]:
    """All-zero weights except the head bias: the net predicts ``value`` everywhere."""
    weights = {name: np.zeros(shape, dtype=np.float32) for name, shape, _ in weight_spec(cfg)}
    weights["head.b"] = np.full(cfg.latent_channels, value, dtype=np.float32)
    return weights


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal features of a schedule timestep.

    Periods span 1000 to 20000 schedule units geometrically: the fastest
    channel completes one cycle over a thousand-step trajectory, so the
    embedding separates timesteps globally while drifting gently between
    neighbouring sampled steps.
    """
    half = dim // 2
    periods = 1000.0 * np.power(20.0, np.arange(half, dtype=np.float64) / max(half - 1, 1))
    ang = 2.0 * math.pi * float(t) / periods
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


# ---------------------------------------------------------------------------
# model


class ToyUNet:
    """Deterministic float32 UNet over (frame, channel, height, width) stacks."""

    def __init__(self, cfg: UNetConfig, weights: dict[str, np.ndarray]):
        self.cfg = cfg
        self.w = weights
        missing = [n for n, _, _ in weight_spec(cfg) if n not in weights]
        if missing:
            raise ConfigError(f"missing weights: {missing[:4]}{'...' if len(missing) > 4 else ''}")

    # -- small pieces

    def _silu(self, x: np.ndarray, layer: str, log: FlopLog | None) -> np.ndarray:
        out = silu(x)
        if log is not None:
            log.add("elementwise", layer, (4 * x.size,))
        return out

    def _norm(self, x: np.ndarray, layer: str, log: FlopLog | None, axis: int = 1) -> np.ndarray:
        """RMS normalization over the channel axis.

        Per-token (per-pixel) normalization: every spatial location is
        scaled independently, so it commutes with token selection.
        """
        ms = np.mean(np.square(x), axis=axis, keepdims=True, dtype=np.float32)
        out = x / np.sqrt(ms + np.float32(1e-5))
        if log is not None:
            log.add("elementwise", layer, (3 * x.size,))
        return out

    def _time_features(self, t: int, log: FlopLog | None) -> np.ndarray:
        emb = time_embedding(t, self.cfg.time_dim)
        h = matmul(emb[None, :], self.w["time.affine.w"])[0] + self.w["time.affine.b"]
        if log is not None:
            log.add("matmul", "time", (1, self.cfg.time_dim, self.cfg.time_dim))
            log.add("elementwise", "time", (self.cfg.time_dim,))
        return self._silu(h, "time", log)

    def _conv(self, x: np.ndarray, name: str, log: FlopLog | None, stride: int = 1) -> np.ndarray:
        out = conv2d_frames(x, self.w[f"{name}.w"], self.w[f"{name}.b"], stride)
        if log is not None:
            co, ci = self.w[f"{name}.w"].shape[:2]
            f, _, ho, wo = out.shape
            log.add("conv2d", name, (co, ci, ho, f * wo))
        return out

    def _channel_mix(self, x: np.ndarray, name: str, log: FlopLog | None) -> np.ndarray:
        f, c, h, w = x.shape
        wmat = self.w[name]
        tok = np.ascontiguousarray(x.transpose(0, 2, 3, 1).reshape(f * h * w, c))
        out = matmul(tok, wmat)
        if log is not None:
            log.add("matmul", name, (f * h * w, c, wmat.shape[1]))
        return np.ascontiguousarray(out.reshape(f, h, w, wmat.shape[1]).transpose(0, 3, 1, 2))

    def _res_unit(self, x: np.ndarray, temb: np.ndarray, prefix: str, log: FlopLog | None) -> np.ndarray:
        h1 = self._conv(self._silu(self._norm(x, prefix, log), prefix, log), f"{prefix}.conv1", log)
        tproj = matmul(temb[None, :], self.w[f"{prefix}.temb.w"])[0] + self.w[f"{prefix}.temb.b"]
        h1 = h1 + tproj[None, :, None, None]
        h2 = self._conv(self._silu(self._norm(h1, prefix, log), prefix, log), f"{prefix}.conv2", log)
        if f"{prefix}.skip.w" in self.w:
            base = self._channel_mix(x, f"{prefix}.skip.w", log)
        else:
            base = x
        if log is not None:
            log.add("matmul", prefix, (1, self.cfg.time_dim, h1.shape[1]))
            log.add("elementwise", prefix, (h1.size + 2 * h2.size,))
        return base + np.float32(0.5) * h2

    def _upsample(self, x: np.ndarray) -> np.ndarray:
        return np.stack([upsample_nearest(x[i]) for i in range(x.shape[0])])

    # -- attention module (three sites in order)

    def _attn_module(
        self,
        x: np.ndarray,
        layer: str,
        cond: Conditioning,
        log: FlopLog | None,
        dfa: dict[str, LayerDfa] | None,
        bg_sink=None,
        hooks=None,
        removal_active: bool = False,
    ) -> np.ndarray:
        f, c, h, w = x.shape
        L = h * w
        half = np.float32(0.5)
        layer_dfa = None if dfa is None else dfa.get(layer)
        removal = removal_active and layer in self.cfg.removal_set
        x = x.copy()

        def ctx(site: str) -> attn.DfaContext | None:
            if layer_dfa is None:
                return None
            return attn.DfaContext(layer_dfa.mask, getattr(layer_dfa, site))

        ref_tok = self._norm(cond.ref[layer], f"{layer}.ref", log)
        for fi in range(f):
            tok = self._norm(
                np.ascontiguousarray(x[fi].reshape(c, L).T), f"{layer}.ref", log
            )
            site_ctx = ctx("reference")
            dctx = None if site_ctx is None else attn.DfaContext(
                site_ctx.mask, None if site_ctx.bg is None else site_ctx.bg[fi]
            )
            delta, a_full = attn.reference_site(
                tok, ref_tok, self.w, f"{layer}.ref",
                removal=removal, dfa=dctx, log=log, hooks=hooks, frame=fi,
            )
            if bg_sink is not None and a_full is not None:
                bg_sink(layer, "reference", fi, a_full)
            x[fi] += half * np.ascontiguousarray(delta.T).reshape(c, h, w)
            if log is not None:
                log.add("elementwise", f"{layer}.ref", (2 * c * L,))

        for fi in range(f):
            tok = self._norm(
                np.ascontiguousarray(x[fi].reshape(c, L).T), f"{layer}.aud", log
            )
            site_ctx = ctx("audio")
            dctx = None if site_ctx is None else attn.DfaContext(
                site_ctx.mask, None if site_ctx.bg is None else site_ctx.bg[fi]
            )
            delta, a_full = attn.audio_site(
                tok, self._norm(cond.audio[fi], f"{layer}.aud", log), self.w,
                f"{layer}.aud", dfa=dctx, log=log, hooks=hooks, frame=fi,
            )
            if bg_sink is not None and a_full is not None:
                bg_sink(layer, "audio", fi, a_full)
            x[fi] += half * np.ascontiguousarray(delta.T).reshape(c, h, w)
            if log is not None:
                log.add("elementwise", f"{layer}.aud", (2 * c * L,))

        x_loc = self._norm(
            np.ascontiguousarray(x.transpose(2, 3, 0, 1).reshape(L, f, c)),
            f"{layer}.tmp", log, axis=2,
        )
        delta, a_full = attn.temporal_site(
            x_loc, self.w, f"{layer}.tmp", dfa=ctx("temporal"), log=log, hooks=hooks
        )
        if bg_sink is not None and a_full is not None:
            bg_sink(layer, "temporal", None, a_full)
        x = x + half * np.ascontiguousarray(
            delta.reshape(h, w, f, c).transpose(2, 3, 0, 1)
        )
        if log is not None:
            log.add("elementwise", f"{layer}.tmp", (2 * x.size,))
        return x

    # -- tail shared between the full forward and the truncated subnet

    def _u32_head(
        self,
        f_u31: np.ndarray,
        s_in: np.ndarray,
        temb: np.ndarray,
        cond: Conditioning,
        log: FlopLog | None,
        dfa: dict[str, LayerDfa] | None,
        bg_sink=None,
        hooks=None,
        removal_active: bool = False,
    ) -> np.ndarray:
        # Each fusion branch is normalized on its own: the cached feature
        # accumulates the trunk's magnitude while the fresh conv_in branch
        # does not, and a joint scale would crush whichever branch is
        # smaller, leaving the truncated pass insensitive to its latent.
        f_u31 = self._norm(f_u31, "U32.f", log)
        s_in = self._norm(s_in, "U32.in", log)
        x = self._res_unit(np.concatenate([f_u31, s_in], axis=1), temb, "U32.res", log)
        if "U32" in self.cfg.attention_layers:
            x = self._attn_module(
                x, "U32", cond, log, dfa, bg_sink, hooks, removal_active
            )
        return self._conv(self._silu(self._norm(x, "head", log), "head", log), "head", log)

    # -- public passes

    def forward(
        self,
        z: np.ndarray,
        t: int,
        cond: Conditioning,
        *,
        log: FlopLog | None = None,
        dfa: dict[str, LayerDfa] | None = None,
        bg_sink=None,
        hooks=None,
        removal_active: bool = False,
    ) -> ForwardTrace:
        """Full noise prediction; returns eps and the cacheable U31 feature."""
        cfg = self.cfg
        self._check_latent(z)
        cond.validate(cfg)
        eps_out = np.empty_like(z)
        f_u31_out = np.empty(
            (z.shape[0], cfg.frames, cfg.base_channels[0], cfg.height, cfg.width), np.float32
        )
        for ib in range(z.shape[0]):
            x = np.ascontiguousarray(z[ib].transpose(1, 0, 2, 3))
            temb = self._time_features(t, log)
            x = self._conv(x, "conv_in", log)
            s_in = x
            skips = []
            for i, blk in enumerate(("D0", "D1", "D2", "D3")):
                x = self._res_unit(x, temb, f"{blk}.res0", log)
                x = self._res_unit(x, temb, f"{blk}.res1", log)
                skips.append(x)
                if i < 3:
                    x = self._conv(x, f"down{i}", log, stride=2)
            x = self._res_unit(x, temb, "M.res0", log)
            if "M" in cfg.attention_layers:
                x = self._attn_module(x, "M", cond, log, dfa, bg_sink, hooks, removal_active)
            x = self._res_unit(x, temb, "M.res1", log)
            for i, blk in enumerate(("U0", "U1", "U2")):
                x = np.concatenate([x, skips[3 - i]], axis=1)
                x = self._res_unit(x, temb, f"{blk}.res0", log)
                x = self._res_unit(x, temb, f"{blk}.res1", log)
                if blk == "U2" and "U2" in cfg.attention_layers:
                    x = self._attn_module(x, "U2", cond, log, dfa, bg_sink, hooks, removal_active)
                x = self._conv(self._upsample(x), f"up{i}", log)
            x = self._res_unit(np.concatenate([x, skips[0]], axis=1), temb, "U30.res", log)
            f_u31 = self._res_unit(x, temb, "U31.res", log)
            eps = self._u32_head(
                f_u31, s_in, temb, cond, log, dfa, bg_sink, hooks, removal_active
            )
            eps_out[ib] = eps.transpose(1, 0, 2, 3)
            f_u31_out[ib] = f_u31
        return ForwardTrace(eps=eps_out, f_u31=f_u31_out)

    def subnet(
        self,
        f_u31: np.ndarray,
        z: np.ndarray,
        t: int,
        cond: Conditioning,
        *,
        log: FlopLog | None = None,
        dfa: dict[str, LayerDfa] | None = None,
        removal_active: bool = False,
    ) -> np.ndarray:
        """Truncated pass: conv_in on a fresh latent plus the cached-feature tail."""
        cfg = self.cfg
        self._check_latent(z)
        want = (z.shape[0], cfg.frames, cfg.base_channels[0], cfg.height, cfg.width)
        if f_u31.shape != want:
            raise ConfigError(f"cached feature must be {want}, got {f_u31.shape}")
        eps_out = np.empty_like(z)
        for ib in range(z.shape[0]):
            x = np.ascontiguousarray(z[ib].transpose(1, 0, 2, 3))
            temb = self._time_features(t, log)
            s_in = self._conv(x, "conv_in", log)
            eps = self._u32_head(
                f_u31[ib], s_in, temb, cond, log, dfa, removal_active=removal_active
            )
            eps_out[ib] = eps.transpose(1, 0, 2, 3)
        return eps_out

    def _check_latent(self, z: np.ndarray) -> None:
        cfg = self.cfg
        want = (cfg.latent_channels, cfg.frames, cfg.height, cfg.width)
        if z.ndim != 5 or z.shape[1:] != want:
            raise ConfigError(f"latent must be (b,) + {want}, got {z.shape}")
        if z.dtype != np.float32:
            raise ConfigError(f"latent must be float32, got {z.dtype}")


def unet_forward(z, t, cond, weights, cfg, **kw) -> ForwardTrace:
    """Functional wrapper over :meth:`ToyUNet.forward`."""
    return ToyUNet(cfg, weights).forward(z, t, cond, **kw)


def subnet_forward(f_u31, z, t, cond, weights, cfg, **kw) -> np.ndarray:
    """Functional wrapper over :meth:`ToyUNet.subnet`."""
    return ToyUNet(cfg, weights).subnet(f_u31, z, t, cond, **kw)
