"""Crossed-channel & shift-window transformer layer.

The input channels are split in two. The first ``m`` go through a stack of
windowed self-attention blocks (alternating plain and cyclically shifted
windows). The remaining ``k`` go through channel attention followed by a gated
depth-wise feed-forward. The two outputs are concatenated back in order.
"""

from __future__ import annotations

import contextlib
import functools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamBuilder, ParamTree
from .tensor import DimensionError, Tensor


class ConfigError(ValueError):
    """Raised for an inconsistent architecture configuration."""


@dataclass(frozen=True)
class CstConfig:
    m: int
    k: int
    window: int = 8
    heads_sab: int = 4
    heads_cab: int = 4
    sab_depth: int = 2
    mlp_ratio: int = 4
    rel_pos_bias: bool = True
    qk_norm: bool = True

    def __post_init__(self):
        if self.m < 0 or self.k < 0 or self.m + self.k == 0:
            raise ConfigError(f"invalid channel split m={self.m}, k={self.k}")
        if self.m:
            if self.sab_depth < 2 or self.sab_depth % 2:
                raise ConfigError(f"sab_depth must be even and >= 2, got {self.sab_depth}")
            if self.m % self.heads_sab:
                raise ConfigError(f"m={self.m} not divisible by heads_sab={self.heads_sab}")
        if self.k and self.k % self.heads_cab:
            raise ConfigError(f"k={self.k} not divisible by heads_cab={self.heads_cab}")
        if self.window < 1:
            raise ConfigError("window must be positive")

    @property
    def channels(self) -> int:
        return self.m + self.k

    @property
    def shift(self) -> int:
        return self.window // 2


# ---------------------------------------------------------------------------
# attention probe

_ATTENTION_LOG: list | None = None


@contextlib.contextmanager
def record_attention():
    """Collect every attention probability map computed inside the block.

    Window entries carry ``probs`` (num_windows * N, heads, T, T) plus the
    geometry needed to locate tokens; channel entries carry ``probs``
    (N, heads, d, d).
    """
    global _ATTENTION_LOG
    prev = _ATTENTION_LOG
    log: list[dict] = []
    _ATTENTION_LOG = log
    try:
        yield log
    finally:
        _ATTENTION_LOG = prev


def _record(entry: dict) -> None:
    if _ATTENTION_LOG is not None:
        _ATTENTION_LOG.append(entry)


# ---------------------------------------------------------------------------
# parameters


def init_cst(b: ParamBuilder, prefix: str, cfg: CstConfig) -> None:
    m, k, w = cfg.m, cfg.k, cfg.window
    if m:
        # embed/out sit outside any residual path: fan-in scaled so the branch keeps its signal
        b.linear(f"{prefix}.sab.embed", m, m, std=None)
        for i in range(cfg.sab_depth):
            p = f"{prefix}.sab.block{i}"
            b.norm(f"{p}.norm1", m)
            b.linear(f"{p}.qkv", m, 3 * m)
            if cfg.rel_pos_bias:
                b.zeros(f"{p}.rel_pos", ((2 * w - 1) ** 2, cfg.heads_sab))
            b.linear(f"{p}.proj", m, m)
            b.norm(f"{p}.norm2", m)
            b.linear(f"{p}.fc1", m, cfg.mlp_ratio * m)
            b.linear(f"{p}.fc2", cfg.mlp_ratio * m, m)
        b.linear(f"{prefix}.sab.out", m, m, std=None)
    if k:
        b.conv(f"{prefix}.cab.qkv", 3 * k, k, 1)
        b.dwconv(f"{prefix}.cab.qkv_dw", 3 * k, 3)
        b.zeros(f"{prefix}.cab.log_alpha", (cfg.heads_cab,))
        b.dwconv(f"{prefix}.cab.out_dw", k, 3)
        b.norm(f"{prefix}.cab.ffn_norm", k)
        b.conv(f"{prefix}.cab.ffn_in", k, k, 1)
        b.dwconv(f"{prefix}.cab.ffn_dw", k, 3)


def cst_param_count(cfg: CstConfig) -> int:
    """Closed-form parameter count of one layer."""
    m, k, w, r = cfg.m, cfg.k, cfg.window, cfg.mlp_ratio
    total = 0
    if m:
        block = 2 * m + (3 * m * m + 3 * m) + (m * m + m) + 2 * m + (r * m * m + r * m) + (r * m * m + m)
        if cfg.rel_pos_bias:
            block += (2 * w - 1) ** 2 * cfg.heads_sab
        total += 2 * (m * m + m) + cfg.sab_depth * block
    if k:
        total += (3 * k * k + 3 * k) + (27 * k + 3 * k) + cfg.heads_cab + (9 * k + k) + 2 * k + (k * k + k) + (9 * k + k)
    return total


# ---------------------------------------------------------------------------
# window geometry


def _check_divisible(h: int, w: int, window: int) -> None:
    if h % window or w % window:
        raise DimensionError(f"feature size {h}x{w} not divisible by window {window}")


def effective_shift(h: int, w: int, window: int, shift: int) -> int:
    """Shifting is pointless (and disabled) when one window covers an axis."""
    return 0 if min(h, w) <= window else shift


def _partition_hwc(x: Tensor, window: int) -> Tensor:
    n, h, w, c = x.shape
    y = x.reshape(n, h // window, window, w // window, window, c)
    y = y.permute(0, 1, 3, 2, 4, 5)
    return y.reshape(-1, window * window, c)


def _merge_hwc(windows: Tensor, window: int, n: int, h: int, w: int) -> Tensor:
    c = windows.shape[-1]
    y = windows.reshape(n, h // window, w // window, window, window, c)
    y = y.permute(0, 1, 3, 2, 4, 5)
    return y.reshape(n, h, w, c)


def window_partition(x: Tensor, window: int, shift: int = 0) -> Tensor:
    """(C, H, W) or (N, C, H, W) -> (N * num_windows, window^2, C).

    With ``shift > 0`` the map is first rolled by (-shift, -shift).
    """
    xb = x if x.ndim == 4 else x.reshape((1,) + x.shape)
    _check_divisible(xb.shape[2], xb.shape[3], window)
    if shift not in (0, window // 2):
        raise DimensionError(f"shift must be 0 or {window // 2}")
    y = xb.permute(0, 2, 3, 1)
    if shift:
        y = T.roll(y, (-shift, -shift), (1, 2))
    return _partition_hwc(y, window)


def window_reverse(windows: Tensor, window: int, shift: int, h: int, w: int, batched: bool = False) -> Tensor:
    """Inverse of :func:`window_partition`."""
    n = windows.shape[0] // ((h // window) * (w // window))
    y = _merge_hwc(windows, window, n, h, w)
    if shift:
        y = T.roll(y, (shift, shift), (1, 2))
    y = y.permute(0, 3, 1, 2)
    return y if batched else y.reshape(y.shape[1:])


@functools.lru_cache(maxsize=None)
def relative_position_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


@functools.lru_cache(maxsize=None)
def shifted_window_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Additive mask (num_windows, T, T): 0 within a region, -inf across regions."""
    labels = np.zeros((h, w))
    cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    region = 0
    for hs in cuts:
        for ws in cuts:
            labels[hs, ws] = region
            region += 1
    lab = labels.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3).reshape(-1, window * window)
    same = lab[:, :, None] == lab[:, None, :]
    mask = np.where(same, 0.0, -np.inf)
    mask.setflags(write=False)
    return mask


# ---------------------------------------------------------------------------
# shifted-window attention branch


def window_attention(win: Tensor, params: ParamTree, p: str, cfg: CstConfig, n_img: int, mask: np.ndarray | None, geometry: dict) -> Tensor:
    bsz, tokens, c = win.shape
    heads = cfg.heads_sab
    hd = c // heads
    qkv = T.linear(win, params[f"{p}.qkv.weight"], params[f"{p}.qkv.bias"])
    qkv = qkv.reshape(bsz, tokens, 3, heads, hd).permute(2, 0, 3, 1, 4)
    bias = None
    if cfg.rel_pos_bias:
        idx = relative_position_index(cfg.window).reshape(-1)
        bias = T.take(params[f"{p}.rel_pos"], idx).reshape(1, tokens, tokens, heads).permute(0, 3, 1, 2)
    if mask is not None:
        mask_t = T.Tensor(np.broadcast_to(mask[:, None], (mask.shape[0], heads, tokens, tokens)).astype(win.dtype))
        bias = mask_t if bias is None else bias + mask_t
    out, probs = T.attention(qkv[0], qkv[1], qkv[2], bias, scale=hd**-0.5)
    _record(dict(kind="window", probs=probs, **geometry))
    out = out.permute(0, 2, 1, 3).reshape(bsz, tokens, c)
    return T.linear(out, params[f"{p}.proj.weight"], params[f"{p}.proj.bias"])


def _swin_block(x: Tensor, params: ParamTree, p: str, cfg: CstConfig, shift: int) -> Tensor:
    n, h, w, c = x.shape
    ws = cfg.window
    y = T.layernorm(x, params[f"{p}.norm1.gamma"], params[f"{p}.norm1.beta"], -1)
    if shift:
        y = T.roll(y, (-shift, -shift), (1, 2))
    mask = shifted_window_mask(h, w, ws, shift) if shift else None
    geometry = dict(h=h, w=w, window=ws, shift=shift, n=n)
    y = window_attention(_partition_hwc(y, ws), params, p, cfg, n, mask, geometry)
    y = _merge_hwc(y, ws, n, h, w)
    if shift:
        y = T.roll(y, (shift, shift), (1, 2))
    x = x + y
    y = T.layernorm(x, params[f"{p}.norm2.gamma"], params[f"{p}.norm2.beta"], -1)
    y = T.gelu(T.linear(y, params[f"{p}.fc1.weight"], params[f"{p}.fc1.bias"]))
    y = T.linear(y, params[f"{p}.fc2.weight"], params[f"{p}.fc2.bias"])
    return x + y


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    return x, False


def sab_forward(f_s: Tensor, params: ParamTree, prefix: str, cfg: CstConfig) -> Tensor:
    """Embed -> (W-MSA block, SW-MSA block) * depth/2 -> projection. Shape preserving."""
    x, squeeze = _as_batch(f_s)
    n, m, h, w = x.shape
    _check_divisible(h, w, cfg.window)
    p = f"{prefix}.sab"
    y = T.linear(x.permute(0, 2, 3, 1), params[f"{p}.embed.weight"], params[f"{p}.embed.bias"])
    for i in range(cfg.sab_depth):
        shift = effective_shift(h, w, cfg.window, cfg.shift) if i % 2 else 0
        y = _swin_block(y, params, f"{p}.block{i}", cfg, shift)
    y = T.linear(y, params[f"{p}.out.weight"], params[f"{p}.out.bias"]).permute(0, 3, 1, 2)
    return y.reshape(y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# crossed-channel attention branch


def cab_attention(f_c: Tensor, params: ParamTree, prefix: str, cfg: CstConfig) -> Tensor:
    """Channel attention: a (k/heads x k/heads) map per head, independent of h, w."""
    x, squeeze = _as_batch(f_c)
    n, k, h, w = x.shape
    p = f"{prefix}.cab"
    heads = cfg.heads_cab
    d = k // heads
    qkv = T.conv2d(x, params[f"{p}.qkv.weight"], params[f"{p}.qkv.bias"])
    qkv = T.dwconv2d(qkv, params[f"{p}.qkv_dw.weight"], params[f"{p}.qkv_dw.bias"])
    q = qkv[:, :k].reshape(n, heads, d, h * w)
    key = qkv[:, k : 2 * k].reshape(n, heads, d, h * w)
    v = qkv[:, 2 * k :].reshape(n, heads, d, h * w)
    if cfg.qk_norm:
        q = q / T.sqrt((q * q).sum(-1, keepdims=True) + 1e-12)
        key = key / T.sqrt((key * key).sum(-1, keepdims=True) + 1e-12)
    inv_alpha = T.exp(params[f"{p}.log_alpha"] * -1.0).reshape(heads, 1, 1)
    g = T.softmax(T.matmul(q, key.transpose(-2, -1)) * inv_alpha, -1)
    _record(dict(kind="channel", probs=g.data, h=h, w=w))
    out = T.matmul(g, v).reshape(n, k, h, w)
    out = T.dwconv2d(out, params[f"{p}.out_dw.weight"], params[f"{p}.out_dw.bias"]) + x
    return out.reshape(out.shape[1:]) if squeeze else out


def cab_feedforward(f_ca: Tensor, params: ParamTree, prefix: str) -> Tensor:
    """``GELU(F) * F + f_ca`` with ``F = dw3x3(conv1x1(LN(f_ca)))``."""
    x, squeeze = _as_batch(f_ca)
    p = f"{prefix}.cab"
    y = T.layernorm(x, params[f"{p}.ffn_norm.gamma"], params[f"{p}.ffn_norm.beta"], axis=1)
    y = T.conv2d(y, params[f"{p}.ffn_in.weight"], params[f"{p}.ffn_in.bias"])
    fd = T.dwconv2d(y, params[f"{p}.ffn_dw.weight"], params[f"{p}.ffn_dw.bias"])
    out = T.gelu(fd) * fd + x
    return out.reshape(out.shape[1:]) if squeeze else out


def cab_forward(f_c: Tensor, params: ParamTree, prefix: str, cfg: CstConfig) -> Tensor:
    return cab_feedforward(cab_attention(f_c, params, prefix, cfg), params, prefix)


# ---------------------------------------------------------------------------


def cst_forward(f: Tensor, cfg: CstConfig, params: ParamTree, prefix: str) -> Tensor:
    """Channels [0, m) -> SAB, [m, m+k) -> CAB, concatenated in that order."""
    x, squeeze = _as_batch(f)
    if x.shape[1] != cfg.channels:
        raise DimensionError(f"layer expects {cfg.channels} channels, got {x.shape[1]}")
    if cfg.k == 0:
        out = sab_forward(x, params, prefix, cfg)
    elif cfg.m == 0:
        out = cab_forward(x, params, prefix, cfg)
    else:
        s = sab_forward(x[:, : cfg.m], params, prefix, cfg)
        c = cab_forward(x[:, cfg.m :], params, prefix, cfg)
        out = T.concat([s, c], axis=1)
    return out.reshape(out.shape[1:]) if squeeze else out
