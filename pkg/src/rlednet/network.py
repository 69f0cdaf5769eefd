"""Full restoration network: LSRB -> U-shaped CST backbone -> refine block.

Level widths are c, 2c, 4c, 8c. Encoders 1-3 are followed by a stride-2 3x3
conv that doubles the width; encoder 4 and decoder 4 form the bottleneck.
Each lower decoder upsamples (1x1 conv + pixel shuffle), concatenates the
same-level encoder output and fuses back with a 1x1 conv. Decoder 1 runs at
2c, so the backbone emits 2c channels at full resolution.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .cst import ConfigError, CstConfig, cst_forward, cst_param_count, init_cst
from .lsrb import V_SOURCES, init_lsrb, lsrb_forward
from .params import ParamBuilder, ParamTree
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    c: int = 32
    r: int = 8
    n_enc: int = 4
    n_frb: int = 4
    window: int = 8
    heads_sab: int = 4
    heads_cab: int = 4
    sab_depth: int = 2
    mlp_ratio: int = 4
    levels: int = 4
    enable_lsrb: bool = True
    enable_sab: bool = True
    enable_cab: bool = True
    v_source: str = "F_V"
    rel_pos_bias: bool = True
    qk_norm: bool = True

    def __post_init__(self):
        if self.c < 1 or self.r < 1:
            raise ConfigError("c and r must be positive")
        if self.levels != 4:
            raise ConfigError("the backbone has exactly 4 levels")
        if self.n_enc < 2 or self.n_enc % 2 or self.n_frb < 0 or self.n_frb % 2:
            raise ConfigError("n_enc must be even and >= 2; n_frb must be even")
        if not (self.enable_sab or self.enable_cab):
            raise ConfigError("at least one of SAB / CAB must be enabled")
        if self.v_source not in V_SOURCES:
            raise ConfigError(f"v_source must be one of {V_SOURCES}")
        if self.enable_lsrb and self.v_source == "F_U" and self.r != self.c:
            raise ConfigError("v_source='F_U' is only dimensionally valid with r == c")
        for width in self.widths() + [2 * self.c]:
            self.layer(width)

    @property
    def multiple(self) -> int:
        """Spatial extents must be divisible by this (after padding)."""
        return self.window * 2 ** (self.levels - 1)

    def widths(self) -> list[int]:
        return [self.c * 2**i for i in range(self.levels)]

    def layer(self, width: int) -> CstConfig:
        if self.enable_sab and self.enable_cab:
            m = width // 2
        elif self.enable_sab:
            m = width
        else:
            m = 0
        return CstConfig(
            m=m,
            k=width - m,
            window=self.window,
            heads_sab=self.heads_sab,
            heads_cab=self.heads_cab,
            sab_depth=self.sab_depth,
            mlp_ratio=self.mlp_ratio,
            rel_pos_bias=self.rel_pos_bias,
            qk_norm=self.qk_norm,
        )

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _decoder_width(cfg: ModelConfig, level: int) -> int:
    return 2 * cfg.c if level == 0 else cfg.widths()[level]


# ---------------------------------------------------------------------------
# parameters


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamTree:
    b = ParamBuilder(seed, dtype)
    init_lsrb(b, "lsrb", config.c, config.r, config.enable_lsrb)
    widths = config.widths()
    for lvl, width in enumerate(widths):
        for i in range(config.n_enc):
            init_cst(b, f"enc{lvl + 1}.{i}", config.layer(width))
        if lvl < config.levels - 1:
            b.conv(f"down{lvl + 1}", 2 * width, width, 3)
    for lvl in reversed(range(config.levels)):
        if lvl < config.levels - 1:
            b.conv(f"up{lvl + 1}", 2 * widths[lvl + 1], widths[lvl + 1], 1)
            b.conv(f"fuse{lvl + 1}", _decoder_width(config, lvl), 2 * widths[lvl], 1)
        dw = _decoder_width(config, lvl)
        for i in range(config.n_enc):
            init_cst(b, f"dec{lvl + 1}.{i}", config.layer(dw))
    for i in range(config.n_frb):
        init_cst(b, f"frb.{i}", config.layer(2 * config.c))
    b.conv("frb.out", 3, 2 * config.c, 3)
    return b.tree


def count_params(config: ModelConfig) -> int:
    """Parameter count from the shape algebra alone (no tensors built)."""
    c, r = config.c, config.r
    total = 27 * c + c
    if config.enable_lsrb:
        total += 3 * (c * c + c) + (c * r + r)
    widths = config.widths()
    for lvl, width in enumerate(widths):
        total += config.n_enc * cst_param_count(config.layer(width))
        dw = _decoder_width(config, lvl)
        total += config.n_enc * cst_param_count(config.layer(dw))
        if lvl < config.levels - 1:
            total += 9 * width * 2 * width + 2 * width  # down
            upper = widths[lvl + 1]
            total += upper * 2 * upper + 2 * upper  # up
            total += 2 * width * dw + dw  # fuse
    total += config.n_frb * cst_param_count(config.layer(2 * c))
    total += 9 * 2 * c * 3 + 3
    return total


# ---------------------------------------------------------------------------
# forward


def _conv(x: Tensor, params: ParamTree, name: str, stride: int = 1, padding=0) -> Tensor:
    return T.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride, padding)


def _stage(x: Tensor, params: ParamTree, prefix: str, layer: CstConfig, depth: int) -> Tensor:
    for i in range(depth):
        x = cst_forward(x, layer, params, f"{prefix}.{i}")
    return x


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    return x, False


def cstnet_forward(f_lsrb: Tensor, config: ModelConfig, params: ParamTree, zero_skips: bool = False) -> Tensor:
    """(N, c, H, W) -> (N, 2c, H, W). H and W must be divisible by ``config.multiple``."""
    x, squeeze = _as_batch(f_lsrb)
    h, w = x.shape[-2:]
    if h % config.multiple or w % config.multiple:
        raise DimensionError(f"{h}x{w} not divisible by {config.multiple}")
    widths = config.widths()
    skips = []
    for lvl, width in enumerate(widths):
        x = _stage(x, params, f"enc{lvl + 1}", config.layer(width), config.n_enc)
        if lvl < config.levels - 1:
            skips.append(x)
            # stride-2 3x3 conv; (1, 0) padding halves even extents exactly
            x = _conv(x, params, f"down{lvl + 1}", stride=2, padding=((1, 0), (1, 0)))
    for lvl in reversed(range(config.levels)):
        if lvl < config.levels - 1:
            x = T.pixel_shuffle(_conv(x, params, f"up{lvl + 1}"), 2)
            skip = skips[lvl]
            if zero_skips:
                skip = T.Tensor(np.zeros(skip.shape, dtype=skip.dtype))
            x = _conv(T.concat([x, skip], axis=1), params, f"fuse{lvl + 1}")
        x = _stage(x, params, f"dec{lvl + 1}", config.layer(_decoder_width(config, lvl)), config.n_enc)
    return x.reshape(x.shape[1:]) if squeeze else x


def frb_forward(f_cstnet: Tensor, config: ModelConfig, params: ParamTree) -> Tensor:
    """Refine block: n_frb CST layers at 2c then a 3x3 conv to the 3-channel residual."""
    x = _stage(f_cstnet, params, "frb", config.layer(2 * config.c), config.n_frb)
    return T.conv2d(x, params["frb.out.weight"], params["frb.out.bias"], 1, 1)


def _pad_amounts(n: int, multiple: int) -> tuple[int, int]:
    total = (-n) % multiple
    return total // 2, total - total // 2


def rlednet_forward(x: Tensor, config: ModelConfig, params: ParamTree) -> Tensor:
    """Restored image ``x + F_r`` (unclamped), same shape as ``x``.

    Inputs whose sides are not multiples of ``config.multiple`` are reflect
    padded on entry and the residual is cropped back.
    """
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != 3:
        raise DimensionError(f"expected an RGB input, got {xb.shape[1]} channels")
    h, w = xb.shape[-2:]
    ph = _pad_amounts(h, config.multiple)
    pw = _pad_amounts(w, config.multiple)
    padded = T.pad_reflect(xb, ph, pw) if (sum(ph) or sum(pw)) else xb
    f = lsrb_forward(padded, params, config.r, enable=config.enable_lsrb, v_source=config.v_source)
    residual = frb_forward(cstnet_forward(f, config, params), config, params)
    if sum(ph) or sum(pw):
        residual = residual[:, :, ph[0] : ph[0] + h, pw[0] : pw[0] + w]
    y = xb + residual
    return y.reshape(y.shape[1:]) if squeeze else y


def enhance(x: np.ndarray, config: ModelConfig, params: ParamTree) -> np.ndarray:
    """Inference helper: (3, H, W) or (N, 3, H, W) array in, clamped array out."""
    with T.no_grad():
        y = rlednet_forward(Tensor(np.asarray(x, dtype=next(iter(params.values())).dtype)), config, params)
    return np.clip(y.data, 0.0, 1.0)
