"""Latent subspace reconstruction block.

A 3x3 convolution lifts the RGB input to ``c`` shallow feature channels. Two
small 1x1-conv stacks then produce a coefficient matrix ``U`` (r x hw) and a
feature matrix ``F`` (hw x c). The block returns ``U^T (U F)`` (rows of U normalised), which as an
hw x c matrix has rank at most ``r`` no matter what the parameters are.
"""

from __future__ import annotations

import warnings

from . import tensor as T
from .params import ParamBuilder, ParamTree
from .tensor import DimensionError, Tensor

V_SOURCES = ("F_V", "F_U")


class RankWarning(UserWarning):
    """The requested rank does not constrain the reconstruction."""


def init_lsrb(b: ParamBuilder, prefix: str, c: int, r: int, enable: bool = True) -> None:
    b.conv(f"{prefix}.shallow", c, 3, 3)
    if not enable:
        return
    b.conv(f"{prefix}.u1", c, c, 1)
    b.conv(f"{prefix}.u2", r, c, 1)
    b.conv(f"{prefix}.v1", c, c, 1)
    b.conv(f"{prefix}.v2", c, c, 1)


def shallow_extract(x: Tensor, params: ParamTree, prefix: str = "lsrb") -> Tensor:
    """3x3 convolution, 3 -> c channels, shape preserving."""
    if x.shape[-3] != 3:
        raise DimensionError(f"expected 3 input channels, got {x.shape[-3]}")
    return T.conv2d(x, params[f"{prefix}.shallow.weight"], params[f"{prefix}.shallow.bias"], 1, 1)


def _pointwise_gelu_stack(x: Tensor, params: ParamTree, first: str, second: str) -> Tensor:
    h = T.gelu(T.conv2d(x, params[f"{first}.weight"], params[f"{first}.bias"]))
    return T.gelu(T.conv2d(h, params[f"{second}.weight"], params[f"{second}.bias"]))


def subspace_reconstruct(u: Tensor, f: Tensor, eps: float = 1e-12) -> Tensor:
    """``U^T (U F)`` for U (..., r, hw) and F (..., hw, c), U rows L2-normalised.

    With unit rows ``U^T U`` behaves like a projection, so the output keeps
    the scale of F instead of shrinking with the cube of the activations.
    Normalisation rescales rows only and leaves the rank bound intact.
    """
    hw = u.shape[-1]
    if f.shape[-2] != hw:
        raise DimensionError(f"U has {hw} columns but F has {f.shape[-2]} rows")
    norm = T.sqrt(T.tsum(u * u, axis=-1, keepdims=True) + eps)
    u = u / norm
    return T.matmul(u.transpose(-2, -1), T.matmul(u, f))


def low_rank_project(f_shallow: Tensor, params: ParamTree, r: int, prefix: str = "lsrb", v_source: str = "F_V") -> Tensor:
    """Rank-``r`` reconstruction of the shallow features, same shape as the input."""
    if r < 1:
        raise ValueError("rank must be >= 1")
    if v_source not in V_SOURCES:
        raise ValueError(f"v_source must be one of {V_SOURCES}")
    batched = f_shallow.ndim == 4
    x = f_shallow if batched else f_shallow.reshape((1,) + f_shallow.shape)
    n, c, h, w = x.shape
    hw = h * w
    if r >= min(hw, c):
        warnings.warn(f"rank {r} >= min(hw={hw}, c={c}); the rank bound is vacuous", RankWarning, stacklevel=2)
    elif 4 * r >= hw:
        warnings.warn(f"rank {r} is not small against hw={hw}", RankWarning, stacklevel=2)

    f_u = _pointwise_gelu_stack(x, params, f"{prefix}.u1", f"{prefix}.u2")
    u = f_u.reshape(n, r, hw)
    if v_source == "F_V":
        f_v = _pointwise_gelu_stack(x, params, f"{prefix}.v1", f"{prefix}.v2")
    else:
        # literal reading: the basis comes from F_U, which only has c channels when r == c
        if r != c:
            raise ValueError(f"v_source='F_U' needs r == c (got r={r}, c={c})")
        f_v = f_u
    f = f_v.reshape(n, c, hw).transpose(-2, -1)
    f_hat = subspace_reconstruct(u, f)
    out = f_hat.transpose(-2, -1).reshape(n, c, h, w)
    return out if batched else out.reshape(out.shape[1:])


def lsrb_forward(x: Tensor, params: ParamTree, r: int, prefix: str = "lsrb", enable: bool = True, v_source: str = "F_V") -> Tensor:
    f_shallow = shallow_extract(x, params, prefix)
    if not enable:
        return f_shallow
    return low_rank_project(f_shallow, params, r, prefix, v_source)
