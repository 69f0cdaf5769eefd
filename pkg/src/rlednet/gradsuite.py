"""Finite-difference gradient suite over every differentiable building block.

Each case builds a random f64 problem per seed: the parameters are redrawn
(so zero-initialised biases, temperatures and position tables are exercised)
and the block output is reduced to a scalar ``sum(out * R)`` with a fixed
random ``R``. Sampled coordinates of the input and every parameter are then
compared against 4-point central differences via :func:`tensor.grad_check`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .cst import CstConfig, cab_attention, cab_feedforward, cst_forward, init_cst, sab_forward
from .losses import LossConfig, l1_loss, ssim_loss, tv_loss
from .lsrb import init_lsrb, lsrb_forward
from .network import ModelConfig, cstnet_forward, frb_forward, init_params
from .params import ParamBuilder, ParamTree
from .tensor import Tensor

SMOOTH_TOL = 1e-5
LAYER_TOL = 1e-4
# O(h^4) stencil: truncation stays ~1e-8 even through the deep network cases, roundoff ~10x below a 1e-5 two-point probe
STEP = 1e-4


@dataclass(frozen=True)
class Case:
    name: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]
    tol: float
    max_elements: int | None = 40


@dataclass
class CaseResult:
    name: str
    worst: float
    tol: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def _t(rng: np.random.Generator, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _randomise(tree: ParamTree, rng: np.random.Generator, scale: float = 0.3) -> ParamTree:
    out = ParamTree()
    for k, p in tree.items():
        if k.endswith(".gamma"):
            data = 1.0 + rng.normal(0.0, 0.1, size=p.shape)
        else:
            data = p.data.astype(np.float64) + rng.normal(0.0, scale, size=p.shape)
        out[k] = Tensor(data, requires_grad=True)
    return out


def _scalarise(inputs: list[Tensor], names: list[str], forward: Callable[[Tensor, ParamTree], Tensor], rng):
    """Wrap ``forward(x, params)`` as ``f(x, *params) -> sum(out * R)``."""
    x = inputs[0]
    with T.no_grad():
        probe = forward(x, ParamTree(zip(names, inputs[1:])))
    weights = rng.normal(size=probe.shape)

    def f(x, *ps):
        return T.tsum(forward(x, ParamTree(zip(names, ps))) * weights)

    return f


def _module_case(init: Callable[[ParamBuilder], None], forward, x_shape, rng, x_scale=1.0, p_scale=0.3):
    b = ParamBuilder(int(rng.integers(2**31)), np.float64)
    init(b)
    params = _randomise(b.tree, rng, p_scale)
    x = _t(rng, *x_shape, scale=x_scale)
    names = list(params)
    inputs = [x] + [params[k] for k in names]
    return _scalarise(inputs, names, forward, rng), inputs


# ---------------------------------------------------------------------------
# primitive ops (smooth, tight tolerance)


def _op_matmul(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4, 2)
    return (lambda a, b: T.tsum(T.matmul(a, b) ** 2)), [a, b]


def _op_conv(rng):
    x, w, bias = _t(rng, 2, 5, 5), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    r = rng.normal(size=(3, 3, 3))
    return (lambda x, w, b: T.tsum(T.conv2d(x, w, b, stride=2, padding=1) * r)), [x, w, bias]


def _op_dwconv(rng):
    x, w, bias = _t(rng, 3, 5, 6), _t(rng, 3, 1, 3, 3), _t(rng, 3)
    r = rng.normal(size=(3, 5, 6))
    return (lambda x, w, b: T.tsum(T.dwconv2d(x, w, b) * r)), [x, w, bias]


def _op_softmax(rng):
    x = _t(rng, 2, 5)
    r = rng.normal(size=(2, 5))
    return (lambda x: T.tsum(T.softmax(x, -1) * r)), [x]


def _op_attention(rng):
    q, k, v = _t(rng, 4, 2, 5, 3), _t(rng, 4, 2, 5, 3), _t(rng, 4, 2, 5, 3)
    bias = _t(rng, 2, 2, 5, 5)
    r = rng.normal(size=(4, 2, 5, 3))
    return (lambda q, k, v, b: T.tsum(T.attention(q, k, v, b, scale=0.6)[0] * r)), [q, k, v, bias]


def _op_layernorm(rng):
    x, g, b = _t(rng, 3, 6), _t(rng, 6), _t(rng, 6)
    r = rng.normal(size=(3, 6))
    return (lambda x, g, b: T.tsum(T.layernorm(x, g, b) * r)), [x, g, b]


def _op_gelu(rng):
    x = _t(rng, 10, scale=2.0)
    r = rng.normal(size=10)
    return (lambda x: T.tsum(T.gelu(x) * r)), [x]


def _op_layout(rng):
    x = _t(rng, 1, 8, 4, 4)
    r = rng.normal(size=(1, 2, 10, 10))

    def f(x):
        y = T.pixel_shuffle(x, 2)
        y = T.roll(y, (1, -2), (2, 3))
        y = T.pad_reflect(y, (1, 1), (2, 0))
        return T.tsum(y * r)

    return f, [x]


# ---------------------------------------------------------------------------
# network blocks

_SMALL = CstConfig(m=4, k=4, window=2, heads_sab=2, heads_cab=2, mlp_ratio=2)


def _lsrb(rng):
    return _module_case(
        lambda b: init_lsrb(b, "lsrb", 6, 2),
        lambda x, p: lsrb_forward(x, p, 2),
        (1, 3, 4, 4),
        rng,
    )


def _sab(rng):
    cfg = CstConfig(m=4, k=0, window=2, heads_sab=2, mlp_ratio=2)
    return _module_case(
        lambda b: init_cst(b, "l", cfg),
        lambda x, p: sab_forward(x, p, "l", cfg),
        (1, 4, 4, 4),
        rng,
    )


def _cab_attention(rng):
    cfg = CstConfig(m=0, k=4, heads_cab=2)
    keep = ("qkv", "qkv_dw", "log_alpha", "out_dw")
    return _subset_case(cfg, keep, lambda x, p: cab_attention(x, p, "l", cfg), rng)


def _cab_feedforward(rng):
    cfg = CstConfig(m=0, k=4, heads_cab=2)
    keep = ("ffn_norm", "ffn_in", "ffn_dw")
    return _subset_case(cfg, keep, lambda x, p: cab_feedforward(x, p, "l"), rng)


def _subset_case(cfg: CstConfig, keep: tuple[str, ...], forward, rng):
    b = ParamBuilder(int(rng.integers(2**31)), np.float64)
    init_cst(b, "l", cfg)
    params = _randomise(b.tree, rng)
    params = ParamTree((k, v) for k, v in params.items() if k.split(".")[2] in keep)
    x = _t(rng, 1, cfg.k, 3, 3)
    names = list(params)
    inputs = [x] + [params[k] for k in names]
    return _scalarise(inputs, names, forward, rng), inputs


def _cst(rng):
    return _module_case(
        lambda b: init_cst(b, "l", _SMALL),
        lambda x, p: cst_forward(x, _SMALL, p, "l"),
        (1, 8, 4, 4),
        rng,
    )


_MINI = ModelConfig(c=4, r=2, n_enc=2, n_frb=2, window=2, heads_sab=2, heads_cab=2, mlp_ratio=2)


def _network_case(forward, x_shape, rng):
    params = _randomise(init_params(_MINI, int(rng.integers(2**31)), np.float64), rng, 0.1)
    x = _t(rng, *x_shape)
    with T.no_grad():
        probe = forward(x, params)
    # only parameters that influence this sub-network are probed
    names = [k for k in params if _touches(forward.__name__, k)]
    inputs = [x] + [params[k] for k in names]
    fixed = ParamTree((k, v) for k, v in params.items() if k not in names)
    weights = rng.normal(size=probe.shape)

    def f(x, *ps):
        p = ParamTree(fixed)
        p.update(zip(names, ps))
        return T.tsum(forward(x, p) * weights)

    return f, inputs


def _touches(block: str, key: str) -> bool:
    if block == "frb":
        return key.startswith("frb")
    return not key.startswith(("lsrb", "frb"))


def _cstnet(rng):
    def cstnet(x, p):
        return cstnet_forward(x, _MINI, p)

    return _network_case(cstnet, (1, 4, 16, 16), rng)


def _frb(rng):
    def frb(x, p):
        return frb_forward(x, _MINI, p)

    return _network_case(frb, (1, 8, 4, 4), rng)


# ---------------------------------------------------------------------------
# losses (kink-free constructions)


def _target_offset(rng, pred: np.ndarray) -> np.ndarray:
    sign = rng.choice([-1.0, 1.0], size=pred.shape)
    return pred + sign * rng.uniform(0.01, 0.1, size=pred.shape)


def _l1(rng):
    x = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 6, 6)), requires_grad=True)
    target = _target_offset(rng, x.data)
    return (lambda x: l1_loss(x, target)), [x]


def _ssim(rng):
    x = Tensor(rng.uniform(0.0, 1.0, size=(1, 2, 12, 12)), requires_grad=True)
    target = np.clip(x.data + rng.normal(0.0, 0.1, size=x.shape), 0.0, 1.0)
    cfg = LossConfig()
    return (lambda x: ssim_loss(x, target, cfg)), [x]


def _tv(rng):
    # checkerboard keeps every forward difference far from the |.| kink
    yy, xx = np.indices((6, 6))
    board = np.where((yy + xx) % 2, 0.7, 0.3)
    x = Tensor(board[None, None] + rng.uniform(-0.05, 0.05, size=(1, 3, 6, 6)), requires_grad=True)
    return (lambda x: tv_loss(x)), [x]


def _tv_iso(rng):
    x = Tensor(rng.uniform(0.0, 1.0, size=(1, 2, 5, 5)), requires_grad=True)
    return (lambda x: tv_loss(x, "isotropic")), [x]


CASES: dict[str, Case] = {
    c.name: c
    for c in (
        Case("op.matmul", _op_matmul, SMOOTH_TOL, None),
        Case("op.conv2d", _op_conv, SMOOTH_TOL, None),
        Case("op.dwconv2d", _op_dwconv, SMOOTH_TOL, None),
        Case("op.softmax", _op_softmax, SMOOTH_TOL, None),
        Case("op.attention", _op_attention, SMOOTH_TOL, None),
        Case("op.layernorm", _op_layernorm, SMOOTH_TOL, None),
        Case("op.gelu", _op_gelu, SMOOTH_TOL, None),
        Case("op.layout", _op_layout, SMOOTH_TOL, None),
        Case("lsrb", _lsrb, LAYER_TOL),
        Case("sab", _sab, LAYER_TOL),
        Case("cab_attention", _cab_attention, LAYER_TOL),
        Case("cab_feedforward", _cab_feedforward, LAYER_TOL),
        Case("cst", _cst, LAYER_TOL),
        Case("cstnet", _cstnet, LAYER_TOL, 24),
        Case("frb", _frb, LAYER_TOL, 30),
        Case("loss.l1", _l1, LAYER_TOL, None),
        Case("loss.ssim", _ssim, LAYER_TOL, 60),
        Case("loss.tv", _tv, LAYER_TOL, None),
        Case("loss.tv_isotropic", _tv_iso, LAYER_TOL, None),
    )
}


def run_case(case: Case, seeds: int = 20, base_seed: int = 0) -> CaseResult:
    start = time.perf_counter()
    worst = 0.0
    for s in range(seeds):
        rng = np.random.default_rng([base_seed, s])
        f, inputs = case.build(rng)
        err = T.grad_check(f, inputs, step=STEP, max_elements=case.max_elements, seed=s, stencil=4)
        worst = max(worst, err)
    return CaseResult(case.name, worst, case.tol, seeds, time.perf_counter() - start)


def run_suite(names=None, seeds: int = 20, callback=None) -> list[CaseResult]:
    """Run the named cases (all by default); ``callback`` sees each result."""
    selected = list(CASES) if not names else list(names)
    unknown = [n for n in selected if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradient case(s): {', '.join(unknown)}; known: {', '.join(CASES)}")
    results = []
    for name in selected:
        res = run_case(CASES[name], seeds)
        results.append(res)
        if callback is not None:
            callback(res)
    return results
