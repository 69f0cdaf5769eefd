"""Dense tensors with a small taped reverse-mode differentiation engine.

Only the operations the restoration network needs are provided. Every op
records its parents and a backward closure on the output tensor; calling
``Tensor.backward`` replays those records in reverse topological order.

Layout convention for images and feature maps is ``(N, C, H, W)``; the
convolution helpers also accept an unbatched ``(C, H, W)`` tensor.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class GradCheckError(RuntimeError):
    """Raised when the finite-difference oracle meets a non-finite value."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus the bookkeeping reverse mode needs.

    ``_parents`` and ``_backward`` together form the grad record of the op that
    produced this tensor. ``_backward`` maps the upstream gradient to a tuple
    with one entry per parent (``None`` where no gradient flows).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, tensor has {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def astype(self, dtype) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- reverse mode ----------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def transpose(self, a: int = -2, b: int = -1) -> Tensor:
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return permute(self, axes)


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _padding4(v) -> tuple[int, int, int, int]:
    """int, (ph, pw) or ((top, bottom), (left, right)) -> (top, bottom, left, right)."""
    if isinstance(v, (tuple, list)) and isinstance(v[0], (tuple, list)):
        (t, b), (l, r) = v
        return int(t), int(b), int(l), int(r)
    ph, pw = _pair(v)
    return ph, ph, pw, pw


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (
            unbroadcast(g, sa) if a.requires_grad else None,
            unbroadcast(g, sb) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (
            unbroadcast(g, sa) if a.requires_grad else None,
            unbroadcast(-g, sb) if b.requires_grad else None,
        )

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out = x.data ** np.asarray(p, dtype=x.dtype)

    def backward(g):
        return (g * p * x.data ** np.asarray(p - 1.0, dtype=x.dtype),)

    return _make(out, (x,), backward, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(x: Tensor) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    xd = x.data
    cdf = erf(xd * (1.0 / math.sqrt(2.0)))
    cdf += 1.0
    cdf *= 0.5
    out = xd * cdf

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd)
        pdf *= xd * (1.0 / math.sqrt(2.0 * math.pi))
        pdf += cdf
        pdf *= g
        return (pdf,)

    return _make(out.astype(xd.dtype, copy=False), (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# layout


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} into {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "permute")


def permute_reshape(x: Tensor, axes=None, shape=None) -> Tensor:
    """Optional permutation followed by an optional reshape."""
    if axes is not None:
        x = permute(x, axes)
    if shape is not None:
        x = reshape(x, shape)
    return x


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape
    out = x.data[index]
    basic = not isinstance(index, (list, np.ndarray, Tensor)) and not (
        isinstance(index, tuple) and any(isinstance(i, (list, np.ndarray)) for i in index)
    )

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        ax = axis % g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(int(lo), int(hi))
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(out, tensors, backward, "concat")


def roll(x: Tensor, shifts, axes) -> Tensor:
    shifts = tuple(shifts) if isinstance(shifts, (tuple, list)) else (shifts,)
    axes = tuple(axes) if isinstance(axes, (tuple, list)) else (axes,)
    back = tuple(-s for s in shifts)
    return _make(np.roll(x.data, shifts, axes), (x,), lambda g: (np.roll(g, back, axes),), "roll")


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (axis 0) by an integer index array."""
    index = np.asarray(index)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(table.data[index], (table,), backward, "take")


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    idx = np.arange(-before, n + after)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def pad_reflect(x: Tensor, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> Tensor:
    """Reflect-pad the last two axes (mirror without repeating the edge)."""
    hi = _reflect_index(x.shape[-2], *pad_h)
    wi = _reflect_index(x.shape[-1], *pad_w)
    shape = x.shape
    out = x.data[..., hi[:, None], wi[None, :]]

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (Ellipsis, hi[:, None], wi[None, :]), g)
        return (full,)

    return _make(out, (x,), backward, "pad_reflect")


def pixel_shuffle(x: Tensor, factor: int) -> Tensor:
    """(N, C*f*f, H, W) -> (N, C, H*f, W*f), channel order c*f*f + i*f + j."""
    n, c, h, w = x.shape
    f = int(factor)
    if c % (f * f):
        raise DimensionError(f"{c} channels not divisible by {f}^2")
    y = reshape(x, (n, c // (f * f), f, f, h, w))
    y = permute(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (n, c // (f * f), h * f, w * f))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with numpy batch broadcasting."""
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Token-wise affine map, ``x @ weight + bias`` with weight (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else y + bias


# ---------------------------------------------------------------------------
# normalisation and attention primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = x.data - np.max(x.data, axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= np.sum(out, axis=axis, keepdims=True)

    def backward(g):
        gy = g * out
        gy -= out * np.sum(gy, axis=axis, keepdims=True)
        return (gy,)

    return _make(out, (x,), backward, "softmax")


def _row_max(x: np.ndarray) -> np.ndarray:
    """Max over the last axis (keepdims) by pairwise folding; faster than
    ``x.max(-1)`` for the short contiguous rows of attention maps."""
    m, n = x, x.shape[-1]
    while n > 1:
        h = n // 2
        folded = np.maximum(m[..., :h], m[..., h : 2 * h])
        if n % 2:
            folded[..., :1] = np.maximum(folded[..., :1], m[..., 2 * h :])
        m, n = folded, h
    return m


def attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None, scale: float = 1.0) -> tuple[Tensor, np.ndarray]:
    """Fused ``softmax(scale * q k^T + bias) v`` over (B, H, T, d) operands.

    ``bias`` is (G, H, T, T) with B a multiple of G; batch entry ``b`` uses
    ``bias[b % G]``. Entries may be ``-inf`` as long as no row is fully
    masked. Returns the output and the probability array (for inspection).
    """
    if not (q.ndim == k.ndim == v.ndim == 4):
        raise DimensionError("attention operands must be (B, H, T, d)")
    bsz, heads, tq, d = q.shape
    if k.shape != (bsz, heads, v.shape[2], d) or v.shape[:2] != (bsz, heads):
        raise DimensionError(f"attention shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    tk = k.shape[2]
    if bias is not None:
        g = bias.shape[0]
        if bias.ndim != 4 or bias.shape[1:] != (heads, tq, tk) or bsz % g:
            raise DimensionError(f"bias {bias.shape} does not fit scores {(bsz, heads, tq, tk)}")
    qs = q.data * np.asarray(scale, dtype=q.dtype)
    p = np.matmul(qs, np.swapaxes(k.data, -1, -2))
    if bias is not None:
        view = p.reshape(-1, *bias.shape)
        view += bias.data
    p -= _row_max(p)
    np.exp(p, out=p)
    p /= np.einsum("...ij->...i", p)[..., None]
    out = np.matmul(p, v.data)

    def backward(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g) if v.requires_grad else None
        ds = np.matmul(g, np.swapaxes(v.data, -1, -2))
        ds -= np.einsum("...ij,...ij->...i", ds, p)[..., None]
        ds *= p
        gb = None
        if bias is not None and bias.requires_grad:
            gb = ds.reshape(-1, *bias.shape).sum(axis=0)
        gq = np.matmul(ds, k.data) * np.asarray(scale, dtype=ds.dtype) if q.requires_grad else None
        gk = np.matmul(np.swapaxes(ds, -1, -2), qs) if k.requires_grad else None
        return (gq, gk, gv) if bias is None else (gq, gk, gv, gb)

    parents = (q, k, v) if bias is None else (q, k, v, bias)
    return _make(out, parents, backward, "attention"), p


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise each slice along ``axis`` to zero mean / unit variance, then scale."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layernorm affine extents must be ({n},)")
    bshape = [1] * x.ndim
    bshape[ax] = n
    gam = gamma.data.reshape(bshape)
    if ax == x.ndim - 1:
        # short contiguous rows: a BLAS mat-vec beats numpy's reduction by a wide margin
        avg = np.full((n, 1), 1.0 / n, dtype=x.dtype)

        def rmean(a):
            return a @ avg

    else:

        def rmean(a):
            return a.mean(axis=ax, keepdims=True)

    mu = rmean(x.data)
    xc = x.data - mu
    var = rmean(xc * xc)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out = xhat * gam + beta.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != ax)

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gam
            gx = inv * (
                dxhat
                - rmean(dxhat)
                - xhat * rmean(dxhat * xhat)
            )
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gb = g.sum(axis=red) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward, "layernorm")


# ---------------------------------------------------------------------------
# convolutions (cross-correlation convention, NCHW)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + pad - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"extent {n} with kernel {k}, stride {stride}, padding {pad} is not integral"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """Dense 2-D cross-correlation with zero padding.

    ``weight`` has shape (C_out, C_in, kh, kw). ``padding`` is an int, a per-axis
    pair, or ``((top, bottom), (left, right))``. The output extent
    ``(n + pads - k) / stride + 1`` must be integral. Unbatched inputs give
    unbatched outputs.
    """
    xb, squeeze = _batched(x)
    n, cin, h, w = xb.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d expects {wcin} input channels, got {cin}")
    pt, pb, pl, pr = _padding4(padding)
    s = int(stride)
    ho = _out_extent(h, kh, s, pt + pb)
    wo = _out_extent(w, kw, s, pl + pr)
    xd = xb.data

    if kh == kw == 1 and s == 1 and pt == pb == pl == pr == 0:
        w2 = weight.data.reshape(cout, cin)
        flat = xd.reshape(n, cin, h * w)
        out = np.matmul(w2, flat).reshape(n, cout, h, w)

        def backward(g):
            g2 = g.reshape(n, cout, h * w)
            gx = np.matmul(w2.T, g2).reshape(xd.shape) if xb.requires_grad else None
            gw = None
            if weight.requires_grad:
                gw = np.einsum("nop,ncp->oc", g2, flat).reshape(weight.shape)
            gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
            return gx, gw, gb

    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xd
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::s, ::s]  # (n, cin, ho, wo, kh, kw)
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, cin * kh * kw, ho * wo)
        w2 = weight.data.reshape(cout, cin * kh * kw)
        out = np.matmul(w2, cols).reshape(n, cout, ho, wo)

        def backward(g):
            g2 = g.reshape(n, cout, ho * wo)
            gx = gw = None
            if xb.requires_grad:
                dcols = np.matmul(w2.T, g2).reshape(n, cin, kh, kw, ho, wo)
                dxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, i, j]
                gx = dxp[:, :, pt : pt + h, pl : pl + w]
            if weight.requires_grad:
                gw = np.einsum("nop,nkp->ok", g2, cols).reshape(weight.shape)
            gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
            return gx, gw, gb

    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"bias must have shape ({cout},)")
        out = out + bias.data.reshape(1, cout, 1, 1)
    parents = (xb, weight) if bias is None else (xb, weight, bias)
    y = _make(out, parents, backward, "conv2d")
    return reshape(y, y.shape[1:]) if squeeze else y


def dwconv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding=None) -> Tensor:
    """Depth-wise 2-D cross-correlation, stride 1; ``weight`` is (C, 1, kh, kw).

    ``padding=None`` keeps the spatial extent (requires odd kernel sides).
    """
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    wc, one, kh, kw = weight.shape
    if wc != c or one != 1:
        raise DimensionError(f"depth-wise weight {weight.shape} does not match {c} channels")
    if padding is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError("same-padding needs odd kernel sides")
        ph, pw = kh // 2, kw // 2
    else:
        ph, pw = _pair(padding)
    ho = _out_extent(h, kh, 1, 2 * ph)
    wo = _out_extent(w, kw, 1, 2 * pw)
    xp = np.pad(xb.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xb.data
    wd = weight.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(xp.dtype, wd.dtype))
    for i in range(kh):
        for j in range(kw):
            out += wd[:, i, j][:, None, None] * xp[:, :, i : i + ho, j : j + wo]

    def backward(g):
        gx = gw = None
        if xb.requires_grad:
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + ho, j : j + wo] += wd[:, i, j][:, None, None] * g
            gx = dxp[:, :, ph : ph + h, pw : pw + w]
        if weight.requires_grad:
            gw = np.empty(weight.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i : i + ho, j : j + wo])
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    if bias is not None:
        out = out + bias.data.reshape(1, c, 1, 1)
    parents = (xb, weight) if bias is None else (xb, weight, bias)
    y = _make(out, parents, backward, "dwconv2d")
    return reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
    rel_floor: float = 1e-6,
    stencil: int = 2,
) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``stencil`` picks the 2-point (error O(h^2)) or 4-point (O(h^4)) central
    formula; the latter tolerates a larger ``step`` and so less roundoff.

    ``f`` maps the input tensors to a scalar tensor; inputs should be f64 with
    ``requires_grad`` set. Every coordinate is probed unless ``max_elements``
    caps the total, in which case coordinates are drawn (by ``seed``) by first
    picking an input uniformly, then an element of it.
    The relative error is ``|a - n| / max(|a|, |n|, floor, rel_floor * g)``
    where ``g`` is the largest analytic gradient magnitude over all inputs:
    coordinates whose gradient is many orders below the rest are judged
    against the finite-difference noise floor instead of their own size.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise GradCheckError("function value is not finite")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.reshape(t.shape) for t in inputs]
    gmax = max((float(np.abs(a).max()) for a in analytic if a.size), default=0.0)
    denom_floor = max(floor, rel_floor * gmax)

    coords: Iterable[tuple[int, int]]
    total = sum(t.size for t in inputs)
    if max_elements is None or total <= max_elements:
        coords = [(i, k) for i, t in enumerate(inputs) for k in range(t.size)]
    else:
        rng = np.random.default_rng(seed)
        picked = set()
        while len(picked) < max_elements:
            i = int(rng.integers(len(inputs)))
            picked.add((i, int(rng.integers(inputs[i].size))))
        coords = sorted(picked)

    worst = 0.0
    with no_grad():
        for i, k in coords:
            flat = inputs[i].data.reshape(-1)
            orig = flat[k]
            values = {}
            for m in ((-2, -1, 1, 2) if stencil == 4 else (-1, 1)):
                flat[k] = orig + m * step
                values[m] = f(*inputs).item()
            flat[k] = orig
            if not all(math.isfinite(v) for v in values.values()):
                raise GradCheckError(f"non-finite evaluation at input {i}, element {k}")
            if stencil == 4:
                num = (values[-2] - 8.0 * values[-1] + 8.0 * values[1] - values[2]) / (12.0 * step)
            else:
                num = (values[1] - values[-1]) / (2.0 * step)
            a = float(analytic[i].reshape(-1)[k])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), denom_floor))
    for t in inputs:
        t.grad = None
    return worst
