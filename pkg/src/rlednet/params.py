"""Named parameter storage and seeded initialisers."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class ParamTree(dict):
    """Ordered mapping ``dotted.path -> Tensor``.

    Insertion order is the canonical iteration order, so it must only ever be
    produced by the (deterministic) init routines.
    """

    def count(self) -> int:
        return int(sum(t.size for t in self.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def astype(self, dtype) -> ParamTree:
        return ParamTree((k, Tensor(t.data.astype(dtype), requires_grad=True)) for k, t in self.items())

    def copy(self) -> ParamTree:
        return ParamTree((k, Tensor(t.data.copy(), requires_grad=True)) for k, t in self.items())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until every value lies inside +-2 std (and inside +-1)."""
    bound = min(2.0 * std, 0.999)
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


class ParamBuilder:
    """Creates parameters in call order from one seeded generator."""

    def __init__(self, seed: int, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.tree = ParamTree()

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.tree:
            raise KeyError(f"duplicate parameter {name}")
        self.tree[name] = Tensor(value.astype(self.dtype), requires_grad=True)

    def conv(self, name: str, cout: int, cin: int, k: int) -> None:
        fan_in = cin * k * k
        self._add(f"{name}.weight", _truncated_normal(self.rng, (cout, cin, k, k), 1.0 / math.sqrt(fan_in)))
        self._add(f"{name}.bias", np.zeros(cout))

    def dwconv(self, name: str, channels: int, k: int) -> None:
        self._add(f"{name}.weight", _truncated_normal(self.rng, (channels, 1, k, k), 1.0 / k))
        self._add(f"{name}.bias", np.zeros(channels))

    def linear(self, name: str, din: int, dout: int, std: float | None = 0.02) -> None:
        """Weight stored (in, out) so tokens multiply on the right; ``std=None`` means 1/sqrt(din)."""
        std = 1.0 / math.sqrt(din) if std is None else std
        self._add(f"{name}.weight", _truncated_normal(self.rng, (din, dout), std))
        self._add(f"{name}.bias", np.zeros(dout))

    def norm(self, name: str, n: int) -> None:
        self._add(f"{name}.gamma", np.ones(n))
        self._add(f"{name}.beta", np.zeros(n))

    def zeros(self, name: str, shape) -> None:
        self._add(name, np.zeros(shape))
