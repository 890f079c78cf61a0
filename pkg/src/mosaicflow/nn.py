"""Parameter containers, convolution layers and the Adam rule."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T

Params = dict[str, np.ndarray]


def init_conv(rng: np.random.Generator, params: Params, name: str, cin: int, cout: int,
              k: int = 3, gain: float = 1.0) -> None:
    """He-normal kernel and zero bias, stored under ``name.w`` / ``name.b``."""
    std = gain * math.sqrt(2.0 / (cin * k * k))
    params[f"{name}.w"] = rng.standard_normal((cout, cin, k, k)) * std
    params[f"{name}.b"] = np.zeros(cout)


def conv(x: T.Node, p: dict[str, T.Node], name: str) -> T.Node:
    return T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"])


def bind(params: Params, requires_grad: bool = True) -> dict[str, T.Node]:
    """Wrap parameter arrays as leaf nodes (tracked or constant)."""
    if requires_grad:
        return {k: T.Node(v, requires_grad=True) for k, v in params.items()}
    return {k: T.constant(v) for k, v in params.items()}


def named_grads(bound: dict[str, T.Node], grads: dict[T.Node, np.ndarray]) -> Params:
    return {k: grads[n] for k, n in bound.items()}


class Adam:
    """Adam with per-parameter learning rates.

    ``lr`` maps a parameter-name prefix to its learning rate; the longest
    matching prefix wins and ``""`` is the default.
    """

    def __init__(self, params: Params, lr: dict[str, float] | float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = {"": float(lr)} if isinstance(lr, (int, float)) else dict(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def rate(self, name: str) -> float:
        best = max((p for p in self.lr if name.startswith(p)), key=len)
        return self.lr[best]

    def step(self, grads: Params) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            self.params[k] -= self.rate(k) * (m / c1) / (np.sqrt(v / c2) + self.eps)
