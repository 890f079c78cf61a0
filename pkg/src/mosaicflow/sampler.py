"""Guided Euler sampling with conflict-free spatial/spectral guidance."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .degradation import Observation, mosaic_node, spectral_node

log = logging.getLogger(__name__)

GAMMA_RANGE = 50.0
TINY = 1e-12
PARALLEL_TOL = 1e-10


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GuidanceConfig:
    steps: int = 10
    gamma_norm: float = 0.4
    seed: int = 0
    norm: str = "l1"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.gamma_norm <= 1.0:
            raise ValueError(f"gamma_norm must lie in [0, 1], got {self.gamma_norm}")
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"norm must be 'l1' or 'l2', got {self.norm!r}")

    @property
    def gamma(self) -> float:
        """Raw guidance intensity in [0, 50]."""
        return self.gamma_norm * GAMMA_RANGE

    @classmethod
    def from_raw(cls, gamma_raw: float, **kw) -> "GuidanceConfig":
        if not 0.0 <= gamma_raw <= GAMMA_RANGE:
            raise ValueError(f"gamma_raw must lie in [0, {GAMMA_RANGE}], got {gamma_raw}")
        return cls(gamma_norm=gamma_raw / GAMMA_RANGE, **kw)


def _flat_dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.vdot(a.ravel(), b.ravel()))


def orthogonal_component(g1: np.ndarray, g2: np.ndarray, diagnostics: list | None = None) -> np.ndarray:
    """Part of ``g2`` orthogonal to ``g1``: ``g2 - (g1.g2 / |g1|^2) g1``.

    When ``|g1| < 1e-12`` there is nothing to project onto and ``g2`` is
    returned unchanged.
    """
    if g1.shape != g2.shape:
        raise T.ShapeError(f"orthogonal_component: shapes {g1.shape} and {g2.shape} differ")
    nn1 = _flat_dot(g1, g1)
    if np.sqrt(nn1) < TINY:
        if diagnostics is not None:
            diagnostics.append("orthogonal_component: zero reference gradient")
        return g2.copy()
    return g2 - (_flat_dot(g1, g2) / nn1) * g1


def unit(g: np.ndarray, norm: str = "l1") -> np.ndarray:
    """Scale ``g`` to unit L1 (default) or L2 norm."""
    n = np.abs(g).sum() if norm == "l1" else np.sqrt(_flat_dot(g, g))
    return g / n


def conflict_free_direction(g_spa: np.ndarray, g_spe: np.ndarray, norm: str = "l1",
                            diagnostics: list | None = None) -> np.ndarray:
    """Combine two gradients into an update with positive dot product against both.

    ``g_v = U(U(O(g_spa, g_spe)) + U(O(g_spe, g_spa)))`` and
    ``g_update = (g_spa.g_v + g_spe.g_v) g_v``.  Degenerate pairs (a zero
    gradient or parallel inputs) fall back to the mean of the two.
    """
    if not (np.all(np.isfinite(g_spa)) and np.all(np.isfinite(g_spe))):
        raise SamplingError("guidance gradients are not finite")
    n_spa = np.sqrt(_flat_dot(g_spa, g_spa))
    n_spe = np.sqrt(_flat_dot(g_spe, g_spe))
    degenerate = n_spa < TINY or n_spe < TINY
    if not degenerate:
        cos = _flat_dot(g_spa, g_spe) / (n_spa * n_spe)
        degenerate = abs(cos) > 1.0 - PARALLEL_TOL
    if degenerate:
        if diagnostics is not None:
            diagnostics.append("conflict_free_direction: degenerate pair, using mean")
        return 0.5 * (g_spa + g_spe)
    a = unit(orthogonal_component(g_spa, g_spe), norm)
    b = unit(orthogonal_component(g_spe, g_spa), norm)
    g_v = unit(a + b, norm)
    return (_flat_dot(g_spa, g_v) + _flat_dot(g_spe, g_v)) * g_v


def guidance_gradients(xt: np.ndarray, pan_expanded: np.ndarray, obs: Observation,
                       weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. ``xt`` of ``||m - A_m(xt + P_D)||^2`` and ``||P - A_P(xt + P_D)||^2``."""
    x = T.Node(np.asarray(xt, dtype=float), requires_grad=True)
    h = T.add(x, pan_expanded)
    l_spa = T.sum_squares(T.sub(obs.mosaic[None], mosaic_node(h, obs.pattern)))
    l_spe = T.sum_squares(T.sub(obs.pan[None], spectral_node(h, weights)))
    g_spa = T.backward(l_spa, [x])[x]
    g_spe = T.backward(l_spe, [x])[x]
    return g_spa, g_spe


def initial_noise(shape: tuple[int, ...], seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


Field = Callable[[np.ndarray, float], np.ndarray]


def integrate(field: Field, x0: np.ndarray, steps: int,
              guide: Callable[[np.ndarray], np.ndarray] | None = None,
              gamma: float = 0.0) -> np.ndarray:
    """Euler steps ``X <- X + dt V(X, t) - gamma * guide(X)`` from t = 0 to 1."""
    x = np.array(x0, dtype=float)
    dt = 1.0 / steps
    for i in range(steps):
        t = i * dt
        step = dt * field(x, t)
        if guide is not None and gamma != 0.0:
            step = step - gamma * guide(x)
        x = x + step
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"sampler state became non-finite at step {i}")
    return x


def sample(net, cond: np.ndarray, pan_expanded: np.ndarray, obs: Observation,
           config: GuidanceConfig, weights: np.ndarray | None = None,
           diagnostics: list | None = None) -> np.ndarray:
    """Generate an HR-HSI: integrate the residual flow and add back P_D.

    ``net`` is a :class:`~mosaicflow.cfm.VectorFieldNet` or any callable
    ``(x, t) -> velocity``.  Guidance gradients are taken at the pre-step
    state, so every step (the last one included) is guided.
    """
    if weights is None:
        weights = net.spectral_weights()
    if hasattr(net, "velocity"):
        def field(x, t):
            return net.velocity(x, t, cond)
    else:
        field = net

    def guide(x):
        g_spa, g_spe = guidance_gradients(x, pan_expanded, obs, weights)
        return conflict_free_direction(g_spa, g_spe, config.norm, diagnostics)

    x0 = initial_noise(pan_expanded.shape, config.seed)
    x1 = integrate(field, x0, config.steps, guide, config.gamma)
    return np.clip(x1 + pan_expanded, 0.0, 1.0)
