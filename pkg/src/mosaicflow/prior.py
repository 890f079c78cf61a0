"""Stage 1: unsupervised prior fusion network trained with equivariant imaging."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .degradation import (Observation, SfaPattern, SpectralResponse, interpolate_node,
                          mosaic_node, spectral_node)

log = logging.getLogger(__name__)

TRANSFORMS = ("identity", "flip_h", "flip_v", "rot90", "rot180", "rot270")
INVERSE = {"identity": "identity", "flip_h": "flip_h", "flip_v": "flip_v",
           "rot90": "rot270", "rot180": "rot180", "rot270": "rot90"}


class TrainingDiverged(RuntimeError):
    pass


def transform(x: T.Node | np.ndarray, kind: str):
    """Apply a spatial transform to the last two axes of a node or array."""
    if isinstance(x, T.Node):
        return T.spatial_transform(x, kind)
    return T.spatial_transform(T.constant(x), kind).value


class PriorNet:
    """Residual conv net ``Y = M + f(M ++ P)`` plus a learnable spectral response.

    The spectral logits live in ``params["srf.logits"]`` so a single optimizer
    can update both, with its own learning rate.
    """

    def __init__(self, bands: int, width: int = 32, depth: int = 4, seed: int = 0):
        self.bands, self.width, self.depth = bands, width, depth
        rng = np.random.default_rng(seed)
        self.params: nn.Params = {}
        chans = [bands + 1] + [width] * (depth - 1) + [bands]
        for i in range(depth):
            gain = 0.1 if i == depth - 1 else 1.0
            nn.init_conv(rng, self.params, f"conv{i}", chans[i], chans[i + 1], gain=gain)
        self.params["srf.logits"] = np.zeros(bands)

    @property
    def srf(self) -> SpectralResponse:
        return SpectralResponse(self.params["srf.logits"])

    def forward(self, pan: T.Node, interp: T.Node, p: dict[str, T.Node]) -> T.Node:
        """``pan`` is (N, 1, H, W), ``interp`` is (N, C, H, W)."""
        h = T.concat([interp, pan], axis=1)
        for i in range(self.depth):
            h = nn.conv(h, p, f"conv{i}")
            if i < self.depth - 1:
                h = T.relu(h)
        return T.add(interp, h)

    def predict(self, obs: Observation) -> np.ndarray:
        p = nn.bind(self.params, requires_grad=False)
        pan = T.constant(obs.pan[None, None])
        interp = T.constant(obs.interpolated()[None])
        return self.forward(pan, interp, p).value[0]


def loss_oc(y: T.Node, pan, mosaic, weights, pattern: SfaPattern) -> T.Node:
    """Observation consistency ``||P - A_P(Y)||^2 + ||m - A_m(Y)||^2``.

    ``y`` is (N, C, H, W); ``pan`` and ``mosaic`` carry a singleton band axis.
    """
    y = T._as_node(y)
    pan = np.asarray(pan)
    mosaic = np.asarray(mosaic)
    spe = T.sub(pan, spectral_node(y, weights))
    spa = T.sub(mosaic, mosaic_node(y, pattern))
    return T.add(T.sum_squares(spe), T.sum_squares(spa))


def loss_ei(y: T.Node, net: PriorNet, p: dict[str, T.Node], kind: str, weights,
            pattern: SfaPattern) -> T.Node:
    """Equivariance loss ``||T(Y) - G(A_P(T(Y)), interp(A_m(T(Y))))||^2``."""
    ty = transform(T._as_node(y), kind)
    pan_t = spectral_node(ty, weights)
    interp_t = interpolate_node(mosaic_node(ty, pattern), pattern)
    return T.sum_squares(T.sub(ty, net.forward(pan_t, interp_t, p)))


@dataclass
class PretrainResult:
    net: PriorNet
    y: np.ndarray
    losses: list[float] = field(default_factory=list)


def pretrain(obs: Observation, epochs: int, seed: int = 0, width: int = 32,
             lr: float = 1e-4, lr_srf: float = 1e-5, net: PriorNet | None = None) -> PretrainResult:
    """Fit the prior on one observation pair and return the pseudo HR-HSI.

    One epoch is one Adam step on the full scene with a fresh random transform.
    ``losses[i]`` is L_oc + L_ei evaluated before step ``i``.
    """
    if epochs < 1:
        raise ValueError("pretrain needs epochs >= 1")
    pattern = obs.pattern
    net = net or PriorNet(obs.bands, width=width, seed=seed)
    opt = nn.Adam(net.params, {"": lr, "srf.": lr_srf})
    rng = np.random.default_rng(seed)
    pan = obs.pan[None, None]
    mosaic = obs.mosaic[None, None]
    interp = T.constant(obs.interpolated()[None])
    pan_node = T.constant(pan)
    losses = []
    for epoch in range(epochs):
        kind = TRANSFORMS[rng.integers(len(TRANSFORMS))]
        p = nn.bind(net.params)
        w = T.softmax(p["srf.logits"], axis=0)
        y = net.forward(pan_node, interp, p)
        loss = T.add(loss_oc(y, pan, mosaic, w, pattern), loss_ei(y, net, p, kind, w, pattern))
        value = float(loss.value)
        if not np.isfinite(value):
            raise TrainingDiverged(f"prior loss became {value} at epoch {epoch + 1}")
        losses.append(value)
        opt.step(nn.named_grads(p, T.backward(loss, p.values())))
        if epoch % 50 == 0:
            log.debug("pretrain epoch %d L_pre=%.6g", epoch + 1, value)
    return PretrainResult(net, net.predict(obs), losses)
