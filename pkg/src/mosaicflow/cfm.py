"""Stage 2: conditional flow matching on the residual H~ - P_D."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .degradation import Observation, mosaic_node, spectral_node
from .prior import TRANSFORMS, TrainingDiverged, transform

log = logging.getLogger(__name__)

TIME_DIM = 16


def conditioning(obs: Observation) -> np.ndarray:
    """C = M ++ P ++ P_h, a (c + 2)-band cube at PAN extent."""
    return np.concatenate([obs.interpolated(), obs.pan[None], obs.pan_highpass()[None]], axis=0)


def time_embedding(t: np.ndarray, dim: int = TIME_DIM) -> np.ndarray:
    """Sinusoidal features of t in [0, 1], shape (N, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.geomspace(1.0, 64.0, half)
    ang = math.pi * t[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def path_point(x0: np.ndarray, x1: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    """Linear path: ``Xt = (1 - t) X0 + t X1`` and ``Vt = X1 - X0``.

    ``t`` is a scalar or one value per leading batch entry.
    """
    if x0.shape != x1.shape:
        raise T.ShapeError(f"path_point: shapes {x0.shape} and {x1.shape} differ")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"path_point: t must lie in [0, 1], got {t}")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1.0 - t) * x0 + t * x1, x1 - x0


class VectorFieldNet:
    """Small conv U-Net predicting the velocity of the residual flow.

    Input channels are ``Xt ++ C ++ emb(t)`` broadcast over space; two 2x2
    average-pool levels with skip concatenation and nearest upsampling.
    """

    def __init__(self, bands: int, widths: tuple[int, int] = (32, 64), seed: int = 0,
                 temb: int = TIME_DIM, endpoint: bool = False, t_floor: float = 0.05):
        self.bands, self.widths, self.temb = bands, tuple(widths), temb
        self.endpoint, self.t_floor = endpoint, t_floor
        w1, w2 = self.widths
        rng = np.random.default_rng(seed)
        p: nn.Params = {}
        nn.init_conv(rng, p, "enc1a", 2 * bands + 2 + temb, w1)
        nn.init_conv(rng, p, "enc1b", w1, w1)
        nn.init_conv(rng, p, "enc2a", w1, w2)
        nn.init_conv(rng, p, "enc2b", w2, w2)
        nn.init_conv(rng, p, "mid", w2, w2)
        nn.init_conv(rng, p, "dec2", 2 * w2, w2)
        nn.init_conv(rng, p, "dec1", w2 + w1, w1)
        nn.init_conv(rng, p, "out", w1, bands, gain=0.1)
        p["srf.logits"] = np.zeros(bands)
        self.params = p

    def forward(self, xt: T.Node, t: np.ndarray, cond: T.Node, p: dict[str, T.Node]) -> T.Node:
        n, _, h, w = xt.shape
        if h % 4 or w % 4:
            raise T.ShapeError(f"VectorFieldNet: extents {(h, w)} must be divisible by 4")
        emb = time_embedding(np.broadcast_to(np.asarray(t, dtype=float), (n,)), self.temb)
        emb = np.broadcast_to(emb[:, :, None, None], (n, self.temb, h, w))
        x = T.concat([xt, cond, T.constant(emb)], axis=1)
        e1 = T.relu(nn.conv(T.relu(nn.conv(x, p, "enc1a")), p, "enc1b"))
        e2 = T.relu(nn.conv(T.relu(nn.conv(T.avg_pool2(e1), p, "enc2a")), p, "enc2b"))
        mid = T.relu(nn.conv(T.avg_pool2(e2), p, "mid"))
        d2 = T.relu(nn.conv(T.concat([T.upsample2(mid), e2], axis=1), p, "dec2"))
        d1 = T.relu(nn.conv(T.concat([T.upsample2(d2), e1], axis=1), p, "dec1"))
        out = nn.conv(d1, p, "out")
        if not self.endpoint:
            return out
        c = self.bands
        base = cond.value[:, :c] - cond.value[:, c:c + 1]
        tt = np.broadcast_to(np.asarray(t, dtype=float), (n,)).reshape(n, 1, 1, 1)
        inv = 1.0 / np.maximum(1.0 - tt, self.t_floor)
        return T.mul(T.sub(T.add(out, base), xt), inv)

    def velocity(self, xt: np.ndarray, t: float, cond: np.ndarray) -> np.ndarray:
        """Untracked prediction for a single (c, H, W) state."""
        p = nn.bind(self.params, requires_grad=False)
        out = self.forward(T.constant(xt[None]), np.array([t]), T.constant(cond[None]), p)
        return out.value[0]

    def spectral_weights(self) -> np.ndarray:
        z = self.params["srf.logits"]
        e = np.exp(z - z.max())
        return e / e.sum()


# ---------------------------------------------------------------------------
# losses


def _matching(net, p, x0, x1, cond, t):
    xt, vt = path_point(x0, x1, t)
    pred = net.forward(T.constant(xt), t, T.constant(cond), p)
    loss = T.scale(T.sum_squares(T.sub(pred, vt)), 1.0 / x0.shape[0])
    return loss, pred, xt


def loss_dir(net: VectorFieldNet, p, x0, x1, cond, t) -> T.Node:
    """Mean over the batch of ``||V(Xt, t, C) - (X1 - X0)||^2``."""
    return _matching(net, p, x0, x1, cond, t)[0]


def loss_trans(net: VectorFieldNet, p, x0, x1, cond, t, kind: str) -> T.Node:
    """``loss_dir`` on the path between T(X0) and T(X1), conditioned on T(C)."""
    return _matching(net, p, transform(x0, kind), transform(x1, kind), transform(cond, kind), t)[0]


def loss_deg(h: T.Node, pan, mosaic, weights, pattern, lam: float) -> T.Node:
    """``lam * (||P - A_P(H)||^2 + ||m - A_m(H)||^2)``, averaged over the batch."""
    h = T._as_node(h)
    spe = T.sum_squares(T.sub(np.asarray(pan), spectral_node(h, weights)))
    spa = T.sum_squares(T.sub(np.asarray(mosaic), mosaic_node(h, pattern)))
    return T.scale(T.add(spe, spa), lam / h.shape[0])


def extrapolate(xt: np.ndarray, t: np.ndarray, pred: T.Node) -> T.Node:
    """One-step estimate ``X1 = Xt + (1 - t) V``."""
    s = (1.0 - np.asarray(t, dtype=float)).reshape((-1,) + (1,) * (xt.ndim - 1))
    return T.add(xt, T.mul(pred, s))


# ---------------------------------------------------------------------------
# training


@dataclass
class FlowData:
    """Full-scene tensors the patch sampler crops from."""

    obs: Observation
    cond: np.ndarray
    pan_expanded: np.ndarray
    target: np.ndarray

    @classmethod
    def from_observation(cls, obs: Observation, target: np.ndarray) -> "FlowData":
        return cls(obs, conditioning(obs), obs.pan_expanded(), np.array(target, dtype=float))

    @property
    def residual(self) -> np.ndarray:
        return self.target - self.pan_expanded

    def offsets(self, patch: int) -> list[tuple[int, int]]:
        """Non-overlapping PAN-patch corners (multiples of 8)."""
        h, w = self.obs.pan.shape
        if patch % 8 or patch > min(h, w):
            raise ValueError(f"patch {patch} must be a multiple of 8 no larger than {(h, w)}")
        ys = range(0, h - patch + 1, patch)
        xs = range(0, w - patch + 1, patch)
        return [(y, x) for y in ys for x in xs]

    def batch(self, corners, patch: int):
        """Stack (residual, cond, pan, mosaic) crops for the given corners."""
        res = self.residual
        r, c, pp, mm = [], [], [], []
        for y, x in corners:
            r.append(res[:, y:y + patch, x:x + patch])
            c.append(self.cond[:, y:y + patch, x:x + patch])
            pp.append(self.obs.pan[None, y:y + patch, x:x + patch])
            half = patch // 2
            mm.append(self.obs.mosaic[None, y // 2:y // 2 + half, x // 2:x // 2 + half])
        return np.stack(r), np.stack(c), np.stack(pp), np.stack(mm)


@dataclass
class FlowConfig:
    epochs: int = 30
    batch_size: int = 16
    patch: int = 64
    patch_repeats: int = 16
    lr: float = 1e-4
    lr_srf: float = 1e-5
    lam: float = 0.1
    warmup_fraction: float = 0.2
    widths: tuple[int, int] = (32, 64)

    @property
    def warmup_epochs(self) -> int:
        return int(round(self.warmup_fraction * self.epochs))

    def lam_at(self, epoch: int) -> float:
        return self.lam if epoch > self.warmup_epochs else 0.0


@dataclass
class EpochLog:
    epoch: int
    l_dir: float
    l_trans: float
    l_deg: float
    l_total: float


class FlowTrainer:
    """Optimizer state plus the seeded stream that drives patch order, t, X0 and T."""

    def __init__(self, net: VectorFieldNet, config: FlowConfig, seed: int = 0):
        self.net = net
        self.config = config
        self.opt = nn.Adam(net.params, {"": config.lr, "srf.": config.lr_srf})
        self.rng = np.random.default_rng(seed)
        self.epoch = 0

    def step_losses(self, p, res, cond, pan, mosaic, pattern, lam):
        """L_dir, L_trans, L_deg for one batch (draws t, X0 and T from the stream)."""
        n = res.shape[0]
        t = self.rng.uniform(0.0, 1.0, size=n)
        x0 = self.rng.standard_normal(res.shape)
        kind = TRANSFORMS[self.rng.integers(len(TRANSFORMS))]
        l_dir, pred, xt = _matching(self.net, p, x0, res, cond, t)
        l_trans = loss_trans(self.net, p, x0, res, cond, t, kind)
        weights = T.softmax(p["srf.logits"], axis=0)
        h = T.add(extrapolate(xt, t, pred), np.broadcast_to(pan, res.shape))
        l_deg = loss_deg(h, pan, mosaic, weights, pattern, lam)
        return l_dir, l_trans, l_deg

    def train_epoch(self, data: FlowData, checkpoint_dir: Path | None = None) -> EpochLog:
        """One shuffled pass over the patch list, ``batch_size`` patches per step."""
        cfg = self.config
        self.epoch += 1
        lam = cfg.lam_at(self.epoch)
        corners = data.offsets(cfg.patch) * cfg.patch_repeats
        order = self.rng.permutation(len(corners))
        nbatch = max(1, math.ceil(len(corners) / cfg.batch_size))
        sums = np.zeros(4)
        for b in range(nbatch):
            idx = [order[(b * cfg.batch_size + i) % len(order)] for i in range(cfg.batch_size)]
            res, cond, pan, mosaic = data.batch([corners[i] for i in idx], cfg.patch)
            p = nn.bind(self.net.params)
            l_dir, l_trans, l_deg = self.step_losses(p, res, cond, pan, mosaic,
                                                     data.obs.pattern, lam)
            total = T.add(T.add(l_dir, l_trans), l_deg)
            vals = np.array([float(l_dir.value), float(l_trans.value), float(l_deg.value),
                             float(total.value)])
            if not np.all(np.isfinite(vals)):
                raise TrainingDiverged(f"flow loss became non-finite at epoch {self.epoch}, batch {b}")
            sums += vals
            self.opt.step(nn.named_grads(p, T.backward(total, p.values())))
        means = sums / nbatch
        if checkpoint_dir is not None:
            from .storage import save_checkpoint
            save_checkpoint(Path(checkpoint_dir) / checkpoint_name(self.epoch), self.net.params)
        log.debug("flow epoch %d L_total=%.6g", self.epoch, means[3])
        return EpochLog(self.epoch, *map(float, means))


def checkpoint_name(epoch: int) -> str:
    return f"flow_{epoch:04d}.ckpt"
