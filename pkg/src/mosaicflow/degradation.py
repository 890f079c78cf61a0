"""Observation model: SFA mosaicing, spectral projection and derived inputs.

Cubes are ``(bands, H, W)`` arrays and planes ``(H, W)``.  The differentiable
versions (``*_node``) work on :class:`~mosaicflow.tensor.Node` values of shape
``(..., C, H, W)`` and keep a singleton band axis on plane outputs so they can
be concatenated with cubes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import tensor as T

# Simulation SRF, normalised by its sum (107).
PAPER_SRF = np.array([1, 1, 2, 4, 8, 9, 10, 12, 16, 12, 10, 9, 7, 3, 2, 1], dtype=float) / 107.0

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class SfaPattern:
    """4x4 band layout at mosaic resolution.

    The physical 8x8 filter array duplicates every base cell into a 2x2 block,
    so after 2x2 averaging each mosaic pixel is a single-band sample.
    """

    base: tuple[tuple[int, ...], ...]
    bands: int

    def __post_init__(self):
        arr = np.asarray(self.base)
        if arr.shape != (4, 4):
            raise ValueError(f"SFA base must be 4x4, got {arr.shape}")
        if arr.min() < 0 or arr.max() >= self.bands:
            raise ValueError(f"SFA base indices must lie in [0, {self.bands})")
        if set(arr.ravel().tolist()) != set(range(self.bands)):
            raise ValueError("every band must appear in the SFA base")

    @classmethod
    def default(cls, bands: int = 16) -> "SfaPattern":
        """Row-major band order, wrapped modulo ``bands``."""
        base = (np.arange(16) % bands).reshape(4, 4)
        return cls(tuple(map(tuple, base.tolist())), bands)

    @classmethod
    def load(cls, path, bands: int | None = None) -> "SfaPattern":
        """Read a plain-text file of 4 rows x 4 integers."""
        rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
        base = np.array(rows, dtype=int)
        return cls(tuple(map(tuple, base.tolist())), int(base.max()) + 1 if bands is None else bands)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(" ".join(str(v) for v in row) for row in self.base) + "\n")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.base)

    def physical(self) -> np.ndarray:
        """The 8x8 full-resolution layout."""
        return np.repeat(np.repeat(self.array, 2, axis=0), 2, axis=1)

    def band_map(self, height: int, width: int) -> np.ndarray:
        """Band index of every full-resolution pixel."""
        phys = self.physical()
        return np.tile(phys, (height // 8, width // 8))

    def mask(self, height: int, width: int) -> np.ndarray:
        """One-hot ``(bands, H, W)`` selection mask."""
        return _mask(self, height, width)

    def sites(self, band: int) -> tuple[np.ndarray, np.ndarray]:
        """Row and column offsets (mod 4) where ``band`` is sampled.

        Raises if the band's cells do not form a row-set x column-set product,
        which separable interpolation needs.
        """
        rr, cc = np.nonzero(self.array == band)
        rows, cols = np.unique(rr), np.unique(cc)
        if len(rows) * len(cols) != len(rr):
            raise ValueError(f"band {band} cells do not form a separable lattice")
        return rows, cols


@lru_cache(maxsize=64)
def _mask(pattern: SfaPattern, height: int, width: int) -> np.ndarray:
    bmap = pattern.band_map(height, width)
    m = (bmap[None] == np.arange(pattern.bands)[:, None, None]).astype(float)
    m.setflags(write=False)
    return m


@dataclass
class SpectralResponse:
    """Learnable PAN spectral response, ``weights = softmax(logits)``."""

    logits: np.ndarray = field(default_factory=lambda: np.zeros(16))

    @classmethod
    def uniform(cls, bands: int) -> "SpectralResponse":
        return cls(np.zeros(bands))

    @property
    def weights(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        e = np.exp(z)
        return e / e.sum()

    def weights_node(self, logits: T.Node | None = None) -> T.Node:
        return T.softmax(T.constant(self.logits) if logits is None else logits, axis=0)


@dataclass
class Observation:
    """Mosaic ``m`` at (h, w) and PAN ``P`` at (2h, 2w)."""

    mosaic: np.ndarray
    pan: np.ndarray
    pattern: SfaPattern

    def __post_init__(self):
        h, w = self.mosaic.shape
        if self.pan.shape != (2 * h, 2 * w):
            raise T.ShapeError(f"PAN {self.pan.shape} must be twice the mosaic {self.mosaic.shape}")
        _check_extent(*self.pan.shape, 8, "Observation")

    @property
    def bands(self) -> int:
        return self.pattern.bands

    def interpolated(self) -> np.ndarray:
        """M: the interpolated mosaic at PAN extent."""
        return interpolate_mosaic(self.mosaic, self.pattern)

    def pan_expanded(self) -> np.ndarray:
        return expand_pan(self.pan, self.bands)

    def pan_highpass(self) -> np.ndarray:
        return highpass_pan(self.pan)


def _check_extent(h: int, w: int, k: int, what: str) -> None:
    if h % k or w % k:
        raise T.ShapeError(f"{what}: extents ({h}, {w}) are not divisible by {k}")


# ---------------------------------------------------------------------------
# differentiable operators


def mosaic_node(x: T.Node, pattern: SfaPattern) -> T.Node:
    """Spatial degradation on ``(..., C, H, W)``; returns ``(..., 1, H/2, W/2)``."""
    c, h, w = x.shape[-3:]
    _check_extent(h, w, 8, "apply_mosaic")
    if c != pattern.bands:
        raise T.ShapeError(f"apply_mosaic: cube has {c} bands, pattern has {pattern.bands}")
    mask = pattern.mask(h, w).reshape((1,) * (x.ndim - 3) + (c, h, w))
    return T.avg_pool2(T.sum(T.mul(x, mask), axis=-3, keepdims=True))


def spectral_node(x: T.Node, weights) -> T.Node:
    """Spectral degradation on ``(..., C, H, W)``; returns ``(..., 1, H, W)``."""
    return T.band_weighted_sum(x, weights)


def interpolate_node(m: T.Node, pattern: SfaPattern) -> T.Node:
    """Interpolated mosaic for ``(..., 1, h, w)`` -> ``(..., C, 2h, 2w)``."""
    h, w = m.shape[-2:]
    _check_extent(h, w, 4, "interpolate_mosaic")
    left, right = _interp_maps(pattern, h, w)
    return T.separable_map(m, left, right)


# ---------------------------------------------------------------------------
# array-level API


def _as_weights(srf) -> np.ndarray:
    if isinstance(srf, SpectralResponse):
        return srf.weights
    return np.asarray(srf, dtype=float)


def apply_mosaic(cube: np.ndarray, pattern: SfaPattern) -> np.ndarray:
    return mosaic_node(T.constant(cube), pattern).value[..., 0, :, :]


def apply_spectral(cube: np.ndarray, srf) -> np.ndarray:
    w = _as_weights(srf)
    if w.shape != (cube.shape[-3],):
        raise T.ShapeError(f"apply_spectral: {cube.shape[-3]} bands vs {w.shape[0]} weights")
    return spectral_node(T.constant(cube), w).value[..., 0, :, :]


def interpolate_mosaic(m: np.ndarray, pattern: SfaPattern) -> np.ndarray:
    return interpolate_node(T.constant(m[..., None, :, :]), pattern).value


def expand_pan(pan: np.ndarray, bands: int) -> np.ndarray:
    if bands < 1:
        raise ValueError("expand_pan needs at least one band")
    return np.repeat(pan[..., None, :, :], bands, axis=-3)


def highpass_pan(pan: np.ndarray) -> np.ndarray:
    """3x3 four-neighbour Laplacian with zero padding."""
    h, w = pan.shape[-2:]
    if h < 3 or w < 3:
        raise T.ShapeError(f"highpass_pan: extents ({h}, {w}) are smaller than 3")
    p = np.pad(pan, [(0, 0)] * (pan.ndim - 2) + [(1, 1), (1, 1)])
    return (p[..., :-2, 1:-1] + p[..., 2:, 1:-1] + p[..., 1:-1, :-2] + p[..., 1:-1, 2:]
            - 4.0 * p[..., 1:-1, 1:-1])


def srf_for_bands(bands: int) -> np.ndarray:
    """Simulation SRF truncated to ``bands`` entries and renormalised."""
    w = PAPER_SRF[:bands] if bands <= 16 else np.interp(
        np.linspace(0, 15, bands), np.arange(16), PAPER_SRF)
    return w / w.sum()


# ---------------------------------------------------------------------------
# interpolation matrices


def _linear_weights(n: int, sites: np.ndarray) -> np.ndarray:
    """(n, len(sites)) piecewise-linear interpolation, clamped at the ends."""
    out = np.zeros((n, len(sites)))
    for x in range(n):
        j = np.searchsorted(sites, x, side="right") - 1
        if j < 0:
            out[x, 0] = 1.0
        elif j >= len(sites) - 1:
            out[x, -1] = 1.0
        else:
            a, b = sites[j], sites[j + 1]
            f = (x - a) / (b - a)
            out[x, j] = 1.0 - f
            out[x, j + 1] = f
    return out


def _upsample_weights(n: int) -> np.ndarray:
    """(2n, n) bilinear doubling: even rows copy, odd rows average neighbours."""
    out = np.zeros((2 * n, n))
    for i in range(n):
        out[2 * i, i] = 1.0
        if i + 1 < n:
            out[2 * i + 1, i] = out[2 * i + 1, i + 1] = 0.5
        else:
            out[2 * i + 1, i] = 1.0
    return out


def _axis_map(n: int, offsets: np.ndarray) -> np.ndarray:
    # (2n, n): pick the band's lattice samples, interpolate, then double
    sites = np.sort(np.concatenate([np.arange(o, n, 4) for o in offsets]))
    pick = np.zeros((len(sites), n))
    pick[np.arange(len(sites)), sites] = 1.0
    return _upsample_weights(n) @ _linear_weights(n, sites) @ pick


@lru_cache(maxsize=64)
def _interp_maps(pattern: SfaPattern, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    left = np.empty((pattern.bands, 2 * h, h))
    right = np.empty((pattern.bands, 2 * w, w))
    for b in range(pattern.bands):
        rows, cols = pattern.sites(b)
        left[b] = _axis_map(h, rows)
        right[b] = _axis_map(w, cols)
    left.setflags(write=False)
    right.setflags(write=False)
    return left, right
