"""Full-reference (PSNR, SSIM, SAM, ERGAS) and no-reference (QNR, D_lambda, D_S) metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .degradation import SfaPattern

PSNR_CAP = 100.0
FULL_REFERENCE = ("psnr", "ssim", "sam", "ergas")
NO_REFERENCE = ("qnr", "d_lambda", "d_s")


def _same_shape(x, ref, name):
    if x.shape != ref.shape:
        raise ValueError(f"{name}: shapes {x.shape} and {ref.shape} differ")


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB over all entries; identical inputs report ``PSNR_CAP``."""
    _same_shape(x, ref, "psnr")
    mse = float(np.mean((np.asarray(x, float) - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalised 2-d Gaussian truncated to ``size x size``."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    win = sliding_window_view(img, kernel.shape)
    return np.einsum("ijkl,kl->ij", win, kernel)


def ssim(x: np.ndarray, ref: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over valid Gaussian windows; cubes average their bands."""
    _same_shape(x, ref, "ssim")
    if x.ndim == 3:
        return float(np.mean([ssim(a, b, window, sigma, k1, k2, data_range) for a, b in zip(x, ref)]))
    if min(x.shape) < window:
        raise ValueError(f"ssim: extents {x.shape} are smaller than the {window}x{window} window")
    kern = gaussian_kernel(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = _filter_valid(x, kern), _filter_valid(ref, kern)
    sxx = _filter_valid(x * x, kern) - mx * mx
    syy = _filter_valid(ref * ref, kern) - my * my
    sxy = _filter_valid(x * ref, kern) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def sam(x: np.ndarray, ref: np.ndarray, return_skipped: bool = False):
    """Mean spectral angle in degrees over pixels where both spectra are non-zero."""
    _same_shape(x, ref, "sam")
    a = x.reshape(x.shape[0], -1)
    b = ref.reshape(ref.shape[0], -1)
    na, nb = np.linalg.norm(a, axis=0), np.linalg.norm(b, axis=0)
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        raise ValueError("sam: every pixel has a zero-norm spectrum")
    cos = np.clip((a[:, ok] * b[:, ok]).sum(axis=0) / (na[ok] * nb[ok]), -1.0, 1.0)
    value = float(np.degrees(np.arccos(cos)).mean())
    skipped = int((~ok).sum())
    return (value, skipped) if return_skipped else value


def ergas(x: np.ndarray, ref: np.ndarray, ratio: float = 2.0) -> float:
    """``100 * ratio * sqrt(mean_b (RMSE_b / mean(ref_b))^2)``."""
    _same_shape(x, ref, "ergas")
    rmse = np.sqrt(np.mean((x - ref) ** 2, axis=(1, 2)))
    means = ref.mean(axis=(1, 2))
    for b, m in enumerate(means):
        if m == 0:
            raise ValueError(f"ergas: reference band {b} has zero mean")
    return float(100.0 * ratio * np.sqrt(np.mean((rmse / means) ** 2)))


# ---------------------------------------------------------------------------
# no-reference


def _q_block(x: np.ndarray, y: np.ndarray) -> float:
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cxy = ((x - mx) * (y - my)).mean()
    lum_den = mx * mx + my * my
    lum = 1.0 if lum_den == 0 else 2.0 * mx * my / lum_den
    if vx == 0 and vy == 0:
        return float(lum)
    return float(4.0 * cxy * mx * my / ((vx + vy) * lum_den)) if lum_den else float(2.0 * cxy / (vx + vy))


def uiqi(x: np.ndarray, y: np.ndarray, block: int = 32) -> float:
    """Universal image quality index averaged over non-overlapping blocks.

    Images smaller than ``block`` use one block covering the whole image.
    Two constant blocks score by their luminance term alone.
    """
    _same_shape(x, y, "uiqi")
    h, w = x.shape
    bh, bw = min(block, h), min(block, w)
    vals = [_q_block(x[i:i + bh, j:j + bw], y[i:i + bh, j:j + bw])
            for i in range(0, h - bh + 1, bh) for j in range(0, w - bw + 1, bw)]
    return float(np.mean(vals))


def gaussian_blur(img: np.ndarray, size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Truncated, renormalised Gaussian blur with reflective borders."""
    k = gaussian_kernel(size, sigma)
    r = size // 2
    return _filter_valid(np.pad(img, r, mode="reflect"), k)


def lr_cube_from_mosaic(m: np.ndarray, pattern: SfaPattern) -> np.ndarray:
    """Reassemble the mosaic into a cube at mosaic extent by nearest same-band sample."""
    h, w = m.shape
    out = np.empty((pattern.bands, h, w))
    for b in range(pattern.bands):
        rows, cols = pattern.sites(b)
        rs = np.sort(np.concatenate([np.arange(o, h, 4) for o in rows]))
        cs = np.sort(np.concatenate([np.arange(o, w, 4) for o in cols]))
        ri = _nearest(np.arange(h), rs)
        ci = _nearest(np.arange(w), cs)
        out[b] = m[np.ix_(rs[ri], cs[ci])]
    return out


def _nearest(x: np.ndarray, sites: np.ndarray) -> np.ndarray:
    # ties go to the lower site
    d = np.abs(x[:, None] - sites[None, :])
    return np.argmin(d, axis=1)


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    return img.reshape(*img.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))


@dataclass(frozen=True)
class QnrResult:
    qnr: float
    d_lambda: float
    d_s: float


def qnr_suite(h: np.ndarray, m: np.ndarray, pan: np.ndarray, pattern: SfaPattern,
              preblur: bool = False, block: int = 32, p: float = 1.0, q: float = 1.0,
              alpha: float = 1.0, beta: float = 1.0) -> QnrResult:
    """D_lambda, D_S and QNR for a fused cube against its mosaic/PAN inputs.

    D_lambda compares inter-band UIQI of the 2x2-averaged fusion with that of
    the cube reassembled from the mosaic; D_S compares band-vs-PAN UIQI at
    full resolution with band-vs-downsampled-PAN at mosaic resolution.
    """
    if preblur:
        m, pan = gaussian_blur(m), gaussian_blur(pan)
    c = h.shape[0]
    lr = lr_cube_from_mosaic(m, pattern)
    h_lr = _downsample2(h)
    pan_lr = _downsample2(pan)
    acc = 0.0
    for i in range(c):
        for j in range(c):
            if i != j:
                acc += abs(uiqi(h_lr[i], h_lr[j], block) - uiqi(lr[i], lr[j], block)) ** p
    d_lambda = (acc / (c * (c - 1))) ** (1.0 / p) if c > 1 else 0.0
    acc = sum(abs(uiqi(h[b], pan, block) - uiqi(lr[b], pan_lr, block)) ** q for b in range(c))
    d_s = (acc / c) ** (1.0 / q)
    return QnrResult((1.0 - d_lambda) ** alpha * (1.0 - d_s) ** beta, float(d_lambda), float(d_s))


def full_reference(x: np.ndarray, ref: np.ndarray, ratio: float = 2.0) -> dict[str, float]:
    return {"psnr": psnr(x, ref), "ssim": ssim(x, ref), "sam": sam(x, ref),
            "ergas": ergas(x, ref, ratio)}


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Rows of ``{scene, method, metric...}`` plus run metadata."""

    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, scene: str, method: str, values: dict[str, float]) -> None:
        self.rows.append({"scene": scene, "method": method, **values})

    def columns(self) -> list[str]:
        present = {k for r in self.rows for k in r}
        return ["scene", "method"] + [k for k in FULL_REFERENCE + NO_REFERENCE if k in present]

    def mean(self, method: str) -> dict[str, float]:
        rows = [r for r in self.rows if r["method"] == method]
        cols = [c for c in self.columns()[2:] if all(c in r for r in rows)]
        return {c: float(np.mean([r[c] for r in rows])) for c in cols}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns(), lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        methods = sorted({r["method"] for r in self.rows})
        doc = {"meta": self.meta, "rows": self.rows,
               "mean": {m: self.mean(m) for m in methods}}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        doc = json.loads(text)
        return cls(doc["rows"], doc.get("meta", {}))


__all__ = ["psnr", "ssim", "sam", "ergas", "uiqi", "qnr_suite", "QnrResult", "MetricReport",
           "gaussian_blur", "gaussian_kernel", "lr_cube_from_mosaic", "full_reference", "asdict"]
