"""Image quality metrics: PSNR, SSIM, RMSE %, masked MAE %, and test-set aggregation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError

log = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0
METRIC_NAMES = ("psnr_db", "ssim", "rmse_pct", "mae_pct")


def _pair(ref, pred):
    ref = np.asarray(ref, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if ref.shape != pred.shape:
        raise DimensionError(f"shape mismatch: reference {ref.shape} vs prediction {pred.shape}")
    if ref.size == 0:
        raise ContractError("empty images")
    return ref, pred


def _range(ref) -> float:
    return float(ref.max() - ref.min())


def psnr(ref, pred, cap: float = PSNR_CAP_DB) -> float:
    """20 log10(max(ref) / RMSE), capped at ``cap`` dB for a perfect match."""
    ref, pred = _pair(ref, pred)
    peak = float(ref.max())
    if peak <= 0:
        raise ContractError("PSNR needs a reference with a positive maximum")
    err = math.sqrt(float(np.mean((pred - ref) ** 2)))
    if err == 0:
        return cap
    return min(cap, 20.0 * math.log10(peak / err))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(ref, pred, data_range: Optional[float] = None, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM under an 11x11 Gaussian window (sigma 1.5).

    Local statistics are only averaged where the window fits inside the
    image.  ``data_range`` defaults to the reference's dynamic range.
    """
    ref, pred = _pair(ref, pred)
    if ref.ndim != 2:
        raise DimensionError(f"ssim works on 2D images, got shape {ref.shape}")
    L = _range(ref) if data_range is None else float(data_range)
    if not L > 0:
        raise ContractError("SSIM needs a reference with nonzero dynamic range")
    if min(ref.shape) < win_size:
        raise DimensionError(f"image {ref.shape} smaller than the {win_size}x{win_size} window")
    g = _gaussian_window(win_size, sigma)

    def blur(img):
        out = ndimage.correlate1d(img, g, axis=0, mode="reflect")
        return ndimage.correlate1d(out, g, axis=1, mode="reflect")

    mx, my = blur(ref), blur(pred)
    sxx = blur(ref * ref) - mx * mx
    syy = blur(pred * pred) - my * my
    sxy = blur(ref * pred) - mx * my
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    smap = num / den
    r = (win_size - 1) // 2
    return float(smap[r:-r, r:-r].mean())


def rmse_pct(ref, pred, norm: str = "range") -> float:
    """Root-mean-square error as a percentage of the reference range (or mean)."""
    ref, pred = _pair(ref, pred)
    if norm == "range":
        denom = _range(ref)
    elif norm == "mean":
        denom = float(abs(ref.mean()))
    else:
        raise ContractError(f"unknown RMSE normalization {norm!r}")
    if not denom > 0:
        raise ContractError("RMSE normalization is degenerate (zero range/mean)")
    return 100.0 * math.sqrt(float(np.mean((ref - pred) ** 2))) / denom


def brain_mask(ref, fraction: float = 0.05) -> np.ndarray:
    """Largest connected region of the reference above ``fraction`` of its maximum."""
    ref = np.asarray(ref, dtype=np.float64)
    above = ref > fraction * ref.max()
    labels, n = ndimage.label(above)
    if n == 0:
        raise ContractError("brain mask is empty")
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def mae_pct(ref, pred, mask=None, floor: float = 1e-6, return_excluded: bool = False):
    """Mean absolute relative error |pred - ref| / ref over ``mask``, in percent.

    Masked pixels whose reference falls below ``floor * max(ref)`` are
    excluded and counted.
    """
    ref, pred = _pair(ref, pred)
    mask = np.ones(ref.shape, bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != ref.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match {ref.shape}")
    keep = mask & (ref > floor * ref.max())
    excluded = int(np.count_nonzero(mask & ~keep))
    if excluded:
        log.info("mae_pct: excluded %d masked pixel(s) below the reference floor", excluded)
    if not keep.any():
        raise ContractError("MAE mask is empty after excluding near-zero reference pixels")
    value = 100.0 * float(np.mean(np.abs(pred[keep] - ref[keep]) / ref[keep]))
    return (value, excluded) if return_excluded else value


@dataclass
class MetricsReport:
    """Per-image metric values, with mean and population std on demand."""

    ids: List[str] = field(default_factory=list)
    values: Dict[str, List[float]] = field(default_factory=lambda: {k: [] for k in METRIC_NAMES})

    @property
    def n_images(self) -> int:
        return len(self.ids)

    def add(self, image_id, psnr_db: float, ssim: float, rmse_pct: float, mae_pct: float) -> None:
        self.ids.append(str(image_id))
        for k, v in zip(METRIC_NAMES, (psnr_db, ssim, rmse_pct, mae_pct)):
            self.values[k].append(float(v))

    def mean(self, name: str) -> float:
        return aggregate(self.values[name])[0]

    def std(self, name: str) -> float:
        return aggregate(self.values[name])[1]

    def summary(self) -> Dict[str, tuple]:
        return {k: aggregate(self.values[k]) for k in METRIC_NAMES}

    def lines(self) -> List[str]:
        out = [
            f"{i} " + " ".join(f"{self.values[k][n]:.6g}" for k in METRIC_NAMES)
            for n, i in enumerate(self.ids)
        ]
        out.append("MEAN±STD " + " ".join(f"{m:.6g}±{s:.6g}" for m, s in self.summary().values()))
        return out

    def key_values(self) -> Dict[str, float]:
        kv = {"n_images": self.n_images}
        for k, (m, s) in self.summary().items():
            kv[f"{k}_mean"] = m
            kv[f"{k}_std"] = s
        return kv


def aggregate(values: Iterable[float]) -> tuple:
    """(mean, population std) of a nonempty collection."""
    v = np.asarray(sorted(float(x) for x in values))
    if v.size == 0:
        raise ContractError("cannot aggregate an empty set of values")
    m = math.fsum(v) / v.size
    var = math.fsum((x - m) ** 2 for x in v) / v.size
    return m, math.sqrt(var)


def evaluate_pair(ref, pred, mask=None) -> tuple:
    """All four metrics for one image pair (mask defaults to :func:`brain_mask` of ref)."""
    if mask is None:
        mask = brain_mask(ref)
    return psnr(ref, pred), ssim(ref, pred), rmse_pct(ref, pred), mae_pct(ref, pred, mask)
