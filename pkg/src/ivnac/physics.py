"""PET attenuation physics at desk scale.

HU -> 511 keV attenuation map, parallel-beam line integrals, attenuation
correction factors and ramp-filtered back-projection.  Images are 2D
``(H, W)`` float64 arrays, index ``[row, col]``, with the rotation centre
at the middle of the grid.  Sinograms are ``(n_angles, n_bins)`` with
angles uniformly spaced over [0, pi).
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError, NumericalError

log = logging.getLogger(__name__)

HU_MIN, HU_MAX = -1024.0, 3000.0
MAX_LINE_INTEGRAL = 50.0


@dataclass(frozen=True)
class MuMapConstants:
    """Attenuation coefficients (cm^-1): mu at 511 keV, rho at the CT energy."""

    mu_water: float = 0.096
    mu_bone: float = 0.172
    rho_water: float = 0.158
    rho_bone: float = 0.326

    def __post_init__(self):
        if min(self.mu_water, self.mu_bone, self.rho_water, self.rho_bone) <= 0:
            raise ContractError("attenuation constants must be positive")
        if self.mu_bone <= self.mu_water or self.rho_bone <= self.rho_water:
            raise ContractError("bone must attenuate more than water")

    @property
    def bone_slope(self) -> float:
        """Relative slope of the HU > 0 branch."""
        return (self.rho_water * (self.mu_bone - self.mu_water)) / (
            self.mu_bone * (self.rho_bone - self.rho_water)
        )


def hu_to_mu(hu, k: MuMapConstants = MuMapConstants()) -> np.ndarray:
    """Bilinear HU -> mu conversion.

    mu = mu_water * (1 + HU/1000) at or below 0 HU, and
    mu = mu_water * (1 + HU/1000 * bone_slope) above it.  HU outside
    [-1024, 3000] is clamped (and counted in the log); mu is floored at 0.
    """
    hu = np.asarray(hu, dtype=np.float64)
    n_out = int(np.count_nonzero((hu < HU_MIN) | (hu > HU_MAX)))
    if n_out:
        log.warning("hu_to_mu: clamped %d value(s) outside [%g, %g] HU", n_out, HU_MIN, HU_MAX)
    hu = np.clip(hu, HU_MIN, HU_MAX)
    rel = hu / 1000.0
    mu = np.where(hu <= 0, k.mu_water * (1.0 + rel), k.mu_water * (1.0 + rel * k.bone_slope))
    return np.maximum(mu, 0.0)


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam geometry; defaults are a 25.6 cm head field of view."""

    height: int = 64
    width: int = 64
    pixel_size: float = 0.4
    n_angles: int = 90
    n_bins: int = 96
    bin_spacing: Optional[float] = None

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.n_angles < 1 or self.n_bins < 1:
            raise ContractError("geometry sizes must be positive")
        if self.pixel_size <= 0 or self.spacing <= 0:
            raise ContractError("pixel size and bin spacing must be positive")
        diag = np.hypot(self.height, self.width) * self.pixel_size
        if self.n_bins * self.spacing < diag:
            raise ContractError(
                f"{self.n_bins} bins x {self.spacing} cm do not cover the image diagonal ({diag:.2f} cm)"
            )

    @classmethod
    def square(cls, size: int, pixel_size: float = 0.4, n_angles: int = 90) -> "Geometry":
        """Square grid with just enough (even) bins to cover the diagonal plus margin."""
        n_bins = int(np.ceil(size * np.sqrt(2.0))) + 4
        n_bins += n_bins % 2
        return cls(size, size, pixel_size, n_angles, n_bins)

    @property
    def spacing(self) -> float:
        return self.pixel_size if self.bin_spacing is None else self.bin_spacing

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    @property
    def bin_centers(self) -> np.ndarray:
        """Signed detector coordinate of each bin, in cm."""
        return (np.arange(self.n_bins) - (self.n_bins - 1) / 2.0) * self.spacing

    def check_image(self, image: np.ndarray, what: str = "image") -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.shape != self.shape:
            raise DimensionError(f"{what} shape {image.shape} does not match geometry {self.shape}")
        return image


@dataclass
class Sinogram:
    data: np.ndarray
    angles: np.ndarray
    bin_spacing: float
    pixel_size: float

    @property
    def shape(self):
        return self.data.shape


def _sinogram(data, geom: Geometry) -> Sinogram:
    return Sinogram(data, geom.angles, geom.spacing, geom.pixel_size)


def _check_sinogram(sino: Sinogram, geom: Geometry):
    if sino.data.shape != (geom.n_angles, geom.n_bins):
        raise DimensionError(
            f"sinogram shape {sino.data.shape} does not match geometry ({geom.n_angles}, {geom.n_bins})"
        )
    if not np.isclose(sino.bin_spacing, geom.spacing):
        raise DimensionError("sinogram bin spacing does not match geometry")


@functools.lru_cache(maxsize=8)
def _ray_samples(geom: Geometry):
    # sample every half pixel along each ray, far enough to cross the whole grid
    half = 0.5 * np.hypot(geom.height, geom.width) + 1.0
    s = np.arange(-half, half + 0.25, 0.5)
    theta = geom.angles[:, None, None]
    t = (geom.bin_centers / geom.pixel_size)[None, :, None]
    x = t * np.cos(theta) - s * np.sin(theta)
    y = t * np.sin(theta) + s * np.cos(theta)
    rows = (geom.height - 1) / 2.0 + y
    cols = (geom.width - 1) / 2.0 + x
    coords = np.stack([rows.ravel(), cols.ravel()])
    coords.setflags(write=False)
    return coords, s.size


def radon(image, geom: Geometry = Geometry()) -> Sinogram:
    """Line integrals (in image-units x cm) by half-pixel bilinear ray sampling."""
    image = geom.check_image(image)
    coords, n_s = _ray_samples(geom)
    vals = ndimage.map_coordinates(image, coords, order=1, mode="constant", cval=0.0, prefilter=False)
    step_cm = 0.5 * geom.pixel_size
    data = vals.reshape(geom.n_angles, geom.n_bins, n_s).sum(axis=2) * step_cm
    return _sinogram(data, geom)


def acf(mu_map, geom: Geometry = Geometry()) -> Sinogram:
    """Attenuation correction factors exp(+integral of mu) for every ray."""
    mu_map = geom.check_image(mu_map, "mu-map")
    if np.any(mu_map < 0):
        raise ContractError("mu-map has negative attenuation")
    line = radon(mu_map, geom).data
    worst = float(line.max(initial=0.0))
    if worst > MAX_LINE_INTEGRAL:
        raise NumericalError(f"attenuation line integral {worst:.1f} exceeds {MAX_LINE_INTEGRAL}; mu-map is nonphysical")
    return _sinogram(np.exp(line), geom)


@functools.lru_cache(maxsize=8)
def _ramp(n_bins: int, spacing: float) -> np.ndarray:
    # band-limited ramp (cut off at Nyquist), built from its spatial samples
    n = 1 << int(np.ceil(np.log2(2 * n_bins)))
    k = np.fft.fftfreq(n, d=1.0 / n).astype(int)
    h = np.zeros(n)
    h[0] = 1.0 / (4.0 * spacing**2)
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    ramp = np.real(np.fft.fft(h)) * spacing
    ramp.setflags(write=False)
    return ramp


@functools.lru_cache(maxsize=8)
def _backprojection_index(geom: Geometry):
    rows = np.arange(geom.height) - (geom.height - 1) / 2.0
    cols = np.arange(geom.width) - (geom.width - 1) / 2.0
    y, x = np.meshgrid(rows * geom.pixel_size, cols * geom.pixel_size, indexing="ij")
    th = geom.angles[:, None, None]
    t = x[None] * np.cos(th) + y[None] * np.sin(th)
    pos = t / geom.spacing + (geom.n_bins - 1) / 2.0
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    for a in (i0, frac):
        a.setflags(write=False)
    return i0, frac


def filter_sinogram(data: np.ndarray, geom: Geometry) -> np.ndarray:
    ramp = _ramp(geom.n_bins, geom.spacing)
    padded = np.zeros((data.shape[0], ramp.size))
    padded[:, : geom.n_bins] = data
    return np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * ramp, axis=1))[:, : geom.n_bins]


def backproject(q: np.ndarray, geom: Geometry) -> np.ndarray:
    i0, frac = _backprojection_index(geom)
    n = geom.n_bins
    # one zero bin on each side absorbs out-of-range lookups
    qp = np.zeros((q.shape[0], n + 2))
    qp[:, 1:-1] = q
    lo = np.clip(i0 + 1, 0, n + 1)
    hi = np.clip(i0 + 2, 0, n + 1)
    a = np.arange(q.shape[0])[:, None, None]
    vals = (1.0 - frac) * qp[a, lo] + frac * qp[a, hi]
    return vals.sum(axis=0) * (np.pi / geom.n_angles)


def fbp(sino: Sinogram, geom: Geometry = Geometry()) -> np.ndarray:
    """Ramp-filtered back-projection; linear in the sinogram."""
    _check_sinogram(sino, geom)
    data = np.asarray(sino.data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NumericalError("sinogram has non-finite values")
    return backproject(filter_sinogram(data, geom), geom)


def attenuated_sinogram(activity, mu_map, geom: Geometry = Geometry(), noise_seed: int = 0,
                        counts_scale: Optional[float] = None) -> Sinogram:
    """Emission sinogram attenuated by ``mu_map`` with optional Poisson noise.

    ``counts_scale`` is the expected number of counts per unit sinogram
    value; ``None`` (or infinity) means noiseless.
    """
    activity = geom.check_image(activity, "activity")
    if counts_scale is not None and not counts_scale > 0:
        raise ContractError(f"counts_scale must be positive, got {counts_scale}")
    att = radon(activity, geom).data / acf(mu_map, geom).data
    if counts_scale is not None and np.isfinite(counts_scale):
        rng = np.random.default_rng(noise_seed)
        att = rng.poisson(np.maximum(att, 0.0) * counts_scale) / counts_scale
    return _sinogram(att, geom)


def simulate_nac_pet(activity, mu_map, geom: Geometry = Geometry(), noise_seed: int = 0,
                     counts_scale: Optional[float] = None) -> np.ndarray:
    """Reconstruct the attenuated emission data without correction."""
    sino = attenuated_sinogram(activity, mu_map, geom, noise_seed, counts_scale)
    return np.maximum(fbp(sino, geom), 0.0)


def correct_pet(sino: Sinogram, mu_map, geom: Geometry = Geometry()) -> np.ndarray:
    """Multiply by the correction factors of ``mu_map`` and reconstruct."""
    _check_sinogram(sino, geom)
    corrected = _sinogram(sino.data * acf(mu_map, geom).data, geom)
    return np.maximum(fbp(corrected, geom), 0.0)
