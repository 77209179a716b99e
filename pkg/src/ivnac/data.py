"""Synthetic head phantoms, NAC-PET simulation wiring, normalization and the IVNC container.

Container layout (little-endian)::

    b"IVNC" | u32 version=1 | u32 count | u32 H | u32 W | u32 channels
    | count records of `channels` planes, float32, row-major

A dataset file has channels=2 (NAC-PET plane then CT plane, both
normalized).  Single images (mu-maps, sinograms, predictions) use the same
container with count=1 and channels=1.  The PET scale and provenance of a
dataset live in a JSON sidecar ``<file>.meta.json`` so the binary file size
stays exactly ``24 + count*channels*H*W*4``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError
from .physics import HU_MAX, HU_MIN, Geometry, attenuated_sinogram, fbp, hu_to_mu

log = logging.getLogger(__name__)

MAGIC = b"IVNC"
VERSION = 1
HEADER = struct.Struct("<4sIIIII")
SPLITS = ("train", "val", "test")
SEED_STRIDE = 1 << 20

# tissue labels
AIR, SKULL, GM, WM, VENTRICLE = 0, 1, 2, 3, 4
TISSUES = ("air", "skull", "gm", "wm", "ventricle")


# --------------------------------------------------------------------------- normalization


@dataclass(frozen=True)
class Normalizer:
    """PET divided by a fixed scale; CT mapped affinely from [ct_lo, ct_hi] HU to [0, 1]."""

    pet_scale: float = 1.0
    ct_lo: float = HU_MIN
    ct_hi: float = HU_MAX

    def __post_init__(self):
        if not (math.isfinite(self.pet_scale) and self.pet_scale > 0):
            raise ContractError(f"PET scale must be positive and finite, got {self.pet_scale}")
        if not self.ct_hi > self.ct_lo:
            raise ContractError("CT window must have ct_hi > ct_lo")

    @classmethod
    def identity(cls) -> "Normalizer":
        return cls(1.0, 0.0, 1.0)

    @classmethod
    def fit(cls, nac_images, percentile: float = 99.5) -> "Normalizer":
        scale = float(np.percentile(np.asarray(nac_images, dtype=np.float64), percentile))
        if not scale > 0:
            raise ContractError("cannot fit PET scale: training images are all zero")
        return cls(pet_scale=scale)

    def pet(self, x):
        return np.asarray(x, dtype=np.float64) / self.pet_scale

    def pet_inverse(self, x):
        return np.asarray(x, dtype=np.float64) * self.pet_scale

    def ct(self, hu):
        return (np.asarray(hu, dtype=np.float64) - self.ct_lo) / (self.ct_hi - self.ct_lo)

    def ct_inverse(self, y):
        return np.asarray(y, dtype=np.float64) * (self.ct_hi - self.ct_lo) + self.ct_lo

    def to_dict(self) -> dict:
        return {"pet_scale": float(self.pet_scale), "ct_lo": float(self.ct_lo), "ct_hi": float(self.ct_hi)}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(float(d["pet_scale"]), float(d["ct_lo"]), float(d["ct_hi"]))


# --------------------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class PhantomSpec:
    """Ellipse head phantom: skull ring around a gray/white-matter brain with ventricles.

    Geometry is in pixels, relative to the FOV center (row, col).  The brain
    ellipse is the inner boundary of the skull; white matter is a scaled copy
    of it.  Deep gray nuclei and ventricles are (d_row, d_col, a_row, a_col)
    ellipses relative to the brain center; nuclei are gray matter inside the
    white matter, ventricles are drawn last.  ``jitter`` scales every random perturbation; 0 makes generation
    independent of the seed.
    """

    size: int = 64
    center: Tuple[float, float] = (0.0, 0.0)
    brain_axes: Tuple[float, float] = (23.0, 19.0)
    skull_thickness: float = 2.0
    wm_fraction: float = 0.72
    ventricles: Tuple[Tuple[float, float, float, float], ...] = (
        (-2.0, -3.5, 6.0, 2.0),
        (-2.0, 3.5, 6.0, 2.0),
    )
    nuclei: Tuple[Tuple[float, float, float, float], ...] = (
        (3.0, -7.5, 4.0, 2.5),
        (3.0, 7.5, 4.0, 2.5),
    )
    hu_skull: float = 1000.0
    hu_gm: float = 42.0
    hu_wm: float = 28.0
    hu_ventricle: float = 8.0
    hu_air: float = -1000.0
    act_gm: float = 1.0
    act_wm: float = 0.35
    act_ventricle: float = 0.02
    act_skull: float = 0.08
    supersample: int = 4
    jitter: float = 1.0
    center_jitter: float = 2.5
    axes_jitter: float = 0.08
    thickness_jitter: float = 0.5
    angle_jitter: float = 0.2

    HU_RANGES = {
        "skull": (800.0, 1200.0),
        "gm": (20.0, 50.0),
        "wm": (20.0, 50.0),
        "ventricle": (0.0, 15.0),
    }

    def __post_init__(self):
        if self.size < 8:
            raise ContractError("phantom size must be at least 8")
        if self.supersample < 1 or self.jitter < 0:
            raise ContractError("supersample must be >= 1 and jitter >= 0")
        if len(self.ventricles) > 3:
            raise ContractError("at most 3 ventricles")
        if len(self.nuclei) > 4:
            raise ContractError("at most 4 deep gray nuclei")
        if not 0 < self.wm_fraction < 1:
            raise ContractError("wm_fraction must lie in (0, 1)")
        if self.hu_air != -1000.0:
            raise ContractError("air must be -1000 HU")
        for name, (lo, hi) in self.HU_RANGES.items():
            v = getattr(self, f"hu_{name}")
            if not lo <= v <= hi:
                raise ContractError(f"hu_{name}={v} outside [{lo}, {hi}]")
        if min(self.act_gm, self.act_wm, self.act_ventricle, self.act_skull) < 0:
            raise ContractError("activity levels must be nonnegative")
        if not self.act_gm > self.act_wm > self.act_ventricle:
            raise ContractError("activity must order gray > white > ventricle")
        # worst-case jitter must keep the layout valid
        _check_layout(self._worst_case())

    def _worst_case(self) -> "_Layout":
        j = self.jitter
        grow = 1.0 + j * self.axes_jitter
        return _Layout(
            center=(abs(self.center[0]) + j * self.center_jitter, abs(self.center[1]) + j * self.center_jitter),
            brain_axes=(self.brain_axes[0] * grow, self.brain_axes[1] * grow),
            thickness=self.skull_thickness + j * self.thickness_jitter,
            angle=0.0,
            wm_fraction=self.wm_fraction,
            ventricles=tuple(
                (dr * grow, dc * grow, ar * grow, ac * grow) for dr, dc, ar, ac in self.ventricles
            ),
            nuclei=tuple((dr * grow, dc * grow, ar * grow, ac * grow) for dr, dc, ar, ac in self.nuclei),
            size=self.size,
            # the brain may shrink while ventricles grow
            brain_min=(self.brain_axes[0] * (1 - j * self.axes_jitter), self.brain_axes[1] * (1 - j * self.axes_jitter)),
            thickness_min=self.skull_thickness - j * self.thickness_jitter,
        )

    @classmethod
    def scaled(cls, size: int, **overrides) -> "PhantomSpec":
        """Default anatomy rescaled from the 64-pixel layout to a ``size`` grid."""
        base = cls()
        f = size / base.size

        def ell(es):
            return tuple(tuple(v * f for v in e) for e in es)

        kw = dict(size=size, brain_axes=(base.brain_axes[0] * f, base.brain_axes[1] * f),
                  skull_thickness=base.skull_thickness * f, ventricles=ell(base.ventricles),
                  nuclei=ell(base.nuclei), center_jitter=base.center_jitter * f,
                  thickness_jitter=base.thickness_jitter * f)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["center"] = list(d["center"])
        d["brain_axes"] = list(d["brain_axes"])
        d["ventricles"] = [list(v) for v in d["ventricles"]]
        d["nuclei"] = [list(v) for v in d["nuclei"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["center"] = tuple(d["center"])
        d["brain_axes"] = tuple(d["brain_axes"])
        d["ventricles"] = tuple(tuple(v) for v in d["ventricles"])
        d["nuclei"] = tuple(tuple(v) for v in d.get("nuclei", ()))
        return cls(**d)


@dataclass(frozen=True)
class _Layout:
    center: Tuple[float, float]
    brain_axes: Tuple[float, float]
    thickness: float
    angle: float
    wm_fraction: float
    ventricles: tuple
    size: int
    nuclei: tuple = ()
    brain_min: Optional[Tuple[float, float]] = None
    thickness_min: Optional[float] = None


def _check_layout(lay: _Layout) -> None:
    thick_min = lay.thickness if lay.thickness_min is None else lay.thickness_min
    if thick_min <= 0:
        raise ContractError("skull thickness must stay positive")
    half = lay.size / 2.0
    reach = max(lay.brain_axes) + lay.thickness
    if max(abs(lay.center[0]), abs(lay.center[1])) + reach > half - 1.0:
        raise ContractError("skull ellipse does not fit inside the field of view")
    brain = lay.brain_axes if lay.brain_min is None else lay.brain_min
    wm = (brain[0] * lay.wm_fraction, brain[1] * lay.wm_fraction)
    t = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    for kind, ellipses in (("ventricle", lay.ventricles), ("nucleus", lay.nuclei)):
        for dr, dc, ar, ac in ellipses:
            if ar <= 0 or ac <= 0:
                raise ContractError(f"{kind} semi-axes must be positive")
            r = dr + ar * np.cos(t)
            c = dc + ac * np.sin(t)
            if np.any((r / wm[0]) ** 2 + (c / wm[1]) ** 2 >= 1.0):
                raise ContractError(f"{kind} ellipse is not enclosed by the white matter")


@dataclass
class PhantomPair:
    activity: np.ndarray
    ct_hu: np.ndarray
    id: str
    seed: int
    labels: np.ndarray = field(repr=False, default=None)
    pure: np.ndarray = field(repr=False, default=None)


def _draw_layout(spec: PhantomSpec, rng: np.random.Generator) -> Tuple[_Layout, Dict[str, float]]:
    j = spec.jitter

    def u(scale):
        return float(rng.uniform(-1.0, 1.0)) * scale * j

    center = (spec.center[0] + u(spec.center_jitter), spec.center[1] + u(spec.center_jitter))
    axes = (spec.brain_axes[0] * (1 + u(spec.axes_jitter)), spec.brain_axes[1] * (1 + u(spec.axes_jitter)))
    thickness = spec.skull_thickness + u(spec.thickness_jitter)
    angle = u(spec.angle_jitter)
    vents = []
    for dr, dc, ar, ac in spec.ventricles:
        s = 1 + u(spec.axes_jitter)
        vents.append((dr * s, dc * s, ar * s, ac * s))
    nuclei = []
    for dr, dc, ar, ac in spec.nuclei:
        s = 1 + u(spec.axes_jitter)
        nuclei.append((dr * s, dc * s, ar * s, ac * s))
    if j > 0 and rng.uniform() < 0.15 * min(j, 1.0):
        # occasionally a slice without ventricles
        vents = []

    def level(base, name, half):
        lo, hi = spec.HU_RANGES[name]
        return float(np.clip(base + u(half), lo, hi))

    levels = {
        "hu_skull": level(spec.hu_skull, "skull", 150.0),
        "hu_gm": level(spec.hu_gm, "gm", 5.0),
        "hu_wm": level(spec.hu_wm, "wm", 5.0),
        "hu_ventricle": level(spec.hu_ventricle, "ventricle", 5.0),
        "act_gm": spec.act_gm * (1 + u(0.1)),
        "act_wm": spec.act_wm * (1 + u(0.1)),
        "act_ventricle": spec.act_ventricle,
        "act_skull": spec.act_skull * (1 + u(0.2)),
    }
    lay = _Layout(center, axes, thickness, angle, spec.wm_fraction, tuple(vents), spec.size, tuple(nuclei))
    _check_layout(lay)
    return lay, levels


def _rasterize_labels(lay: _Layout, size: int, ss: int) -> np.ndarray:
    n = size * ss
    coords = (np.arange(n) + 0.5) / ss - size / 2.0
    r, c = np.meshgrid(coords, coords, indexing="ij")
    r = r - lay.center[0]
    c = c - lay.center[1]
    ca, sa = math.cos(lay.angle), math.sin(lay.angle)
    rr = ca * r + sa * c
    cc = -sa * r + ca * c

    def inside(dr, dc, ar, ac):
        return ((rr - dr) / ar) ** 2 + ((cc - dc) / ac) ** 2 < 1.0

    ar, ac = lay.brain_axes
    t = lay.thickness
    labels = np.full((n, n), AIR, np.int8)
    labels[inside(0, 0, ar + t, ac + t)] = SKULL
    labels[inside(0, 0, ar, ac)] = GM
    labels[inside(0, 0, ar * lay.wm_fraction, ac * lay.wm_fraction)] = WM
    for dr, dc, nar, nac in lay.nuclei:
        labels[inside(dr, dc, nar, nac)] = GM
    for dr, dc, var, vac in lay.ventricles:
        labels[inside(dr, dc, var, vac)] = VENTRICLE
    return labels


def gen_phantom(spec: PhantomSpec = PhantomSpec(), seed: int = 0, id: Optional[str] = None) -> PhantomPair:
    """Rasterize one jittered phantom with ``spec.supersample``^2 samples per pixel."""
    rng = np.random.default_rng(seed)
    lay, lv = _draw_layout(spec, rng)
    ss = spec.supersample
    sub = _rasterize_labels(lay, spec.size, ss)
    hu_lut = np.array([spec.hu_air, lv["hu_skull"], lv["hu_gm"], lv["hu_wm"], lv["hu_ventricle"]])
    act_lut = np.array([0.0, lv["act_skull"], lv["act_gm"], lv["act_wm"], lv["act_ventricle"]])
    blocks = sub.reshape(spec.size, ss, spec.size, ss).transpose(0, 2, 1, 3).reshape(spec.size, spec.size, ss * ss)
    hu = hu_lut[blocks].mean(axis=2)
    activity = act_lut[blocks].mean(axis=2)
    first = blocks[..., 0]
    pure = np.all(blocks == first[..., None], axis=2)
    counts = np.stack([(blocks == k).sum(axis=2) for k in range(len(TISSUES))])
    labels = np.argmax(counts, axis=0).astype(np.int8)
    return PhantomPair(activity, hu, id if id is not None else f"phantom-{seed}", int(seed), labels, pure)


# --------------------------------------------------------------------------- container


def write_container(path: Union[str, Path], planes: np.ndarray) -> None:
    """Write a (count, channels, H, W) array as an IVNC file."""
    planes = np.asarray(planes)
    if planes.ndim != 4:
        raise DimensionError(f"container data must be (count, channels, H, W), got {planes.shape}")
    if not np.isfinite(planes).all():
        raise ContractError(f"refusing to write non-finite values to {path}")
    count, ch, h, w = planes.shape
    data = np.ascontiguousarray(planes, dtype="<f4")
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, count, h, w, ch))
        f.write(data.tobytes())


def read_container(path: Union[str, Path]) -> np.ndarray:
    """Read an IVNC file into a float32 (count, channels, H, W) array."""
    buf = Path(path).read_bytes()
    if len(buf) < HEADER.size:
        raise ContractError(f"{path}: file too short for an IVNC header")
    magic, version, count, h, w, ch = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ContractError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ContractError(f"{path}: unsupported version {version}")
    expect = HEADER.size + count * ch * h * w * 4
    if len(buf) != expect:
        raise ContractError(f"{path}: size {len(buf)} bytes, header implies {expect}")
    data = np.frombuffer(buf, dtype="<f4", offset=HEADER.size).reshape(count, ch, h, w)
    return data.astype(np.float32)


def write_image(path, image) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise DimensionError(f"single image must be 2D, got {image.shape}")
    write_container(path, image[None, None])


def read_image(path) -> np.ndarray:
    data = read_container(path)
    if data.shape[:2] != (1, 1):
        raise ContractError(f"{path}: expected a single image, got count={data.shape[0]} channels={data.shape[1]}")
    return data[0, 0]


def write_dataset(path, x_pet, y_ct) -> None:
    x_pet, y_ct = np.asarray(x_pet), np.asarray(y_ct)
    if x_pet.shape != y_ct.shape or x_pet.ndim != 4 or x_pet.shape[1] != 1:
        raise DimensionError(f"dataset planes must both be (N, 1, H, W), got {x_pet.shape} and {y_ct.shape}")
    write_container(path, np.concatenate([x_pet, y_ct], axis=1))


def read_dataset(path) -> Tuple[np.ndarray, np.ndarray]:
    """Return (x_pet, y_ct), each (N, 1, H, W) float32."""
    data = read_container(path)
    if data.shape[1] != 2:
        raise ContractError(f"{path}: dataset needs 2 channels, got {data.shape[1]}")
    if data.shape[0] == 0:
        raise ContractError(f"{path}: dataset is empty")
    return data[:, :1].copy(), data[:, 1:].copy()


def meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def write_meta(path, meta: dict) -> None:
    meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def read_meta(path) -> dict:
    p = meta_path(path)
    try:
        return json.loads(p.read_text())
    except FileNotFoundError:
        raise ContractError(f"{path}: missing sidecar {p.name}") from None


# --------------------------------------------------------------------------- cropping


def head_mask(ct_hu, threshold: float = -500.0) -> np.ndarray:
    """Largest connected region of the CT above ``threshold`` HU."""
    above = np.asarray(ct_hu) > threshold
    labels, n = ndimage.label(above)
    if n == 0:
        raise ContractError("head mask is empty")
    return labels == (int(np.argmax(np.bincount(labels.ravel())[1:])) + 1)


def crop_normalize(nac_pet, ct_hu, normalizer: Normalizer, size: Optional[int] = None, mask=None):
    """Crop a (NAC-PET, CT) pair around the mask centroid and normalize both.

    The mask defaults to :func:`head_mask` of the CT, which unlike a PET
    threshold is unaffected by reconstruction noise.  Returns ``(x, y, (row0, col0))`` with x, y float32 of shape (size, size).
    A mask reaching the crop border is warned about and the window is
    clamped to the image.
    """
    nac_pet = np.asarray(nac_pet, dtype=np.float64)
    ct_hu = np.asarray(ct_hu, dtype=np.float64)
    if nac_pet.shape != ct_hu.shape or nac_pet.ndim != 2:
        raise DimensionError(f"pair shapes differ or are not 2D: {nac_pet.shape} vs {ct_hu.shape}")
    h, w = nac_pet.shape
    size = min(h, w) if size is None else int(size)
    if size > min(h, w):
        raise DimensionError(f"crop size {size} exceeds image {nac_pet.shape}")
    mask = head_mask(ct_hu) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise ContractError("brain mask is empty")
    cr, cc = ndimage.center_of_mass(mask)
    r0 = int(round(cr - (size - 1) / 2.0))
    c0 = int(round(cc - (size - 1) / 2.0))
    r0c = min(max(r0, 0), h - size)
    c0c = min(max(c0, 0), w - size)
    rows, cols = np.nonzero(mask)
    # any mask pixel on or beyond the window border (a full-image window has nothing to clamp)
    if size < max(h, w) and (rows.min() <= r0c or rows.max() >= r0c + size - 1
            or cols.min() <= c0c or cols.max() >= c0c + size - 1):
        log.warning("crop_normalize: brain mask touches the %dx%d crop boundary; crop clamped", size, size)
    win = (slice(r0c, r0c + size), slice(c0c, c0c + size))
    x = normalizer.pet(nac_pet[win]).astype(np.float32)
    y = normalizer.ct(ct_hu[win]).astype(np.float32)
    return x, y, (r0c, c0c)


# --------------------------------------------------------------------------- datasets


def pair_seed(seed: int, split: str, index: int, counts: Sequence[int]) -> int:
    """Seed of phantom ``index`` in ``split``; splits occupy disjoint consecutive ranges."""
    if split not in SPLITS:
        raise ContractError(f"unknown split {split!r}")
    if sum(counts) > SEED_STRIDE:
        raise ContractError(f"at most {SEED_STRIDE} phantoms per dataset")
    offset = sum(counts[: SPLITS.index(split)])
    return int(seed) * SEED_STRIDE + offset + int(index)


@dataclass
class SimulatedPair:
    phantom: PhantomPair
    mu: np.ndarray
    sinogram: object
    nac: np.ndarray


def simulate_pair(spec: PhantomSpec, geom: Geometry, seed: int, counts_scale: Optional[float],
                  id: Optional[str] = None) -> SimulatedPair:
    """Phantom -> mu-map -> noisy attenuated sinogram -> NAC-PET reconstruction."""
    ph = gen_phantom(spec, seed, id)
    mu = hu_to_mu(ph.ct_hu)
    noise_seed = int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    sino = attenuated_sinogram(ph.activity, mu, geom, noise_seed, counts_scale)
    nac = np.maximum(fbp(sino, geom), 0.0)
    return SimulatedPair(ph, mu, sino, nac)


@dataclass(frozen=True)
class DatasetConfig:
    spec: PhantomSpec = PhantomSpec()
    counts_scale: Optional[float] = 400.0
    crop: Optional[int] = None
    pixel_size: float = 0.4
    n_angles: int = 90

    def geometry(self) -> Geometry:
        return Geometry.square(self.spec.size, self.pixel_size, self.n_angles)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "counts_scale": self.counts_scale,
            "crop": self.crop,
            "pixel_size": self.pixel_size,
            "n_angles": self.n_angles,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(PhantomSpec.from_dict(d["spec"]), d["counts_scale"], d["crop"], d["pixel_size"], d["n_angles"])


def simulate_split(cfg: DatasetConfig, seed: int, split: str, counts: Sequence[int]) -> List[SimulatedPair]:
    geom = cfg.geometry()
    n = counts[SPLITS.index(split)]
    return [
        simulate_pair(cfg.spec, geom, pair_seed(seed, split, i, counts), cfg.counts_scale, f"{split}-{i:05d}")
        for i in range(n)
    ]


def build_dataset(n_train: int, n_val: int, n_test: int, cfg: DatasetConfig = DatasetConfig(), seed: int = 0,
                  out: Optional[Dict[str, Union[str, Path]]] = None):
    """Simulate the three splits, fit the PET scale on train, and optionally write files.

    ``out`` maps split name to file path (splits may be omitted).  Returns
    ``({split: (x, y)}, normalizer)`` with x, y float32 (N, 1, S, S).
    """
    counts = (int(n_train), int(n_val), int(n_test))
    if n_train < 1 or n_val < 0 or n_test < 0:
        raise ContractError("need at least one training phantom and nonnegative val/test counts")
    sims = {s: simulate_split(cfg, seed, s, counts) for s in SPLITS}
    normalizer = Normalizer.fit(np.stack([p.nac for p in sims["train"]]))
    arrays = {}
    for split in SPLITS:
        xs, ys = [], []
        for p in sims[split]:
            x, y, _ = crop_normalize(p.nac, p.phantom.ct_hu, normalizer, cfg.crop)
            xs.append(x)
            ys.append(y)
        if xs:
            arrays[split] = (np.stack(xs)[:, None], np.stack(ys)[:, None])
    for split, path in (out or {}).items():
        if split not in arrays:
            continue
        x, y = arrays[split]
        write_dataset(path, x, y)
        write_meta(path, {
            "format": "IVNC",
            "split": split,
            "seed": int(seed),
            "counts": list(counts),
            "seeds": [pair_seed(seed, split, i, counts) for i in range(counts[SPLITS.index(split)])],
            "normalizer": normalizer.to_dict(),
            "dataset": cfg.to_dict(),
        })
    return arrays, normalizer


def pair_digest(x: np.ndarray, y: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, "<f4").tobytes() + np.ascontiguousarray(y, "<f4").tobytes()).hexdigest()


def region_means(image, labels, center_radius: float = 0.45) -> Tuple[float, float]:
    """Mean brain intensity in the central region and in the outer brain rim.

    The brain (gray + white + ventricles) is split by normalized elliptical
    radius relative to its own extent.
    """
    brain = np.isin(labels, (GM, WM, VENTRICLE))
    rows, cols = np.nonzero(brain)
    cr, cc = rows.mean(), cols.mean()
    ar = max(rows.max() - cr, cr - rows.min()) + 0.5
    ac = max(cols.max() - cc, cc - cols.min()) + 0.5
    r, c = np.indices(labels.shape)
    rho = np.sqrt(((r - cr) / ar) ** 2 + ((c - cc) / ac) ** 2)
    image = np.asarray(image, dtype=np.float64)
    center = brain & (rho < center_radius)
    edge = brain & (rho > 0.75)
    return float(image[center].mean()), float(image[edge].mean())
