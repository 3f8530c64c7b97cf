"""Multispectral leaf images: calibration, normalisation, masks, resizing,
splitting, augmentation and the on-disk dataset bundle."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .tensor import Rng
from .tensorio import read_container, write_container

BAND_NAMES = ("B430", "G530", "R685", "NIR740")
BAND_FILES = ("b430.png", "g530.png", "r685.png", "nir740.png")
VI_NAME = "NIR/R"
R_IDX, NIR_IDX = 2, 3
REFERENCE_REFLECTANCE = (0.02, 0.50, 0.99)
VI_EPS = 1e-6
BUNDLE_MAGIC = b"MWDB"


class CalibrationError(ValueError):
    pass


class DegenerateBandError(ValueError):
    pass


class SplitError(ValueError):
    pass


class EmptyMaskWarning(UserWarning):
    pass


@dataclass
class SpectralImage:
    bands: np.ndarray                 # [C,H,W] float32
    mask: np.ndarray                  # [H,W] uint8 in {0,1}
    label: str = "unknown"            # healthy | diseased | unknown
    severity: Optional[str] = None    # mild | severe (synthetic ground truth)
    provenance: str = ""
    channels: tuple = BAND_NAMES
    lesion_mask: Optional[np.ndarray] = None

    @property
    def size(self) -> tuple:
        return self.bands.shape[1:]

    @property
    def has_vi(self) -> bool:
        return self.channels[-1] == VI_NAME


# calibration ---------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationTriple:
    """Grey levels measured on the 2%, 50% and 99% reflectance targets."""
    g02: float
    g50: float
    g99: float

    def __post_init__(self):
        if not (self.g02 < self.g50 < self.g99):
            raise CalibrationError(f"grey levels must increase with reflectance, got "
                                   f"{self.g02}, {self.g50}, {self.g99}")

    def fit(self) -> tuple[float, float]:
        """Least-squares (gain, offset) with reflectance = gain * grey + offset."""
        g = np.array([self.g02, self.g50, self.g99], dtype=np.float64)
        r = np.array(REFERENCE_REFLECTANCE, dtype=np.float64)
        gm, rm = g.mean(), r.mean()
        gain = float(((g - gm) * (r - rm)).sum() / ((g - gm) ** 2).sum())
        return gain, float(rm - gain * gm)


def calibrate(raw_band: np.ndarray, triple: CalibrationTriple) -> np.ndarray:
    gain, offset = triple.fit()
    refl = gain * np.asarray(raw_band, dtype=np.float64) + offset
    return np.clip(refl, 0.0, 1.05).astype(np.float32)


# normalisation, mask, vegetation index ---------------------------------------

def normalize_minmax(bands: np.ndarray) -> np.ndarray:
    """Per-band (v - min) / (max - min) on a [C,H,W] (or [H,W]) array."""
    a = np.asarray(bands, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[None]
    lo = a.min(axis=(1, 2), keepdims=True)
    hi = a.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    bad = np.flatnonzero(span.reshape(-1) <= 0)
    if bad.size:
        raise DegenerateBandError(f"band(s) {bad.tolist()} are constant; min-max normalisation undefined")
    out = ((a - lo) / span).astype(np.float32)
    # float rounding can leave the extremes a hair off
    out = np.clip(out, 0.0, 1.0)
    return out[0] if squeeze else out


def otsu_threshold(values: np.ndarray, bins: int = 256) -> tuple[float, float]:
    """Otsu threshold and its separability (between-class / total variance)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return float(lo), 0.0
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    p = hist / hist.sum()
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_t = mu[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * w0 - mu) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = 0.0
    k = int(np.argmax(between))
    total = float((p * (centers - mu_t) ** 2).sum())
    eta = float(between[k] / total) if total > 0 else 0.0
    return float(edges[k + 1]), eta


MIN_SEPARABILITY = 0.75


def leaf_mask(nir_band: np.ndarray) -> np.ndarray:
    """Otsu on the NIR band, keep the largest component, fill its holes.

    A histogram without two well-separated modes yields an all-zero mask and
    an :class:`EmptyMaskWarning`.
    """
    nir = np.asarray(nir_band, dtype=np.float64)
    thr, eta = otsu_threshold(nir)
    if eta < MIN_SEPARABILITY:
        warnings.warn(f"NIR histogram is not bimodal (separability {eta:.2f}); no leaf found",
                      EmptyMaskWarning, stacklevel=2)
        return np.zeros(nir.shape, dtype=np.uint8)
    fg = nir > thr
    lab, n = ndimage.label(fg)
    if n == 0:
        warnings.warn("no foreground pixels above the Otsu threshold", EmptyMaskWarning, stacklevel=2)
        return np.zeros(nir.shape, dtype=np.uint8)
    sizes = ndimage.sum_labels(fg, lab, index=np.arange(1, n + 1))
    keep = lab == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(keep).astype(np.uint8)


def vi_ratio(bands: np.ndarray) -> np.ndarray:
    """Raw NIR/R ratio of a reflectance image [C,H,W]."""
    return (bands[NIR_IDX].astype(np.float64) / (bands[R_IDX].astype(np.float64) + VI_EPS))


def add_vi_channel(bands: np.ndarray) -> np.ndarray:
    """Append min-max normalised NIR/R as the last channel."""
    ratio = vi_ratio(bands)
    # the epsilon guard alone perturbs a constant ratio by ~eps/R; treat that as constant
    if np.ptp(ratio) <= 1e-4 * np.abs(ratio).max():
        raise DegenerateBandError("NIR/R ratio is constant over the image")
    vi = normalize_minmax(ratio)
    return np.concatenate([np.asarray(bands, dtype=np.float32), vi[None]], axis=0)


# resizing -------------------------------------------------------------------

def _area_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Row i averages source pixels over [i*r, (i+1)*r), r = n_src / n_dst."""
    r = n_src / n_dst
    lo = np.arange(n_dst)[:, None] * r
    hi = lo + r
    j = np.arange(n_src)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / r


def _square_crop_box(mask: Optional[np.ndarray], shape: tuple, target: int, margin: float = 0.05):
    h, w = shape
    if mask is None or not mask.any():
        side = max(h, w)
        return (h - side) // 2, (w - side) // 2, side
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    side = int(math.ceil(max(r1 - r0, c1 - c0) * (1 + 2 * margin)))
    side = min(max(side, target), max(h, w))
    cy, cx = (r0 + r1) / 2, (c0 + c1) / 2
    return int(round(cy - side / 2)), int(round(cx - side / 2)), side


def _crop_padded(a: np.ndarray, top: int, left: int, side: int) -> np.ndarray:
    """Crop a [..., H, W] array to a square window, zero-filling outside the frame."""
    h, w = a.shape[-2:]
    out = np.zeros(a.shape[:-2] + (side, side), dtype=a.dtype)
    sr0, sc0 = max(top, 0), max(left, 0)
    sr1, sc1 = min(top + side, h), min(left + side, w)
    if sr1 > sr0 and sc1 > sc0:
        out[..., sr0 - top:sr1 - top, sc0 - left:sc1 - left] = a[..., sr0:sr1, sc0:sc1]
    return out


def resize_to(img: SpectralImage, target) -> SpectralImage:
    """Square crop around the leaf, then area-average down to ``target``."""
    th, tw = (target, target) if isinstance(target, int) else target
    if th != tw:
        raise ValueError("only square targets are supported")
    h, w = img.size
    if th > h or tw > w:
        raise ValueError(f"target {th}x{tw} is larger than the source {h}x{w}")
    if (h, w) == (th, tw):
        return img
    top, left, side = _square_crop_box(img.mask, (h, w), th)
    bands = _crop_padded(img.bands, top, left, side)
    mask = _crop_padded(img.mask, top, left, side)
    a = _area_matrix(side, th)
    out = (a @ bands.astype(np.float64) @ a.T).astype(np.float32)
    idx = np.minimum(((np.arange(th) + 0.5) * side / th).astype(int), side - 1)
    new_mask = mask[np.ix_(idx, idx)]
    lesion = None
    if img.lesion_mask is not None:
        lesion = _crop_padded(img.lesion_mask, top, left, side)[np.ix_(idx, idx)]
    return replace(img, bands=out, mask=new_mask.astype(np.uint8), lesion_mask=lesion)


# model inputs ---------------------------------------------------------------

def prepare(img: SpectralImage, with_vi: bool) -> np.ndarray:
    """Normalised model input [C,H,W]; the VI channel is built from reflectance."""
    bands = img.bands[:4]
    if with_vi:
        bands = add_vi_channel(bands)
        return np.concatenate([normalize_minmax(bands[:4]), bands[4:]], axis=0)
    return normalize_minmax(bands)


def stack(images: Sequence[SpectralImage], with_vi: bool) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([prepare(im, with_vi) for im in images]).astype(np.float32)
    m = np.stack([im.mask for im in images]).astype(np.float32)
    return x, m


# splitting -----------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    mode: str = "clustering"          # clustering | anomaly
    seed: int = 0
    test_fraction: Optional[float] = None
    val_fraction: Optional[float] = None

    @property
    def fractions(self) -> tuple[float, float]:
        default = (0.05, 0.05) if self.mode == "clustering" else (0.20, 0.10)
        return (self.test_fraction if self.test_fraction is not None else default[0],
                self.val_fraction if self.val_fraction is not None else default[1])


def _carve(n: int, test_f: float, val_f: float) -> tuple[int, int, int]:
    n_test = max(1, int(math.floor(test_f * n)))
    rest = n - n_test
    n_val = max(1, int(math.floor(val_f * rest)))
    n_train = rest - n_val
    if n_train < 1:
        raise SplitError(f"{n} samples are too few to populate train, validation and test")
    return n_test, n_val, n_train


def split_indices(labels: Sequence[str], spec: SplitSpec) -> tuple[list, list, list]:
    """Index lists (train, val, test) after a seeded shuffle.

    Anomaly mode only puts healthy samples in train/val; every other sample
    joins the evaluation pool (the test split).
    """
    labels = list(labels)
    if not labels:
        raise SplitError("cannot split an empty dataset")
    rng = Rng(spec.seed).spawn(7)
    test_f, val_f = spec.fractions
    if spec.mode == "clustering":
        order = rng.permutation(len(labels)).tolist()
        n_test, n_val, _ = _carve(len(order), test_f, val_f)
        test, val, train = order[:n_test], order[n_test:n_test + n_val], order[n_test + n_val:]
    elif spec.mode == "anomaly":
        healthy = [i for i, l in enumerate(labels) if l == "healthy"]
        others = [i for i, l in enumerate(labels) if l != "healthy"]
        if not healthy:
            raise SplitError("anomaly mode needs healthy samples to train on")
        perm = rng.permutation(len(healthy))
        healthy = [healthy[i] for i in perm]
        n_test, n_val, _ = _carve(len(healthy), test_f, val_f)
        test = healthy[:n_test] + others
        val = healthy[n_test:n_test + n_val]
        train = healthy[n_test + n_val:]
    else:
        raise SplitError(f"unknown split mode {spec.mode!r}")
    return train, val, test


def split(dataset: Sequence[SpectralImage], spec: SplitSpec):
    tr, va, te = split_indices([s.label for s in dataset], spec)
    return [dataset[i] for i in tr], [dataset[i] for i in va], [dataset[i] for i in te]


# augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    angle: float          # radians
    zoom: float
    shift: tuple          # (dy, dx) pixels
    flip_v: bool
    flip_h: bool


def random_augment_params(rng: Rng, size: tuple, max_shift: float = 0.10,
                          zoom_range=(0.9, 1.1)) -> AugmentParams:
    h, w = size
    return AugmentParams(
        angle=float(rng.uniform(0.0, 2 * np.pi)),
        zoom=float(rng.uniform(*zoom_range)),
        shift=(float(rng.uniform(-max_shift, max_shift) * h), float(rng.uniform(-max_shift, max_shift) * w)),
        flip_v=bool(rng.random(1)[0] < 0.5),
        flip_h=bool(rng.random(1)[0] < 0.5),
    )


def _inverse_affine(p: AugmentParams, size: tuple):
    """(matrix, offset) mapping output pixel coords to input coords."""
    h, w = size
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    cos, sin = np.cos(p.angle), np.sin(p.angle)
    rot = np.array([[cos, -sin], [sin, cos]])
    flip = np.diag([-1.0 if p.flip_v else 1.0, -1.0 if p.flip_h else 1.0])
    # forward: out = c + zoom * rot @ flip @ (in - c) + shift
    fwd = p.zoom * rot @ flip
    inv = np.linalg.inv(fwd)
    offset = c - inv @ (c + np.asarray(p.shift))
    return inv, offset


def apply_augment(img: SpectralImage, p: AugmentParams) -> SpectralImage:
    mat, off = _inverse_affine(p, img.size)
    bands = np.stack([ndimage.affine_transform(b.astype(np.float64), mat, off, order=1,
                                               mode="constant", cval=0.0) for b in img.bands])
    # bilinear weights are convex, so values stay inside [0, input max]
    bands = bands.astype(np.float32)
    mask = ndimage.affine_transform(img.mask.astype(np.float64), mat, off, order=0, mode="constant", cval=0.0)
    lesion = None
    if img.lesion_mask is not None:
        lesion = ndimage.affine_transform(img.lesion_mask.astype(np.float64), mat, off, order=0,
                                          mode="constant", cval=0.0).astype(np.uint8)
    return replace(img, bands=bands, mask=(mask > 0.5).astype(np.uint8), lesion_mask=lesion)


def reflect(img: SpectralImage, axis: int) -> SpectralImage:
    """Mirror along a spatial axis (0 = vertical flip, 1 = horizontal flip)."""
    ax = 1 + axis
    lesion = None if img.lesion_mask is None else np.flip(img.lesion_mask, axis).copy()
    return replace(img, bands=np.flip(img.bands, ax).copy(), mask=np.flip(img.mask, axis).copy(),
                   lesion_mask=lesion)


def augment(dataset: Sequence[SpectralImage], rng: Rng, target_count: int) -> list:
    """Originals followed by random translate/rotate/reflect/zoom copies, round-robin over sources."""
    n = len(dataset)
    if target_count < n:
        raise ValueError(f"target_count {target_count} is smaller than the dataset ({n})")
    out = list(dataset)
    for j in range(target_count - n):
        src = dataset[j % n]
        p = random_augment_params(rng, src.size)
        aug = apply_augment(src, p)
        out.append(replace(aug, provenance=f"{src.provenance}+aug{j}"))
    return out


# bundle on disk -------------------------------------------------------------

def save_bundle(path, samples: Sequence[SpectralImage], meta: Optional[dict] = None) -> None:
    entries, tensors = [], []
    for s in samples:
        names = ["bands", "mask"]
        tensors.append(s.bands)
        tensors.append(s.mask.astype(np.float32))
        if s.lesion_mask is not None:
            names.append("lesion_mask")
            tensors.append(s.lesion_mask.astype(np.float32))
        entries.append({"id": s.provenance, "label": s.label, "severity": s.severity,
                        "channels": list(s.channels), "tensors": names})
    header = {"format": "mwae-bundle", "version": 1, "meta": meta or {}, "samples": entries}
    write_container(path, BUNDLE_MAGIC, header, tensors)


def load_bundle(path) -> tuple[list, dict]:
    header, tensors = read_container(path, BUNDLE_MAGIC)
    it = iter(tensors)
    out = []
    for e in header["samples"]:
        got = {name: next(it) for name in e["tensors"]}
        lesion = got.get("lesion_mask")
        out.append(SpectralImage(
            bands=got["bands"], mask=got["mask"].astype(np.uint8), label=e["label"],
            severity=e.get("severity"), provenance=e["id"], channels=tuple(e["channels"]),
            lesion_mask=None if lesion is None else lesion.astype(np.uint8)))
    return out, header.get("meta", {})


# ingestion of per-band PNG directories -----------------------------------------

def load_sample_dir(path, target: int = 512) -> SpectralImage:
    """Read b430/g530/r685/nir740 16-bit PNGs, calibrate, mask and resize one sample."""
    from PIL import Image

    path = Path(path)
    calib = json.loads((path / "calibration.json").read_text())
    bands = []
    for fname in BAND_FILES:
        key = fname.split(".")[0]
        with Image.open(path / fname) as im:
            grey = np.asarray(im, dtype=np.float64)
        trip = calib[key]
        triple = CalibrationTriple(*trip) if isinstance(trip, list) else CalibrationTriple(**trip)
        bands.append(calibrate(grey, triple))
    bands = np.stack(bands)
    label_tokens = (path / "label.txt").read_text().split()
    label = label_tokens[0] if label_tokens else "unknown"
    severity = label_tokens[1] if len(label_tokens) > 1 else None
    mask = leaf_mask(normalize_minmax(bands[NIR_IDX]))
    img = SpectralImage(bands=bands, mask=mask, label=label, severity=severity, provenance=path.name)
    return resize_to(img, target)
