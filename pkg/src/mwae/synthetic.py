"""Synthetic multispectral cucumber-leaf images with known disease ground truth.

Reflectance levels are generator conventions chosen to reproduce the usual
qualitative signatures: healthy tissue is dark in the visible bands and bright
in NIR; powdery lesions whiten the visible bands, and advanced lesions also
lose NIR.  They are not measurements.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .data import SpectralImage, BAND_NAMES
from .tensor import Rng

HEALTHY_MEANS = np.array([0.06, 0.12, 0.08, 0.55])   # B, G, R, NIR
BACKGROUND = 0.015
SEVERITIES = ("mild", "severe")

# per-severity lesion settings
LESION = {
    "mild": dict(count=(1, 4), radius=(0.03, 0.05), target=(0.30, 0.40), strength=(0.6, 0.85), nir_loss=0.0),
    "severe": dict(count=(4, 8), radius=(0.04, 0.08), target=(0.45, 0.60), strength=(0.95, 1.0), nir_loss=0.5),
}


def _leaf_geometry(rng: Rng, size: int):
    """Soft leaf coverage in [0,1], plus leaf-aligned coordinates for textures."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-0.03, 0.03) * size
    cx = size / 2 + rng.uniform(-0.03, 0.03) * size
    a = rng.uniform(0.22, 0.29) * size
    b = a * rng.uniform(0.75, 1.0)
    phi = rng.uniform(0, 2 * np.pi)
    dy, dx = yy - cy, xx - cx
    p = dx * np.cos(phi) + dy * np.sin(phi)          # along the midrib
    q = -dx * np.sin(phi) + dy * np.cos(phi)
    theta = np.arctan2(q / b, p / a)
    rho = np.sqrt((p / a) ** 2 + (q / b) ** 2)
    lobes = int(rng.integers(3, 6))
    amp = rng.uniform(0.05, 0.12)
    ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
    edge = 1.0 + amp * np.cos(lobes * theta + ph1) + 0.04 * np.cos(2 * theta + ph2)
    # about one pixel of antialiasing at the border
    cover = np.clip((edge - rho) * a + 0.5, 0.0, 1.0)
    return cover, p, q, a


def _veins(p, q, a, size):
    width = max(0.6, 0.012 * size)
    midrib = np.exp(-(q / width) ** 2) * (np.abs(p) < 0.95 * a)
    spacing = 0.22 * a
    s = (p * 0.7071 + np.abs(q) * 0.7071) / spacing
    lateral = np.exp(-(((s - np.round(s)) * spacing) / (0.7 * width)) ** 2)
    return np.maximum(midrib, 0.5 * lateral)


def _smooth_field(rng: Rng, size: int, amp: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    f = np.zeros((size, size))
    for _ in range(3):
        ky, kx = rng.uniform(0.5, 2.5, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        f += np.cos(2 * np.pi * (ky * yy + kx * xx) + ph)
    return 1.0 + amp * f / 3.0


def render_leaf(rng: Rng, size: int, severity: Optional[str] = None):
    """One leaf: (bands [4,H,W], mask [H,W], lesion_mask [H,W])."""
    cover, p, q, a = _leaf_geometry(rng, size)
    mask = (cover >= 0.5).astype(np.uint8)
    vein = _veins(p, q, a, size)
    shade = _smooth_field(rng, size, 0.08)
    leaf_factor = 1.0 + rng.normal(4, 0.08)

    bands = np.empty((4, size, size))
    for c in range(4):
        tissue = HEALTHY_MEANS[c] * leaf_factor[c] * shade
        tissue = tissue * (1 - 0.10 * vein) if c == 3 else tissue * (1 + 0.25 * vein)
        tissue = tissue * (1 + rng.normal((size, size), 0.04))
        bg = BACKGROUND + rng.normal((size, size), 0.003)
        bands[c] = cover * tissue + (1 - cover) * bg

    lesion_alpha = np.zeros((size, size))
    if severity is not None:
        cfg = LESION[severity]
        n = int(rng.integers(cfg["count"][0], cfg["count"][1] + 1))
        inner = np.argwhere(cover >= 1.0)
        yy, xx = np.mgrid[0:size, 0:size]
        target = rng.uniform(*cfg["target"])
        for _ in range(n):
            cy, cx = inner[int(rng.integers(0, len(inner)))]
            rad = max(1.5, rng.uniform(*cfg["radius"]) * size)
            d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            blob = np.clip((rad - d) / (0.3 * rad), 0.0, 1.0) * rng.uniform(*cfg["strength"])
            lesion_alpha = np.maximum(lesion_alpha, blob)
        # powdery texture, confined to the leaf
        lesion_alpha *= (0.85 + 0.15 * rng.random((size, size))) * cover
        whitish = np.array([target, 0.95 * target, target])
        for c in range(3):
            bands[c] = bands[c] * (1 - lesion_alpha) + whitish[c] * lesion_alpha
        if cfg["nir_loss"]:
            bands[3] = bands[3] * (1 - cfg["nir_loss"] * lesion_alpha)

    bands = np.clip(bands, 0.0, 1.0).astype(np.float32)
    lesion = ((lesion_alpha >= 0.5) & (mask > 0)).astype(np.uint8)
    return bands, mask, lesion


def generate_synthetic(n_healthy: int, n_diseased: int, size: int, rng: Rng,
                       severity: str = "mixed") -> list:
    """Healthy leaves first, then diseased ones; ``severity`` is mild, severe or mixed."""
    if size < 32 or size & (size - 1):
        raise ValueError("size must be a power of two >= 32")
    if severity not in ("mild", "severe", "mixed"):
        raise ValueError(f"unknown severity {severity!r}")
    out = []
    for i in range(n_healthy):
        bands, mask, lesion = render_leaf(rng, size, None)
        out.append(SpectralImage(bands, mask, "healthy", None, f"syn-h{i:04d}", BAND_NAMES, lesion))
    for i in range(n_diseased):
        sev = severity if severity != "mixed" else SEVERITIES[i % 2]
        bands, mask, lesion = render_leaf(rng, size, sev)
        out.append(SpectralImage(bands, mask, "diseased", sev, f"syn-d{i:04d}", BAND_NAMES, lesion))
    return out
