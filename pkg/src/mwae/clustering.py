"""k-means on bottleneck features, silhouette and Davies-Bouldin validity,
single-feature ranking and feature-map export."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import arch
from .tensor import Rng

MAX_LLOYD_ITERS = 300


class ClusteringError(ValueError):
    pass


@dataclass
class FeatureSet:
    ids: list
    values: np.ndarray          # [n, d]
    features: list              # 0-based bottleneck channels used

    def __len__(self):
        return len(self.ids)


@dataclass
class ClusteringResult:
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    asc: float
    db: float
    n_restarts: int
    seed: int
    restart_inertia: list = field(default_factory=list)
    restart_assignments: list = field(default_factory=list)
    best_restart: int = 0


# features -------------------------------------------------------------------

def bottleneck(model: arch.ModelState, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    return arch.predict(model, x, batch_size, what="bottleneck")


def select_features(z: np.ndarray, selection: Union[str, Sequence[int]] = "all") -> tuple[np.ndarray, list]:
    n, c = z.shape[:2]
    if isinstance(selection, str):
        if selection != "all":
            raise ClusteringError(f"unknown selection {selection!r}")
        idx = list(range(c))
    else:
        idx = [int(i) for i in selection]
        bad = [i for i in idx if not 0 <= i < c]
        if bad:
            raise ClusteringError(f"feature index {bad} out of range for {c} bottleneck channels")
    return z[:, idx].reshape(n, -1).astype(np.float64), idx


def extract_features(model: arch.ModelState, x: np.ndarray, ids: Optional[list] = None,
                     selection: Union[str, Sequence[int]] = "all") -> FeatureSet:
    """Eval-mode bottleneck maps, kept channels flattened spatially."""
    z = bottleneck(model, x)
    values, idx = select_features(z, selection)
    return FeatureSet(list(ids) if ids is not None else list(range(len(x))), values, idx)


# k-means ------------------------------------------------------------------

def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def lloyd(x: np.ndarray, init: np.ndarray, max_iter: int = MAX_LLOYD_ITERS):
    """Lloyd iterations until the assignment stops changing.

    Returns (centroids, labels, inertia, inertia history).  An emptied
    cluster is re-seeded with the point farthest from its current centroid.
    """
    c = init.astype(np.float64).copy()
    k = len(c)
    labels = None
    history = []
    for _ in range(max_iter):
        d = _sqdist(x, c)
        new = d.argmin(1)
        for j in range(k):
            if not np.any(new == j):
                far = int(d[np.arange(len(x)), new].argmax())
                new[far] = j
                d[far] = 0.0
        history.append(float(_sqdist(x, c)[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        c = np.stack([x[labels == j].mean(0) for j in range(k)])
    inertia = float(_sqdist(x, c)[np.arange(len(x)), labels].sum())
    history.append(inertia)
    return c, labels, inertia, history


def kmeans(x: np.ndarray, k: int, n_restarts: int = 20, rng: Optional[Rng] = None,
           seed: int = 0) -> ClusteringResult:
    """Best-of-restarts k-means (lowest inertia, earliest restart on ties)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if k < 1 or k > n:
        raise ClusteringError(f"k={k} must lie in [1, {n}]")
    rng = rng if rng is not None else Rng(seed)
    best = None
    inertias, parts = [], []
    for r in range(n_restarts):
        init = x[rng.choice(n, k, replace=False)]
        c, lab, inertia, _ = lloyd(x, init)
        inertias.append(inertia)
        parts.append(lab)
        if best is None or inertia < best[2]:
            best = (c, lab, inertia, r)
    c, lab, inertia, r = best
    asc = db = float("nan")
    if k >= 2 and len(np.unique(lab)) >= 2:
        asc = silhouette(x, lab)[1]
        try:
            db = davies_bouldin(x, lab)
        except ClusteringError:
            db = float("inf")
    return ClusteringResult(k, c, lab, inertia, asc, db, n_restarts, rng.seed, inertias, parts, r)


# validity indices -----------------------------------------------------------

def _pairwise(x: np.ndarray) -> np.ndarray:
    """Euclidean distances from explicit differences, one row at a time.

    The expanded form |x|^2 - 2x.y + |y|^2 cancels badly for nearby points,
    which the validity indices are sensitive to.
    """
    return np.stack([np.sqrt(((x - xi) ** 2).sum(1)) for xi in x])


def silhouette(x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-point silhouette and its mean (aSC).

    Singleton clusters score 0, and so does a point with d_a = d_s = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    ks = np.unique(labels)
    if len(ks) < 2:
        raise ClusteringError("silhouette needs at least two non-empty clusters")
    d = _pairwise(x)
    np.fill_diagonal(d, 0.0)
    onehot = (labels[:, None] == ks[None, :]).astype(np.float64)
    sizes = onehot.sum(0)
    sums = d @ onehot                                  # [n, k] total distance to each cluster
    own = np.searchsorted(ks, labels)
    own_size = sizes[own]
    with np.errstate(divide="ignore", invalid="ignore"):
        d_a = sums[np.arange(len(x)), own] / (own_size - 1)
        means = sums / sizes[None, :]
    means[np.arange(len(x)), own] = np.inf
    d_s = means.min(1)
    denom = np.maximum(d_a, d_s)
    s = np.zeros(len(x))
    ok = (own_size > 1) & (denom > 0)
    s[ok] = (d_s[ok] - d_a[ok]) / denom[ok]
    return s, float(s.mean())


def davies_bouldin(x: np.ndarray, labels: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    ks = np.unique(labels)
    if len(ks) < 2:
        raise ClusteringError("Davies-Bouldin needs at least two non-empty clusters")
    cents = np.stack([x[labels == k].mean(0) for k in ks])
    sig = np.array([np.sqrt(((x[labels == k] - cents[i]) ** 2).sum(1)).mean() for i, k in enumerate(ks)])
    dc = _pairwise(cents)
    np.fill_diagonal(dc, np.inf)
    if np.any(dc == 0):
        raise ClusteringError("coincident centroids make the Davies-Bouldin index infinite")
    ratio = (sig[:, None] + sig[None, :]) / dc
    return float(ratio.max(1).mean())


# feature ranking and export ---------------------------------------------------

def rank_features(model: arch.ModelState, x: np.ndarray, k: int = 2, n_restarts: int = 20,
                  seed: int = 0, z: Optional[np.ndarray] = None) -> list[tuple[int, float]]:
    """(feature index, aSC) for every bottleneck channel, best first."""
    z = bottleneck(model, x) if z is None else z
    scores = []
    for f in range(z.shape[1]):
        v, _ = select_features(z, [f])
        res = kmeans(v, k, n_restarts, Rng(seed).spawn(f))
        scores.append((f, res.asc if np.isfinite(res.asc) else -1.0))
    return sorted(scores, key=lambda t: (-t[1], t[0]))


def feature_tiles(z: np.ndarray) -> np.ndarray:
    """Per-map min-max to [0,1]; constant maps become 0.5."""
    z = np.asarray(z, dtype=np.float64)
    lo = z.min(axis=(1, 2), keepdims=True)
    hi = z.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(span > 0, (z - lo) / np.where(span > 0, span, 1), 0.5)
    return t


def export_feature_maps(model: arch.ModelState, image: np.ndarray, path, cols: int = 8,
                        scale: int = 4, pad: int = 2) -> np.ndarray:
    """Write a labelled grid of all bottleneck maps for one input; returns the tiles."""
    from PIL import Image, ImageDraw

    z = bottleneck(model, np.asarray(image)[None])[0]
    tiles = feature_tiles(z)
    n, h, w = tiles.shape
    rows = -(-n // cols)
    th, tw = h * scale, w * scale
    label_h = 10
    grid = np.full((rows * (th + label_h + pad) + pad, cols * (tw + pad) + pad), 255, np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        y = pad + r * (th + label_h + pad) + label_h
        xx = pad + c * (tw + pad)
        tile = np.kron(tiles[i], np.ones((scale, scale)))
        grid[y:y + th, xx:xx + tw] = np.round(tile * 255).astype(np.uint8)
    img = Image.fromarray(grid, mode="L")
    draw = ImageDraw.Draw(img)
    for i in range(n):
        r, c = divmod(i, cols)
        draw.text((pad + c * (tw + pad), pad + r * (th + label_h + pad) - 1), str(i + 1), fill=0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return tiles
