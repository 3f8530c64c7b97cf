"""Reconstruction-error anomaly scores, threshold classification and ROC/AUC."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import arch
from .tensor import Tensor

HEALTHY = "healthy"
DISEASED = "diseased"
SCORE_KINDS = ("s_x", "s_z")


class AnomalyError(ValueError):
    pass


class DeadBottleneckWarning(UserWarning):
    pass


@dataclass
class ScoredSample:
    sample_id: str
    s_x: float
    s_z: float
    label: str


@dataclass
class RocCurve:
    gamma: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def points(self):
        return list(zip(self.gamma.tolist(), self.fpr.tolist(), self.tpr.tolist()))


# scores ---------------------------------------------------------------------

def ratio_score(ref: np.ndarray, approx: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-sample numerator and denominator of ||ref - approx||^2 / ||ref||^2."""
    ref = np.asarray(ref, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    if ref.shape != approx.shape:
        raise AnomalyError(f"shape mismatch {ref.shape} vs {approx.shape}")
    if ref.ndim == 1:
        ref, approx = ref[None], approx[None]
    w = 1.0 if mask is None else np.asarray(mask, dtype=np.float64)
    axes = tuple(range(1, ref.ndim))
    num = (w * (ref - approx) ** 2).sum(axes)
    den = (w * ref ** 2).sum(axes)
    return num, den


def image_scores(x: np.ndarray, x_hat: np.ndarray, masks: Optional[np.ndarray] = None) -> np.ndarray:
    num, den = ratio_score(x, x_hat, None if masks is None else np.asarray(masks)[:, None])
    if np.any(den == 0):
        raise AnomalyError("zero input: s_x undefined for an all-zero image")
    return num / den


def feature_scores(z: np.ndarray, z_tilde: np.ndarray) -> np.ndarray:
    num, den = ratio_score(z, z_tilde)
    dead = den == 0
    if np.any(dead):
        warnings.warn(f"{int(dead.sum())} sample(s) with an all-zero bottleneck; s_z set to 0",
                      DeadBottleneckWarning, stacklevel=2)
    out = np.zeros_like(num)
    out[~dead] = num[~dead] / den[~dead]
    return out


def _batched(fn, x, batch_size):
    return np.concatenate([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def reconstruct(model: arch.ModelState, x: np.ndarray, batch_size: int = 16):
    """(x_hat, z, z_tilde) in eval mode."""
    x = np.asarray(x, dtype=np.float32)

    def run(xb):
        z = arch.encode(model, Tensor(xb), "eval")
        xh = arch.decode(model, z, "eval")
        zt = arch.encode(model, xh, "eval")
        return np.concatenate([xh.data.reshape(len(xb), -1), z.data.reshape(len(xb), -1),
                               zt.data.reshape(len(xb), -1)], axis=1)

    flat = _batched(run, x, batch_size)
    nx = int(np.prod(x.shape[1:]))
    nz = (flat.shape[1] - nx) // 2
    x_hat = flat[:, :nx].reshape(x.shape)
    return x_hat, flat[:, nx:nx + nz], flat[:, nx + nz:]


def score_image(model: arch.ModelState, x: np.ndarray, masks: Optional[np.ndarray] = None) -> np.ndarray:
    x_hat = arch.predict(model, np.asarray(x, dtype=np.float32), what="output")
    return image_scores(x, x_hat, masks)


def score_feature(model: arch.ModelState, x: np.ndarray) -> np.ndarray:
    _, z, zt = reconstruct(model, x)
    return feature_scores(z, zt)


def score_samples(model: arch.ModelState, x: np.ndarray, ids: Sequence, labels: Sequence,
                  masks: Optional[np.ndarray] = None, masked: bool = False) -> list:
    x_hat, z, zt = reconstruct(model, x)
    sx = image_scores(x, x_hat, masks if masked else None)
    sz = feature_scores(z, zt)
    return [ScoredSample(str(i), float(a), float(b), str(l)) for i, a, b, l in zip(ids, sx, sz, labels)]


def classify(scores, gamma: float) -> np.ndarray:
    """True where the sample is flagged anomalous (s >= gamma)."""
    if not np.isfinite(gamma):
        raise AnomalyError("threshold must be finite")
    return np.asarray(scores, dtype=np.float64) >= gamma


# ROC ------------------------------------------------------------------------

def _split(scores, positive):
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    if s.shape != pos.shape:
        raise AnomalyError("scores and labels differ in length")
    if pos.all() or not pos.any():
        raise AnomalyError("ROC needs both healthy and diseased samples")
    return s, pos


def roc_curve(scores, positive) -> RocCurve:
    """Sweep gamma over +inf then the distinct scores in decreasing order."""
    s, pos = _split(scores, positive)
    gammas = np.concatenate([[np.inf], np.unique(s)[::-1]])
    n_pos, n_neg = pos.sum(), (~pos).sum()
    tpr = np.array([(s[pos] >= g).sum() / n_pos for g in gammas])
    fpr = np.array([(s[~pos] >= g).sum() / n_neg for g in gammas])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(gammas, fpr, tpr, auc)


def mann_whitney_auc(scores, positive) -> float:
    """P(s_pos > s_neg) + P(s_pos == s_neg) / 2 by exhaustive pair counting."""
    s, pos = _split(scores, positive)
    a, b = s[pos][:, None], s[~pos][None, :]
    return float(((a > b).sum() + 0.5 * (a == b).sum()) / (a.size * b.size))


def roc(scored: Sequence[ScoredSample], which: str = "s_x") -> RocCurve:
    if which not in SCORE_KINDS:
        raise AnomalyError(f"unknown score {which!r}")
    s = [getattr(r, which) for r in scored]
    return roc_curve(s, [r.label != HEALTHY for r in scored])


# model comparison -------------------------------------------------------------

@dataclass
class VariantResult:
    name: str
    scored: list
    roc_x: RocCurve
    roc_z: RocCurve

    @property
    def auc_x(self):
        return self.roc_x.auc

    @property
    def auc_z(self):
        return self.roc_z.auc


@dataclass
class ComparisonTable:
    rows: list = field(default_factory=list)      # VariantResult, sorted by AUC(s_x) desc

    def best(self, which: str) -> str:
        key = "auc_x" if which == "s_x" else "auc_z"
        return max(self.rows, key=lambda r: getattr(r, key)).name


def evaluate_models(models: dict, x: np.ndarray, ids: Sequence, labels: Sequence,
                    masks: Optional[np.ndarray] = None, masked: bool = False) -> ComparisonTable:
    """Score every sample under each named model and collect both ROC curves."""
    out = []
    for name, model in models.items():
        scored = score_samples(model, x, ids, labels, masks, masked)
        rx, rz = roc(scored, "s_x"), roc(scored, "s_z")
        for curve, which in ((rx, "s_x"), (rz, "s_z")):
            mw = mann_whitney_auc([getattr(r, which) for r in scored], [r.label != HEALTHY for r in scored])
            if abs(mw - curve.auc) > 1e-12:
                raise AnomalyError(f"{name}: trapezoid AUC {curve.auc} disagrees with rank AUC {mw}")
        out.append(VariantResult(name, scored, rx, rz))
    out.sort(key=lambda r: (-r.auc_x, r.name))
    return ComparisonTable(out)


# CSV ----------------------------------------------------------------------------

def _writer(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def write_scores_csv(scored: Sequence[ScoredSample], path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["sample_id", "label", "s_x", "s_z"])
        for r in scored:
            w.writerow([r.sample_id, r.label, repr(r.s_x), repr(r.s_z)])


def write_roc_csv(curve: RocCurve, path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["gamma", "fpr", "tpr"])
        for g, f, t in curve.points():
            w.writerow([repr(g), repr(f), repr(t)])


def write_auc_table(table: ComparisonTable, path) -> None:
    bx, bz = table.best("s_x"), table.best("s_z")
    fh, w = _writer(path)
    with fh:
        w.writerow(["variant", "auc_s_x", "auc_s_z", "best_s_x", "best_s_z"])
        for r in table.rows:
            w.writerow([r.name, repr(r.auc_x), repr(r.auc_z), int(r.name == bx), int(r.name == bz)])
