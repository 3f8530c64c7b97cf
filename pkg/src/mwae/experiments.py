"""End-to-end synthetic experiments shared by the scripts and the acceptance suite."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import anomaly, arch, clustering, data, training
from .synthetic import generate_synthetic
from .tensor import Rng

log = logging.getLogger(__name__)


@dataclass
class SmokeExperiment:
    n_samples: int = 64
    size: int = 64
    batch_size: int = 4
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0


def run_training_smoke(cfg: SmokeExperiment) -> training.TrainReport:
    """Clu-AE on half healthy, half diseased leaves with the clustering split."""
    half = cfg.n_samples // 2
    ds = generate_synthetic(cfg.n_samples - half, half, cfg.size, Rng(cfg.seed))
    tr, va, _ = data.split(ds, data.SplitSpec("clustering", seed=cfg.seed))
    xt, _ = data.stack(tr, with_vi=True)
    xv, _ = data.stack(va, with_vi=True)
    model = arch.build_clu_ae(5, cfg.size, seed=cfg.seed)
    tcfg = training.TrainConfig(max_epochs=cfg.max_epochs, patience=cfg.patience,
                                batch_size=cfg.batch_size, seed=cfg.seed)
    _, rep = training.train(model, xt, xv, tcfg)
    return rep


@dataclass
class AnomalyExperiment:
    variant: str = "B3"
    width_scale: float = 0.25
    size: int = 64
    n_healthy: int = 64
    n_eval_diseased: int = 24          # per severity
    augment_factor: int = 4
    batch_size: int = 4
    max_epochs: int = 30
    patience: int = 20
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class AnomalyOutcome:
    seed: int
    auc_severe: float
    auc_mild: float
    auc_severe_z: float
    auc_mild_z: float
    mean_sx_healthy: float
    mean_sx_severe: float
    n_train: int
    stopped_epoch: int
    best_epoch: int
    seconds: float

    def to_dict(self):
        return asdict(self)


def run_anomaly(cfg: AnomalyExperiment) -> AnomalyOutcome:
    """Train one Ano-AE on augmented healthy leaves and score held-out healthy vs diseased."""
    t0 = time.perf_counter()
    root = Rng(cfg.seed)
    healthy = generate_synthetic(cfg.n_healthy, 0, cfg.size, root.spawn(10))
    severe = generate_synthetic(0, cfg.n_eval_diseased, cfg.size, root.spawn(11), severity="severe")
    mild = generate_synthetic(0, cfg.n_eval_diseased, cfg.size, root.spawn(12), severity="mild")

    tr, va, te = data.split(healthy, data.SplitSpec("anomaly", seed=cfg.seed))
    tr = data.augment(tr, root.spawn(13), cfg.augment_factor * len(tr))
    xt, _ = data.stack(tr, with_vi=False)
    xv, _ = data.stack(va, with_vi=False)

    model = arch.build_ano_ae(cfg.variant, 4, cfg.size, seed=cfg.seed, width_scale=cfg.width_scale)
    tcfg = training.TrainConfig(learning_rate=cfg.learning_rate, max_epochs=cfg.max_epochs,
                                patience=cfg.patience, batch_size=cfg.batch_size, seed=cfg.seed)
    model, rep = training.train(model, xt, xv, tcfg)

    def scores(samples):
        x, _ = data.stack(samples, with_vi=False)
        return anomaly.score_samples(model, x, [s.provenance for s in samples], [s.label for s in samples])

    sh, ss, sm = scores(te), scores(severe), scores(mild)
    out = AnomalyOutcome(
        seed=cfg.seed,
        auc_severe=anomaly.roc(sh + ss, "s_x").auc,
        auc_mild=anomaly.roc(sh + sm, "s_x").auc,
        auc_severe_z=anomaly.roc(sh + ss, "s_z").auc,
        auc_mild_z=anomaly.roc(sh + sm, "s_z").auc,
        mean_sx_healthy=float(np.mean([r.s_x for r in sh])),
        mean_sx_severe=float(np.mean([r.s_x for r in ss])),
        n_train=len(xt),
        stopped_epoch=rep.stopped_epoch,
        best_epoch=rep.best_epoch,
        seconds=time.perf_counter() - t0,
    )
    log.info("anomaly seed %d: %s", cfg.seed, out)
    return out


@dataclass
class ClusteringExperiment:
    size: int = 64
    n_healthy: int = 48
    n_diseased: int = 48
    severity: str = "mixed"
    batch_size: int = 8
    max_epochs: int = 40
    patience: int = 20
    ks: tuple = (2, 3, 4)
    n_restarts: int = 20
    seed: int = 0


@dataclass
class ClusteringOutcome:
    seed: int
    best_feature: int                  # 0-based
    all_features: list = field(default_factory=list)      # (k, aSC, DB, inertia)
    single_feature: list = field(default_factory=list)
    seconds: float = 0.0

    def best_k(self, which: str, index: str) -> int:
        rows = getattr(self, which)
        if index == "asc":
            return max(rows, key=lambda r: (r[1], -r[0]))[0]
        return min(rows, key=lambda r: (r[2], r[0]))[0]

    def asc_at(self, which: str, k: int) -> float:
        return next(r[1] for r in getattr(self, which) if r[0] == k)

    def to_dict(self):
        return asdict(self)


def sweep_k(values: np.ndarray, ks, n_restarts: int, seed: int) -> list:
    rows = []
    for k in ks:
        res = clustering.kmeans(values, k, n_restarts, Rng(seed).spawn(100 + k))
        rows.append((k, res.asc, res.db, res.inertia))
    return rows


def run_clustering(cfg: ClusteringExperiment) -> ClusteringOutcome:
    """Train a Clu-AE on mixed leaves, then compare all-feature and best single-feature clustering."""
    t0 = time.perf_counter()
    root = Rng(cfg.seed)
    ds = generate_synthetic(cfg.n_healthy, cfg.n_diseased, cfg.size, root.spawn(20), severity=cfg.severity)
    tr, va, te = data.split(ds, data.SplitSpec("clustering", seed=cfg.seed))
    xt, _ = data.stack(tr, with_vi=True)
    xv, _ = data.stack(va, with_vi=True)
    model = arch.build_clu_ae(5, cfg.size, seed=cfg.seed)
    tcfg = training.TrainConfig(max_epochs=cfg.max_epochs, patience=cfg.patience,
                                batch_size=cfg.batch_size, seed=cfg.seed)
    model, _ = training.train(model, xt, xv, tcfg)

    # cluster every non-test sample
    pool = tr + va
    x, _ = data.stack(pool, with_vi=True)
    z = clustering.bottleneck(model, x)
    ranking = clustering.rank_features(model, x, k=2, n_restarts=cfg.n_restarts, seed=cfg.seed, z=z)
    best = ranking[0][0]
    all_v, _ = clustering.select_features(z, "all")
    one_v, _ = clustering.select_features(z, [best])
    out = ClusteringOutcome(
        seed=cfg.seed,
        best_feature=best,
        all_features=sweep_k(all_v, cfg.ks, cfg.n_restarts, cfg.seed),
        single_feature=sweep_k(one_v, cfg.ks, cfg.n_restarts, cfg.seed),
        seconds=time.perf_counter() - t0,
    )
    log.info("clustering seed %d: %s", cfg.seed, out)
    return out
