import numpy as np
import pytest

from mwae import arch, clustering as C
from mwae.tensor import Rng

from oracles import brute_db, brute_silhouette


# helpers -------------------------------------------------------------------------

def blobs(rng, n_per=20, sigma=0.1, dist=10.0):
    a = rng.normal(0, sigma, (n_per, 2))
    b = rng.normal(0, sigma, (n_per, 2)) + [dist, 0]
    return np.vstack([a, b])


# silhouette -------------------------------------------------------------------

def test_silhouette_four_points_hand():
    x = np.array([[0.0], [0.1], [10.0], [10.1]])
    lab = np.array([0, 0, 1, 1])
    s, asc = C.silhouette(x, lab)
    # d_a = 0.1; d_s is the mean distance to the far pair
    expect = [(10.05 - 0.1) / 10.05, (9.95 - 0.1) / 9.95, (9.95 - 0.1) / 9.95, (10.05 - 0.1) / 10.05]
    np.testing.assert_allclose(s, expect, atol=1e-12)
    assert asc > 0.98


def test_silhouette_equidistant_point_zero():
    # own mate at distance 2, both points of the other cluster at distance 2
    x = np.array([[0.0], [2.0], [-2.0], [-2.0]])
    lab = np.array([0, 0, 1, 1])
    s, _ = C.silhouette(x, lab)
    assert s[0] == 0.0


def test_silhouette_duplicates_zero():
    x = np.zeros((6, 3))
    s, asc = C.silhouette(x, np.array([0, 0, 0, 1, 1, 1]))
    assert np.all(s == 0) and asc == 0


def test_silhouette_singleton_zero():
    x = np.array([[0.0], [0.2], [5.0]])
    s, _ = C.silhouette(x, np.array([0, 0, 1]))
    assert s[2] == 0.0


def test_silhouette_single_cluster_raises():
    with pytest.raises(C.ClusteringError):
        C.silhouette(np.zeros((3, 1)), np.zeros(3, int))


@pytest.mark.parametrize("seed", range(5))
def test_silhouette_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 120))
    x = rng.normal(size=(n, int(rng.integers(1, 6))))
    lab = rng.integers(0, int(rng.integers(2, 5)), n)
    if len(np.unique(lab)) < 2:
        lab[0], lab[1] = 0, 1
    s, asc = C.silhouette(x, lab)
    ref = brute_silhouette(x, lab)
    assert np.max(np.abs(s - ref)) < 1e-9
    assert abs(asc - ref.mean()) < 1e-9


# Davies-Bouldin -------------------------------------------------------------------

def test_db_hand():
    x = np.array([[0.0], [2.0], [10.0], [12.0]])
    assert abs(C.davies_bouldin(x, np.array([0, 0, 1, 1])) - 0.2) < 1e-12


def test_db_zero_radius():
    x = np.array([[0.0, 0], [0, 0], [3, 4], [3, 4]])
    assert C.davies_bouldin(x, np.array([0, 0, 1, 1])) == 0.0


def test_db_coincident_centroids():
    x = np.array([[-1.0], [1.0], [-2.0], [2.0]])
    with pytest.raises(C.ClusteringError):
        C.davies_bouldin(x, np.array([0, 0, 1, 1]))


@pytest.mark.parametrize("seed", range(5))
def test_db_matches_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(6, 200))
    x = rng.normal(size=(n, 3))
    lab = rng.integers(0, 4, n)
    assert abs(C.davies_bouldin(x, lab) - brute_db(x, lab)) < 1e-9


# k-means ---------------------------------------------------------------------------

def test_kmeans_two_blobs():
    rng = np.random.default_rng(0)
    x = blobs(rng)
    res = C.kmeans(x, 2, 20, Rng(1))
    cents = sorted(res.centroids.tolist())
    np.testing.assert_allclose(cents[0], x[:20].mean(0), atol=0.1)
    np.testing.assert_allclose(cents[1], x[20:].mean(0), atol=0.1)
    truth = np.repeat([0, 1], 20)
    same = sum(np.array_equal(p, truth) or np.array_equal(p, 1 - truth) for p in res.restart_assignments)
    assert same >= 19


def test_kmeans_k_equals_n():
    x = np.random.default_rng(1).normal(size=(7, 2))
    res = C.kmeans(x, 7, 5, Rng(0))
    assert res.inertia == pytest.approx(0.0, abs=1e-20)


def test_kmeans_k1_mean():
    x = np.random.default_rng(2).normal(size=(30, 4))
    res = C.kmeans(x, 1, 3, Rng(0))
    np.testing.assert_allclose(res.centroids[0], x.mean(0), atol=1e-12)


def test_kmeans_k_too_large():
    with pytest.raises(C.ClusteringError):
        C.kmeans(np.zeros((3, 2)), 4)


def test_kmeans_best_restart_minimal_and_deterministic():
    x = np.random.default_rng(3).normal(size=(60, 3))
    a = C.kmeans(x, 4, 20, Rng(5))
    b = C.kmeans(x, 4, 20, Rng(5))
    assert a.inertia == min(a.restart_inertia)
    assert a.best_restart == a.restart_inertia.index(min(a.restart_inertia))
    np.testing.assert_array_equal(a.assignments, b.assignments)


def test_lloyd_monotone_fixed_point():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(80, 2))
    c, lab, inertia, hist = C.lloyd(x, x[:3])
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
    d = ((x[:, None] - c[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(d.argmin(1), lab)


def test_kmeans_empty_cluster_reseeded():
    x = np.array([[0.0], [0.1], [0.2], [10.0]])
    # two initial centroids far to the right: one of them captures nothing
    c, lab, _, _ = C.lloyd(x, np.array([[20.0], [30.0]]))
    assert len(np.unique(lab)) == 2


# features ----------------------------------------------------------------------------

def test_select_features_shapes():
    z = np.random.default_rng(0).normal(size=(3, 64, 8, 8))
    v, idx = C.select_features(z, "all")
    assert v.shape == (3, 4096) and idx == list(range(64))
    v, idx = C.select_features(z, [32])
    assert v.shape == (3, 64)
    np.testing.assert_array_equal(v.reshape(3, 8, 8), z[:, 32])
    with pytest.raises(C.ClusteringError):
        C.select_features(z, [64])


def test_extract_features_clu_length_and_determinism():
    m = arch.build_clu_ae(5, 64, seed=0)
    x = np.random.default_rng(1).random((2, 5, 64, 64)).astype(np.float32)
    a = C.extract_features(m, x, ["a", "b"])
    b = C.extract_features(m, x, ["a", "b"], "all")
    assert a.values.shape == (2, 4096)
    np.testing.assert_array_equal(a.values, b.values)
    assert C.extract_features(m, x, selection=[32]).values.shape == (2, 64)


def _planted_model(f, channels=2, size=32):
    m = arch.build_clu_ae(channels, size, seed=3)
    g = m.params["enc3.bn.gamma"].data
    bt = m.params["enc3.bn.beta"].data
    keep = g[f]
    g[:] = 0.0
    bt[:] = 0.0
    g[f] = abs(keep) + 1.0
    bt[f] = 5.0
    return m


def test_rank_features_planted():
    rng = np.random.default_rng(0)
    lo = 0.2 + 0.02 * rng.random((8, 2, 32, 32))
    hi = 0.8 + 0.02 * rng.random((8, 2, 32, 32))
    x = np.concatenate([lo, hi]).astype(np.float32)
    m = _planted_model(17)
    ranking = C.rank_features(m, x, k=2, n_restarts=5, seed=0)
    assert len(ranking) == 64
    assert ranking[0][0] == 17 and ranking[0][1] > 0.5
    assert ranking == C.rank_features(m, x, k=2, n_restarts=5, seed=0)


# feature maps --------------------------------------------------------------------

def test_feature_tiles_constant_mid_grey():
    z = np.zeros((3, 4, 4))
    z[1] = np.arange(16).reshape(4, 4)
    t = C.feature_tiles(z)
    assert np.all(t[0] == 0.5) and t[1].min() == 0 and t[1].max() == 1


def test_export_feature_maps(tmp_path):
    from PIL import Image

    m = arch.build_clu_ae(5, 32, seed=0)
    img = np.random.default_rng(0).random((5, 32, 32)).astype(np.float32)
    tiles = C.export_feature_maps(m, img, tmp_path / "maps.png")
    assert tiles.shape[0] == 64
    assert Image.open(tmp_path / "maps.png").size[0] > 0
    s3 = arch.build_ano_ae("S3", 4, 32)
    assert C.export_feature_maps(s3, img[:4], tmp_path / "s3.png").shape[0] == 16
