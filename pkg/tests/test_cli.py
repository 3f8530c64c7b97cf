import csv
import hashlib
import json

import pytest

from mwae import arch, cli, data


def run(*argv):
    return cli.main([str(a) for a in argv])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--n-healthy", 12, "--n-diseased", 8, "--size", 32, "--seed", 3, "--out", out) == 0
    return out / "dataset.mwdb"


@pytest.fixture(scope="module")
def clu_ckpt(tmp_path_factory, bundle):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--data", bundle, "--epochs", 2, "--timing", "none", "--out", out) == 0
    return out


def test_gen_data_counts_and_determinism(tmp_path, capsys):
    assert run("gen-data", "--n-healthy", 6, "--n-diseased", 4, "--size", 32, "--out", tmp_path / "a") == 0
    assert "10 samples" in capsys.readouterr().out
    assert run("gen-data", "--n-healthy", 6, "--n-diseased", 4, "--size", 32, "--out", tmp_path / "b") == 0
    assert digest(tmp_path / "a/dataset.mwdb") == digest(tmp_path / "b/dataset.mwdb")
    ds, _ = data.load_bundle(tmp_path / "a/dataset.mwdb")
    assert len(ds) == 10


def test_gen_data_no_diseased(tmp_path):
    assert run("gen-data", "--n-healthy", 3, "--n-diseased", 0, "--size", 32, "--out", tmp_path) == 0
    index = json.loads((tmp_path / "index.json").read_text())
    assert {e["label"] for e in index} == {"healthy"}


def test_train_outputs_and_rerun_identical(tmp_path, bundle, clu_ckpt):
    assert {p.name for p in clu_ckpt.iterdir()} >= {"checkpoint.mwck", "train_log.csv", "config.toml", "split.json"}
    # rerun from the archived config only
    assert run("train", "--config", clu_ckpt / "config.toml", "--out", tmp_path) == 0
    assert (tmp_path / "train_log.csv").read_bytes() == (clu_ckpt / "train_log.csv").read_bytes()
    assert digest(tmp_path / "checkpoint.mwck") == digest(clu_ckpt / "checkpoint.mwck")
    rows = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    assert list(rows[0]) == ["epoch", "train_loss", "val_loss", "seconds"]


def test_train_anomaly_manifest_excludes_diseased(tmp_path, bundle):
    assert run("train", "--model", "s3", "--mode", "anomaly", "--data", bundle, "--epochs", 1,
               "--out", tmp_path) == 0
    man = json.loads((tmp_path / "split.json").read_text())
    assert man["train_labels"] == ["healthy"]
    ds, _ = data.load_bundle(bundle)
    label = {s.provenance: s.label for s in ds}
    assert all(label[i] == "healthy" for i in man["train"] + man["val"])
    assert sum(label[i] == "diseased" for i in man["test"]) == 8
    cfg = (tmp_path / "config.toml").read_text()
    assert "batch_size = 4" in cfg


def test_train_clu_anomaly_mode_warns(tmp_path, bundle):
    with pytest.warns(UserWarning, match="anomaly mode"):
        assert run("train", "--model", "clu", "--mode", "anomaly", "--data", bundle, "--epochs", 1,
                   "--out", tmp_path) == 0


def test_cluster_outputs_deterministic(tmp_path, bundle, clu_ckpt):
    args = ["cluster", "--checkpoint", clu_ckpt / "checkpoint.mwck", "--data", bundle,
            "--features", "auto", "--restarts", 4]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    names = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    assert "metrics.csv" in names and "feature_ranking.csv" in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n
    rows = list(csv.DictReader(open(tmp_path / "a/metrics.csv")))
    assert [r["k"] for r in rows] == ["2", "3", "4"]
    assert list(rows[0])[:4] == ["k", "aSC", "DB", "inertia"]
    rank = list(csv.DictReader(open(tmp_path / "a/feature_ranking.csv")))
    assert len(rank) == 64 and min(int(r["feature_index"]) for r in rank) == 1


def test_cluster_single_feature_one_based(tmp_path, bundle, clu_ckpt):
    assert run("cluster", "--checkpoint", clu_ckpt / "checkpoint.mwck", "--data", bundle,
               "--features", 33, "--k", 2, "--restarts", 2, "--out", tmp_path) == 0
    cfg = (tmp_path / "config.toml").read_text()
    assert 'features = "33"' in cfg
    assert run("cluster", "--checkpoint", clu_ckpt / "checkpoint.mwck", "--data", bundle,
               "--features", 65, "--out", tmp_path / "bad") == cli.EXIT_USAGE
    assert run("cluster", "--checkpoint", clu_ckpt / "checkpoint.mwck", "--data", bundle,
               "--features", 0, "--out", tmp_path / "bad") == cli.EXIT_USAGE


def test_cluster_k_too_large(tmp_path, bundle, clu_ckpt):
    assert run("cluster", "--checkpoint", clu_ckpt / "checkpoint.mwck", "--data", bundle,
               "--k", 500, "--out", tmp_path) == cli.EXIT_USAGE


def test_evaluate_five_checkpoints(tmp_path, bundle):
    paths = []
    for i, v in enumerate(("S3", "S5", "M3", "M5", "B3")):
        m = arch.build_ano_ae(v, 4, 32, seed=i, width_scale=0.125 if v == "B3" else 1.0)
        p = tmp_path / f"{v}.mwck"
        arch.save_checkpoint(m, p)
        paths.append(p)
    assert run("evaluate", "--checkpoints", *paths, "--data", bundle, "--out", tmp_path / "a") == 0
    assert len(list((tmp_path / "a").glob("roc_*.csv"))) == 10
    rows = list(csv.DictReader(open(tmp_path / "a/auc_table.csv")))
    aucs = [float(r["auc_s_x"]) for r in rows]
    assert aucs == sorted(aucs, reverse=True) and len(rows) == 5
    assert run("evaluate", "--checkpoints", *paths, "--data", bundle, "--out", tmp_path / "b") == 0
    for p in sorted((tmp_path / "a").glob("*.csv")):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes(), p.name


def test_evaluate_missing_checkpoint(tmp_path, bundle):
    assert run("evaluate", "--checkpoints", tmp_path / "nope.mwck", "--data", bundle,
               "--out", tmp_path) == cli.EXIT_DATA
    assert run("evaluate", "--data", bundle, "--out", tmp_path) == cli.EXIT_USAGE


def test_score_and_classify(tmp_path, bundle):
    m = arch.build_ano_ae("S3", 4, 32)
    arch.save_checkpoint(m, tmp_path / "m.mwck")
    before = digest(bundle)
    assert run("score", "--checkpoint", tmp_path / "m.mwck", "--data", bundle, "--gamma", 0.0,
               "--out", tmp_path / "s") == 0
    assert digest(bundle) == before
    rows = list(csv.DictReader(open(tmp_path / "s/classified.csv")))
    assert len(rows) == 20 and all(r["anomaly"] == "1" for r in rows)
    scores = list(csv.DictReader(open(tmp_path / "s/scores.csv")))
    assert all(float(r["s_x"]) >= 0 for r in scores)


def test_usage_errors(capsys):
    assert run("nonsense") == cli.EXIT_USAGE
    assert run("train", "--model", "xx") == cli.EXIT_USAGE
    assert run() == cli.EXIT_USAGE


def test_config_unknown_key(tmp_path):
    (tmp_path / "c.toml").write_text('[gen-data]\nbogus = 1\n')
    assert run("gen-data", "--config", tmp_path / "c.toml") == cli.EXIT_USAGE


def test_flags_override_config(tmp_path):
    (tmp_path / "c.toml").write_text('[gen-data]\nn_healthy = 2\nn_diseased = 2\nsize = 32\n')
    assert run("gen-data", "--config", tmp_path / "c.toml", "--n-diseased", 1, "--out", tmp_path / "o") == 0
    ds, _ = data.load_bundle(tmp_path / "o/dataset.mwdb")
    assert len(ds) == 3


def test_numeric_failure_exit_code(tmp_path, monkeypatch, bundle):
    from mwae import training

    def boom(*a, **k):
        raise training.NumericError("non-finite loss nan at epoch 1, batch index 0")

    monkeypatch.setattr(training, "train", boom)
    assert run("train", "--data", bundle, "--epochs", 1, "--out", tmp_path) == cli.EXIT_NUMERIC
