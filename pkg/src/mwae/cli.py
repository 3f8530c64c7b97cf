"""Command-line entry point: ``mwae {gen-data,train,cluster,evaluate,score}``.

Every command archives its effective configuration as ``config.toml`` next to
its outputs; ``--config FILE`` loads such a file and explicit flags override it.
Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import tomlkit

from . import anomaly, arch, clustering, data, training
from .synthetic import generate_synthetic
from .tensor import Rng, ShapeError
from .tensorio import FormatError

log = logging.getLogger("mwae")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MODELS = ("clu", "s3", "s5", "m3", "m5", "b3")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# config handling ---------------------------------------------------------------

def _defaults(parser: argparse.ArgumentParser) -> dict:
    return {a.dest: a.default for a in parser._actions if a.dest not in ("help", "command", "config")}


def resolve_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """File values override parser defaults; flags given on the command line override both."""
    defaults = _defaults(parser)
    merged = dict(defaults)
    if getattr(args, "config", None):
        doc = tomlkit.parse(Path(args.config).read_text()).unwrap()
        section = doc.get(args.command, doc)
        for k, v in section.items():
            key = k.replace("-", "_")
            if key not in defaults:
                raise UsageError(f"unknown key {k!r} in {args.config}")
            merged[key] = v
    given = set(getattr(args, "_explicit", ()))
    for k in defaults:
        if k in given:
            merged[k] = getattr(args, k)
    return merged


def archive_config(cfg: dict, command: str, out_dir: Path) -> None:
    doc = tomlkit.document()
    table = tomlkit.table()
    for k in sorted(cfg):
        v = cfg[k]
        if v is None:
            continue
        table[k] = list(v) if isinstance(v, tuple) else v
    doc[command] = table
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.toml").write_text(tomlkit.dumps(doc))


class _Track(argparse.Action):
    """Store the value and remember that the flag was given explicitly."""

    def __call__(self, parser, ns, values, option_string=None):
        setattr(ns, self.dest, values)
        ns._explicit = getattr(ns, "_explicit", set()) | {self.dest}


class _TrackTrue(argparse.Action):
    def __init__(self, option_strings, dest, default=False, **kw):
        super().__init__(option_strings, dest, nargs=0, default=default, **kw)

    def __call__(self, parser, ns, values, option_string=None):
        setattr(ns, self.dest, True)
        ns._explicit = getattr(ns, "_explicit", set()) | {self.dest}


def _csv(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def _model_for(name: str, channels: int, size: int, seed: int, width_scale: float) -> arch.ModelState:
    if name == "clu":
        return arch.build_clu_ae(channels, size, seed=seed)
    return arch.build_ano_ae(name.upper(), channels, size, seed=seed, width_scale=width_scale)


def _uses_vi(model: arch.ModelState) -> bool:
    return model.spec.input_channels == 5


# commands --------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    out = Path(cfg["out"])
    ds = generate_synthetic(cfg["n_healthy"], cfg["n_diseased"], cfg["size"], Rng(cfg["seed"]),
                            severity=cfg["severity"])
    out.mkdir(parents=True, exist_ok=True)
    data.save_bundle(out / "dataset.mwdb", ds, {"generator": "synthetic", "seed": cfg["seed"],
                                                "size": cfg["size"], "severity": cfg["severity"]})
    index = [{"id": s.provenance, "label": s.label, "severity": s.severity} for s in ds]
    (out / "index.json").write_text(json.dumps(index, indent=1) + "\n")
    archive_config(cfg, "gen-data", out)
    counts = {lab: sum(s.label == lab for s in ds) for lab in ("healthy", "diseased")}
    print(f"wrote {len(ds)} samples to {out / 'dataset.mwdb'}: "
          f"{counts['healthy']} healthy, {counts['diseased']} diseased")
    return EXIT_OK


def cmd_ingest(cfg: dict) -> int:
    root = Path(cfg["src"])
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise data.SplitError(f"no sample directories under {root}")
    samples = [data.load_sample_dir(d, cfg["size"]) for d in dirs]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    data.save_bundle(out / "dataset.mwdb", samples, {"source": str(root), "size": cfg["size"]})
    archive_config(cfg, "ingest", out)
    print(f"ingested {len(samples)} samples into {out / 'dataset.mwdb'}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    model_name, mode = cfg["model"], cfg["mode"]
    if model_name == "clu" and mode == "anomaly":
        warnings.warn("training the clustering autoencoder in anomaly mode")
    if model_name != "clu" and mode == "clustering":
        warnings.warn(f"training anomaly variant {model_name} in clustering mode")
    ds, _ = data.load_bundle(cfg["data"])
    spec = data.SplitSpec(mode, seed=cfg["split_seed"] if cfg["split_seed"] is not None else cfg["seed"])
    tr_i, va_i, te_i = data.split_indices([s.label for s in ds], spec)
    tr, va = [ds[i] for i in tr_i], [ds[i] for i in va_i]
    if cfg["augment"] > 1:
        tr = data.augment(tr, Rng(cfg["seed"]).spawn(13), cfg["augment"] * len(tr))
    with_vi = cfg["vi"] if cfg["vi"] is not None else model_name == "clu"
    channels = 5 if with_vi else 4
    size = ds[0].size[0]
    batch = cfg["batch_size"] or (8 if mode == "clustering" else 4)
    tcfg = training.TrainConfig(learning_rate=cfg["lr"], max_epochs=cfg["epochs"], patience=cfg["patience"],
                                batch_size=batch, seed=cfg["seed"], masked_loss=cfg["masked_loss"])
    xt, mt = data.stack(tr, with_vi)
    xv, mv = data.stack(va, with_vi)
    model = _model_for(model_name, channels, size, cfg["seed"], cfg["width_scale"])

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "mode": mode, "seed": spec.seed,
        "train": [ds[i].provenance for i in tr_i],
        "val": [ds[i].provenance for i in va_i],
        "test": [ds[i].provenance for i in te_i],
        "train_labels": sorted({ds[i].label for i in tr_i}),
    }
    (out / "split.json").write_text(json.dumps(manifest, indent=1) + "\n")
    ckpt = out / "checkpoint.mwck"
    model, rep = training.train(model, xt, xv, tcfg, mt, mv,
                                on_best=lambda st, ep: arch.save_checkpoint(st, ckpt))
    arch.save_checkpoint(model, ckpt)
    training.write_log_csv(rep, out / "train_log.csv", timing=cfg["timing"] == "wall")
    archive_config({**cfg, "batch_size": batch, "vi": with_vi}, "train", out)
    print(f"{model.spec.name}: best epoch {rep.best_epoch}/{rep.stopped_epoch}, "
          f"val loss {rep.best_val_loss:.6g}; wrote {ckpt}")
    return EXIT_OK


def _pool(ds, cfg, mode="clustering"):
    """Samples to cluster or score, according to --subset."""
    if cfg["subset"] == "all":
        return ds
    tr, va, te = data.split_indices([s.label for s in ds], data.SplitSpec(mode, seed=cfg["split_seed"]))
    keep = {"nontest": tr + va, "test": te}[cfg["subset"]]
    return [ds[i] for i in sorted(keep)]


def _parse_features(spec: str):
    if spec in ("all", "auto"):
        return spec
    try:
        one_based = [int(t) for t in spec.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--features expects all, auto or a comma list of 1-based indices, got {spec!r}")
    if not one_based or min(one_based) < 1:
        raise UsageError("feature indices are 1-based")
    return [i - 1 for i in one_based]


def cmd_cluster(cfg: dict) -> int:
    model = arch.load_checkpoint(cfg["checkpoint"])
    ds, _ = data.load_bundle(cfg["data"])
    pool = _pool(ds, cfg)
    ks = [int(k) for k in cfg["k"]]
    if max(ks) > len(pool):
        raise UsageError(f"k={max(ks)} exceeds the {len(pool)} samples being clustered")
    x, _ = data.stack(pool, _uses_vi(model))
    z = clustering.bottleneck(model, x)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    selection = _parse_features(cfg["features"])
    if selection == "auto":
        ranking = clustering.rank_features(model, x, 2, cfg["restarts"], cfg["seed"], z=z)
        fh, w = _csv(out / "feature_ranking.csv")
        with fh:
            w.writerow(["feature_index", "aSC"])
            for f, s in ranking:
                w.writerow([f + 1, repr(s)])
        selection = [ranking[0][0]]
    try:
        values, used = clustering.select_features(z, selection)
    except clustering.ClusteringError as exc:
        raise UsageError(str(exc))

    results = [clustering.kmeans(values, k, cfg["restarts"], Rng(cfg["seed"]).spawn(100 + k)) for k in ks]
    best_asc = max(r.asc for r in results)
    best_db = min(r.db for r in results)
    fh, w = _csv(out / "metrics.csv")
    with fh:
        w.writerow(["k", "aSC", "DB", "inertia", "best_aSC", "best_DB"])
        for r in results:
            w.writerow([r.k, repr(r.asc), repr(r.db), repr(r.inertia), int(r.asc == best_asc), int(r.db == best_db)])
    for r in results:
        fh, w = _csv(out / f"assignments_k{r.k}.csv")
        with fh:
            w.writerow(["sample_id", "cluster"])
            for s, c in zip(pool, r.assignments):
                w.writerow([s.provenance, int(c)])
    if cfg["feature_maps"]:
        clustering.export_feature_maps(model, x[0], out / "feature_maps.png")
    archive_config(cfg, "cluster", out)
    label = "all" if len(used) == z.shape[1] else ",".join(str(f + 1) for f in used)
    print(f"clustered {len(pool)} samples on features {label}; best aSC {best_asc:.5f}, best DB {best_db:.5f}")
    return EXIT_OK


def _eval_samples(ds, cfg):
    if cfg["subset"] == "all":
        return ds
    _, _, te = data.split_indices([s.label for s in ds], data.SplitSpec("anomaly", seed=cfg["split_seed"]))
    return [ds[i] for i in sorted(te)]


def cmd_evaluate(cfg: dict) -> int:
    paths = [Path(p) for p in cfg["checkpoints"]]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing checkpoint(s): {', '.join(missing)}")
    ds, _ = data.load_bundle(cfg["data"])
    samples = _eval_samples(ds, cfg)
    out = Path(cfg["out"])
    models = {}
    for p in paths:
        m = arch.load_checkpoint(p)
        name = m.spec.name
        while name in models:
            name += "'"
        models[name] = m
    ids, labels = [s.provenance for s in samples], [s.label for s in samples]
    rows = []
    for name, m in models.items():
        x, masks = data.stack(samples, _uses_vi(m))
        rows.append(anomaly.evaluate_models({name: m}, x, ids, labels, masks, cfg["masked_score"]).rows[0])
    table = anomaly.ComparisonTable(sorted(rows, key=lambda r: (-r.auc_x, r.name)))
    for r in table.rows:
        anomaly.write_roc_csv(r.roc_x, out / f"roc_{r.name}_s_x.csv")
        anomaly.write_roc_csv(r.roc_z, out / f"roc_{r.name}_s_z.csv")
        anomaly.write_scores_csv(r.scored, out / f"scores_{r.name}.csv")
    anomaly.write_auc_table(table, out / "auc_table.csv")
    if cfg["plot"]:
        _plot_roc(table, out / "roc.png")
    archive_config(cfg, "evaluate", out)
    for r in table.rows:
        print(f"{r.name}: AUC(s_x) {r.auc_x:.4f}  AUC(s_z) {r.auc_z:.4f}")
    return EXIT_OK


def _plot_roc(table, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, which in zip(axes, ("s_x", "s_z")):
        for r in table.rows:
            c = r.roc_x if which == "s_x" else r.roc_z
            ax.step(c.fpr, c.tpr, where="post", label=f"{r.name} ({c.auc:.3f})")
        ax.plot([0, 1], [0, 1], "k:", lw=0.8)
        ax.set(xlabel="false positive rate", ylabel="true positive rate", title=which)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_score(cfg: dict) -> int:
    model = arch.load_checkpoint(cfg["checkpoint"])
    ds, _ = data.load_bundle(cfg["data"])
    x, masks = data.stack(ds, _uses_vi(model))
    scored = anomaly.score_samples(model, x, [s.provenance for s in ds], [s.label for s in ds],
                                   masks, cfg["masked_score"])
    out = Path(cfg["out"])
    anomaly.write_scores_csv(scored, out / "scores.csv")
    if cfg["gamma"] is not None:
        flags = anomaly.classify([r.s_x for r in scored], cfg["gamma"])
        fh, w = _csv(out / "classified.csv")
        with fh:
            w.writerow(["sample_id", "s_x", "anomaly"])
            for r, f in zip(scored, flags):
                w.writerow([r.sample_id, repr(r.s_x), int(f)])
    archive_config(cfg, "score", out)
    print(f"scored {len(scored)} samples; wrote {out / 'scores.csv'}")
    return EXIT_OK


# parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mwae", description="Leaf clustering and anomaly detection with autoencoders.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def cmd(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", help="TOML file with defaults for this command")
        return sp

    def opt(sp, *flags, **kw):
        if kw.get("action") == "store_true":
            kw["action"] = _TrackTrue
        else:
            kw.setdefault("action", _Track)
        sp.add_argument(*flags, **kw)

    g = cmd("gen-data", cmd_gen_data, "generate a synthetic leaf dataset bundle")
    opt(g, "--n-healthy", type=int, default=64)
    opt(g, "--n-diseased", type=int, default=40)
    opt(g, "--size", type=int, default=64)
    opt(g, "--severity", choices=("mild", "severe", "mixed"), default="mixed")
    opt(g, "--seed", type=int, default=0)
    opt(g, "--out", default="data")

    i = cmd("ingest", cmd_ingest, "convert per-band PNG sample directories into a bundle")
    opt(i, "--src", required=False, default="raw")
    opt(i, "--size", type=int, default=512)
    opt(i, "--out", default="data")

    t = cmd("train", cmd_train, "train an autoencoder")
    opt(t, "--model", choices=MODELS, default="clu")
    opt(t, "--data", default="data/dataset.mwdb")
    opt(t, "--mode", choices=("clustering", "anomaly"), default="clustering")
    opt(t, "--lr", type=float, default=1e-3)
    opt(t, "--epochs", type=int, default=500)
    opt(t, "--patience", type=int, default=20)
    opt(t, "--batch-size", type=int, default=None, help="default 8 (clustering) or 4 (anomaly)")
    opt(t, "--seed", type=int, default=0)
    opt(t, "--split-seed", type=int, default=None, help="defaults to --seed")
    opt(t, "--augment", type=int, default=1, help="enlarge the training split by this factor")
    opt(t, "--width-scale", type=float, default=1.0, help="filter multiplier for anomaly variants")
    opt(t, "--vi", type=lambda s: s.lower() in ("1", "true", "yes"), default=None,
        help="append the NIR/R channel (default: only for clu)")
    opt(t, "--masked-loss", action="store_true", default=False)
    opt(t, "--timing", choices=("wall", "none"), default="wall",
        help="'none' leaves the seconds column empty for byte-comparable logs")
    opt(t, "--out", default="runs/train")

    c = cmd("cluster", cmd_cluster, "k-means on bottleneck features")
    opt(c, "--checkpoint", default="runs/train/checkpoint.mwck")
    opt(c, "--data", default="data/dataset.mwdb")
    opt(c, "--k", type=int, nargs="+", default=[2, 3, 4])
    opt(c, "--features", default="all", help="all, auto (best single feature) or 1-based indices")
    opt(c, "--restarts", type=int, default=20)
    opt(c, "--seed", type=int, default=0)
    opt(c, "--subset", choices=("nontest", "all"), default="nontest")
    opt(c, "--split-seed", type=int, default=0)
    opt(c, "--feature-maps", action="store_true", default=False)
    opt(c, "--out", default="runs/cluster")

    e = cmd("evaluate", cmd_evaluate, "ROC/AUC comparison of anomaly checkpoints")
    opt(e, "--checkpoints", nargs="+", default=[])
    opt(e, "--data", default="data/dataset.mwdb")
    opt(e, "--subset", choices=("test", "all"), default="test")
    opt(e, "--split-seed", type=int, default=0)
    opt(e, "--masked-score", action="store_true", default=False)
    opt(e, "--plot", action="store_true", default=False)
    opt(e, "--out", default="runs/evaluate")

    s = cmd("score", cmd_score, "anomaly scores for every sample of a bundle")
    opt(s, "--checkpoint", default="runs/train/checkpoint.mwck")
    opt(s, "--data", default="data/dataset.mwdb")
    opt(s, "--gamma", type=float, default=None, help="flag samples with s_x >= gamma")
    opt(s, "--masked-score", action="store_true", default=False)
    opt(s, "--out", default="runs/score")
    return p


def _limit_threads():
    n = os.environ.get("MWAE_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        cfg = resolve_config(args, sub)
        if args.command == "evaluate" and not cfg["checkpoints"]:
            raise UsageError("evaluate needs at least one --checkpoints path")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _limit_threads():
            return args.func(cfg)
    except UsageError as exc:
        print(f"mwae: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except training.NumericError as exc:
        print(f"mwae: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, ValueError, ShapeError, KeyError) as exc:
        print(f"mwae: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
