"""``fusestrata`` command line: one subcommand per pipeline stage.

Settings come from built-in defaults, then a ``--config`` file (INI-style
``key = value`` under section headers), then ``FUSESTRATA_THREADS``, then
command-line flags; later sources win. Exit codes: 0 success, 1 usage or
validation error, 2 runtime failure.
"""
import argparse
import configparser
import logging
import os
import sys

import numpy as np

from . import _jit
from . import apcluster, factors, fusenet, reconmetrics, reports, stratstats, trainer, volio
from .seeds import derive_seed

log = logging.getLogger("fusestrata")

COMMANDS = ("synth", "train", "cv", "embed", "metrics", "cluster", "factors", "stats", "profile", "params")

DEFAULTS = {
    "run": {"seed": 0, "threads": 1},
    "synth": {"n": 60, "dims": "32x32x24", "groups": 3, "effect_size": 2.0},
    "model": {"dims": "", "depth": 3, "channels": 2, "kernel": 5, "dropout": 0.1, "modalities": ""},
    "training": {"epochs": 200, "batch_size": 1, "optimizer": "adam", "lr": 1e-4, "precision": "float32"},
    "cv": {"k": 10},
    "metrics": {"roi_dims": "4x4x3", "n_pairs": 1000, "background": 0.0, "max_background_fraction": 0.5},
    "clustering": {"grid": "10x50", "percentile_lo": 1.0, "percentile_hi": 99.0, "max_iter": 1000,
                   "convergence_window": 50},
    "factors": {"threshold": 0.3},
    "stats": {"bootstrap_m": 10000, "replacement": False, "alpha": 0.05},
}


class CliError(ValueError):
    """Bad flag, config value or input file; exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# configuration

def _coerce(section, key, raw, default):
    try:
        if isinstance(default, bool):
            low = str(raw).strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw).strip()
    except ValueError:
        raise CliError(f"config {section}.{key}: cannot parse {raw!r}") from None


def load_config(path=None):
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    if path:
        if not os.path.isfile(path):
            raise CliError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise CliError(f"{path}: {exc}") from None
        for section in parser.sections():
            if section not in cfg:
                raise CliError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in cfg[section]:
                    raise CliError(f"{path}: unknown key {section}.{key}")
                cfg[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])
    return cfg


def parse_dims(text, n=3):
    try:
        dims = tuple(int(t) for t in str(text).lower().split("x"))
    except ValueError:
        raise CliError(f"bad dims {text!r}; expected e.g. 32x32x24") from None
    if len(dims) != n or any(d < 1 for d in dims):
        raise CliError(f"bad dims {text!r}; expected {n} positive integers joined by 'x'")
    return dims


def apply_overrides(cfg, args):
    env = os.environ.get("FUSESTRATA_THREADS")
    if env:
        cfg["run"]["threads"] = _coerce("run", "threads", env, 1)
    pairs = [
        ("seed", "run", "seed"), ("threads", "run", "threads"),
        ("depth", "model", "depth"), ("channels", "model", "channels"), ("kernel", "model", "kernel"),
        ("modalities", "model", "modalities"), ("epochs", "training", "epochs"), ("lr", "training", "lr"),
        ("grid", "clustering", "grid"), ("bootstrap_m", "stats", "bootstrap_m"),
        ("k", "cv", "k"), ("n", "synth", "n"), ("groups", "synth", "groups"),
        ("effect_size", "synth", "effect_size"),
    ]
    for attr, section, key in pairs:
        if attr == "channels" and getattr(args, "command", None) == "params":
            continue  # there it names the mid-flow width, not the base width
        val = getattr(args, attr, None)
        if val is not None:
            cfg[section][key] = val
    if getattr(args, "dims", None):
        cfg["model"]["dims"] = args.dims
        cfg["synth"]["dims"] = args.dims
    if getattr(args, "replacement", False):
        cfg["stats"]["replacement"] = True
    if cfg["run"]["threads"] < 1:
        raise CliError("threads must be >= 1")
    return cfg


def _grid_sizes(text):
    dims = str(text).lower().split("x")
    try:
        nd, npref = (int(t) for t in dims)
    except ValueError:
        raise CliError(f"bad grid {text!r}; expected DAMPINGxPREFERENCE, e.g. 10x50") from None
    if nd < 1 or npref < 1:
        raise CliError("grid sizes must be positive")
    return nd, npref


# --------------------------------------------------------------------------
# helpers

def _require_file(path, what):
    if not path:
        raise CliError(f"--{what} is required")
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _load_data(path):
    _require_file(path, "data")
    if not os.path.isfile(os.path.join(path, "manifest.json")):
        raise CliError(f"{path} is not a dataset directory (no manifest.json)")
    return volio.load_dataset(path)


def _modalities(cfg, records):
    mods = [m.strip() for m in cfg["model"]["modalities"].split(",") if m.strip()]
    available = list(records[0].volumes)
    if not mods:
        return available
    missing = [m for m in mods if m not in available]
    if missing:
        raise CliError(f"modalities {missing} not in dataset (has {available})")
    return mods


def _model_config(cfg, records, mods):
    m = cfg["model"]
    dims = parse_dims(m["dims"]) if m["dims"] else records[0].volumes[mods[0]].dims
    if dims != records[0].volumes[mods[0]].dims:
        raise CliError(f"--dims {dims} disagrees with dataset dims {records[0].volumes[mods[0]].dims}")
    return fusenet.ModelConfig(n_modalities=len(mods), input_dims=tuple(dims), depth=m["depth"],
                               base_channels=m["channels"], kernel=m["kernel"], dropout_rate=m["dropout"])


def _train_config(cfg, seed):
    t = cfg["training"]
    return trainer.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], optimizer=t["optimizer"],
                               learning_rate=t["lr"], seed=seed, precision=t["precision"])


def _cnr_config(cfg, seed):
    m = cfg["metrics"]
    return reconmetrics.CnrConfig(roi_dims=parse_dims(m["roi_dims"]), n_pairs=m["n_pairs"],
                                  background=m["background"], max_background_fraction=m["max_background_fraction"],
                                  seed=seed)


def _load_model(path, records, mods):
    _require_file(path, "model")
    model = fusenet.load_checkpoint(path)
    dims = records[0].volumes[mods[0]].dims
    if model.config.input_dims != dims or model.config.n_modalities != len(mods):
        raise CliError(f"checkpoint expects {model.config.n_modalities} modalities at {model.config.input_dims}, "
                       f"dataset gives {len(mods)} at {dims}")
    return model


def _read_matrix(path, what):
    _require_file(path, what)
    cols, rows = reports.read_csv(path)
    if not cols or cols[0] != "subject_id":
        raise CliError(f"{path}: first column must be subject_id")
    try:
        values = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise CliError(f"{path}: non-numeric cell ({exc})") from None
    return [r[0] for r in rows], cols[1:], values.reshape(len(rows), len(cols) - 1)


def _read_labels(path, subject_ids):
    _require_file(path, "labels")
    cols, rows = reports.read_csv(path)
    if len(cols) < 2 or cols[0] != "subject_id":
        raise CliError(f"{path}: expected columns subject_id,cluster")
    table = {r[0]: int(r[1]) for r in rows}
    missing = [s for s in subject_ids if s not in table]
    if missing:
        raise CliError(f"{path}: no label for subjects {missing[:5]}")
    return np.array([table[s] for s in subject_ids])


# --------------------------------------------------------------------------
# subcommands

def cmd_synth(args, cfg, prov):
    s = cfg["synth"]
    dims = parse_dims(s["dims"])
    records, labels = volio.synth_dataset(s["n"], dims, s["groups"], s["effect_size"],
                                          seed=derive_seed(cfg["run"]["seed"], "synth"),
                                          depth=cfg["model"]["depth"])
    volio.save_dataset(records, labels, args.out, prov)
    manifest = reports.read_json(os.path.join(args.out, "manifest.json"))
    manifest["planted_variables"] = volio.planted_variable_names()
    reports.write_json(os.path.join(args.out, "manifest.json"), manifest, prov)
    log.info("wrote %d subjects to %s", len(records), args.out)


def cmd_train(args, cfg, prov):
    records, _ = _load_data(args.data)
    mods = _modalities(cfg, records)
    seed = cfg["run"]["seed"]
    mcfg = _model_config(cfg, records, mods)
    tcfg = _train_config(cfg, derive_seed(seed, "trainer"))
    model = fusenet.FuseModel(mcfg, seed=derive_seed(seed, "fusenet"), dtype=tcfg.dtype)
    model, curve = trainer.train(model, records, tcfg, modalities=mods,
                                 on_epoch=lambda e, loss: log.info("epoch %d loss %.6f", e + 1, loss))
    fusenet.save_checkpoint(model, os.path.join(args.out, "model.fsck"))
    reports.write_csv(os.path.join(args.out, "loss_curve.csv"), ["epoch", "loss"],
                      [(i + 1, v) for i, v in enumerate(curve.epoch)], prov)
    reports.write_json(os.path.join(args.out, "train.json"), {
        "final_loss": curve.epoch[-1], "epochs": len(curve.epoch), "modalities": mods,
        "flagged_windows": trainer.flagged_windows(curve.epoch),
        "protocol": "single model trained on all subjects; used for embeddings and clustering",
        "parameters": fusenet.count_params(model)["total"],
    }, prov)


def cmd_cv(args, cfg, prov):
    records, _ = _load_data(args.data)
    mods = _modalities(cfg, records)
    seed = cfg["run"]["seed"]
    mcfg = _model_config(cfg, records, mods)
    reports_, summary = trainer.cross_validate(
        records, mcfg, _train_config(cfg, derive_seed(seed, "trainer")),
        _cnr_config(cfg, derive_seed(seed, "reconmetrics")), k=cfg["cv"]["k"], seed=derive_seed(seed, "cv"),
        modalities=mods)
    rows = [r for rep in reports_ for r in rep.rows]
    reports.write_csv(os.path.join(args.out, "cv_subjects.csv"), list(reconmetrics.METRIC_COLUMNS), rows, prov)
    cols = ["fold", "n_test"] + [f"{m}_{k}" for m in mods for k in trainer.SUMMARY_METRICS]
    fold_rows = []
    for rep in reports_:
        row = {"fold": rep.fold, "n_test": len(rep.rows) // len(mods)}
        row.update({f"{m}_{k}": rep.medians[m][k] for m in mods for k in trainer.SUMMARY_METRICS})
        fold_rows.append(row)
    reports.write_csv(os.path.join(args.out, "cv_folds.csv"), cols, fold_rows, prov)
    reports.write_json(os.path.join(args.out, "cv_summary.json"), {"k": cfg["cv"]["k"], "summary": summary}, prov)
    groups = {f"{m}:{k}": summary[m][k]["fold_medians"] for m in mods for k in trainer.SUMMARY_METRICS}
    reports.svg_boxplot(os.path.join(args.out, "cv_boxplot.svg"), groups, "fold medians", prov)


def cmd_embed(args, cfg, prov):
    records, _ = _load_data(args.data)
    mods = _modalities(cfg, records)
    model = _load_model(args.model, records, mods)
    emb = trainer.extract_embeddings(model, records, mods)
    cols = ["subject_id"] + [f"e{j}" for j in range(emb.shape[1])]
    reports.write_csv(os.path.join(args.out, "embeddings.csv"), cols,
                      [[r.subject_id] + row.tolist() for r, row in zip(records, emb)], prov)


def cmd_metrics(args, cfg, prov):
    records, _ = _load_data(args.data)
    mods = _modalities(cfg, records)
    model = _load_model(args.model, records, mods)
    ccfg = _cnr_config(cfg, derive_seed(cfg["run"]["seed"], "reconmetrics"))
    rows = []
    for r in records:
        vols = [r.volumes[m].data for m in mods]
        for m, real, rec in zip(mods, vols, model.reconstruct(vols)):
            rows.append(reconmetrics.metric_row(r.subject_id, -1, m, real, rec, ccfg))
    reports.write_csv(os.path.join(args.out, "metrics.csv"), list(reconmetrics.METRIC_COLUMNS), rows, prov)


def cmd_cluster(args, cfg, prov):
    ids, _, emb = _read_matrix(args.embeddings, "embeddings")
    c = cfg["clustering"]
    nd, npref = _grid_sizes(c["grid"])
    try:
        grid = apcluster.grid_search(emb, nd, npref, (c["percentile_lo"], c["percentile_hi"]), c["max_iter"],
                                     c["convergence_window"], threads=cfg["run"]["threads"])
    except apcluster.GridSearchError as exc:
        reports.write_csv(os.path.join(args.out, "grid.csv"), list(exc.table[0]) if exc.table else [],
                          exc.table, prov)
        raise
    best = grid.best
    reports.write_csv(os.path.join(args.out, "labels.csv"), ["subject_id", "cluster"],
                      zip(ids, best.labels.tolist()), prov)
    reports.write_csv(os.path.join(args.out, "grid.csv"), list(grid.table[0]), grid.table, prov)
    reports.write_json(os.path.join(args.out, "cluster.json"), {
        "damping": best.damping, "preference": best.preference, "n_clusters": best.n_clusters,
        "silhouette": best.silhouette, "converged": best.converged, "n_iter": best.n_iter,
        "exemplars": [ids[i] for i in best.exemplars], "cluster_sizes": np.bincount(best.labels).tolist(),
    }, prov)


def _phenotypes(args):
    path = args.phenotypes or (os.path.join(args.data, "phenotypes.csv") if args.data else None)
    _require_file(path, "phenotypes")
    return volio.load_phenotypes(path)


def cmd_factors(args, cfg, prov):
    table = _phenotypes(args)
    fm = factors.fit_factors(table.values, table.variable_names, table.mask)
    names = [f"F{j + 1}" for j in range(fm.k)]
    thr = cfg["factors"]["threshold"]
    reports.write_csv(os.path.join(args.out, "loadings.csv"), ["variable"] + names,
                      [[v] + row.tolist() for v, row in zip(fm.variable_names, fm.loadings)], prov)
    shown = factors.threshold_loadings(fm.loadings, thr)
    reports.write_csv(os.path.join(args.out, "loadings_display.csv"), ["variable"] + names,
                      [[v] + ["" if np.isnan(x) else float(x) for x in row]
                       for v, row in zip(fm.variable_names, shown)], prov)
    with open(os.path.join(args.out, "loadings.txt"), "w", encoding="utf-8") as fh:
        fh.write("".join(f"# {line}\n" for line in prov))
        fh.write(factors.format_loadings(fm.loadings, fm.variable_names, thr) + "\n")
    reports.write_csv(os.path.join(args.out, "scores.csv"), ["subject_id"] + names,
                      [[s] + row.tolist() for s, row in zip(table.subject_ids, fm.scores)], prov)
    reports.write_json(os.path.join(args.out, "factors.json"), {
        "k": fm.k, "eigenvalues": fm.eigenvalues, "explained_variance": fm.explained,
        "rotation": fm.rotation, "criterion_history": fm.criterion, "dropped_variables": table.dropped,
    }, prov)


def _scores_and_labels(args):
    ids, names, scores = _read_matrix(args.scores, "scores")
    return ids, names, scores, _read_labels(args.labels, ids)


def cmd_stats(args, cfg, prov):
    _, names, scores, labels = _scores_and_labels(args)
    s = cfg["stats"]
    rep = stratstats.cluster_factor_stats(scores, labels, names, s["bootstrap_m"],
                                          derive_seed(cfg["run"]["seed"], "stratstats"), s["alpha"],
                                          s["replacement"])
    rows = rep.rows()
    reports.write_csv(os.path.join(args.out, "stats.csv"), list(rows[0]) if rows else ["factor"], rows, prov)
    reports.write_json(os.path.join(args.out, "stats.json"), {
        "factors": rows, "alpha": rep.alpha, "bootstrap_mode": rep.mode, "bootstrap_m": rep.n_boot,
        "cluster_sizes": np.bincount(np.unique(labels, return_inverse=True)[1]).tolist(),
    }, prov)


def cmd_profile(args, cfg, prov):
    _, names, scores, labels = _scores_and_labels(args)
    prof = stratstats.cluster_profiles(scores, labels, names)
    cols = ["factor"] + [f"cluster_{c}" for c in prof.clusters]
    reports.write_csv(os.path.join(args.out, "profile.csv"), cols,
                      [[n] + row.tolist() for n, row in zip(prof.factor_names, prof.log_quantiles)], prov)
    reports.svg_profile(os.path.join(args.out, "profile.svg"), prof, prov)


def cmd_params(args, cfg, prov):
    counts = fusenet.midflow_counts(args.channels if args.channels is not None else 32, args.kernel or 5)
    print(f"mid-flow block, C={counts['channels']}, k={counts['kernel']}")
    print(f"  separable weights: {counts['separable_weights']}")
    print(f"  standard weights:  {counts['standard_weights']}")
    print(f"  ratio (weights):   {float(counts['ratio_weights']):.4f}  = {counts['ratio_weights']}")
    print(f"  ratio (with bias): {float(counts['ratio']):.4f}")
    m = cfg["model"]
    if m["dims"]:
        mcfg = fusenet.ModelConfig(input_dims=parse_dims(m["dims"]), depth=m["depth"],
                                   base_channels=m["channels"], kernel=m["kernel"])
        total = fusenet.count_params(fusenet.FuseModel(mcfg))["total"]
        print(f"full model at {m['dims']}, depth {m['depth']}: {total} parameters, "
              f"embedding length {mcfg.embedding_length}")


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# --------------------------------------------------------------------------
# argument parsing

def build_parser():
    parser = _Parser(prog="fusestrata", description="Multimodal autoencoder embedding and stratification pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument("--config", help="INI-style config file")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--threads", type=int, help="worker thread cap (env FUSESTRATA_THREADS)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    def model_flags(p):
        p.add_argument("--dims", help="volume dims, e.g. 32x32x24")
        p.add_argument("--depth", type=int)
        p.add_argument("--channels", type=int, help="base channel count")
        p.add_argument("--kernel", type=int)
        p.add_argument("--modalities", help="comma-separated modality tags")
        return p

    p = common(sub.add_parser("synth", help="write a synthetic planted-strata dataset"))
    p.add_argument("--n", type=int, help="number of subjects")
    p.add_argument("--dims")
    p.add_argument("--depth", type=int, help="model depth the dims must support")
    p.add_argument("--groups", type=int)
    p.add_argument("--effect-size", type=float, dest="effect_size")

    for name, help_ in (("train", "train one model on all subjects"), ("cv", "k-fold reconstruction metrics")):
        p = model_flags(common(sub.add_parser(name, help=help_)))
        p.add_argument("--data", help="dataset directory")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        if name == "cv":
            p.add_argument("--k", type=int, help="number of folds")

    for name, help_ in (("embed", "fused embeddings from a checkpoint"),
                        ("metrics", "reconstruction metrics from a checkpoint")):
        p = common(sub.add_parser(name, help=help_))
        p.add_argument("--data")
        p.add_argument("--model", help="checkpoint file")
        p.add_argument("--modalities")

    p = common(sub.add_parser("cluster", help="affinity propagation grid search on embeddings"))
    p.add_argument("--embeddings", help="embeddings CSV")
    p.add_argument("--grid", help="DAMPINGxPREFERENCE grid sizes, e.g. 10x50")

    p = common(sub.add_parser("factors", help="PCA + Varimax factors of the phenotypes"))
    p.add_argument("--phenotypes", help="phenotype CSV")
    p.add_argument("--data", help="dataset directory holding phenotypes.csv")

    for name, help_ in (("stats", "cluster-vs-factor KW tests with bootstrap null"),
                        ("profile", "cluster profiles as log10 quantiles")):
        p = common(sub.add_parser(name, help=help_))
        p.add_argument("--scores", help="factor scores CSV")
        p.add_argument("--labels", help="cluster labels CSV")
        if name == "stats":
            p.add_argument("--bootstrap-m", type=int, dest="bootstrap_m")
            p.add_argument("--replacement", action="store_true", help="draw subjects with replacement")

    p = model_flags(common(sub.add_parser("params", help="parameter counts, separable vs standard")))
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        _jit.set_threads(cfg["run"]["threads"])
        prov = [f"command={args.command}"] + reports.provenance_lines(
            {k: v for k, v in cfg.items() if k != "run"}, cfg["run"]["seed"])
        HANDLERS[args.command](args, cfg, prov)
    except ValueError as exc:
        print(f"fusestrata {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - everything else is a runtime failure
        print(f"fusestrata {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
