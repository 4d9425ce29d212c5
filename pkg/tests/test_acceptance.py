"""Acceptance gate: one verdict line per criterion, printed in the terminal summary."""
import functools
import math
import os
import time
from fractions import Fraction

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from _apref import ap_reference
from _gate import record
from _gradcases import CASES, worst_error
from _oracles import brute_h, brute_silhouette, maxpool_oracle
from fusestrata import kernels as K
from fusestrata import fusenet, reports
from fusestrata.apcluster import grid_search, message_trajectory, silhouette, similarity_matrix
from fusestrata.cli import main
from fusestrata.factors import pca_retain, varimax, varimax_criterion
from fusestrata.fusenet import FuseModel, MidFlow, ModelConfig
from fusestrata.reconmetrics import cnr_median, cnr_normdiff, normdiff_median
from fusestrata.seeds import derive_seed
from fusestrata.stratstats import bh_fdr, bootstrap_kw, kruskal_wallis
from fusestrata.trainer import IdentityModel, TrainConfig, cross_validate, train
from fusestrata.volio import synth_dataset

MASTER_SEED = 0
DESK = ModelConfig(input_dims=(32, 32, 24), depth=3, base_channels=2, kernel=5)


def _bytes_of(directory):
    out = {}
    for root, _, files in os.walk(directory):
        for name in sorted(files):
            path = os.path.join(root, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, directory)] = fh.read()
    return out


# --------------------------------------------------------------------------

def test_c01_gradient_suite():
    start = time.perf_counter()
    worst = {name: worst_error(name, 20) for name in CASES}
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and elapsed < 120
    record(1, "gradient suite", ok, f"{len(CASES)} operators/blocks x 20 instances, worst rel err "
                                    f"{worst[top]:.2e} ({top}), {elapsed:.0f} s")
    assert ok


def test_c02_shape_contract():
    cfg = ModelConfig()
    model = FuseModel(cfg, seed=MASTER_SEED)
    rng = np.random.default_rng(0)
    vols = [rng.random(cfg.input_dims).astype(np.float32) for _ in range(cfg.n_modalities)]
    enc = model.encode(vols)
    bottlenecks = [tuple(b.shape) for b in enc.bottlenecks]
    recs, emb = model.forward(vols)
    ok = (all(b == (32, 4, 4, 3) for b in bottlenecks) and emb.shape == (1536,)
          and all(r.shape[1:] == v.shape for r, v in zip(recs, vols)))
    record(2, "architecture shapes", ok, f"bottlenecks {bottlenecks} (channels first), embedding {emb.shape[0]}, "
                                         f"reconstructions {[r.shape[1:] for r in recs]}")
    assert ok


def test_c03_parameter_ratio():
    start = time.perf_counter()
    ratios = {}
    for c in (8, 24, 32, 64):
        counts = []
        for separable in (True, False):
            block = MidFlow(c, 5, np.random.default_rng(0), separable=separable)
            counts.append(sum(p.data.size for name, p in block.named_parameters()
                              if name.rsplit(".", 1)[-1] in ("dw", "pw", "w")))
        ratios[c] = Fraction(counts[1], counts[0])
    elapsed = time.perf_counter() - start
    exact = all(r == Fraction(125 * c, 125 + c) for c, r in ratios.items())
    ok = exact and round(float(ratios[32]), 1) == 25.5 and round(float(ratios[24]), 1) == 20.1 and elapsed < 1
    record(3, "separable parameter ratio", ok, f"C=32 -> {ratios[32]} = {float(ratios[32]):.3f}, "
                                               f"C=24 -> {ratios[24]} = {float(ratios[24]):.3f}, "
                                               f"exact 125C/(125+C) for C in {sorted(ratios)}, {elapsed:.2f} s")
    assert ok


# --------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def overfit_run(tag, tmp_root):
    records, _ = synth_dataset(1, DESK.input_dims, 1, 0.0, seed=derive_seed(MASTER_SEED, "overfit"))
    # memorisation check, so regularisation is off
    cfg = ModelConfig(input_dims=DESK.input_dims, depth=DESK.depth, base_channels=DESK.base_channels,
                      kernel=DESK.kernel, dropout_rate=0.0)
    model = FuseModel(cfg, seed=derive_seed(MASTER_SEED, "fusenet"))
    start = time.perf_counter()
    model, curve = train(model, records, TrainConfig(epochs=500, learning_rate=1e-3,
                                                     seed=derive_seed(MASTER_SEED, "trainer")))
    elapsed = time.perf_counter() - start
    vols = [records[0].volumes[m].data for m in records[0].volumes]
    mses = [float(np.mean((r - v) ** 2)) for r, v in zip(model.reconstruct(vols), vols)]
    out = os.path.join(tmp_root, f"overfit_{tag}")
    fusenet.save_checkpoint(model, os.path.join(out, "model.fsck"))
    reports.write_csv(os.path.join(out, "loss.csv"), ["step", "loss"], list(enumerate(curve.step)))
    return mses, elapsed, _bytes_of(out)


@pytest.fixture(scope="session")
def gate_dir(tmp_path_factory):
    return str(tmp_path_factory.mktemp("gate"))


def test_c04_overfit_single_subject(gate_dir):
    mses, elapsed, _ = overfit_run("a", gate_dir)
    ok = max(mses) < 0.01 and elapsed < 900
    record(4, "overfit one subject", ok, f"500 Adam steps (lr 1e-3, no dropout), per-modality MSE "
                                         f"{', '.join(f'{m:.5f}' for m in mses)}, {elapsed:.0f} s")
    assert ok


def test_c05_cross_validation_harness():
    records, _ = synth_dataset(40, DESK.input_dims, 3, 2.0, seed=derive_seed(MASTER_SEED, "cv-data"))
    start = time.perf_counter()
    reports_, summary = cross_validate(records, DESK, TrainConfig(epochs=1, learning_rate=1e-3), k=10,
                                       seed=derive_seed(MASTER_SEED, "cv"))
    elapsed = time.perf_counter() - start
    stub_reports, stub = cross_validate(records, k=10, seed=0, fit=lambda tr, fold: IdentityModel())
    metrics = ("mse", "normdiff", "cnr_normdiff")
    structure = (len(reports_) == 10 and all(len(r.medians[m]) == 3 for r in reports_ for m in r.medians)
                 and all(np.isfinite(summary[m][k][s]) for m in summary for k in metrics for s in ("median", "mad")))
    zero = all(stub[m][k]["median"] == 0 and stub[m][k]["mad"] == 0 for m in stub for k in metrics)
    zero = zero and all(r["mse"] == 0 and r["normdiff"] == 0 and r["cnr_normdiff"] == 0
                        for rep in stub_reports for r in rep.rows)
    m1 = summary["m1"]
    ok = structure and zero
    record(5, "10-fold CV harness", ok, f"10 folds x 4 held out, m1 median MSE {m1['mse']['median']:.4f} "
                                        f"(MAD {m1['mse']['mad']:.4f}), NormDiff {m1['normdiff']['median']:.3f}, "
                                        f"CNR-NormDiff {m1['cnr_normdiff']['median']:.3f}; identity stub 0/0/0: "
                                        f"{zero}; {elapsed:.0f} s")
    assert ok


def _two_roi(first, second):
    v = np.empty((8, 4, 3))
    v[:4] = np.resize(first, (4, 4, 3))
    v[4:] = np.resize(second, (4, 4, 3))
    return v


def test_c06_metric_oracles():
    errs = {}
    errs["normdiff"] = abs(normdiff_median(np.full((4, 4, 3), 2.0), np.full((4, 4, 3), 3.0)) - 0.2)
    errs["cnr"] = abs(cnr_median(_two_roi(3.0, 1.0)) - 2.0)
    r3 = math.sqrt(3.0)
    errs["cnr_normdiff"] = abs(cnr_normdiff(_two_roi(3.0, 1.0), _two_roi([5 + r3, 5 - r3], [3 + r3, 3 - r3]))[2]
                               + 1 / 3)
    rng = np.random.default_rng(derive_seed(MASTER_SEED, "oracles"))
    pool = 0.0
    for _ in range(200):
        x = rng.standard_normal((2,) + tuple(int(d) for d in rng.integers(1, 9, 3)))
        pool = max(pool, float(np.max(np.abs(K.maxpool3d_forward(x, 3, 2)[0] - maxpool_oracle(x)))))
    sil = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 51))
        pts = rng.standard_normal((n, 3))
        labels = rng.integers(0, int(rng.integers(2, 6)), n)
        labels[:2] = [0, 1]
        sil = max(sil, abs(silhouette(pts, labels) - brute_silhouette(pts.tolist(), labels.tolist())))
    kw = 0.0
    for _ in range(1000):
        n = int(rng.integers(4, 13))
        k = int(rng.integers(2, 4))
        groups = list(range(k)) + rng.integers(0, k, n - k).tolist()
        values = rng.integers(0, 6, n).astype(float)
        kw = max(kw, abs(kruskal_wallis(values, groups)[0] - brute_h(values.tolist(), groups)))
    ok = max(errs.values()) <= 1e-12 and pool <= 1e-10 and sil <= 1e-10 and kw <= 1e-10
    record(6, "metric oracles", ok, f"hand values max err {max(errs.values()):.1e}; maxpool {pool:.1e} (200), "
                                    f"silhouette {sil:.1e} (200, n<=50), KW {kw:.1e} (1000, n<=12)")
    assert ok


# --------------------------------------------------------------------------

def planted_blobs(seed, per=20, dims=5, gap=5.0):
    rng = np.random.default_rng(seed)
    centres = gap * np.eye(dims)[:3]
    pts = np.vstack([c + rng.standard_normal((per, dims)) for c in centres])
    return pts, np.repeat(np.arange(3), per)


@functools.lru_cache(maxsize=None)
def ap_run(tag, tmp_root):
    rng = np.random.default_rng(derive_seed(MASTER_SEED, "ap-reference"))
    mismatches = 0
    for _ in range(10):
        n = int(rng.integers(5, 31))
        s = similarity_matrix(rng.standard_normal((n, 4)))
        np.fill_diagonal(s, np.median(s))
        damping = float(rng.choice([0.5, 0.6, 0.75, 0.9]))
        ref = ap_reference(s.tolist(), damping, 60)
        for impl in ("numba", "numpy"):
            for (r_ref, a_ref), (r, a) in zip(ref, message_trajectory(s, damping, 60, impl=impl)):
                mismatches += r.tobytes() != np.array(r_ref).tobytes() or a.tobytes() != np.array(a_ref).tobytes()
    out = os.path.join(tmp_root, f"ap_{tag}")
    found = []
    for seed in range(10):
        pts, truth = planted_blobs(derive_seed(MASTER_SEED, "blobs", seed))
        res = grid_search(pts)
        found.append((res.best.n_clusters, adjusted_rand_score(truth, res.best.labels)))
        reports.write_csv(os.path.join(out, f"grid_{seed}.csv"), list(res.table[0]), res.table)
        reports.write_csv(os.path.join(out, f"labels_{seed}.csv"), ["cluster"], [[v] for v in res.best.labels])
    return mismatches, found, _bytes_of(out)


def test_c07_affinity_propagation(gate_dir):
    mismatches, found, _ = ap_run("a", gate_dir)
    ok = mismatches == 0 and all(k == 3 and ari >= 0.9 for k, ari in found)
    record(7, "affinity propagation", ok, f"reference trajectories: {mismatches} mismatching iterations over 10 "
                                          f"instances x 60 iterations x 2 backends; 3-blob grid search K="
                                          f"{[k for k, _ in found]}, min ARI {min(a for _, a in found):.3f}")
    assert ok


def test_c08_factor_pipeline():
    rng = np.random.default_rng(derive_seed(MASTER_SEED, "varimax"))
    monotone = True
    for _ in range(200):
        lam = rng.standard_normal((int(rng.integers(3, 15)), int(rng.integers(2, 5))))
        monotone &= bool(np.all(np.diff(varimax(lam).criterion) >= 0))
    truth = np.zeros((10, 2))
    truth[:5, 0] = 0.8
    truth[5:, 1] = 0.7
    truth += 0.05 * rng.standard_normal(truth.shape)
    theta = np.radians(30.0)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    mixed = truth @ rot
    norm = mixed / np.sqrt((mixed ** 2).sum(axis=1, keepdims=True))
    angles = np.radians(np.arange(-45.0, 45.0 + 1e-9, 0.01))
    grid_best = max(varimax_criterion(norm @ np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]))
                    for t in angles)
    got = varimax(mixed).criterion[-1]
    vals, _, k = pca_retain(corr=np.ones((6, 6)))
    ok = monotone and abs(got - grid_best) <= 1e-6 and k == 1 and abs(vals[0] - 6) < 1e-12
    record(8, "factor pipeline", ok, f"criterion non-decreasing over 200 random rotations: {monotone}; planted "
                                     f"structure criterion {got:.9f} vs 0.01-degree grid {grid_best:.9f} "
                                     f"(diff {got - grid_best:.1e}); rank-1 correlation -> k={k}, "
                                     f"eigenvalue {vals[0]:.6f}")
    assert ok


def test_c09_statistics():
    h = kruskal_wallis([1, 2, 3, 4, 5, 6], [0, 0, 0, 1, 1, 1])[0]
    q, rej = bh_fdr([0.01, 0.02, 0.03, 0.5], alpha=0.05)
    rng = np.random.default_rng(derive_seed(MASTER_SEED, "calibration"))
    null = rng.standard_normal((60, 200))
    labels = np.repeat([0, 1, 2], 20)
    boot = bootstrap_kw(null, labels, n_boot=1000, seed=derive_seed(MASTER_SEED, "stratstats"))
    frac = float(np.mean(boot.p_surrogate < 0.05))
    h_ok = abs(h - 3.857142857142857) <= 1e-6
    bh_ok = int(rej.sum()) == 3 and np.allclose(q, [0.04, 0.04, 0.04, 0.5], atol=1e-12)
    cal_ok = 0.03 <= frac <= 0.07
    ok = h_ok and bh_ok and cal_ok
    record(9, "statistics", ok, f"KW H={h:.7f}; BH rejections {int(rej.sum())}, q={np.round(q, 6).tolist()}; "
                                f"null calibration {frac:.3f} of 200 factors with surrogate p<0.05 "
                                f"(target [0.03, 0.07])")
    assert ok


# --------------------------------------------------------------------------

def _cli(*argv):
    code = main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"fusestrata {argv[0]} exited with {code}")


@functools.lru_cache(maxsize=None)
def pipeline_run(tag, tmp_root):
    root = os.path.join(tmp_root, f"pipeline_{tag}")
    data, out = os.path.join(root, "data"), os.path.join(root, "out")
    seed = ("--seed", MASTER_SEED)
    start = time.perf_counter()
    _cli("synth", "--n", 60, "--dims", "32x32x24", "--groups", 3, "--effect-size", 2.0, *seed, "--out", data)
    _cli("train", "--data", data, "--epochs", 10, "--lr", 1e-3, *seed, "--out", out)
    _cli("embed", "--data", data, "--model", os.path.join(out, "model.fsck"), *seed, "--out", out)
    _cli("cluster", "--embeddings", os.path.join(out, "embeddings.csv"), "--grid", "10x50", *seed, "--out", out)
    _cli("factors", "--data", data, *seed, "--out", out)
    scores, labels = os.path.join(out, "scores.csv"), os.path.join(out, "labels.csv")
    _cli("stats", "--scores", scores, "--labels", labels, "--bootstrap-m", 10000, *seed, "--out", out)
    _cli("profile", "--scores", scores, "--labels", labels, *seed, "--out", out)
    elapsed = time.perf_counter() - start
    return root, elapsed, _bytes_of(root)


def test_c10_end_to_end(gate_dir):
    root, elapsed, _ = pipeline_run("a", gate_dir)
    data, out = os.path.join(root, "data"), os.path.join(root, "out")
    planted = reports.read_json(os.path.join(data, "manifest.json"))["planted_variables"]
    cols, rows = reports.read_csv(os.path.join(out, "loadings.csv"))
    factor_names = cols[1:]
    loads = {r[0]: [float(v) for v in r[1:]] for r in rows}
    # the planted factor carries the largest mean |loading| over the planted variables
    weight = [np.mean([abs(loads[v][j]) for v in planted]) for j in range(len(factor_names))]
    target = factor_names[int(np.argmax(weight))]
    stats = {r["factor"]: r for r in reports.read_json(os.path.join(out, "stats.json"))["factors"]}
    significant = [f for f, r in stats.items() if r["q_surrogate"] < 0.05]
    cols, rows = reports.read_csv(os.path.join(out, "profile.csv"))
    profile = {r[0]: [float(v) for v in r[1:]] for r in rows}
    gap = max(profile[target]) - min(profile[target])
    _, truth = reports.read_csv(os.path.join(data, "groups.csv"))
    _, found = reports.read_csv(os.path.join(out, "labels.csv"))
    ari = adjusted_rand_score([r[1] for r in truth], [r[1] for r in found])
    k = reports.read_json(os.path.join(out, "cluster.json"))["n_clusters"]
    ok = target in significant and gap > 0.3 and elapsed < 1800
    record(10, "end-to-end pipeline", ok, f"K={k} (ARI vs planted groups {ari:.3f}); planted factor {target} "
                                          f"surrogate q={stats[target]['q_surrogate']:.4f}; significant factors "
                                          f"{significant}; profile gap {gap:.3f}; {elapsed:.0f} s")
    assert ok


def test_c11_determinism(gate_dir):
    checks = {
        "overfit": (overfit_run("a", gate_dir)[2], overfit_run("b", gate_dir)[2]),
        "ap": (ap_run("a", gate_dir)[2], ap_run("b", gate_dir)[2]),
        "pipeline": (pipeline_run("a", gate_dir)[2], pipeline_run("b", gate_dir)[2]),
    }
    verdicts = {name: bool(a) and a == b for name, (a, b) in checks.items()}
    files = sum(len(a) for a, _ in checks.values())
    ok = all(verdicts.values())
    record(11, "determinism", ok, f"repeat runs byte-identical: {verdicts} ({files} files compared)")
    assert ok
