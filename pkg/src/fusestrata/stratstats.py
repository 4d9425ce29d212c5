"""Cluster-vs-factor statistics: Kruskal-Wallis, BH-FDR, bootstrap repartition null, profiles."""
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from ._jit import USE_NUMBA, njit, prange
from .seeds import derive_seed


def midranks(values):
    """1-based ranks with ties sharing their average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    sv = v[order]
    ranks = np.empty(len(v))
    start = 0
    while start < len(v):
        stop = start + 1
        while stop < len(v) and sv[stop] == sv[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + 1 + stop)
        start = stop
    return ranks


def tie_correction(values):
    """1 - sum(t^3 - t) / (N^3 - N) over tie groups."""
    _, t = np.unique(np.asarray(values, dtype=np.float64), return_counts=True)
    n = t.sum()
    if n < 2:
        return 1.0
    return 1.0 - float(np.sum(t.astype(np.float64) ** 3 - t)) / (float(n) ** 3 - n)


def _encode(groups):
    ids, inv = np.unique(np.asarray(groups), return_inverse=True)
    return ids, inv


def _h_from_ranks(ranks, inv, n_groups):
    n = len(ranks)
    sums = np.bincount(inv, weights=ranks, minlength=n_groups)
    sizes = np.bincount(inv, minlength=n_groups)
    return 12.0 / (n * (n + 1)) * float(np.sum(sums ** 2 / sizes)) - 3.0 * (n + 1)


def kruskal_wallis(values, groups):
    """Tie-corrected H, degrees of freedom and chi-square upper-tail p."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) != len(groups):
        raise ValueError("values and groups differ in length")
    ids, inv = _encode(groups)
    if len(ids) < 2:
        raise ValueError("Kruskal-Wallis needs at least 2 groups")
    df = len(ids) - 1
    corr = tie_correction(v)
    if corr == 0:
        return 0.0, df, 1.0
    h = _h_from_ranks(midranks(v), inv, len(ids)) / corr
    h = max(h, 0.0)
    return h, df, float(chi2.sf(h, df))


def bh_fdr(pvals, alpha=0.05):
    """Benjamini-Hochberg step-up. Returns (q values, reject flags)."""
    p = np.asarray(pvals, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    if m == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    q = np.empty(m)
    q[order] = q_sorted
    passing = np.flatnonzero(p[order] <= np.arange(1, m + 1) * alpha / m)
    reject = np.zeros(m, dtype=bool)
    if len(passing):
        reject = p <= p[order][passing[-1]]
    return q, reject


# --------------------------------------------------------------------------
# bootstrap null

@njit(parallel=True)
def _repartition_h_nb(ranks, perms, bounds, out):
    n_fac, n = ranks.shape
    n_rep = perms.shape[0]
    n_groups = len(bounds) - 1
    scale = 12.0 / (n * (n + 1.0))
    for m in prange(n_rep):
        for f in range(n_fac):
            h = 0.0
            for g in range(n_groups):
                s = 0.0
                for j in range(bounds[g], bounds[g + 1]):
                    s += ranks[f, perms[m, j]]
                h += s * s / (bounds[g + 1] - bounds[g])
            out[f, m] = scale * h - 3.0 * (n + 1.0)


def _repartition_h_np(ranks, perms, bounds, out):
    n = ranks.shape[1]
    gathered = ranks[:, perms]                      # factors x reps x n
    sums = np.add.reduceat(gathered, bounds[:-1], axis=2)
    sizes = np.diff(bounds).astype(np.float64)
    out[...] = 12.0 / (n * (n + 1.0)) * (sums ** 2 / sizes).sum(axis=2) - 3.0 * (n + 1.0)


repartition_h = _repartition_h_nb if USE_NUMBA else _repartition_h_np


def replicate_draws(seed, n, n_reps, replacement=False):
    """Subject draws per replicate, one derived RNG stream per replicate."""
    out = np.empty((n_reps, n), dtype=np.int64)
    for m in range(n_reps):
        rng = np.random.default_rng(derive_seed(seed, "bootstrap", m))
        out[m] = rng.integers(0, n, size=n) if replacement else rng.permutation(n)
    return out


@dataclass
class BootstrapResult:
    h_true: np.ndarray
    p_surrogate: np.ndarray
    p_smoothed: np.ndarray
    degenerate: np.ndarray
    null: np.ndarray            # factors x M
    mode: str
    sizes: np.ndarray


def bootstrap_kw(values, labels, n_boot=10000, seed=0, replacement=False, impl=None):
    """Surrogate KW p-values under random repartition into the true cluster sizes.

    ``values`` is (n,) or (n, factors). Default mode draws a permutation
    (each subject used once); ``replacement=True`` draws subjects with
    replacement and re-ranks each replicate.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, n_fac = x.shape
    if n_boot < 100:
        warnings.warn(f"only {n_boot} bootstrap replicates; surrogate p-values will be coarse", stacklevel=2)
    ids, inv = _encode(labels)
    if len(ids) < 2:
        raise ValueError("need at least 2 clusters")
    sizes = np.bincount(inv)
    bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    h_true = np.array([kruskal_wallis(x[:, f], inv)[0] for f in range(n_fac)])
    corr = np.array([tie_correction(x[:, f]) for f in range(n_fac)])
    degenerate = corr == 0
    draws = replicate_draws(seed, n, n_boot, replacement)
    null = np.zeros((n_fac, n_boot))
    live = np.flatnonzero(~degenerate)
    if replacement:
        group_of = np.repeat(np.arange(len(ids)), sizes)
        for f in live:
            for m in range(n_boot):
                null[f, m] = kruskal_wallis(x[draws[m], f], group_of)[0]
    elif len(live):
        ranks = np.ascontiguousarray(np.vstack([midranks(x[:, f]) for f in live]))
        raw = np.empty((len(live), n_boot))
        fn = {"numba": _repartition_h_nb, "numpy": _repartition_h_np, None: repartition_h}[impl]
        fn(ranks, draws, bounds, raw)
        null[live] = np.maximum(raw / corr[live, None], 0.0)
    exceed = (null > h_true[:, None]).sum(axis=1)
    p = exceed / n_boot
    p[degenerate] = 0.0
    smoothed = (exceed + 1) / (n_boot + 1)
    return BootstrapResult(h_true, p, smoothed, degenerate, null,
                           "replacement" if replacement else "permutation", sizes)


@dataclass
class StatReport:
    factor_names: list
    h: np.ndarray
    df: int
    p: np.ndarray
    q: np.ndarray
    p_surrogate: np.ndarray
    p_smoothed: np.ndarray
    q_surrogate: np.ndarray
    degenerate: np.ndarray
    alpha: float
    mode: str
    n_boot: int
    seed: int
    significant: np.ndarray = field(default=None)
    significant_surrogate: np.ndarray = field(default=None)

    def rows(self):
        out = []
        for i, name in enumerate(self.factor_names):
            out.append({
                "factor": name, "H": float(self.h[i]), "df": int(self.df), "p": float(self.p[i]),
                "q": float(self.q[i]), "p_surrogate": float(self.p_surrogate[i]),
                "p_surrogate_smoothed": float(self.p_smoothed[i]), "q_surrogate": float(self.q_surrogate[i]),
                "significant": bool(self.significant[i]),
                "significant_surrogate": bool(self.significant_surrogate[i]),
                "degenerate": bool(self.degenerate[i]),
            })
        return out


def cluster_factor_stats(scores, labels, factor_names=None, n_boot=10000, seed=0, alpha=0.05,
                         replacement=False):
    """KW per factor, BH across factors, for both asymptotic and surrogate p-values."""
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    names = list(factor_names) if factor_names is not None else [f"F{j + 1}" for j in range(x.shape[1])]
    kw = [kruskal_wallis(x[:, f], labels) for f in range(x.shape[1])]
    h = np.array([r[0] for r in kw])
    p = np.array([r[2] for r in kw])
    q, rej = bh_fdr(p, alpha)
    boot = bootstrap_kw(x, labels, n_boot, seed, replacement)
    qs, rejs = bh_fdr(boot.p_surrogate, alpha)
    return StatReport(names, h, kw[0][1], p, q, boot.p_surrogate, boot.p_smoothed, qs, boot.degenerate,
                      alpha, boot.mode, n_boot, seed, rej, rejs)


# --------------------------------------------------------------------------
# profiles

def midpoint_quantile(population, value):
    """(#{x < v} + #{x <= v}) / 2n."""
    pop = np.asarray(population, dtype=np.float64)
    below = np.sum(pop < value)
    at_or_below = np.sum(pop <= value)
    return (below + at_or_below) / (2.0 * len(pop))


@dataclass
class ProfileMatrix:
    factor_names: list
    clusters: list
    medians: np.ndarray     # factors x clusters
    quantiles: np.ndarray
    log_quantiles: np.ndarray


def cluster_profiles(scores, labels, factor_names=None):
    """log10 population quantile of each cluster's median score, factors x clusters."""
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise ValueError("labels and scores differ in length")
    clusters = list(np.unique(labels))
    if not clusters:
        raise ValueError("need at least one cluster")
    names = list(factor_names) if factor_names is not None else [f"F{j + 1}" for j in range(x.shape[1])]
    med = np.empty((x.shape[1], len(clusters)))
    qs = np.empty_like(med)
    for c, cl in enumerate(clusters):
        members = labels == cl
        if not members.any():
            raise ValueError(f"cluster {cl} is empty")
        for f in range(x.shape[1]):
            med[f, c] = np.median(x[members, f])
            qs[f, c] = midpoint_quantile(x[:, f], med[f, c])
    with np.errstate(divide="ignore"):
        logs = np.log10(qs)
    return ProfileMatrix(names, [c.item() if hasattr(c, "item") else c for c in clusters], med, qs, logs)
