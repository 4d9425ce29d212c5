"""Affinity propagation, silhouette scoring and the damping x preference grid.

Message updates follow Frey and Dueck with damped responsibilities and
availabilities. Column sums of positive responsibilities run in row order,
so the numba loop, the numpy twin and a plain-Python reference produce the
same bits at 64-bit.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from ._jit import USE_NUMBA, njit


class GridSearchError(RuntimeError):
    def __init__(self, message, table):
        super().__init__(message)
        self.table = table


def similarity_matrix(points, preference=None):
    """Negative squared Euclidean distances; diagonal set to ``preference`` if given."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("points must be an (n, d) matrix")
    s = -cdist(x, x, "sqeuclidean")
    if preference is not None:
        np.fill_diagonal(s, preference)
    return s


# --------------------------------------------------------------------------
# one message-passing iteration

@njit()
def _ap_step_nb(s, r, a, damping):
    n = s.shape[0]
    keep = 1.0 - damping
    for i in range(n):
        best = -np.inf
        second = -np.inf
        arg = 0
        for k in range(n):
            v = a[i, k] + s[i, k]
            if v > best:
                second = best
                best = v
                arg = k
            elif v > second:
                second = v
        for k in range(n):
            new = s[i, k] - (second if k == arg else best)
            r[i, k] = damping * r[i, k] + keep * new
    for k in range(n):
        col = 0.0
        for i in range(n):
            v = r[i, k]
            col += v if (i == k or v > 0.0) else 0.0
        for i in range(n):
            if i == k:
                new = col - r[k, k]
            else:
                v = r[i, k]
                new = col - (v if v > 0.0 else 0.0)
                if new > 0.0:
                    new = 0.0
            a[i, k] = damping * a[i, k] + keep * new


def _ap_step_np(s, r, a, damping):
    n = s.shape[0]
    rows = np.arange(n)
    keep = 1.0 - damping
    av = a + s
    arg = np.argmax(av, axis=1)
    best = av[rows, arg]
    av[rows, arg] = -np.inf
    second = av.max(axis=1)
    new = s - best[:, None]
    new[rows, arg] = s[rows, arg] - second
    r *= damping
    r += keep * new

    rp = np.maximum(r, 0.0)
    rp[rows, rows] = r[rows, rows]
    col = np.cumsum(rp, axis=0)[-1]
    new = np.minimum(col[None, :] - rp, 0.0)
    new[rows, rows] = col - rp[rows, rows]
    a *= damping
    a += keep * new


@njit()
def _ap_run_nb(s, damping, max_iter, window, r, a):
    n = s.shape[0]
    prev = np.zeros(n, dtype=np.bool_)
    cur = np.zeros(n, dtype=np.bool_)
    stable = 0
    for it in range(max_iter):
        _ap_step_nb(s, r, a, damping)
        k = 0
        same = True
        for i in range(n):
            cur[i] = r[i, i] + a[i, i] > 0.0
            if cur[i]:
                k += 1
            if cur[i] != prev[i]:
                same = False
        stable = stable + 1 if (same and it > 0) else 1
        prev[:] = cur
        if k > 0 and stable >= window:
            return it + 1, True
    return max_iter, False


def _ap_run_np(s, damping, max_iter, window, r, a):
    prev = None
    stable = 0
    for it in range(max_iter):
        _ap_step_np(s, r, a, damping)
        cur = (np.diag(r) + np.diag(a)) > 0
        stable = stable + 1 if (prev is not None and np.array_equal(cur, prev)) else 1
        prev = cur
        if cur.any() and stable >= window:
            return it + 1, True
    return max_iter, False


ap_step = _ap_step_nb if USE_NUMBA else _ap_step_np
_ap_run = _ap_run_nb if USE_NUMBA else _ap_run_np


def message_trajectory(s, damping, n_iter, impl=None):
    """(R, A) copies after each of ``n_iter`` iterations, starting from zeros."""
    step = {"numba": _ap_step_nb, "numpy": _ap_step_np, None: ap_step}[impl]
    s = np.ascontiguousarray(s, dtype=np.float64)
    r = np.zeros_like(s)
    a = np.zeros_like(s)
    out = []
    for _ in range(n_iter):
        step(s, r, a, damping)
        out.append((r.copy(), a.copy()))
    return out


# --------------------------------------------------------------------------
# clustering

@dataclass
class ClusterResult:
    exemplars: np.ndarray   # exemplar point index per cluster
    labels: np.ndarray      # cluster id per point, 0..K-1 in exemplar index order
    damping: float
    preference: float
    n_iter: int
    converged: bool
    silhouette: float = None

    @property
    def n_clusters(self):
        return len(self.exemplars)

    @property
    def exemplar_of(self):
        return self.exemplars[self.labels]


def _assign(s, exemplars):
    labels = np.argmax(s[:, exemplars], axis=1)
    labels[exemplars] = np.arange(len(exemplars))
    return labels


def affinity_propagation(s, preference, damping=0.5, max_iter=1000, convergence_window=50):
    """Cluster from a similarity matrix; its diagonal is replaced by ``preference``."""
    s = np.array(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError("similarity matrix must be square")
    if not 0.5 <= damping < 1:
        raise ValueError(f"damping must lie in [0.5, 1), got {damping}")
    n = s.shape[0]
    np.fill_diagonal(s, preference)
    off = s[~np.eye(n, dtype=bool)]
    if n == 1 or np.all(off == off[0]) and off[0] == 0:
        # identical points: nothing to separate
        return ClusterResult(np.array([0]), np.zeros(n, dtype=np.int64), damping, preference, 0, True)
    r = np.zeros_like(s)
    a = np.zeros_like(s)
    n_iter, converged = _ap_run(s, float(damping), int(max_iter), int(convergence_window), r, a)
    crit = np.diag(r) + np.diag(a)
    exemplars = np.flatnonzero(crit > 0)
    if len(exemplars) == 0:
        exemplars = np.array([int(np.argmax(crit))])
        converged = False
    return ClusterResult(exemplars, _assign(s, exemplars), damping, preference, n_iter, converged)


def silhouette_samples(points, labels):
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    ids, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(ids) < 2:
        raise ValueError("silhouette undefined for fewer than 2 clusters")
    d = cdist(x, x)
    # per point: summed distance to every cluster
    sums = np.zeros((len(x), len(ids)))
    np.add.at(sums.T, inv, d)
    rows = np.arange(len(x))
    own = counts[inv]
    a = np.where(own > 1, sums[rows, inv] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / counts[None, :]
    mean_other[rows, inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own > 1, s, 0.0)


def silhouette(points, labels):
    """Mean silhouette over points; singleton clusters contribute 0."""
    return float(np.mean(silhouette_samples(points, labels)))


# --------------------------------------------------------------------------
# grid search

def damping_grid(n_damping=10):
    """``n_damping`` equal steps over [0.5, 1), right end excluded."""
    return 0.5 + 0.5 * np.arange(n_damping) / n_damping


def preference_grid(s, n_pref=50, percentiles=(1.0, 99.0)):
    off = s[~np.eye(s.shape[0], dtype=bool)]
    lo, hi = np.percentile(off, percentiles)
    return np.linspace(lo, hi, n_pref)


@dataclass
class GridResult:
    best: ClusterResult
    table: list = field(default_factory=list)


def grid_search(points, n_damping=10, n_pref=50, percentiles=(1.0, 99.0), max_iter=1000,
                convergence_window=50, threads=1):
    """Run AP over the damping x preference grid and keep the best silhouette.

    Cells with K < 2 or without convergence are skipped. Ties go to the
    smaller damping, then the smaller preference.
    """
    x = np.asarray(points, dtype=np.float64)
    if len(x) < 3:
        raise ValueError("grid search needs at least 3 points")
    s = similarity_matrix(x)
    dampings = damping_grid(n_damping)
    prefs = preference_grid(s, n_pref, percentiles)
    cells = [(float(d), float(p)) for d in dampings for p in prefs]

    def run(cell):
        res = affinity_propagation(s, cell[1], cell[0], max_iter, convergence_window)
        if res.converged and res.n_clusters >= 2:
            res.silhouette = silhouette(x, res.labels)
        return res

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]

    table, best = [], None
    for res in results:
        table.append({"damping": res.damping, "preference": res.preference, "n_clusters": res.n_clusters,
                      "converged": res.converged, "n_iter": res.n_iter, "silhouette": res.silhouette})
        if res.silhouette is not None and (best is None or res.silhouette > best.silhouette):
            best = res
    if best is None:
        raise GridSearchError("no grid cell converged with at least 2 clusters", table)
    return GridResult(best, table)
