"""Phenotype factor analysis: correlation PCA, Kaiser retention, Varimax, regression scores."""
from dataclasses import dataclass, field

import numpy as np


class FactorError(ValueError):
    pass


def standardize(values, mask=None):
    """Column z-scores (ddof=1) after mean-imputing masked cells."""
    x = np.array(values, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected an (n, p) matrix")
    miss = np.zeros(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    miss = miss | np.isnan(x)
    for j in range(x.shape[1]):
        seen = ~miss[:, j]
        if not seen.any():
            raise FactorError(f"column {j} has no observed values")
        x[~seen, j] = x[seen, j].mean()
    if x.shape[0] < 2:
        raise FactorError("need at least 2 rows to standardize")
    sd = x.std(axis=0, ddof=1)
    bad = np.flatnonzero(sd == 0)
    if len(bad):
        raise FactorError(f"zero-variance column(s): {bad.tolist()}")
    return (x - x.mean(axis=0)) / sd


def correlation(z):
    z = np.asarray(z, dtype=np.float64)
    c = z.T @ z / (z.shape[0] - 1)
    d = np.sqrt(np.diag(c))
    c = c / np.outer(d, d)
    return (c + c.T) / 2


def _fix_eigvec_signs(vecs, tol=1e-12):
    # first component with |v| > tol made positive
    for j in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, j]) > tol)
        if len(nz) and vecs[nz[0], j] < 0:
            vecs[:, j] = -vecs[:, j]
    return vecs


def pca_retain(z=None, corr=None):
    """Eigen-decompose the correlation matrix and keep eigenvalues > 1.

    Returns (eigenvalues descending, unrotated loadings p x k, k).
    """
    c = correlation(z) if corr is None else np.asarray(corr, dtype=np.float64)
    vals, vecs = np.linalg.eigh(c)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], _fix_eigvec_signs(vecs[:, order].copy())
    k = int(np.sum(vals > 1.0))
    if k == 0:
        raise FactorError("no factor passes Kaiser criterion (no eigenvalue > 1)")
    loadings = vecs[:, :k] * np.sqrt(np.maximum(vals[:k], 0.0))
    return vals, loadings, k


def varimax_criterion(loadings):
    """Sum over factors of the variance of squared loadings."""
    l2 = np.asarray(loadings) ** 2
    p = l2.shape[0]
    return float(np.sum((l2 ** 2).sum(axis=0) / p - (l2.sum(axis=0) / p) ** 2))


def _pair_angle(x, y):
    # closed-form planar angle maximising the varimax criterion for one column pair
    p = len(x)
    u = x * x - y * y
    v = 2 * x * y
    a, b = u.sum(), v.sum()
    c = (u * u - v * v).sum()
    d = 2 * (u * v).sum()
    return 0.25 * np.arctan2(d - 2 * a * b / p, c - (a * a - b * b) / p)


@dataclass
class VarimaxResult:
    rotated: np.ndarray
    rotation: np.ndarray
    criterion: list = field(default_factory=list)   # per sweep, on normalised loadings
    n_sweeps: int = 0


def varimax(loadings, max_iter=500, tol=1e-8, kaiser_normalize=True):
    """Orthogonal Varimax by sweeps of pairwise planar rotations.

    Each planar step is only taken if it does not lower the criterion, so
    the per-sweep history is non-decreasing. Columns are sign-fixed so their
    largest absolute loading is positive; column order is kept.
    """
    lam = np.array(loadings, dtype=np.float64)
    p, k = lam.shape
    if k < 2:
        rot = np.eye(k)
        sign = np.sign(lam[np.argmax(np.abs(lam[:, 0])), 0]) if k else 1.0
        rot = rot * (sign or 1.0)
        return VarimaxResult(lam @ rot, rot, [varimax_criterion(lam)], 0)
    h = np.sqrt((lam ** 2).sum(axis=1)) if kaiser_normalize else np.ones(p)
    h = np.where(h == 0, 1.0, h)
    work = lam / h[:, None]
    rot = np.eye(k)
    current = varimax_criterion(work)
    history = [current]
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        for i in range(k - 1):
            for j in range(i + 1, k):
                phi = _pair_angle(work[:, i], work[:, j])
                if phi == 0.0:
                    continue
                cs, sn = np.cos(phi), np.sin(phi)
                g = np.array([[cs, -sn], [sn, cs]])
                cand = work.copy()
                cand[:, [i, j]] = work[:, [i, j]] @ g
                # judged on the full criterion so rounding can never lower the history
                value = varimax_criterion(cand)
                if value < current:
                    continue
                work, current = cand, value
                rot[:, [i, j]] = rot[:, [i, j]] @ g
        history.append(current)
        if history[-1] - history[-2] < tol:
            break
    rotated = lam @ rot
    signs = np.sign(rotated[np.argmax(np.abs(rotated), axis=0), np.arange(k)])
    signs[signs == 0] = 1.0
    rot = rot * signs
    return VarimaxResult(lam @ rot, rot, history, sweeps)


def factor_scores_regression(z, corr, loadings, ridge=1e-8, max_cond=1e12):
    """Thurstone regression scores Z . corr^-1 . loadings."""
    c = np.asarray(corr, dtype=np.float64)
    if np.linalg.cond(c) > max_cond:
        c = c + ridge * np.eye(len(c))
        if np.linalg.cond(c) > 1.0 / np.finfo(float).eps:
            raise FactorError("correlation matrix is singular even after ridge")
    weights = np.linalg.solve(c, np.asarray(loadings, dtype=np.float64))
    return np.asarray(z, dtype=np.float64) @ weights


def threshold_loadings(loadings, abs_threshold=0.3):
    """Blank (NaN) every entry with |value| below the threshold; the boundary is kept."""
    lam = np.array(loadings, dtype=np.float64)
    return np.where(np.abs(lam) >= abs_threshold, lam, np.nan)


def format_loadings(loadings, variable_names, abs_threshold=0.3, digits=2):
    """Aligned text table with sub-threshold cells left blank."""
    shown = threshold_loadings(loadings, abs_threshold)
    k = shown.shape[1]
    width = max(len(n) for n in variable_names) if variable_names else 8
    cell = digits + 4
    lines = [" " * width + "".join(f"F{j + 1}".rjust(cell) for j in range(k))]
    for name, row in zip(variable_names, shown):
        cells = ["" if np.isnan(v) else f"{v:.{digits}f}" for v in row]
        lines.append(name.ljust(width) + "".join(c.rjust(cell) for c in cells))
    return "\n".join(lines)


@dataclass
class FactorModel:
    variable_names: list
    k: int
    loadings: np.ndarray          # rotated, p x k
    unrotated: np.ndarray
    eigenvalues: np.ndarray
    explained: float
    rotation: np.ndarray
    scores: np.ndarray            # n x k
    criterion: list


def fit_factors(values, variable_names=None, mask=None, max_iter=500, tol=1e-8):
    """Standardise, retain by Kaiser, rotate by Varimax, score by regression."""
    z = standardize(values, mask)
    corr = correlation(z)
    vals, unrot, k = pca_retain(corr=corr)
    vm = varimax(unrot, max_iter=max_iter, tol=tol)
    scores = factor_scores_regression(z, corr, vm.rotated)
    names = list(variable_names) if variable_names is not None else [f"v{j + 1}" for j in range(z.shape[1])]
    return FactorModel(names, k, vm.rotated, unrot, vals, float(vals[:k].sum() / len(vals)),
                       vm.rotation, scores, vm.criterion)
