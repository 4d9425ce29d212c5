"""Reconstruction quality: MSE, median normalised difference and CNR agreement."""
from dataclasses import dataclass

import numpy as np


def _arr(v):
    return np.asarray(getattr(v, "data", v), dtype=np.float64)


def _pair(real, rec):
    a, b = _arr(real), _arr(rec)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(real, rec):
    a, b = _pair(real, rec)
    return float(np.mean((b - a) ** 2))


def normdiff(real, rec):
    """Elementwise (rec - real) / (rec + real); 0/0 counts as 0."""
    a, b = np.asarray(real, dtype=np.float64), np.asarray(rec, dtype=np.float64)
    s = a + b
    safe = np.where(s == 0, 1.0, s)
    return np.where(s == 0, 0.0, (b - a) / safe)


def normdiff_median(real, rec):
    a, b = _pair(real, rec)
    return float(np.median(normdiff(a, b)))


@dataclass(frozen=True)
class CnrConfig:
    roi_dims: tuple = (4, 4, 3)
    n_pairs: int = 1000
    background: float = 0.0
    max_background_fraction: float = 0.5
    absolute: bool = True
    seed: int = 0


def pair_cnr(roi1, roi2):
    """(mean1 - mean2) / population std of the pooled voxels; 0 when that std is 0."""
    r1, r2 = np.ravel(roi1).astype(np.float64), np.ravel(roi2).astype(np.float64)
    sd = np.concatenate([r1, r2]).std()
    if sd == 0:
        return 0.0
    return float((r1.mean() - r2.mean()) / sd)


def tile_rois(volume, roi_dims):
    """Regular tiling into ``roi_dims`` blocks; trailing partial blocks dropped.

    Returns an array (n_rois, voxels_per_roi) in x-major block order.
    """
    v = _arr(volume)
    rx, ry, rz = roi_dims
    nx, ny, nz = (v.shape[0] // rx, v.shape[1] // ry, v.shape[2] // rz)
    v = v[:nx * rx, :ny * ry, :nz * rz]
    blocks = v.reshape(nx, rx, ny, ry, nz, rz).transpose(0, 2, 4, 1, 3, 5)
    return blocks.reshape(nx * ny * nz, rx * ry * rz)


def eligible_rois(rois, cfg):
    bg = (rois <= cfg.background).mean(axis=1)
    return np.flatnonzero(bg <= cfg.max_background_fraction)


def sample_pairs(n_eligible, cfg):
    """Distinct unordered ROI pairs (a < b), each ROI reusable across pairs."""
    if n_eligible < 2:
        raise ValueError(f"need at least 2 non-background ROIs, found {n_eligible}")
    total = n_eligible * (n_eligible - 1) // 2
    if total <= cfg.n_pairs:
        a, b = np.triu_indices(n_eligible, 1)
        return np.column_stack([a, b])
    rng = np.random.default_rng(cfg.seed)
    chosen, seen = [], set()
    while len(chosen) < cfg.n_pairs:
        draw = rng.integers(0, n_eligible, size=(2 * cfg.n_pairs, 2))
        for a, b in draw:
            if a == b:
                continue
            key = (min(a, b), max(a, b))
            if key in seen:
                continue
            seen.add(key)
            chosen.append(key)
            if len(chosen) == cfg.n_pairs:
                break
    return np.array(chosen, dtype=np.int64)


def _pair_values(rois, idx, pairs, cfg):
    sel = rois[idx]
    r1, r2 = sel[pairs[:, 0]], sel[pairs[:, 1]]
    pooled = np.concatenate([r1, r2], axis=1)
    sd = pooled.std(axis=1)
    diff = r1.mean(axis=1) - r2.mean(axis=1)
    safe = np.where(sd == 0, 1.0, sd)
    vals = np.where(sd == 0, 0.0, diff / safe)
    return np.abs(vals) if cfg.absolute else vals


def cnr_median(volume, cfg=CnrConfig(), pairs=None, eligible=None):
    """Median CNR over sampled ROI pairs of one volume."""
    rois = tile_rois(volume, cfg.roi_dims)
    if eligible is None:
        eligible = eligible_rois(rois, cfg)
    if pairs is None:
        pairs = sample_pairs(len(eligible), cfg)
    return float(np.median(_pair_values(rois, eligible, pairs, cfg)))


def scalar_normdiff(real, rec):
    s = real + rec
    return 0.0 if s == 0 else float((rec - real) / s)


def cnr_normdiff(real, rec, cfg=CnrConfig()):
    """NormDiff of the two median CNRs, both computed on the real volume's ROI pairs.

    Returns (cnr_real, cnr_rec, normdiff).
    """
    a, b = _pair(real, rec)
    rois = tile_rois(a, cfg.roi_dims)
    eligible = eligible_rois(rois, cfg)
    pairs = sample_pairs(len(eligible), cfg)
    c_real = cnr_median(a, cfg, pairs, eligible)
    c_rec = cnr_median(b, cfg, pairs, eligible)
    return c_real, c_rec, scalar_normdiff(c_real, c_rec)


METRIC_COLUMNS = ("subject_id", "fold", "modality", "mse", "normdiff", "cnr_real", "cnr_rec", "cnr_normdiff")


def metric_row(subject_id, fold, modality, real, rec, cfg=CnrConfig()):
    c_real, c_rec, c_nd = cnr_normdiff(real, rec, cfg)
    return {
        "subject_id": subject_id,
        "fold": fold,
        "modality": modality,
        "mse": mse(real, rec),
        "normdiff": normdiff_median(real, rec),
        "cnr_real": c_real,
        "cnr_rec": c_rec,
        "cnr_normdiff": c_nd,
    }
