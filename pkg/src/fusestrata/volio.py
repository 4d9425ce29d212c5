"""Volumes, phenotype tables, population normalisation and synthetic cohorts."""
import csv
import json
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

MMFV_MAGIC = b"MMFV"
MMFV_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class VolumeFormatError(ValueError):
    pass


class PhenotypeFormatError(ValueError):
    pass


@dataclass
class Volume:
    """One modality of one subject; ``data`` is indexed ``[x, y, z]``."""
    data: np.ndarray
    modality: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {self.data.shape}")

    @property
    def dims(self):
        return self.data.shape

    @property
    def voxels(self):
        """Flat voxel vector in x-fastest order."""
        return self.data.ravel(order="F")


@dataclass
class SubjectRecord:
    subject_id: str
    volumes: dict
    phenotypes: dict = None

    def stack(self, modalities):
        return [self.volumes[m].data for m in modalities]


@dataclass
class PhenoTable:
    subject_ids: list
    variable_names: list
    values: np.ndarray
    mask: np.ndarray = None
    dropped: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mask is None:
            self.mask = np.zeros(self.values.shape, dtype=bool)
        if self.values.shape != (len(self.subject_ids), len(self.variable_names)):
            raise ValueError("values shape does not match subject/variable lists")

    @property
    def n_missing(self):
        return int(self.mask.sum())

    def subset(self, subject_ids):
        index = {s: i for i, s in enumerate(self.subject_ids)}
        rows = [index[s] for s in subject_ids]
        return PhenoTable(list(subject_ids), list(self.variable_names), self.values[rows],
                          self.mask[rows], list(self.dropped))


# --------------------------------------------------------------------------
# MMFV volume files

def write_volume(vol, path):
    data = np.asarray(vol.data if isinstance(vol, Volume) else vol)
    nx, ny, nz = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MMFV_MAGIC, MMFV_VERSION, nx, ny, nz))
        fh.write(data.astype("<f4").ravel(order="F").tobytes())


def read_volume(path, modality=""):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, nx, ny, nz = _HEADER.unpack_from(raw)
    if magic != MMFV_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != MMFV_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    n = nx * ny * nz
    payload = len(raw) - _HEADER.size
    if n == 0 or payload != 4 * n:
        raise VolumeFormatError(
            f"{path}: payload mismatch, header dims ({nx},{ny},{nz}) need {n} values, "
            f"file carries {payload / 4:g}")
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float32)
    if not np.all(np.isfinite(flat)):
        raise VolumeFormatError(f"{path}: non-finite voxel at index {int(np.argmin(np.isfinite(flat)))}")
    return Volume(flat.reshape((nx, ny, nz), order="F"), modality)


# --------------------------------------------------------------------------
# normalisation

def population_percentiles(population_values, p_lo=0.1, p_hi=99.9):
    """Linear-interpolated percentiles over every voxel of every subject."""
    pooled = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in _as_list(population_values)])
    q_lo, q_hi = np.percentile(pooled, [p_lo, p_hi], method="linear")
    return float(q_lo), float(q_hi)


def minmax_normalize(population_values, p_lo=0.1, p_hi=99.9):
    """Robust min-max scaling into [0, 1] with population-wide percentiles.

    Accepts one array or a list of arrays (one per subject) and returns the
    same structure.
    """
    values = _as_list(population_values)
    q_lo, q_hi = population_percentiles(values, p_lo, p_hi)
    if not q_hi > q_lo:
        raise ValueError(f"degenerate intensity range: q_lo={q_lo}, q_hi={q_hi}")
    out = [np.clip((np.asarray(v, dtype=np.float64) - q_lo) / (q_hi - q_lo), 0.0, 1.0) for v in values]
    if isinstance(population_values, np.ndarray):
        return out[0]
    return out


def _as_list(values):
    if isinstance(values, np.ndarray):
        return [values]
    return list(values)


def normalize_records(records, p_lo=0.1, p_hi=99.9):
    """Normalise each modality jointly across all subjects, in place."""
    if not records:
        return records
    for mod in records[0].volumes:
        scaled = minmax_normalize([r.volumes[mod].data for r in records], p_lo, p_hi)
        for r, s in zip(records, scaled):
            r.volumes[mod] = Volume(s.astype(np.float32), mod)
    return records


# --------------------------------------------------------------------------
# phenotype CSV

def _data_lines(fh):
    for line in fh:
        if not line.lstrip().startswith("#"):
            yield line


def load_phenotypes(csv_path):
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(_data_lines(fh)))
    if not rows or not rows[0] or rows[0][0].strip() != "subject_id":
        raise PhenotypeFormatError(f"{csv_path}: header must start with 'subject_id'")
    names = [h.strip() for h in rows[0][1:]]
    ids, values, mask = [], [], []
    seen = set()
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names) + 1:
            raise PhenotypeFormatError(f"{csv_path}: row {r} has {len(row)} cells, expected {len(names) + 1}")
        sid = row[0].strip()
        if sid in seen:
            raise PhenotypeFormatError(f"{csv_path}: duplicate subject_id {sid!r} at row {r}")
        seen.add(sid)
        vals, miss = [], []
        for c, cell in enumerate(row[1:], start=2):
            cell = cell.strip()
            if cell == "":
                vals.append(np.nan)
                miss.append(True)
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise PhenotypeFormatError(
                    f"{csv_path}: non-numeric cell {cell!r} at row {r}, column {c} ({names[c - 2]})") from None
            miss.append(False)
        ids.append(sid)
        values.append(vals)
        mask.append(miss)
    values = np.array(values, dtype=np.float64).reshape(len(ids), len(names))
    mask = np.array(mask, dtype=bool).reshape(values.shape)

    keep, dropped = [], []
    for j, name in enumerate(names):
        col = values[~mask[:, j], j]
        if col.size < 2 or np.all(col == col[0]):
            dropped.append(name)
        else:
            keep.append(j)
    if dropped:
        warnings.warn(f"dropping zero-variance phenotype variables: {', '.join(dropped)}", stacklevel=2)
    return PhenoTable(ids, [names[j] for j in keep], values[:, keep], mask[:, keep], dropped)


def write_phenotypes(table, path, header_lines=()):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id"] + list(table.variable_names))
        for sid, row, miss in zip(table.subject_ids, table.values, table.mask):
            w.writerow([sid] + ["" if m else repr(float(v)) for v, m in zip(row, miss)])


# --------------------------------------------------------------------------
# synthetic cohort

MODALITIES = ("m1", "m2")
NOISE_SD = 0.1
BUMP_PER_EFFECT = 0.3     # bump height per unit effect size (3 noise sd)
EDGE_TAPER = 0.35
N_LATENT = 3
VARS_PER_LATENT = 3
N_PLANTED = 3


def planted_variable_names():
    return [f"grp_trait{i + 1}" for i in range(N_PLANTED)]


def _grid(dims):
    axes = [(np.arange(n) + 0.5) / n - 0.5 for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def _smooth_noise(rng, dims, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")
    return f / f.std()


def _blob_centres(n_groups):
    # evenly spaced on a ring in the mid-z plane, inside the head mask
    ang = 2 * np.pi * np.arange(n_groups) / max(n_groups, 1)
    return [(0.2 * np.cos(a), 0.2 * np.sin(a), 0.0) for a in ang]


def synth_dataset(n_subjects, dims, n_groups, effect_size, seed, depth=3):
    """Planted-strata cohort: two modalities plus a phenotype table.

    Each subject gets smooth subject-specific noise (sd ``NOISE_SD``) on a
    shared template inside an ellipsoidal head mask. Group ``g`` adds a
    Gaussian bump of height ``effect_size * BUMP_PER_EFFECT`` at its own location
    (opposite sign in the second modality). Phenotypes: ``N_PLANTED``
    variables driven by group identity, the rest by independent latent traits.
    Volumes come back population-normalised into [0, 1].
    """
    dims = tuple(int(d) for d in dims)
    if n_groups < 1 or n_groups > n_subjects:
        raise ValueError(f"need 1 <= n_groups <= n_subjects, got {n_groups} groups for {n_subjects} subjects")
    if any(d % 2 ** depth for d in dims):
        raise ValueError(f"dims {dims} not divisible by 2**{depth}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_subjects) % n_groups)

    x, y, z = _grid(dims)
    r2 = (x / 0.42) ** 2 + (y / 0.42) ** 2 + (z / 0.42) ** 2
    mask = r2 < 1.0
    # partial-volume falloff towards the mask boundary
    envelope = np.clip((1.0 - r2) / EDGE_TAPER, 0.0, 1.0)
    templates = {
        "m1": 0.55 + 0.2 * np.cos(6 * np.pi * x) * np.cos(6 * np.pi * y),
        "m2": 0.8 - 0.35 * r2,
    }
    width = 0.12
    bumps = []
    for cx, cy, cz in _blob_centres(n_groups):
        bumps.append(np.exp(-((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2) / (2 * width ** 2)))
    sign = {"m1": 1.0, "m2": -1.0}

    records = []
    for s in range(n_subjects):
        vols = {}
        for mod in MODALITIES:
            field_ = templates[mod] + NOISE_SD * _smooth_noise(rng, dims, 1.0)
            field_ = field_ + sign[mod] * effect_size * BUMP_PER_EFFECT * bumps[labels[s]]
            vols[mod] = np.where(mask, np.maximum(envelope * field_, 0.01), 0.0)
        records.append(SubjectRecord(f"sub{s:04d}", vols))

    for mod in MODALITIES:
        scaled = minmax_normalize([r.volumes[mod] for r in records])
        for r, v in zip(records, scaled):
            r.volumes[mod] = Volume(v.astype(np.float32), mod)

    group_score = (labels - (n_groups - 1) / 2) / max((n_groups - 1) / 2, 1)
    latent = rng.standard_normal((n_subjects, N_LATENT))
    cols, names = [], []
    for i, name in enumerate(planted_variable_names()):
        cols.append(1.2 * group_score + 0.5 * rng.standard_normal(n_subjects))
        names.append(name)
    for f in range(N_LATENT):
        for v in range(VARS_PER_LATENT):
            cols.append(0.8 * latent[:, f] + 0.6 * rng.standard_normal(n_subjects))
            names.append(f"trait{f + 1}_item{v + 1}")
    values = np.column_stack(cols)
    for r, row in zip(records, values):
        r.phenotypes = dict(zip(names, row.tolist()))
    return records, labels


def phenotable_from_records(records):
    names = list(records[0].phenotypes)
    values = np.array([[r.phenotypes[n] for n in names] for r in records])
    return PhenoTable([r.subject_id for r in records], names, values)


# --------------------------------------------------------------------------
# dataset directories

def save_dataset(records, labels, out_dir, header_lines=()):
    """Write ``volumes/<id>_<modality>.mmfv``, ``phenotypes.csv``, ``groups.csv``, ``manifest.json``."""
    vdir = os.path.join(out_dir, "volumes")
    os.makedirs(vdir, exist_ok=True)
    modalities = list(records[0].volumes)
    for r in records:
        for mod in modalities:
            write_volume(r.volumes[mod], os.path.join(vdir, f"{r.subject_id}_{mod}.mmfv"))
    if records[0].phenotypes is not None:
        write_phenotypes(phenotable_from_records(records), os.path.join(out_dir, "phenotypes.csv"), header_lines)
    if labels is not None:
        with open(os.path.join(out_dir, "groups.csv"), "w", newline="", encoding="utf-8") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "group"])
            for r, g in zip(records, labels):
                w.writerow([r.subject_id, int(g)])
    manifest = {
        "subjects": [r.subject_id for r in records],
        "modalities": modalities,
        "dims": list(records[0].volumes[modalities[0]].dims),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(data_dir):
    """Inverse of :func:`save_dataset`; returns (records, group labels or None)."""
    with open(os.path.join(data_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    pheno = None
    ppath = os.path.join(data_dir, "phenotypes.csv")
    if os.path.exists(ppath):
        pheno = load_phenotypes(ppath)
    records = []
    for sid in manifest["subjects"]:
        vols = {m: read_volume(os.path.join(data_dir, "volumes", f"{sid}_{m}.mmfv"), m)
                for m in manifest["modalities"]}
        dims = {v.dims for v in vols.values()}
        if dims != {tuple(manifest["dims"])}:
            raise VolumeFormatError(f"{sid}: volume dims {dims} differ from manifest {manifest['dims']}")
        records.append(SubjectRecord(sid, vols))
    if pheno is not None:
        index = {s: i for i, s in enumerate(pheno.subject_ids)}
        for r in records:
            if r.subject_id in index:
                i = index[r.subject_id]
                r.phenotypes = {n: (None if pheno.mask[i, j] else float(pheno.values[i, j]))
                                for j, n in enumerate(pheno.variable_names)}
    labels = None
    gpath = os.path.join(data_dir, "groups.csv")
    if os.path.exists(gpath):
        groups = dict(read_label_csv(gpath))
        labels = np.array([groups[r.subject_id] for r in records])
    return records, labels


def read_label_csv(path):
    """(subject_id, int label) pairs from a two-column CSV with a header row."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(_data_lines(fh)))
    return [(row[0], int(row[1])) for row in rows[1:] if row]
