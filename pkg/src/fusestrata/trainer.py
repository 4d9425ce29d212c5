"""BCE training loop, Adam, k-fold cross-validation and embedding extraction."""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .fusenet import FuseModel, ModelConfig
from .reconmetrics import CnrConfig, metric_row
from .seeds import derive_seed, stream

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    seed: int = 0
    precision: str = "float32"
    recalibrate_bn: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def dtype(self):
        return np.dtype(self.precision)


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-7):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, params, lr=1e-2):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= (self.lr * p.grad).astype(p.dtype)


def make_optimizer(params, config):
    if config.optimizer == "adam":
        return Adam(params, lr=config.learning_rate)
    return SGD(params, lr=config.learning_rate)


def _volumes(item, modalities):
    if hasattr(item, "volumes"):
        mods = modalities or list(item.volumes)
        return [item.volumes[m].data for m in mods]
    return list(item)


def reconstruction_loss(model, vols, training, rng):
    recs, _ = model.forward(vols, training=training, rng=rng)
    return nn.total([nn.bce_loss(r, np.asarray(v, dtype=model.dtype)[None]) for r, v in zip(recs, vols)])


def _first_bad_param(model):
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)) or (p.grad is not None and not np.all(np.isfinite(p.grad))):
            return name
    return "loss"


@dataclass
class LossCurve:
    epoch: list = field(default_factory=list)
    step: list = field(default_factory=list)


def train(model, dataset, config=TrainConfig(), modalities=None, on_epoch=None):
    """Minimise the summed per-modality BCE. Returns (model, LossCurve).

    ``dataset`` is a list of SubjectRecords or of per-modality volume lists.
    Gradients of ``batch_size`` consecutive subjects are averaged per update.
    """
    items = [_volumes(it, modalities) for it in dataset]
    if not items:
        raise ValueError("empty training set")
    params = model.parameters()
    opt = make_optimizer(params, config)
    order_rng = stream(config.seed, "trainer", "order")
    drop_rng = stream(config.seed, "trainer", "dropout")
    curve = LossCurve()
    step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(items)) if len(items) > 1 else [0]
        losses = []
        for start in range(0, len(items), config.batch_size):
            batch = order[start:start + config.batch_size]
            for p in params:
                p.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                loss = reconstruction_loss(model, items[idx], True, drop_rng)
                loss.backward(np.asarray(1.0 / len(batch), dtype=loss.dtype))
                batch_loss += float(loss.data) / len(batch)
            step += 1
            if not np.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch + 1}); "
                                    f"first bad block: {_first_bad_param(model)}")
            opt.step()
            losses.append(batch_loss)
            curve.step.append(batch_loss)
        curve.epoch.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.6f", epoch + 1, curve.epoch[-1])
        if on_epoch is not None:
            on_epoch(epoch, curve.epoch[-1])
    if config.recalibrate_bn:
        recalibrate_batchnorm(model, items, stream(config.seed, "trainer", "recalibrate"))
    for p in params:
        p.zero_grad()
    return model, curve


def recalibrate_batchnorm(model, items, rng):
    """Replace running BN statistics by their average over one training-mode pass.

    The exponential running average lags the weights by roughly a hundred
    steps, which matters when inference follows a short run.
    """
    states = list(model.batchnorm_states())
    saved = [s.momentum for s in states]
    try:
        for i, vols in enumerate(items):
            for s in states:
                s.momentum = i / (i + 1.0)
            model.forward(vols, training=True, rng=rng)
    finally:
        for s, m in zip(states, saved):
            s.momentum = m


def flagged_windows(epoch_losses, window=50, start=10):
    """Epoch indices where the loss rose within a ``window``-epoch span after ``start``."""
    losses = np.asarray(epoch_losses)
    bad = []
    for i in range(start, len(losses) - window + 1):
        seg = losses[i:i + window]
        if np.any(np.diff(seg) > 0):
            bad.append(i)
    return bad


def kfold_split(n_subjects, k=10, seed=0):
    """Shuffled near-equal folds as (train_idx, test_idx) pairs."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n_subjects < k:
        raise ValueError(f"cannot split {n_subjects} subjects into {k} folds")
    perm = stream(seed, "kfold").permutation(n_subjects)
    folds = np.array_split(perm, k)
    out = []
    for i, test in enumerate(folds):
        train_idx = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((np.sort(train_idx), np.sort(test)))
    return out


@dataclass
class FoldReport:
    fold: int
    rows: list
    medians: dict  # modality -> metric -> median over held-out subjects


SUMMARY_METRICS = ("mse", "normdiff", "cnr_normdiff")


def mad(values):
    v = np.asarray(values, dtype=np.float64)
    return float(np.median(np.abs(v - np.median(v))))


def default_fit(model_config, train_config):
    def fit(train_records, fold):
        seed = derive_seed(train_config.seed, "fold", fold)
        model = FuseModel(model_config, seed=seed, dtype=train_config.dtype)
        cfg = TrainConfig(**{**train_config.__dict__, "seed": seed})
        model, _ = train(model, train_records, cfg)
        return model
    return fit


def cross_validate(records, model_config=ModelConfig(), train_config=TrainConfig(), cnr_config=CnrConfig(),
                   k=10, seed=0, fit=None, modalities=None):
    """k-fold CV of reconstruction quality. Returns (fold reports, summary).

    ``fit(train_records, fold)`` must return an object with
    ``reconstruct(volumes) -> list of arrays``; the default trains a fresh
    FuseModel per fold.
    """
    fit = fit or default_fit(model_config, train_config)
    mods = modalities or list(records[0].volumes)
    reports = []
    for fold, (tr, te) in enumerate(kfold_split(len(records), k, seed)):
        model = fit([records[i] for i in tr], fold)
        rows = []
        for i in te:
            rec = records[i]
            vols = [rec.volumes[m].data for m in mods]
            outs = model.reconstruct(vols)
            for m, real, out in zip(mods, vols, outs):
                rows.append(metric_row(rec.subject_id, fold, m, real, out, cnr_config))
        medians = {m: {key: float(np.median([r[key] for r in rows if r["modality"] == m]))
                       for key in SUMMARY_METRICS} for m in mods}
        reports.append(FoldReport(fold, rows, medians))
        log.info("fold %d: %s", fold, medians)
    return reports, summarize_folds(reports, mods)


def summarize_folds(reports, modalities):
    summary = {}
    for m in modalities:
        summary[m] = {}
        for key in SUMMARY_METRICS:
            vals = [r.medians[m][key] for r in reports]
            summary[m][key] = {"median": float(np.median(vals)), "mad": mad(vals), "fold_medians": vals}
    return summary


class IdentityModel:
    """Reconstructs its input exactly; a stub for harness checks."""

    def reconstruct(self, volumes):
        return [np.asarray(v) for v in volumes]


def extract_embeddings(model, dataset, modalities=None):
    """Inference-mode embeddings, one row per subject in input order."""
    rows = []
    for item in dataset:
        vols = _volumes(item, modalities)
        rows.append(model.embed(vols).astype(np.float64))
    if not rows:
        return np.zeros((0, model.config.embedding_length))
    return np.vstack(rows)
