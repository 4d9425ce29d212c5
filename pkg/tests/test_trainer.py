import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fusestrata import nncore as nn
from fusestrata.fusenet import FuseModel, ModelConfig
from fusestrata.reconmetrics import CnrConfig
from fusestrata.trainer import (SGD, Adam, IdentityModel, TrainConfig, TrainingError, cross_validate,
                                extract_embeddings, flagged_windows, kfold_split, mad, train)
from fusestrata.volio import synth_dataset

TINY = ModelConfig(input_dims=(8, 8, 8), depth=2, base_channels=2, kernel=3)


def tiny_records(n=4, seed=0):
    recs, labels = synth_dataset(n, (8, 8, 8), 2, 1.0, seed=seed)
    return recs


def snapshot(model):
    return {k: p.data.copy() for k, p in model.named_parameters()}


def test_adam_matches_scalar_reference():
    grads = [0.5, -2.0, 0.1, 3.0]
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-7
    x, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p = nn.Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=lr)
    for g in grads:
        p.grad = np.array([g])
        opt.step()
    assert p.data[0] == pytest.approx(x, rel=1e-12)


def test_sgd_step():
    p = nn.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    p.grad = np.array([1.0, -1.0])
    SGD([p], lr=0.5).step()
    assert p.data.tolist() == [0.5, 2.5]


def test_zero_learning_rate_leaves_parameters():
    model = FuseModel(TINY, seed=1)
    before = snapshot(model)
    train(model, tiny_records(), TrainConfig(epochs=2, learning_rate=0.0, recalibrate_bn=False))
    for k, v in snapshot(model).items():
        np.testing.assert_array_equal(v, before[k])


def test_training_is_deterministic_and_decreases_loss():
    cfg = TrainConfig(epochs=3, learning_rate=1e-3, seed=5)
    runs = []
    for _ in range(2):
        model, curve = train(FuseModel(TINY, seed=2), tiny_records(), cfg)
        runs.append((snapshot(model), curve))
    assert runs[0][1].step == runs[1][1].step
    for k in runs[0][0]:
        assert runs[0][0][k].tobytes() == runs[1][0][k].tobytes()
    assert runs[0][1].epoch[-1] < runs[0][1].epoch[0]
    assert len(runs[0][1].step) == 12


def test_batch_size_groups_updates():
    _, curve = train(FuseModel(TINY, seed=2), tiny_records(), TrainConfig(epochs=1, batch_size=3))
    assert len(curve.step) == 2


def test_nonfinite_loss_raises_with_location():
    model = FuseModel(TINY, seed=0)
    name, p = next(iter(model.named_parameters()))
    p.data[...] = np.nan
    with pytest.raises(TrainingError, match="step 1"):
        train(model, tiny_records(2), TrainConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_fold_sizes_for_974_subjects():
    folds = kfold_split(974, 10, seed=3)
    sizes = sorted(len(te) for _, te in folds)
    assert sizes == [97] * 6 + [98] * 4


@given(st.integers(2, 60), st.integers(2, 10), st.integers(0, 1000))
def test_folds_partition_subjects(n, k, seed):
    if n < k:
        with pytest.raises(ValueError):
            kfold_split(n, k, seed)
        return
    folds = kfold_split(n, k, seed)
    tests = np.concatenate([te for _, te in folds])
    assert sorted(tests.tolist()) == list(range(n))
    for tr, te in folds:
        assert not set(tr) & set(te)
        assert len(tr) + len(te) == n
    assert max(len(te) for _, te in folds) - min(len(te) for _, te in folds) <= 1


def test_mad_hand_value():
    assert mad([1, 2, 3, 4, 100]) == 1.0


def test_flagged_windows():
    losses = list(np.linspace(1, 0.1, 80))
    assert flagged_windows(losses, window=50, start=10) == []
    losses[40] = 2.0
    assert 10 in flagged_windows(losses, window=50, start=10)


def test_identity_model_scores_zero():
    recs = tiny_records(6)
    cfg = CnrConfig(roi_dims=(2, 2, 2), n_pairs=20)
    reports, summary = cross_validate(recs, cnr_config=cfg, k=3, seed=0, fit=lambda tr, fold: IdentityModel())
    assert len(reports) == 3
    assert sum(len(r.rows) for r in reports) == 6 * 2
    for mod in summary.values():
        for metric in mod.values():
            assert metric["median"] == 0 and metric["mad"] == 0


def test_embeddings_shape_and_inference_determinism():
    model = FuseModel(TINY, seed=0)
    recs = tiny_records(3)
    e1 = extract_embeddings(model, recs)
    e2 = extract_embeddings(model, recs)
    assert e1.shape == (3, TINY.embedding_length)
    assert e1.dtype == np.float64
    np.testing.assert_array_equal(e1, e2)
