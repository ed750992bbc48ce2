import dataclasses

import numpy as np
import pytest

from voxrel.nn.model_io import save_model
from voxrel.nn.network import Architecture, build_network
from voxrel.nn.training import TrainConfig, fine_tune, predict, train
from voxrel.preprocess import DatasetManifest, SubjectRecord, save_manifest
from voxrel.volume import Volume, save_volume


def scalar_arch():
    return Architecture((1, 1, 1), [
        {"type": "flatten"},
        {"type": "dense", "in_features": 1, "out_features": 1, "l2": 0.0},
        {"type": "sigmoid"},
    ])


def scalar_dataset(tmp_path, values_labels, split="train"):
    dims = (1, 1, 1)
    subjects = []
    for i, (value, label) in enumerate(values_labels):
        rel = f"s{i}.vvol"
        save_volume(Volume(dims, np.full(dims, value, np.float32)), tmp_path / rel)
        subjects.append(SubjectRecord(id=f"s{i}", image_path=rel, label=label, split=split))
    m = DatasetManifest("scalar", dims, 0, subjects, tmp_path)
    save_manifest(m, tmp_path / "manifest.json")
    return m


def separable_dataset(tmp_path, n=20):
    rng = np.random.default_rng(0)
    rows = [(float(rng.uniform(0.8, 1.5)), 1) for _ in range(n)]
    rows += [(float(rng.uniform(-1.5, -0.8)), 0) for _ in range(n)]
    return scalar_dataset(tmp_path, rows)


def test_linearly_separable_toy_learns(tmp_path):
    m = separable_dataset(tmp_path)
    cfg = TrainConfig(learning_rate=0.2, batch_size=4, max_epochs=30, augmentation=False, rng_seed=1)
    net, hist = train(build_network(scalar_arch(), seed=1), m, cfg)
    # training loss falls monotonically over the first five epochs
    assert all(a > b for a, b in zip(hist.train_loss[:5], hist.train_loss[1:6]))
    pred = predict(net, m, "train")
    correct = (pred["probabilities"] >= 0.5) == (pred["labels"] == 1)
    assert correct.all()


def test_training_deterministic_per_seed(tmp_path):
    m = separable_dataset(tmp_path, n=8)
    cfg = TrainConfig(learning_rate=0.1, batch_size=4, max_epochs=6, rng_seed=7)
    net1, h1 = train(build_network(scalar_arch(), seed=7), m, cfg)
    net2, h2 = train(build_network(scalar_arch(), seed=7), m, cfg)
    assert h1.train_loss == h2.train_loss
    assert h1.val_loss == h2.val_loss
    assert h1.best_epoch == h2.best_epoch
    for a, b in zip(net1.parameters(), net2.parameters()):
        assert np.array_equal(a, b)
    cfg3 = dataclasses.replace(cfg, rng_seed=8)
    _, h3 = train(build_network(scalar_arch(), seed=7), m, cfg3)
    assert h1.train_loss != h3.train_loss


def test_early_stopping_definition(tmp_path, monkeypatch):
    # force a strictly increasing validation loss; patience 15 stops at 16
    m = separable_dataset(tmp_path, n=8)
    cfg = TrainConfig(learning_rate=0.0, batch_size=4, max_epochs=100, patience=15, rng_seed=3)

    losses = iter(range(1, 1000))
    import voxrel.nn.training as T

    real = T.bce_with_logits

    def fake_bce(logits, labels):
        # validation calls see an ever-worsening loss; training loss untouched
        return np.full(np.shape(logits), float(next(losses)))

    monkeypatch.setattr(T, "bce_with_logits", fake_bce)
    net, hist = train(build_network(scalar_arch(), seed=3), m, cfg)
    assert hist.best_epoch == 1
    assert len(hist.val_loss) == 16


def test_train_requires_both_classes(tmp_path):
    m = scalar_dataset(tmp_path, [(0.5, 1), (0.2, 1)])
    with pytest.raises(ValueError, match="both classes"):
        train(build_network(scalar_arch(), seed=0), m, TrainConfig())


def test_train_requires_nonempty(tmp_path):
    m = scalar_dataset(tmp_path, [(0.5, 1), (0.2, 0)], split="holdout")
    with pytest.raises(ValueError, match="empty"):
        train(build_network(scalar_arch(), seed=0), m, TrainConfig())


def test_fine_tune_zero_epochs_keeps_checkpoint(tmp_path):
    m = separable_dataset(tmp_path, n=8)
    net = build_network(scalar_arch(), seed=5)
    net.layers[1].weight[...] = 1.25
    ckpt = tmp_path / "ck.vnet"
    save_model(net, ckpt)
    cfg = TrainConfig(max_epochs=0, rng_seed=0)
    tuned, hist = fine_tune(ckpt, m, cfg)
    assert tuned.layers[1].weight[0, 0] == np.float32(1.25)
    assert hist.best_epoch == 0
    assert hist.train_loss == []


def test_fine_tune_architecture_mismatch(tmp_path):
    m = separable_dataset(tmp_path, n=8)
    other = Architecture((2, 1, 1), [
        {"type": "flatten"},
        {"type": "dense", "in_features": 2, "out_features": 1, "l2": 0.0},
        {"type": "sigmoid"},
    ])
    ckpt = tmp_path / "ck.vnet"
    save_model(build_network(other, seed=1), ckpt)
    with pytest.raises(ValueError, match="incompatible"):
        fine_tune(ckpt, m, TrainConfig(max_epochs=1))


def test_fine_tune_resumes_learning(tmp_path):
    m = separable_dataset(tmp_path, n=10)
    cfg = TrainConfig(learning_rate=0.2, batch_size=4, max_epochs=10, augmentation=False, rng_seed=2)
    net, hist = train(build_network(scalar_arch(), seed=2), m, cfg)
    ckpt = tmp_path / "ck.vnet"
    save_model(net, ckpt)
    tuned, hist2 = fine_tune(ckpt, m, dataclasses.replace(cfg, max_epochs=3))
    # warm start: first-epoch training loss at or below the cold start's
    assert hist2.train_loss[0] <= hist.train_loss[0]


def test_validation_split_sizes(tmp_path):
    m = separable_dataset(tmp_path, n=13)  # 26 subjects
    cfg = TrainConfig(learning_rate=0.1, batch_size=8, max_epochs=1, rng_seed=0)
    net, hist = train(build_network(scalar_arch(), seed=0), m, cfg)
    assert len(hist.val_loss) == 1
    # 26 * 0.15 rounds to 4 validation subjects, stratified 2/2
    assert not np.isnan(hist.val_balanced_accuracy[0])
