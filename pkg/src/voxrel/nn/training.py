"""Training loop: Adam, stratified validation split, early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from voxrel.metrics import classification_metrics
from voxrel.nn.model_io import load_model
from voxrel.nn.network import Network, backward_batch, bce_with_logits, forward_batch, l2_penalty
from voxrel.nn.layers import sigmoid
from voxrel.preprocess import DatasetManifest, stratified_counts
from voxrel.volume import load_volume, shift_x


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 60
    patience: int = 15
    dropout_rate: float = 0.3
    augmentation: bool = True
    split_fraction: float = 0.15
    rng_seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must be in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_balanced_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 means no epoch ran
    best_val_loss: float = float("inf")

    def summary(self) -> dict:
        return {
            "epochs": len(self.train_loss),
            "best_epoch": self.best_epoch,
            "best_val_loss": None if self.best_val_loss == float("inf") else self.best_val_loss,
        }


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, config: TrainConfig, t: int):
    """One bias-corrected Adam update, in place. ``t`` starts at 1."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr, eps = config.learning_rate, config.adam_epsilon
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        p[...] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def load_split_arrays(manifest: DatasetManifest, split: str):
    """Load a split's image volumes as float32 arrays plus labels and ids."""
    subjects = manifest.split_subjects(split)
    arrays, labels, ids = [], [], []
    for s in subjects:
        v = load_volume(manifest.resolve(s.image_path))
        if v.dims != manifest.dims:
            raise ValueError(f"subject {s.id}: volume dims {v.dims} differ from manifest dims {manifest.dims}")
        arrays.append(v.data)
        labels.append(s.label)
        ids.append(s.id)
    return arrays, np.asarray(labels, dtype=np.int64), ids


def _augmented(arr: np.ndarray, flip: bool, offset: int) -> np.ndarray:
    if flip:
        arr = arr[::-1]
    # volumes narrower than the draw range cannot shift; leave them alone
    if offset and abs(int(offset)) < arr.shape[0]:
        arr = shift_x(np.ascontiguousarray(arr), int(offset))
    return arr


def _eval_scores(net: Network, arrays, batch_size: int) -> np.ndarray:
    logits = []
    for i in range(0, len(arrays), batch_size):
        xb = np.stack(arrays[i : i + batch_size])[:, None]
        fp = forward_batch(net, xb, train=False, want_cols=False)
        logits.append(fp.logits)
    return np.concatenate(logits) if logits else np.zeros(0, dtype=np.float32)


def _stratified_val_indices(labels: np.ndarray, fraction: float, rng) -> np.ndarray:
    by_class: dict[int, np.ndarray] = {c: np.flatnonzero(labels == c) for c in sorted(set(labels.tolist()))}
    counts = stratified_counts({c: len(v) for c, v in by_class.items()}, fraction)
    picked = []
    for label in sorted(by_class):
        perm = rng.permutation(len(by_class[label]))
        picked.extend(by_class[label][perm[: counts[label]]].tolist())
    return np.asarray(sorted(picked), dtype=np.int64)


def train(net: Network, train_set: DatasetManifest, config: TrainConfig) -> tuple[Network, TrainHistory]:
    """Fit the network on the manifest's train split.

    Splits off a stratified validation fraction, augments training samples
    (sagittal flip with p=0.5, sagittal shift uniform in -2..2), stops when
    validation loss has not improved for ``patience`` epochs, and restores
    the parameters of the best-validation-loss epoch.
    """
    arrays, labels, _ = load_split_arrays(train_set, "train")
    if len(arrays) == 0:
        raise ValueError("train split is empty")
    if len(set(labels.tolist())) < 2:
        raise ValueError("train split must contain both classes")
    if train_set.dims != net.input_dims:
        raise ValueError(f"dataset dims {train_set.dims} do not match network input {net.input_dims}")

    seed = int(config.rng_seed)
    rng_split = np.random.default_rng([seed, 1])
    rng_train = np.random.default_rng([seed, 2])

    val_idx = _stratified_val_indices(labels, config.split_fraction, rng_split)
    val_mask = np.zeros(len(arrays), dtype=bool)
    val_mask[val_idx] = True
    tr_idx = np.flatnonzero(~val_mask)
    tr_arrays = [arrays[i] for i in tr_idx]
    tr_labels = labels[tr_idx]
    val_arrays = [arrays[i] for i in val_idx]
    val_labels = labels[val_idx]
    monitor_on_val = len(val_arrays) > 0

    history = TrainHistory()
    best_params = net.snapshot()
    state = AdamState.for_params(net.parameters())
    t = 0
    n = len(tr_arrays)

    for epoch in range(1, config.max_epochs + 1):
        order = rng_train.permutation(n)
        if config.augmentation:
            flips = rng_train.random(n) < 0.5
            offsets = rng_train.integers(-2, 3, size=n)
        else:
            flips = np.zeros(n, dtype=bool)
            offsets = np.zeros(n, dtype=np.int64)

        epoch_data_loss = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            xb = np.stack([_augmented(tr_arrays[j], flips[j], offsets[j]) for j in idx])[:, None]
            yb = tr_labels[idx]
            fp = forward_batch(net, xb, train=True, rng=rng_train)
            bce = bce_with_logits(fp.logits, yb)
            epoch_data_loss += float(bce.sum())
            dlogits = (sigmoid(fp.logits) - yb) / len(idx)
            grads = backward_batch(net, fp, dlogits)
            t += 1
            adam_step(net.parameters(), grads.by_param, state, config, t)

        train_loss = epoch_data_loss / n + l2_penalty(net)

        if monitor_on_val:
            # monitored loss is the data term; folding in the L2 penalty
            # would register its steady decay as improvement forever
            val_logits = _eval_scores(net, val_arrays, config.batch_size)
            monitor = float(bce_with_logits(val_logits, val_labels).mean())
            mets = classification_metrics(sigmoid(val_logits), val_labels)
            val_bal = mets["balanced_accuracy"]
        else:
            monitor = train_loss
            val_bal = None

        history.train_loss.append(train_loss)
        history.val_loss.append(monitor)
        history.val_balanced_accuracy.append(float("nan") if val_bal is None else float(val_bal))

        if monitor < history.best_val_loss:
            history.best_val_loss = monitor
            history.best_epoch = epoch
            best_params = net.snapshot()
        if epoch - history.best_epoch >= config.patience:
            break

    net.set_parameters(best_params)
    return net, history


def fine_tune(checkpoint, train_set: DatasetManifest, config: TrainConfig) -> tuple[Network, TrainHistory]:
    """Train starting from a saved model's weights instead of a fresh init."""
    net = checkpoint if isinstance(checkpoint, Network) else load_model(checkpoint)
    if net.input_dims != train_set.dims:
        raise ValueError(
            f"checkpoint input dims {net.input_dims} incompatible with dataset dims {train_set.dims}"
        )
    return train(net, train_set, config)


def predict(net: Network, manifest: DatasetManifest, split: str, batch_size: int = 16):
    """Eval-mode logits/probabilities for every subject in a split."""
    arrays, labels, ids = load_split_arrays(manifest, split)
    logits = _eval_scores(net, arrays, batch_size)
    return {
        "ids": ids,
        "labels": labels,
        "logits": logits.astype(np.float64),
        "probabilities": sigmoid(logits),
    }
