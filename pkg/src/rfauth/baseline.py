"""Baseline device classifiers trained in the base domain.

Two variants over (2, L) IQ slices: a 1D AlexNet-style CNN treating the I/Q
rows as channels (the default classifier for every evaluation, including
translated slices) and a 2D variant treating the slice as a 2 x L image.
Both end in softmax over the device classes.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import Divergence, LabelMismatch, ShapeError
from .iqdata import SliceSet

# Five 1x2 poolings halve the length five times; anything shorter than 2^5
# collapses to zero length.
MIN_SLICE_LENGTH = 32

VARIANTS = ("oneD", "twoD")


@dataclass
class TrainConfig:
    """Classifier training hyperparameters (conventional defaults)."""

    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    # Stop early once validation accuracy reaches this level (None disables).
    target_val_accuracy: float | None = None
    # Stop after this many epochs without a new best validation accuracy.
    patience: int | None = None


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class ClassifierModel:
    """A classifier variant plus its metadata and training history."""

    variant: str
    n_classes: int
    slice_length: int
    n_filters: int
    net: nn.Module
    training_log: list = field(default_factory=list)

    @property
    def input_shape(self):
        if self.variant == "oneD":
            return (2, self.slice_length)
        return (2, self.slice_length, 1)


@dataclass
class ClassifierOutput:
    """Per-slice softmax probabilities and argmax predictions."""

    probabilities: np.ndarray
    predicted: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probabilities, dtype=np.float64)
        if probs.ndim != 2:
            raise ShapeError("probabilities must be (m, n_classes)")
        sums = probs.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-5):
            raise ShapeError("softmax rows must sum to 1 within 1e-5")
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "predicted", np.asarray(self.predicted, dtype=np.int64))


class _OneDNet(nn.Module):
    """Five [conv(k7) ReLU conv(k5) ReLU maxpool(2)] blocks, then the FC head."""

    def __init__(self, n_classes, slice_length, n_filters=128):
        super().__init__()
        blocks = []
        c = 2
        for _ in range(5):
            blocks += [
                nn.Conv1d(c, n_filters, kernel_size=7, padding=3),
                nn.ReLU(),
                nn.Conv1d(n_filters, n_filters, kernel_size=5, padding=2),
                nn.ReLU(),
                nn.MaxPool1d(2),
            ]
            c = n_filters
        self.features = nn.Sequential(*blocks)
        flat = n_filters * (slice_length // 32)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, 256),
            nn.ReLU(),
            nn.Linear(256, 256),
            nn.ReLU(),
            nn.Linear(256, 128),
            nn.ReLU(),
            nn.Linear(128, n_classes),
        )

    def forward(self, x):
        return self.head(self.features(x))


class _TwoDNet(nn.Module):
    """Five [conv2d ReLU maxpool] blocks over the 2 x L slice image, then FC head."""

    def __init__(self, n_classes, slice_length, n_filters=64):
        super().__init__()
        blocks = []
        c = 1
        for _ in range(5):
            blocks += [
                nn.ZeroPad2d((0, 0, 0, 1)),  # same-padding for the height-2 kernel
                nn.Conv2d(c, n_filters, kernel_size=(2, 5), padding=(0, 2)),
                nn.ReLU(),
                nn.MaxPool2d((1, 2)),
            ]
            c = n_filters
        self.features = nn.Sequential(*blocks)
        flat = n_filters * 2 * (slice_length // 32)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, 256),
            nn.ReLU(),
            nn.Linear(256, 256),
            nn.ReLU(),
            nn.Linear(256, 128),
            nn.ReLU(),
            nn.Linear(128, n_classes),
        )

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(1)  # (m, 1, 2, L)
        return self.head(self.features(x))


def _glorot_init(net: nn.Module):
    # keeps activation variance stable through the deep unnormalized stack
    for mod in net.modules():
        if isinstance(mod, (nn.Conv1d, nn.Conv2d, nn.Linear)):
            nn.init.xavier_uniform_(mod.weight)
            nn.init.zeros_(mod.bias)


def build_classifier(
    variant: str, n_classes: int, slice_length: int, n_filters: int | None = None, seed: int = 0
) -> ClassifierModel:
    """Construct an untrained classifier; weights are seeded for reproducibility."""
    if variant not in VARIANTS:
        raise ShapeError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if n_classes < 2:
        raise ShapeError("n_classes must be >= 2")
    if slice_length < MIN_SLICE_LENGTH:
        raise ShapeError(
            f"slice_length {slice_length} cannot survive five 1x2 poolings "
            f"(need >= {MIN_SLICE_LENGTH})"
        )
    torch.manual_seed(seed)
    if variant == "oneD":
        nf = 128 if n_filters is None else n_filters
        net = _OneDNet(n_classes, slice_length, nf)
    else:
        nf = 64 if n_filters is None else n_filters
        net = _TwoDNet(n_classes, slice_length, nf)
    _glorot_init(net)
    return ClassifierModel(variant, n_classes, slice_length, nf, net)


def _as_batch_tensor(slices: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(slices, dtype=np.float32))


def _check_input(model: ClassifierModel, slices: np.ndarray):
    if slices.ndim != 3 or slices.shape[1] != 2 or slices.shape[2] != model.slice_length:
        raise ShapeError(
            f"slices shape {slices.shape} does not match model input (m, 2, {model.slice_length})"
        )


def classify(model: ClassifierModel, slices) -> ClassifierOutput:
    """Softmax probabilities and argmax labels for every slice (pure function).

    Ties in the argmax break toward the lowest class index.
    """
    arr = slices.slices if isinstance(slices, SliceSet) else np.asarray(slices, dtype=np.float32)
    _check_input(model, arr)
    model.net.eval()
    probs = []
    with torch.no_grad():
        for start in range(0, arr.shape[0], 512):
            batch = _as_batch_tensor(arr[start : start + 512])
            logits = model.net(batch)
            probs.append(torch.softmax(logits, dim=1).numpy())
    p = np.concatenate(probs, axis=0) if probs else np.zeros((0, model.n_classes))
    # renormalize away float32 rounding so rows sum to 1 within 1e-5
    p = p / p.sum(axis=1, keepdims=True)
    return ClassifierOutput(probabilities=p, predicted=np.argmax(p, axis=1))


def _validate_coverage(slices: SliceSet, n_classes: int, name: str):
    present = set(slices.device_ids)
    expected = set(range(n_classes))
    if not expected <= present:
        missing = sorted(expected - present)
        raise LabelMismatch(f"{name} set is missing classes {missing}")


def train_classifier(
    model: ClassifierModel, train: SliceSet, val: SliceSet, config: TrainConfig | None = None
) -> ClassifierModel:
    """Cross-entropy training with Adam; keeps the best-validation checkpoint.

    Raises Divergence if the loss goes non-finite, LabelMismatch if either
    set misses a class. Deterministic for a fixed config seed.
    """
    config = config or TrainConfig()
    _validate_coverage(train, model.n_classes, "train")
    _validate_coverage(val, model.n_classes, "validation")
    _check_input(model, train.slices)
    _check_input(model, val.slices)

    rng = np.random.default_rng(config.seed)
    net = model.net
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    x_train = _as_batch_tensor(train.slices)
    y_train = torch.from_numpy(train.labels)
    best_acc, best_state, best_epoch = -1.0, None, -1
    model.training_log = []

    for epoch in range(config.epochs):
        net.train()
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size])
            opt.zero_grad()
            loss = loss_fn(net(x_train[idx]), y_train[idx])
            if not torch.isfinite(loss):
                raise Divergence(f"training loss non-finite at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        val_acc = float(np.mean(classify(model, val).predicted == val.labels))
        model.training_log.append(EpochRecord(epoch, float(np.mean(losses)), val_acc))
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = copy.deepcopy(net.state_dict())
        if config.target_val_accuracy is not None and val_acc >= config.target_val_accuracy:
            break
        if config.patience is not None and epoch - best_epoch >= config.patience:
            break

    if best_state is not None:
        net.load_state_dict(best_state)
    return model


def save_checkpoint(model: ClassifierModel, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "variant": model.variant,
            "n_classes": model.n_classes,
            "slice_length": model.slice_length,
            "n_filters": model.n_filters,
            "state_dict": model.net.state_dict(),
            "training_log": [(r.epoch, r.train_loss, r.val_accuracy) for r in model.training_log],
        },
        path,
    )


def load_checkpoint(path) -> ClassifierModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    model = build_classifier(
        blob["variant"], blob["n_classes"], blob["slice_length"], blob["n_filters"]
    )
    model.net.load_state_dict(blob["state_dict"])
    model.training_log = [EpochRecord(*row) for row in blob["training_log"]]
    return model


def write_training_log(model: ClassifierModel, path):
    """Export the per-epoch log as CSV (epoch, loss, val_acc)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_acc"])
        for rec in model.training_log:
            writer.writerow([rec.epoch, f"{rec.train_loss:.6f}", f"{rec.val_accuracy:.6f}"])
