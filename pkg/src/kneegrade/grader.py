"""Stage-2 KL grade prediction from a normalized knee crop.

Two heads share one dense-block trunk: a 5-way softmax classifier trained
with cross-entropy, and a scalar regressor (dense 128 + ReLU, then one
linear unit) trained with mean squared error whose output is rounded and
clamped to a grade.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import layers as L
from . import tensor as T
from .layers import Network
from .synthgen import CROP_SIZE, KneeCrop, derive_rng

log = logging.getLogger(__name__)

HEADS = ("classification", "regression")
NUM_GRADES = 5
REGRESSION_HIDDEN = 128

TRUNK = (
    L.conv2d(8, 3, stride=2), L.relu(),
    L.conv2d(8, 3, stride=2), L.relu(),
    L.dense_block(growth=8, layers=2),
    L.conv2d(16, 3, stride=2), L.relu(),
    L.dense_block(growth=8, layers=2),
    L.conv2d(16, 3, stride=2), L.relu(),
    L.dense_block(growth=8, layers=2),
    L.global_avg_pool(),
)
HEAD_LAYERS = {
    "classification": (L.dense(NUM_GRADES),),
    "regression": (L.dense(REGRESSION_HIDDEN), L.relu(), L.dense(1)),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    finetune_lr_scale: float = 0.1
    lr_decay: float = 0.9     # multiplicative per epoch
    clip_norm: float | None = 1.0
    init: str = "he"


@dataclass
class GradePrediction:
    kind: str
    raw: np.ndarray | float
    grade: int


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    best_epoch: int = -1


def build_grader(head: str, seed: int = 0, init: str = "he") -> Network:
    if head not in HEADS:
        raise ValueError(f"unknown head kind {head!r}; expected one of {HEADS}")
    return Network((1, CROP_SIZE, CROP_SIZE), TRUNK + HEAD_LAYERS[head], seed, tags={"head": head}, init=init)


def head_of(net: Network) -> str:
    head = net.tags.get("head")
    if head not in HEADS:
        raise ValueError(f"network is not a grader (head tag {head!r})")
    return head


def round_grade(raw: float) -> int:
    """Nearest grade, ties away from zero, clamped to 0-4."""
    r = float(raw)
    if math.isnan(r):
        return 0
    r = min(max(r, -1.0), float(NUM_GRADES))   # clamp first so infinities stay finite
    nearest = math.floor(abs(r) + 0.5) * (1 if r >= 0 else -1)
    return int(min(max(nearest, 0), NUM_GRADES - 1))


def _inputs(crops) -> np.ndarray:
    if isinstance(crops, np.ndarray):
        arr = crops.astype(np.float64)
    else:
        arr = np.stack([c.pixels if isinstance(c, KneeCrop) else np.asarray(c) for c in crops]).astype(np.float64)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.shape[1:] != (1, CROP_SIZE, CROP_SIZE):
        raise ValueError(f"grader expects {CROP_SIZE}x{CROP_SIZE} crops, got {arr.shape[-2:]}")
    return arr / 255.0


def raw_outputs(net: Network, crops, batch_size: int = 128) -> np.ndarray:
    """Softmax probabilities (N, 5) or regression outputs (N,)."""
    head = head_of(net)
    x = _inputs(crops)
    chunks = []
    for i in range(0, len(x), batch_size):
        out = L.forward(net, x[i:i + batch_size]).data
        chunks.append(T.softmax(out) if head == "classification" else out[:, 0])
    if not chunks:
        return np.zeros((0, NUM_GRADES)) if head == "classification" else np.zeros(0)
    return np.concatenate(chunks)


def grades_from_raw(head: str, raw: np.ndarray) -> np.ndarray:
    if head == "classification":
        return raw.argmax(axis=1).astype(int)
    return np.array([round_grade(r) for r in raw], dtype=int)


def predict_batch(net: Network, crops) -> tuple[np.ndarray, np.ndarray]:
    raw = raw_outputs(net, crops)
    return raw, grades_from_raw(head_of(net), raw)


def predict(net: Network, crop) -> GradePrediction:
    """Grade one crop (64x64 array or :class:`KneeCrop`, values in [0, 255])."""
    head = head_of(net)
    raw, grades = predict_batch(net, [crop])
    value = raw[0] if head == "classification" else float(raw[0])
    return GradePrediction(head, value, int(grades[0]))


def _labels(head: str, crops: Sequence[KneeCrop]) -> np.ndarray:
    labels = np.array([c.grade for c in crops])
    if head == "classification":
        if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= NUM_GRADES:
            raise ValueError("classification labels must be integer grades 0-4")
        return labels.astype(int)
    labels = labels.astype(np.float64)
    if labels.min() < 0 or labels.max() > NUM_GRADES - 1:
        raise ValueError("regression targets must lie in [0, 4]")
    return labels


def loss_for(head: str, out: T.Tensor, labels: np.ndarray) -> T.Tensor:
    if head == "classification":
        return T.cross_entropy_loss(out, labels, NUM_GRADES)
    return T.mse_loss(out, labels)


def evaluate_mae(net: Network, crops: Sequence[KneeCrop]) -> float:
    _, grades = predict_batch(net, crops)
    return float(np.mean(np.abs(grades - np.array([c.grade for c in crops]))))


def _fit(net: Network, crops: Sequence[KneeCrop], config: TrainConfig, lr: float,
         val: Optional[Sequence[KneeCrop]], tag: str) -> tuple[Network, TrainHistory]:
    head = head_of(net)
    labels = _labels(head, crops)
    x = _inputs(crops)
    history = TrainHistory()
    best = net.copy()
    if val:
        history.val_mae.append(evaluate_mae(net, val))
        best_score = history.val_mae[-1]
        history.best_epoch = 0
    opt = L.SGD(net.parameters(), lr, config.momentum, config.clip_norm)
    for epoch in range(1, config.epochs + 1):
        order = derive_rng(config.seed, tag, "shuffle", epoch).permutation(len(x))
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            net.zero_grad()
            loss = loss_for(head, L.forward(net, x[idx]), labels[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.train_loss.append(total / len(x))
        opt.lr *= config.lr_decay
        msg = f"{tag} epoch {epoch}/{config.epochs} loss {history.train_loss[-1]:.4f}"
        if val:
            history.val_mae.append(evaluate_mae(net, val))
            msg += f" val_mae {history.val_mae[-1]:.4f}"
            if history.val_mae[-1] < best_score:
                best_score, history.best_epoch, best = history.val_mae[-1], epoch, net.copy()
        log.info(msg)
    if not val:
        best, history.best_epoch = net.copy(), config.epochs
    return best, history


def train_grader(head: str, crops: Sequence[KneeCrop], config: TrainConfig = TrainConfig(),
                 val: Optional[Sequence[KneeCrop]] = None, init: Optional[Network] = None
                 ) -> tuple[Network, TrainHistory]:
    """Train a grader from scratch (or from ``init``'s trunk).

    Returns the checkpoint with the best validation MAE when ``val`` is
    given, else the final weights.
    """
    if head not in HEADS:
        raise ValueError(f"unknown head kind {head!r}; expected one of {HEADS}")
    if not crops:
        raise ValueError("cannot train on an empty dataset")
    net = build_grader(head, config.seed, config.init)
    if init is not None:
        # warm-start the shared trunk from another grader
        for name, p in init.params.items():
            idx = int(name.split(".")[0])
            if idx < len(TRUNK):
                net.params[name].data = p.data.copy()
    if head == "regression":
        net.params[f"{len(net.specs) - 1}.b"].data[:] = np.mean([c.grade for c in crops])
    return _fit(net, crops, config, config.lr, val, f"train-{head}")


def fine_tune(net: Network, crops: Sequence[KneeCrop], config: TrainConfig = TrainConfig(),
              val: Optional[Sequence[KneeCrop]] = None) -> tuple[Network, TrainHistory]:
    """Continue training every weight of a copy of ``net`` at a reduced rate."""
    head = head_of(net)
    if not crops:
        raise ValueError("cannot fine-tune on an empty dataset")
    _labels(head, crops)
    return _fit(net.copy(), crops, config, config.lr * config.finetune_lr_scale, val, f"finetune-{head}")


def with_epochs(config: TrainConfig, epochs: int) -> TrainConfig:
    return replace(config, epochs=epochs)
