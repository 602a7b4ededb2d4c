"""Adam + cross-entropy training with validation-loss early stopping.

The trainer only reads frames and class labels. Per-example SNR stays in the
dataset for stratified evaluation and is never touched here.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .models import MODEL_KINDS, MoEAMC, classify, normalize_power
from .seeding import MASK64, stream
from .sigsynth import Dataset
from .tensorcore import Tensor

log = logging.getLogger(__name__)

EVAL_BATCH = 512


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 30
    lr: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    model_kind: str = "moe"

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        if self.max_epochs and self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}")
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """The full-scale protocol: batch 1024, 500 epochs, patience 30."""
        return cls(**{"batch_size": 1024, "max_epochs": 500, "patience": 30, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for r in self.records:
            w.writerow([r.epoch, f"{r.train_loss:.10g}", f"{r.val_loss:.10g}", f"{r.val_accuracy:.10g}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="")


# optimizer -------------------------------------------------------------------


def adam_step(params, grads, state, t: int, lr=1e-3, betas=(0.9, 0.999), eps=1e-8) -> None:
    """One in-place Adam update over parallel lists of arrays.

    `state` holds ``"m"`` and ``"v"`` lists aligned with `params`; they are
    created as zeros on first use.
    """
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2 = betas
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"Adam shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: list[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state: dict = {}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.t, self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# early stopping ----------------------------------------------------------------


class EarlyStopping:
    """Stop once `patience` consecutive epochs fail to beat the best loss.

    Epochs are 0-indexed; only a strict decrease counts as improvement, so
    ties keep the earliest best epoch.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = -1
        self.bad_epochs = 0
        self.epoch = -1

    def update(self, val_loss: float) -> bool:
        """Record one epoch; returns True when this epoch is the new best."""
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss, self.best_epoch, self.bad_epochs = val_loss, self.epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# loops ---------------------------------------------------------------------------


def _model_inputs(ds: Dataset, dtype) -> np.ndarray:
    return normalize_power(ds.iq).astype(dtype, copy=False)


def _probs(model, x: Tensor, training: bool) -> Tensor:
    return model(x, training)


def predict(model, ds: Dataset, batch_size: int = EVAL_BATCH):
    """Eval-mode class probabilities [N, K] and, for the mixture, gate outputs [N]."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    x = _model_inputs(ds, model.dtype)
    probs, gates = [], []
    with tc.no_grad():
        for lo in range(0, len(ds), batch_size):
            xb = Tensor(x[lo : lo + batch_size])
            if isinstance(model, MoEAMC):
                y, g = model.forward(xb, False)
                gates.append(g.data)
            else:
                y = model(xb, False)
            probs.append(y.data)
    return np.concatenate(probs), (np.concatenate(gates) if gates else None)


def evaluate(model, ds: Dataset) -> tuple[float, np.ndarray]:
    """Accuracy and per-example predicted class."""
    probs, _ = predict(model, ds)
    preds = classify(probs)
    return float(np.mean(preds == ds.class_idx)), preds


def _check_labels(model, ds: Dataset, what: str):
    if len(ds) == 0:
        raise ValueError(f"{what} dataset is empty")
    n_classes = model.n_classes if isinstance(model, MoEAMC) else model.cfg.n_classes
    if ds.class_idx.max() >= n_classes:
        raise ValueError(f"{what} dataset has class index >= model's {n_classes} classes")


def _val_metrics(model, x: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    total, correct = 0.0, 0
    with tc.no_grad():
        for lo in range(0, len(labels), EVAL_BATCH):
            yb = labels[lo : lo + EVAL_BATCH]
            probs = _probs(model, Tensor(x[lo : lo + EVAL_BATCH]), False)
            total += tc.cross_entropy(probs, yb).item() * len(yb)
            correct += int(np.sum(classify(probs) == yb))
    return total / len(labels), correct / len(labels)


def train(model, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig, stopper: EarlyStopping | None = None):
    """Fit `model` in place; returns (best state dict, history).

    The model is left holding the parameters of the best-validation-loss
    epoch. `stopper` lets tests inject a prepared early-stopping object.
    """
    _check_labels(model, train_ds, "training")
    _check_labels(model, val_ds, "validation")
    history = TrainHistory()
    best_state = model.state_dict()
    if cfg.max_epochs == 0:
        return best_state, history

    dtype = model.dtype
    x_tr, y_tr = _model_inputs(train_ds, dtype), train_ds.class_idx
    x_va, y_va = _model_inputs(val_ds, dtype), val_ds.class_idx
    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.adam_betas, cfg.adam_eps)
    stopper = stopper or EarlyStopping(cfg.patience)
    n = len(y_tr)

    for epoch in range(cfg.max_epochs):
        order = stream(cfg.seed, epoch).permutation(n)
        running, seen = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            if len(idx) < 2 and lo > 0:
                continue  # a lone trailing example cannot feed batch statistics
            probs = _probs(model, Tensor(x_tr[idx]), True)
            loss = tc.cross_entropy(probs, y_tr[idx])
            opt.zero_grad()
            loss.backward(params)
            opt.step()
            running += loss.item() * len(idx)
            seen += len(idx)
        train_loss = running / seen
        val_loss, val_acc = _val_metrics(model, x_va, y_va)
        history.records.append(EpochRecord(epoch, train_loss, val_loss, val_acc))
        if stopper.update(val_loss):
            best_state = model.state_dict()
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f", epoch, train_loss, val_loss, val_acc)
        if stopper.should_stop:
            history.stopped_early = True
            break

    history.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    return best_state, history
