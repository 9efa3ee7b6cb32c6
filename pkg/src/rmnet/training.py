"""Weighted cross-entropy, SGD with heavy-ball momentum, and the epoch loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from .autodiff import DimensionError, NonFiniteError, Tensor, backward, make_op, no_grad, zero_grad
from .data import Dataset, ImageSet, Normalizer

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {detail}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    lr0: float = 0.01
    decay_factor: float = 0.1
    decay_every: int = 20
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch: int = 32
    epochs: int = 60
    seed: int = 0

    def __post_init__(self):
        for name in ("decay_factor", "decay_every", "batch", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr0", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.decay_factor ** (epoch // self.decay_every)


def class_weights(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights n / (M * n_c); classes absent from ``labels`` get weight 1."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    w = np.ones(num_classes)
    present = counts > 0
    w[present] = len(labels) / (num_classes * counts[present])
    return w


def weighted_ce(logits: Tensor, labels, weights=None) -> Tensor:
    """Batch mean of w[y_i] * -log softmax(logits_i)[y_i]."""
    z = logits.data
    if z.ndim == 4:
        z = z.reshape(z.shape[0], -1)
    n, m = z.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= m:
        raise ValueError(f"labels must lie in [0, {m})")
    w = np.ones(m) if weights is None else np.asarray(weights, dtype=np.float64)
    shifted = z.astype(np.float64) - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(n), labels]
    wy = w[labels]
    loss = np.asarray((wy * nll).mean(), dtype=logits.dtype)

    def fn(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        grad = (g * wy / n)[:, None] * p
        return (grad.reshape(logits.shape).astype(logits.dtype),)

    return make_op("weighted_ce", loss, (logits,), fn)


class SGD:
    """v <- momentum * v + g + weight_decay * w;  w <- w - lr * v."""

    def __init__(self, params: Iterable[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, epoch: int) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.velocity, self.cfg, epoch)

    def zero_grad(self) -> None:
        zero_grad(self.params)


def sgd_step(params, grads, state, cfg: TrainConfig, epoch: int) -> None:
    lr = cfg.lr(epoch)
    for p, g, v in zip(params, grads, state):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient {g.shape} does not match parameter {p.data.shape}")
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            v += cfg.weight_decay * p.data
        p.data = p.data - np.asarray(lr, dtype=p.dtype) * v


def predict(model, images: ImageSet, norm: Normalizer, batch: int = 100) -> tuple[np.ndarray, np.ndarray | None]:
    """Eval-mode logits and (for hasher heads) embeddings over a split."""
    logits, embs = [], []
    with no_grad():
        for x, _ in images.batches(batch, "eval", norm):
            emb, out = model.head_from_features(model.features(Tensor(x.astype(model_dtype(model)))))
            logits.append(out.data)
            if emb is not None:
                embs.append(emb.data)
    return np.concatenate(logits), (np.concatenate(embs) if embs else None)


def model_dtype(model):
    return model.parameters()[0].dtype


def accuracy(model, images: ImageSet, norm: Normalizer) -> float:
    logits, _ = predict(model, images, norm)
    return float((logits.argmax(axis=1) == images.labels).mean())


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    train_acc: float
    val_acc: float
    seconds: float

    def to_line(self) -> str:
        # wall time is left out so that logs of identical runs compare equal
        return " ".join(f"{k}={_fmt(v)}" for k, v in asdict(self).items() if k != "seconds")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def train(model, data: Dataset, cfg: TrainConfig, weights: np.ndarray | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None, evaluate: bool = True) -> list[EpochRecord]:
    """Train in place.  Batch order, crops and flips derive from ``cfg.seed`` only."""
    num_classes = model.graph.num_classes
    if weights is None:
        weights = class_weights(data.train.labels, num_classes)
    opt = SGD(model.parameters(), cfg)
    rng = np.random.default_rng(cfg.seed)
    dtype = model_dtype(model)
    history = []
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        total, seen, correct = 0.0, 0, 0
        for b, (x, y) in enumerate(data.train.batches(cfg.batch, "train", data.norm, rng, shuffle=True)):
            try:
                logits = model(Tensor(x.astype(dtype)))
                loss = weighted_ce(logits, y, weights)
                opt.zero_grad()
                backward(loss)
            except NonFiniteError as exc:
                raise DivergenceError(epoch, b, str(exc)) from exc
            if not math.isfinite(loss.item()):
                raise DivergenceError(epoch, b, "non-finite loss")
            opt.step(epoch)
            total += loss.item() * len(y)
            seen += len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
        val = accuracy(model, data.val, data.norm) if evaluate and len(data.val) else float("nan")
        rec = EpochRecord(epoch, cfg.lr(epoch), total / seen, correct / seen, val, time.perf_counter() - start)
        log.info("%s", rec.to_line())
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return history
