"""Adam, the epoch loop, weighted precision/recall/F1 and a throughput bench."""

from __future__ import annotations

import csv
import json
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetManifest, batches, save_checkpoint
from .errors import DataError, NumericError
from .layers import softmax_cross_entropy

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_weighted_f1")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One in-place Adam update. Non-finite gradients refuse the whole step."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}; step refused")
    if state.lr == 0:
        state.t += 1
        return
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


# -- metrics --------------------------------------------------------------

def confusion_matrix(y_true, y_pred, classes: int) -> np.ndarray:
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def _safe_div(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros_like(a), where=b != 0)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    accuracy: float
    loss: float = float("nan")

    @classmethod
    def from_confusion(cls, cm, loss: float = float("nan")) -> "MetricsReport":
        cm = np.asarray(cm, dtype=np.int64)
        tp = np.diag(cm)
        support = cm.sum(axis=1)
        precision = _safe_div(tp, cm.sum(axis=0))
        recall = _safe_div(tp, support)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        n = support.sum()
        w = support / n if n else np.zeros(len(support))
        return cls(cm, precision, recall, f1, support, float(w @ precision), float(w @ recall),
                   float(w @ f1), float(tp.sum() / n) if n else 0.0, loss)

    def to_dict(self) -> dict:
        return {
            "confusion_matrix": self.confusion.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "support": self.support.tolist(),
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
            "accuracy": self.accuracy,
            "loss": self.loss,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(logits, axis=1)


def evaluate(model, manifest: DatasetManifest, split: str, batch_size: int = 32) -> MetricsReport:
    if not manifest.split(split):
        raise DataError(f"split {split!r} is empty")
    k = model.graph.classes
    cm = np.zeros((k, k), dtype=np.int64)
    total, count = 0.0, 0
    for x, y in batches(manifest, split, batch_size, shuffle=False, augment_mode="eval"):
        logits = model.forward(x, "infer")
        loss, _ = softmax_cross_entropy(logits.astype(np.float64), y)
        total += loss * len(y)
        count += len(y)
        cm += confusion_matrix(y, predict(logits), k)
    return MetricsReport.from_confusion(cm, total / count)


# -- training -------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_weighted_f1: float
    train_accuracy: float


def train_epoch(model, manifest, state: AdamState, batch_size: int, rng, epoch: int = 1):
    """One pass over the train split; returns (mean loss, accuracy)."""
    params = {name: p for name, p, _ in model.named_params()}
    total, correct, count = 0.0, 0, 0
    for b, (x, y) in enumerate(batches(manifest, "train", batch_size, shuffle=True, rng=rng,
                                       augment_mode="train"), start=1):
        try:
            logits = model.forward(x, "train")
            loss, dlogits = softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise NumericError("non-finite loss")
            grads = model.backward(dlogits)
            adam_step(params, grads, state)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch} batch {b}: {exc}") from exc
        total += loss * len(y)
        correct += int((predict(logits) == y).sum())
        count += len(y)
    return total / count, correct / count


def fit(model, manifest: DatasetManifest, epochs: int, lr: float = 1e-3, batch_size: int = 32,
        seed: int = 0, checkpoint_path=None, log_path=None, on_epoch=None) -> list[EpochRecord]:
    """Train with Adam; checkpoint whenever val weighted-F1 strictly improves."""
    for split in ("train", "val"):
        if not manifest.has_split(split):
            raise DataError(f"manifest has no {split!r} split")
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    records = []
    best = -1.0
    log = open(log_path, "w", newline="", encoding="utf-8") if log_path else None
    try:
        writer = csv.writer(log, lineterminator="\n") if log else None
        if writer:
            writer.writerow(LOG_COLUMNS)
        for epoch in range(1, epochs + 1):
            train_loss, train_acc = train_epoch(model, manifest, state, batch_size, rng, epoch)
            val = evaluate(model, manifest, "val", batch_size)
            rec = EpochRecord(epoch, train_loss, val.loss, val.weighted_f1, train_acc)
            records.append(rec)
            if writer:
                writer.writerow([epoch, repr(train_loss), repr(val.loss), repr(val.weighted_f1)])
                log.flush()
            if checkpoint_path is not None and val.weighted_f1 > best:
                best = val.weighted_f1
                save_checkpoint(checkpoint_path, model)
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        if log:
            log.close()
    return records


# -- benchmark ------------------------------------------------------------

def host_descriptor() -> str:
    return (f"{platform.system()} {platform.machine()} cpus={os.cpu_count()} "
            f"python={platform.python_version()} numpy={np.__version__}")


@dataclass
class BenchReport:
    model: str
    batch: int
    iters: int
    warmup: int
    precision: str
    input_shape: tuple
    total_macs: int
    images_per_second: float
    median_latency_s: float
    host: str

    def header(self) -> str:
        c, h, w = self.input_shape
        return (f"model={self.model} batch={self.batch} precision={self.precision} "
                f"input={c}x{h}x{w} macs_per_image={self.total_macs:,}")


def bench(model, batch: int = 1, iters: int = 10, warmup: int = 2, seed: int = 0) -> BenchReport:
    """Median images/second of infer-mode forward passes after ``warmup`` discarded runs."""
    from .accounting import cost_report

    if batch < 1 or iters < 1 or warmup < 0:
        raise ValueError("batch and iters must be positive, warmup non-negative")
    x = np.random.default_rng(seed).standard_normal((batch,) + model.graph.input_shape).astype(model.dtype)
    # batchnorm needs statistics before infer mode; one train pass on random data provides them
    if any(not getattr(layer, "stats_ready", True) for _, layer in _all_modules(model)):
        model.forward(x, "train")
    times = []
    for i in range(warmup + iters):
        t0 = time.perf_counter()
        model.forward(x, "infer")
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt)
    med = statistics.median(times)
    precision = {np.dtype(np.float32): "single", np.dtype(np.float64): "double"}[model.dtype]
    return BenchReport(model.graph.name, batch, iters, warmup, precision, model.graph.input_shape,
                       cost_report(model.graph).total_macs, batch / med, med, host_descriptor())


def _all_modules(model):
    for name, layer in model.named_layers():
        yield from layer.named_modules(f"{name}.")


def read_log(path) -> list[dict]:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
