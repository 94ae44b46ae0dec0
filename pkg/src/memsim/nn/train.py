"""SGD training and batched inference for hardware-aware models."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..numerics import stream
from .autodiff import Tensor, softmax_cross_entropy
from .data import Dataset
from .layers import Module


class SGD:
    """Momentum SGD: v = m*v + g (+ wd*p); p -= lr*v."""

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr <= 0 or not 0 <= momentum < 1:
            raise ValueError(f"bad optimizer settings lr={lr}, momentum={momentum}")
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self._vel = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self._vel):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float | None
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochLog] = field(default_factory=list)
    halted: bool = False
    reason: str = ""

    @property
    def final_test_acc(self) -> float | None:
        return self.epochs[-1].test_acc if self.epochs else None

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs], "halted": self.halted, "reason": self.reason}


def _batches(n: int, batch_size: int, order=None):
    order = np.arange(n) if order is None else order
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def train(model: Module, data: Dataset, test: Dataset | None = None, epochs: int = 10,
          batch_size: int = 32, lr: float = 0.01, momentum: float = 0.9, seed: int = 0,
          callback=None) -> TrainLog:
    """Hardware forward, full-precision backward, SGD on the masters, then
    re-program every hardware layer (one fresh variation draw per step)."""
    opt = SGD(model.parameters(), lr, momentum)
    log = TrainLog()
    cycle = 0
    model.update_weight(cycle)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = stream(seed, "shuffle", epoch).permutation(len(data))
        total, correct, seen = 0.0, 0, 0
        for idx in _batches(len(data), batch_size, order):
            logits = model(Tensor(data.x[idx]))
            loss = softmax_cross_entropy(logits, data.y[idx])
            lv = float(loss.data)
            if not np.isfinite(lv) or not np.all(np.isfinite(logits.data)):
                log.halted, log.reason = True, f"non-finite loss at epoch {epoch}"
                return log
            opt.zero_grad()
            loss.backward()
            opt.step()
            cycle += 1
            model.update_weight(cycle)
            total += lv * len(idx)
            correct += int((logits.data.argmax(axis=1) == data.y[idx]).sum())
            seen += len(idx)
        test_acc = infer(model, test).accuracy if test is not None else None
        entry = EpochLog(epoch, total / seen, correct / seen, test_acc, time.perf_counter() - t0)
        log.epochs.append(entry)
        if callback is not None:
            callback(entry)
    return log


@dataclass
class InferResult:
    accuracy: float
    per_class: list[dict]
    confusion: np.ndarray
    predictions: np.ndarray

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "per_class": self.per_class, "confusion": self.confusion.tolist()}


def predict(model: Module, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [model(Tensor(x[idx])).data for idx in _batches(len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 0))


def infer(model: Module, data: Dataset, batch_size: int = 256) -> InferResult:
    for name, layer in model.mem_layers():
        if layer.mode == "hardware" and layer.programmed is None:
            raise RuntimeError(f"layer {name!r} is not programmed; call update_weight() first")
    pred = predict(model, data.x, batch_size).argmax(axis=1)
    k = data.n_classes
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (data.y, pred), 1)
    per_class = []
    for c in range(k):
        n = int(conf[c].sum())
        per_class.append({"class": c, "count": n, "correct": int(conf[c, c]),
                          "accuracy": conf[c, c] / n if n else None})
    acc = float(np.trace(conf) / max(len(data), 1))
    return InferResult(acc, per_class, conf, pred)
