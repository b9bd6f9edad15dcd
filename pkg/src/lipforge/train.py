"""Minibatch SGD (optionally PGD-adversarial) and forge calibration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, pgd
from .data import Dataset
from .network import INFERENCE, TRACKING, Model
from .tensor import ContractError, GradientTape, Tensor

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    adversarial: bool = False
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")
        if not self.lr >= 0:
            raise ContractError(f"learning rate must be >= 0, got {self.lr}")
        if self.optimizer not in ("sgd", "sgd-momentum"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    model: Model
    loss: list
    train_accuracy: list
    test_accuracy: list


def accuracy(model: Model, ds: Dataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(model.predict(ds.inputs) == ds.labels))


def train(model: Model, data: Dataset, config: TrainConfig, test: Dataset | None = None) -> TrainResult:
    """Train a copy of ``model`` with cross-entropy; returns it with per-epoch history.

    With ``config.adversarial`` each minibatch is replaced by PGD adversaries
    crafted against the current weights.
    """
    if model.classes != data.classes:
        raise ContractError(f"model has {model.classes} outputs, data has {data.classes} classes")
    if len(data) == 0:
        raise ContractError("cannot train on an empty dataset")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    mu = config.momentum if config.optimizer == "sgd-momentum" else 0.0
    velocity = [np.zeros(p.shape) for p in model.params()]
    history = TrainResult(model, [], [], [])
    n = len(data)
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total, seen = 0.0, 0
        for s in range(0, n, config.batch_size):
            idx = perm[s : s + config.batch_size]
            xb, yb = data.inputs[idx], data.labels[idx]
            if config.adversarial:
                acfg = replace(config.attack, seed=config.attack.seed + step)
                xb = pgd(model, xb, yb, acfg)
            params = model.params()
            with GradientTape() as tape:
                tape.watch(*params)
                loss = T.softmax_cross_entropy(model.forward(Tensor(xb)), yb)
            grads = tape.gradient(loss, params)
            value = loss.item()
            if not np.isfinite(value) or not all(np.all(np.isfinite(g.data)) for g in grads):
                raise TrainingError("loss or gradient became non-finite", epoch)
            new = []
            for p, g, v in zip(params, grads, velocity):
                if mu:
                    v *= mu
                    v += g.data
                    upd = v
                else:
                    upd = g.data
                new.append(Tensor._wrap(p.data - config.lr * upd))
            model.set_params(new)
            total += value * len(idx)
            seen += len(idx)
            step += 1
        history.loss.append(total / seen)
        history.train_accuracy.append(accuracy(model, data))
        history.test_accuracy.append(accuracy(model, test) if test is not None else float("nan"))
        logger.info("epoch %d loss %.4f train %.3f", epoch, history.loss[-1], history.train_accuracy[-1])
    return history


def calibrate_forge(model: Model, data, c_ratio: float | None = None, subset: int | None = None,
                    seed: int = 0, batch_size: int = 512) -> Model:
    """One gradient-free tracking pass over ``data``; returns a copy in inference mode.

    Tracked maxima accumulate on top of the current ``b`` values.  ``subset``
    calibrates on a seeded random sample of that many inputs instead.
    """
    model = model.copy()
    if not model.forge_layers():
        raise ContractError("model has no forge layer to calibrate")
    if isinstance(data, Dataset):
        inputs = data.sample(subset, seed).inputs if subset else data.inputs
    else:
        inputs = np.asarray(data, dtype=np.float64)
        if subset:
            rng = np.random.default_rng(seed)
            inputs = inputs[np.sort(rng.choice(len(inputs), size=min(subset, len(inputs)), replace=False))]
    if c_ratio is not None:
        model.set_c_ratio(c_ratio)
    model.set_mode(TRACKING)
    for s in range(0, len(inputs), batch_size):
        model.forward(inputs[s : s + batch_size])
    model.set_mode(INFERENCE)
    return model
