"""Mini-batch training loop around :mod:`icepll.nn` and :mod:`icepll.optim`."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .losses import LossConfig, batch_loss_and_grad
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class EmptyDataset(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        self.epochs, self.batch_size, self.seed, self.lr = int(self.epochs), int(self.batch_size), int(self.seed), float(self.lr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


def train(net: nn.Network, x, y, config: TrainConfig, truth=None, state: AdamState | None = None):
    """Train ``net`` in place on inputs ``x`` and target vectors ``y``.

    ``truth`` holds the class index each prediction is scored against for the
    running training accuracy; it defaults to ``argmax(y)``. Each epoch visits
    a fresh seeded permutation. Returns ``(net, history, state)`` where the
    history has one :class:`EpochRecord` per epoch (mean batch loss, accuracy
    of the training-mode predictions made along the way).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if len(y) != n:
        raise ValueError(f"{n} inputs vs {len(y)} label rows")
    truth = np.argmax(y, axis=1) if truth is None else np.asarray(truth)
    shuffle_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)
    state = state or AdamState(lr=config.lr)

    history = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        losses, correct = [], 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            z, cache = nn.forward(net, x[idx], training=True, rng=dropout_rng)
            loss, dz = batch_loss_and_grad(z, y[idx], config.loss)
            grads = nn.backward(net, cache, dz)
            adam_step(net.params, grads, state)
            losses.append(loss)
            correct += int(np.sum(np.argmax(z, axis=1) == truth[idx]))
        rec = EpochRecord(epoch, float(np.mean(losses)), correct / n)
        history.append(rec)
        log.debug("epoch %d loss %.5f acc %.4f", rec.epoch, rec.loss, rec.accuracy)
    return net, history, state
