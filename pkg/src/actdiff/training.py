"""Training configuration, learning-rate schedule and AdamW."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor


class NumericError(FloatingPointError):
    """A non-finite value appeared during training or inference."""


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 64
    epochs: int = 60
    steps_per_epoch: int = 50
    warmup_epochs: int = 10
    peak_lr: float = 5e-4
    decay_rate: float = 0.5
    decay_every: int = 5
    decay_last_k_epochs: int = 15
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch_size, epochs and steps_per_epoch must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be in [0, epochs={self.epochs})")
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be >= 0")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be positive")
        if not 0 <= self.decay_last_k_epochs <= self.epochs:
            raise ValueError("decay_last_k_epochs must be in [0, epochs]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(cfg: TrainingConfig, epoch: int, step: int = 0) -> float:
    """LR for ``step`` (within epoch) of ``epoch`` (both 0-based).

    Linear warmup reaching ``peak_lr`` on the last warmup step, constant, then
    multiplied by ``decay_rate`` at the start of every ``decay_every``-epoch
    block inside the final ``decay_last_k_epochs`` epochs.
    """
    if epoch < cfg.warmup_epochs:
        done = epoch * cfg.steps_per_epoch + step + 1
        return cfg.peak_lr * done / (cfg.warmup_epochs * cfg.steps_per_epoch)
    decay_start = cfg.epochs - cfg.decay_last_k_epochs
    if cfg.decay_last_k_epochs and epoch >= decay_start:
        return cfg.peak_lr * cfg.decay_rate ** ((epoch - decay_start) // cfg.decay_every + 1)
    return cfg.peak_lr


class AdamW:
    def __init__(self, params: list[Tensor], weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        # in-place updates; the operation order matches the textbook formula
        # m = b1 m + (1 - b1) g, v = b2 v + (1 - b2) g^2,
        # p = p (1 - lr wd) - lr (m / c1) / (sqrt(v / c2) + eps)
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                continue
            m, v = self.m[i], self.v[i]
            m *= self.b1
            m += (1.0 - self.b1) * g
            g2 = (1.0 - self.b2) * g
            g2 *= g
            v *= self.b2
            v += g2
            if lr == 0.0:
                continue
            update = m / c1
            denom = v / c2
            np.sqrt(denom, out=denom)
            denom += self.eps
            update /= denom
            update *= lr
            fresh = p.data * (1.0 - lr * self.weight_decay)
            fresh -= update
            p.assign(fresh, copy=False)
