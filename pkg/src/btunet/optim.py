"""Adam optimizer, plateau learning-rate decay, and early stopping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Module, Tensor
from .errors import ConfigError, TrainingError

LR_FLOOR = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    early_stop_patience: int = 12
    min_delta: float = 1e-4
    max_epochs: int = 100
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.min_delta < 0:
            raise ConfigError("min_delta must be non-negative")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs it)")


class Adam:
    """Bias-corrected first/second-moment optimizer over named parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                bad = int(np.size(g) - np.isfinite(g).sum())
                raise TrainingError(
                    f"non-finite gradient for '{name}' at step {self.t} "
                    f"({bad}/{np.size(g)} bad entries)"
                )
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class PlateauSchedule:
    """Multiply lr by `plateau_factor` after `plateau_patience` stale epochs."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.learning_rate
        self.best = np.inf
        self.stale = 0

    def update(self, loss: float) -> float:
        if self.best - loss > self.cfg.min_delta:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.cfg.plateau_patience:
                self.lr = max(self.lr * self.cfg.plateau_factor, LR_FLOOR)
                self.stale = 0
        return self.lr


class EarlyStopper:
    """Stop after `early_stop_patience` stale epochs; keeps the best state."""

    def __init__(self, cfg: TrainConfig, module: Module):
        self.cfg = cfg
        self.module = module
        self.best = np.inf
        self.best_epoch = 0
        self.best_state: dict[str, np.ndarray] | None = None
        self.stale = 0

    def update(self, loss: float, epoch: int) -> bool:
        if self.best - loss > self.cfg.min_delta:
            self.best = loss
            self.best_epoch = epoch
            self.best_state = self.module.state_arrays()
            self.stale = 0
            return False
        self.stale += 1
        return self.stale >= self.cfg.early_stop_patience

    def restore_best(self) -> None:
        if self.best_state is not None:
            self.module.load_state_arrays(self.best_state)


def index_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing singleton merges into its neighbor
    so batch norm never sees a batch of one."""
    order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks
