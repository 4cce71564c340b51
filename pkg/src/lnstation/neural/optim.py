"""Named parameter sets and SGD with momentum, weight decay and step drops."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, StateError
from .autodiff import Tensor


@dataclass
class TrainConfig:
    """Optimisation hyper-parameters.

    Defaults are the full-scale recipe (100 epochs, batch 128, lr 0.01
    dropping tenfold at epochs 30/50/70, focal loss alpha 0.25 gamma 2);
    the desk profile overrides sizes and schedule.
    """

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    epochs: int = 100
    batch_size: int = 128
    lr_drop_epochs: tuple = (30, 50, 70)
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    augment: bool = True

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        if self.lr < 0:
            # lr = 0 is allowed: it turns the trainer into a pure
            # evaluation loop with bit-identical parameters, which the
            # no-op tests rely on.
            raise ConfigError(f"TrainConfig: lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"TrainConfig: momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"TrainConfig: weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0:
            raise ConfigError(f"TrainConfig: epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"TrainConfig: batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.focal_alpha < 1:
            raise ConfigError(f"TrainConfig: focal_alpha must be in (0, 1), got {self.focal_alpha}")
        if self.focal_gamma < 0:
            raise ConfigError(f"TrainConfig: focal_gamma must be >= 0, got {self.focal_gamma}")


class ParameterSet:
    """Ordered name -> Tensor mapping with per-parameter momentum buffers."""

    def __init__(self):
        self._params: dict = {}
        self._momentum: dict = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"ParameterSet: duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._momentum[name] = np.zeros_like(t.data)
        return t

    def add_uniform(self, name: str, shape, fan_in: int, rng: np.random.Generator) -> Tensor:
        """He-style uniform init, U(-sqrt(6/fan_in), sqrt(6/fan_in)).

        The relu gain keeps input-driven variance roughly constant per
        layer; smaller bounds make deep stacks collapse toward constant
        outputs before training can pick up the signal.
        """
        bound = np.sqrt(6.0 / max(int(fan_in), 1))
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return list(self._params.items())

    def momentum(self, name: str) -> np.ndarray:
        return self._momentum[name]

    @property
    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def scale_grads(self, factor: float) -> None:
        for t in self._params.values():
            if t.grad is not None:
                t.grad *= factor

    def state_arrays(self) -> dict:
        """Parameter payload for checkpointing (values only)."""
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ConfigError(
                f"ParameterSet: payload mismatch, missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ConfigError(
                    f"ParameterSet: {name!r} has shape {arr.shape}, expected {t.data.shape}"
                )
            t.data = arr.copy()


def effective_lr(cfg: TrainConfig, epoch: int) -> float:
    """Base lr divided tenfold at every configured drop epoch reached."""
    n_drops = sum(1 for d in cfg.lr_drop_epochs if epoch >= d)
    return cfg.lr * 10.0**-n_drops


def sgd_step(params: ParameterSet, cfg: TrainConfig, epoch: int) -> None:
    """v <- momentum v + grad + wd w;  w <- w - lr_eff v.

    Momentum buffers persist across lr drops. Raises StateError if any
    parameter has no gradient (no backward since the last zero_grad).
    """
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise StateError(f"sgd_step: parameters without gradients: {missing}")
    lr = effective_lr(cfg, epoch)
    for name, t in params.items():
        v = params.momentum(name)
        v *= cfg.momentum
        v += t.grad
        if cfg.weight_decay:
            v += cfg.weight_decay * t.data
        t.data -= lr * v
