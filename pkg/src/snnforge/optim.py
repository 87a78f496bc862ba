"""Minimal optimizers over dicts of parameter arrays.

Parameters are keyed by (layer id, field name); the optimizers mutate the
arrays in place and keep their own per-key state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerConfig:
    kind: str = "adam"  # "adam" or "sgd"
    lr: float = 1e-3
    momentum: float = 0.9  # sgd only
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class _Adam:
    cfg: OptimizerConfig
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        for key, g in grads.items():
            p = params[key]
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p -= self.cfg.lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class _SGD:
    cfg: OptimizerConfig
    velocity: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        mu = self.cfg.momentum
        for key, g in grads.items():
            vel = self.velocity.setdefault(key, np.zeros_like(g))
            vel *= mu
            vel += g
            params[key] -= self.cfg.lr * vel


def make_optimizer(cfg: OptimizerConfig):
    return _Adam(cfg) if cfg.kind == "adam" else _SGD(cfg)
