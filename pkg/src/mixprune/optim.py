"""SGD-with-momentum and Adam over name->array parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class OptimSpec:
    kind: str = "sgd"
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer '{self.kind}'")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    @classmethod
    def from_json(cls, doc: dict) -> "OptimSpec":
        return cls(**{k: doc[k] for k in doc if k in cls.__dataclass_fields__})


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            if g is None:
                continue
            w = params[name]
            if self.weight_decay:
                g = g + self.weight_decay * w
            if self.momentum:
                v = self.velocity.get(name)
                v = g if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            w -= self.lr * g


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            if g is None:
                continue
            w = params[name]
            if self.weight_decay:
                g = g + self.weight_decay * w
            m = self.m.get(name, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(name, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            w -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(spec: OptimSpec):
    if spec.kind == "adam":
        return Adam(spec.lr, weight_decay=spec.weight_decay)
    return SGD(spec.lr, momentum=spec.momentum, weight_decay=spec.weight_decay)
