"""Synthetic image classification data and the dataset container format.

Each class is a fixed mixture of Gaussian bumps at class-specific positions;
samples jitter the bump centers and amplitudes and add pixel noise, so classes
are separated by spatial structure rather than by mean intensity alone. Splits
default to 66% / 17% / 17% train / val / test. Everything derives from one
seed, so regeneration is bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from .containers import read_container, write_container
from .errors import ConfigError

MAGIC = b"MXDS"
BUMPS_PER_CLASS = 3


@dataclass
class SynthSpec:
    classes: int = 4
    height: int = 16
    width: int = 16
    channels: int = 1
    samples: int = 2000
    noise: float = 0.15
    seed: int = 0
    splits: tuple = (0.66, 0.17, 0.17)

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.samples < self.classes:
            raise ConfigError("need at least one sample per class")
        if self.height < 4 or self.width < 4 or self.channels < 1:
            raise ConfigError(f"invalid image dims {self.channels}x{self.height}x{self.width}")
        if abs(sum(self.splits) - 1.0) > 1e-9 or len(self.splits) != 3:
            raise ConfigError(f"splits must be three fractions summing to 1, got {self.splits}")

    @classmethod
    def from_json(cls, doc: dict) -> "SynthSpec":
        kwargs = {k: doc[k] for k in doc if k in cls.__dataclass_fields__}
        if "splits" in kwargs:
            kwargs["splits"] = tuple(kwargs["splits"])
        return cls(**kwargs)


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def classes(self) -> int:
        return int(max(self.y_train.max(), self.y_val.max(), self.y_test.max())) + 1

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])

    def class_weights(self) -> np.ndarray:
        """Inverse-frequency class weights computed on the training split."""
        counts = np.bincount(self.y_train, minlength=self.classes).astype(np.float64)
        counts = np.maximum(counts, 1)
        w = counts.sum() / (len(counts) * counts)
        return w.astype(np.float32)


def make_synthetic(spec: SynthSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float32)

    margin = 2.0
    centers = rng.uniform(margin, (spec.height - margin, spec.width - margin),
                          size=(spec.classes, BUMPS_PER_CLASS, 2)).astype(np.float32)
    sigmas = rng.uniform(1.2, 2.8, size=(spec.classes, BUMPS_PER_CLASS)).astype(np.float32)
    amps = (rng.uniform(0.7, 1.3, size=(spec.classes, BUMPS_PER_CLASS))
            * rng.choice([-1.0, 1.0], size=(spec.classes, BUMPS_PER_CLASS))).astype(np.float32)

    labels = np.arange(spec.samples, dtype=np.int64) % spec.classes
    labels = labels[rng.permutation(spec.samples)]

    x = np.zeros((spec.samples, spec.channels, spec.height, spec.width), dtype=np.float32)
    for i, c in enumerate(labels):
        img = np.zeros((spec.height, spec.width), dtype=np.float32)
        jitter = rng.normal(0.0, 0.8, size=(BUMPS_PER_CLASS, 2)).astype(np.float32)
        gain = rng.normal(1.0, 0.15, size=BUMPS_PER_CLASS).astype(np.float32)
        for b in range(BUMPS_PER_CLASS):
            cy, cx = centers[c, b] + jitter[b]
            img += amps[c, b] * gain[b] * np.exp(
                -((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigmas[c, b] ** 2))
        x[i] = img[None] + rng.normal(0.0, spec.noise, size=(spec.channels, spec.height, spec.width))

    n_train = int(np.floor(spec.splits[0] * spec.samples))
    n_val = int(np.floor(spec.splits[1] * spec.samples))
    sl_train = slice(0, n_train)
    sl_val = slice(n_train, n_train + n_val)
    sl_test = slice(n_train + n_val, spec.samples)

    # normalize with training-split statistics
    mu = float(x[sl_train].mean())
    sd = float(x[sl_train].std()) or 1.0
    x = (x - mu) / sd

    meta = {"generator": asdict(spec) | {"splits": list(spec.splits)},
            "normalization": {"mean": mu, "std": sd}}
    return Dataset(x[sl_train], labels[sl_train], x[sl_val], labels[sl_val],
                   x[sl_test], labels[sl_test], meta)


def save_dataset(ds: Dataset, path) -> None:
    tensors = {
        "x_train": ds.x_train, "y_train": ds.y_train,
        "x_val": ds.x_val, "y_val": ds.y_val,
        "x_test": ds.x_test, "y_test": ds.y_test,
    }
    write_container(path, MAGIC, 1, {"meta": ds.meta}, tensors)


def load_dataset(path) -> Dataset:
    _, manifest, t = read_container(path, MAGIC, max_version=1)
    return Dataset(t["x_train"], t["y_train"], t["x_val"], t["y_val"],
                   t["x_test"], t["y_test"], manifest.get("meta", {}))
