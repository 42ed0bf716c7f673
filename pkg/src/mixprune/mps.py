"""Bit-width selection parameters: sampling, effective tensors, discretization.

Each selector group owns one raw matrix `gamma` (C_out x |P_W|) for its member
layers' weight channels and, when the group has quantized activations, one raw
vector `delta` (|P_X|). Sampling turns raw parameters into a probability
distribution via softmax (SM), argmax (AM) or hard Gumbel-softmax (HGSM); the
two hard methods backpropagate through the tau-softened softmax Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import quant
from .errors import ConfigError, DegenerateModelError

SAMPLING_METHODS = ("sm", "am", "hgsm")


@dataclass
class SelectorParams:
    """Raw selection parameters for one selector group."""

    gamma: Tensor                 # (C_out, |P_W|)
    delta: Tensor | None          # (|P_X|,) or None when the group has no quantized activation
    tau: float = 1.0
    method: str = "sm"

    def state_arrays(self, group: str) -> dict:
        out = {f"{group}.gamma": self.gamma.data}
        if self.delta is not None:
            out[f"{group}.delta"] = self.delta.data
        return out


@dataclass
class Assignment:
    """Discretized per-channel weight bits and per-layer activation bits."""

    weight_bits: dict       # layer name -> int array (C_out,)
    act_bits: dict          # layer name -> int (bits of the layer's output activation)

    def copy(self) -> "Assignment":
        return Assignment(
            {k: v.copy() for k, v in self.weight_bits.items()},
            dict(self.act_bits),
        )

    def to_json(self) -> dict:
        return {
            "weight_bits": {k: v.tolist() for k, v in self.weight_bits.items()},
            "act_bits": dict(self.act_bits),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Assignment":
        return cls(
            {k: np.asarray(v, dtype=np.int64) for k, v in doc["weight_bits"].items()},
            {k: int(v) for k, v in doc["act_bits"].items()},
        )


def init_selectors(pset: quant.PrecisionSet, rows: int = 1, dtype=np.float32) -> np.ndarray:
    """Raw init p / max(P) per candidate, identical for every row.

    Ranks candidates so that after sampling the highest precision dominates
    and 0-bit starts with the least mass.
    """
    row = np.asarray([p / pset.max for p in pset.bits], dtype=dtype)
    return np.tile(row, (rows, 1)) if rows > 1 else row.copy()


def softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _argmax_highest(x: np.ndarray) -> np.ndarray:
    """Row argmax with ties broken toward the highest index (highest precision)."""
    rev = x[..., ::-1]
    return x.shape[-1] - 1 - np.argmax(rev, axis=-1)


def _one_hot(idx: np.ndarray, k: int, dtype) -> np.ndarray:
    out = np.zeros(idx.shape + (k,), dtype=dtype)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def sample(params: Tensor, method: str, tau: float, noise: np.ndarray | None = None,
           surrogate: bool = False) -> Tensor:
    """Sample selection probabilities from raw parameters (rows = last axis).

    SM: softmax(params / tau). AM: one-hot at argmax(params), straight-through
    gradient of softmax(params / tau). HGSM: one-hot at argmax(params + noise)
    with Gumbel noise, straight-through gradient of the softened Gumbel-softmax.
    `surrogate=True` returns the softened forward value (same backward), which
    is what finite-difference checks must evaluate.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if method not in SAMPLING_METHODS:
        raise ValueError(f"unknown sampling method '{method}'")
    logits = params.data
    if method == "hgsm":
        if noise is None:
            raise ValueError("hgsm sampling requires a noise array")
        logits = logits + noise.astype(params.data.dtype)
    soft = softmax_rows(logits / tau)
    if method == "sm" or surrogate:
        value = soft
    else:
        value = _one_hot(_argmax_highest(logits), logits.shape[-1], params.data.dtype)
    out = Tensor(value, params.requires_grad, (params,))

    def bwd(g):
        if params.requires_grad:
            inner = (g * soft).sum(axis=-1, keepdims=True)
            params.accumulate(soft * (g - inner) / tau)

    out._backward = bwd
    return out


def effective_weights(w: Tensor, gamma_hat: Tensor, pset: quant.PrecisionSet,
                      rounding: bool = True) -> Tensor:
    """Per-channel convex combination of the fake-quantized weight variants.

    All variants derive from the single shared real tensor `w`; the 0-bit
    variant is identically zero, so its term is omitted (its gradient
    contribution to gamma_hat is zero).
    """
    if gamma_hat.data.shape != (w.data.shape[0], len(pset)):
        raise ValueError(
            f"gamma_hat shape {gamma_hat.data.shape} does not match "
            f"{w.data.shape[0]} channels x {len(pset)} precisions"
        )
    bshape = (w.data.shape[0],) + (1,) * (w.data.ndim - 1)
    acc = None
    for j, p in enumerate(pset.bits):
        if p == 0:
            continue
        coeff = ad.reshape(ad.get_column(gamma_hat, j), bshape)
        term = ad.mul(coeff, quant.fake_quantize_weights(w, p, rounding))
        acc = term if acc is None else ad.add(acc, term)
    return acc


def effective_bias(b: Tensor, gamma_hat: Tensor, pset: quant.PrecisionSet) -> Tensor:
    """Bias scaled by each channel's nonzero-precision mass.

    Keeps the bias in full precision while guaranteeing that a fully pruned
    channel (one-hot at 0-bit) contributes neither output nor gradient.
    """
    mass = ad.const_minus(1.0, ad.get_column(gamma_hat, pset.index(0)))
    return ad.mul(mass, b)


def effective_activations(x: Tensor, delta_hat: Tensor, pset: quant.PrecisionSet,
                          clip: Tensor, rounding: bool = True) -> Tensor:
    """Linear combination of the activation tensor quantized at all candidate bits."""
    if delta_hat.data.shape != (len(pset),):
        raise ValueError(f"delta_hat shape {delta_hat.data.shape} != ({len(pset)},)")
    acc = None
    for j, p in enumerate(pset.bits):
        coeff = ad.get_column(delta_hat, j)
        term = ad.mul(coeff, quant.fake_quantize_activations(x, clip, p, rounding))
        acc = term if acc is None else ad.add(acc, term)
    return acc


def rescale_weights(w: np.ndarray, gamma_hat: np.ndarray, pset: quant.PrecisionSet) -> np.ndarray:
    """Divide each channel by its nonzero-bit selector mass (applied once at search start)."""
    zero_col = pset.index(0)
    mass = 1.0 - gamma_hat[:, zero_col]
    if np.any(mass <= 1e-6):
        raise DegenerateModelError(
            "selector initialization places all mass on 0-bit for some channel; cannot rescale"
        )
    return w / mass.reshape((w.shape[0],) + (1,) * (w.ndim - 1))


def discretize_row(gamma_hat_rows: np.ndarray, pset: quant.PrecisionSet) -> np.ndarray:
    """Argmax per row, exact ties resolved toward the higher precision."""
    idx = _argmax_highest(gamma_hat_rows)
    return np.asarray(pset.bits, dtype=np.int64)[idx]


def temperature_step(epoch: int, initial: float = 1.0, factor: float = float(np.exp(-0.045)),
                     floor: float = 1e-3) -> float:
    """tau(e) = initial * factor**e, floored."""
    if not 0 < factor <= 1:
        raise ConfigError(f"temperature factor must be in (0, 1], got {factor}")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return max(initial * factor ** epoch, floor)


def temperature_factor_for(target: float, epochs: int) -> float:
    """Factor giving the same final temperature over a shorter run."""
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    return float(np.exp(np.log(target) / epochs))
