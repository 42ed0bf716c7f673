"""Fake quantizers for weights and activations, with straight-through gradients.

Weights use symmetric per-channel min-max quantization with 2^n - 1 levels
(zero always representable); the 0-bit candidate zeroes the whole channel and
blocks its gradient. Activations use PACT: clamp to a learnable [0, clip]
range, then uniform quantization with 2^n - 1 steps.

Every quantizer takes `rounding=False` to evaluate its straight-through
surrogate (same clamping, no rounding). The backward pass is identical in
both modes, which is what makes the surrogate finite-difference checkable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CLIP_FLOOR = 1e-3  # PACT clip values are re-projected above this after each step
CLIP_INIT = 6.0


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class QuantParams:
    """Affine quantizer range [alpha, beta] at n bits; step eps = (beta-alpha)/(2^n-1)."""

    alpha: float
    beta: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"affine quantization requires n >= 1, got {self.n}")
        if not self.beta > self.alpha:
            raise ValueError(f"need beta > alpha, got [{self.alpha}, {self.beta}]")

    @property
    def eps(self) -> float:
        return (self.beta - self.alpha) / (2 ** self.n - 1)


@dataclass(frozen=True)
class PrecisionSet:
    """Ordered candidate bit-widths. Weight sets start at 0 (prune); activation sets exclude 0."""

    bits: tuple
    kind: str = "weights"  # "weights" | "activations"

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        object.__setattr__(self, "bits", bits)
        if self.kind not in ("weights", "activations"):
            raise ValueError(f"unknown precision set kind '{self.kind}'")
        if not bits or any(b2 <= b1 for b1, b2 in zip(bits, bits[1:])):
            raise ValueError(f"bit-widths must be strictly increasing, got {bits}")
        if self.kind == "weights" and (bits[0] != 0 or len(bits) < 2):
            raise ValueError(f"weight precision set must start with 0 and offer a nonzero option, got {bits}")
        if self.kind == "activations" and 0 in bits:
            raise ValueError(f"activation precision set cannot contain 0, got {bits}")

    def __len__(self):
        return len(self.bits)

    def __iter__(self):
        return iter(self.bits)

    def index(self, p: int) -> int:
        return self.bits.index(p)

    @property
    def max(self) -> int:
        return self.bits[-1]

    @property
    def nonzero(self) -> tuple:
        return tuple(b for b in self.bits if b != 0)


def affine_quantize(t: np.ndarray, params: QuantParams) -> np.ndarray:
    """Map a float tensor to n-bit unsigned integers: clamp(round((t - alpha)/eps))."""
    q = round_half_away((np.asarray(t) - params.alpha) / params.eps)
    return np.clip(q, 0, 2 ** params.n - 1).astype(np.int64)


def fake_quantize_weights_np(w: np.ndarray, n: int, rounding: bool = True) -> np.ndarray:
    """Symmetric per-channel fake quantization (channel = axis 0); n=0 zeroes everything."""
    if n == 0:
        return np.zeros_like(w)
    levels = 2 ** (n - 1) - 1  # 2^n - 1 symmetric levels including 0
    reduce_axes = tuple(range(1, w.ndim))
    scale = np.abs(w).max(axis=reduce_axes, keepdims=True) if w.ndim > 1 else np.abs(w).max(keepdims=True)
    step = np.where(scale > 0, scale / levels, 1.0)
    z = w / step
    if rounding:
        z = round_half_away(z)
    return np.clip(z, -levels, levels) * step


def fake_quantize_weights(w: Tensor, n: int, rounding: bool = True) -> Tensor:
    """Tape op for the weight fake quantizer. Backward: identity STE (zero for n=0)."""
    out = Tensor(fake_quantize_weights_np(w.data, n, rounding), w.requires_grad, (w,))

    def bwd(g):
        if w.requires_grad and n != 0:
            w.accumulate(g)

    out._backward = bwd
    return out


def fake_quantize_weights_assigned_np(w: np.ndarray, bits: np.ndarray, rounding: bool = True) -> np.ndarray:
    """Per-channel fake quantization at fixed per-channel bit-widths (0 = pruned)."""
    out = np.zeros_like(w)
    for b in np.unique(bits):
        if b == 0:
            continue
        m = bits == b
        out[m] = fake_quantize_weights_np(w[m], int(b), rounding)
    return out


def fake_quantize_weights_assigned(w: Tensor, bits: np.ndarray, rounding: bool = True) -> Tensor:
    """Tape op for fixed-assignment quantization; pruned channels block gradients."""
    out = Tensor(fake_quantize_weights_assigned_np(w.data, bits, rounding), w.requires_grad, (w,))
    alive = (bits != 0).reshape((w.data.shape[0],) + (1,) * (w.data.ndim - 1))

    def bwd(g):
        if w.requires_grad:
            w.accumulate(g * alive)

    out._backward = bwd
    return out


def fake_quantize_activations_np(x: np.ndarray, clip: float, n: int, rounding: bool = True) -> np.ndarray:
    y = np.clip(x, 0.0, clip)
    if not rounding:
        return y
    eps = clip / (2 ** n - 1)
    return round_half_away(y / eps) * eps


def fake_quantize_activations(x: Tensor, clip: Tensor, n: int, rounding: bool = True) -> Tensor:
    """PACT fake quantizer over [0, clip] with learnable scalar clip.

    Backward (PACT convention): d/dx = 1 on (0, clip), 0 outside;
    d/dclip = 1 where x >= clip, else 0.
    """
    cval = float(clip.data)
    if cval <= 0:
        raise ValueError(f"PACT clip must be positive, got {cval}")
    out = Tensor(
        fake_quantize_activations_np(x.data, cval, n, rounding),
        ad._needs_grad(x, clip),
        (x, clip),
    )
    inner = (x.data > 0) & (x.data < cval)
    saturated = x.data >= cval

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g * inner)
        if clip.requires_grad:
            clip.accumulate(np.asarray(np.sum(g, where=saturated), dtype=clip.data.dtype).reshape(clip.data.shape))

    out._backward = bwd
    return out
