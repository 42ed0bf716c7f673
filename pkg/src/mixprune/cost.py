"""Differentiable cost regularizers and their deterministic discrete evaluators.

Four models: expected weight bits (size), bitops, MPIC cycles via a
MACs-per-cycle lookup table, and an analytical NE16 accelerator model with
load / compute / store components. The differentiable forms are expressions
over the sampled selector tensors; the discrete evaluators are independent
per-layer loops over a frozen assignment, used for reporting and as oracles.

The NE16 constants here follow the published architecture outline (288-bit
weight streamer, 64-bit store port, 3x3 PE grid over 32-channel output groups,
16-channel input phases, MAC latency proportional to weight precision); they
are an illustrative desk model, not cycle-accurate measurements. Port exact
constants from the vendor performance model if hardware fidelity is needed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, LutError
from .graph import NetworkGraph
from .mps import Assignment
from .quant import PrecisionSet

FIXED_INPUT_BITS = 8  # unsearched activation sites (the network input) run at 8 bit


@dataclass
class HwClock:
    frequency_hz: float

    def __post_init__(self):
        if self.frequency_hz <= 0:
            raise ConfigError(f"clock frequency must be positive, got {self.frequency_hz}")


@dataclass
class CostLUT:
    """MACs-per-cycle for every (activation bits, weight bits) pair."""

    table: dict

    def macs_per_cycle(self, p_x: int, p_w: int) -> float:
        try:
            return self.table[(p_x, p_w)]
        except KeyError:
            raise LutError(f"missing LUT entry ({p_x},{p_w})") from None

    def validate(self, pset_x: PrecisionSet, pset_w: PrecisionSet) -> None:
        need_x = sorted(set(pset_x.bits) | {FIXED_INPUT_BITS})
        for px in need_x:
            for pw in pset_w.nonzero:
                if (px, pw) not in self.table:
                    raise LutError(f"missing LUT entry ({px},{pw})")


def load_lut(path, pset_x: PrecisionSet | None = None, pset_w: PrecisionSet | None = None) -> CostLUT:
    """Parse a `p_x,p_w,macs_per_cycle` CSV ('#' lines are comments)."""
    table = {}
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if not rows or [c.strip() for c in rows[0]] != ["p_x", "p_w", "macs_per_cycle"]:
        raise LutError(f"{path}: expected header 'p_x,p_w,macs_per_cycle'")
    for r in rows[1:]:
        try:
            px, pw, v = int(r[0]), int(r[1]), float(r[2])
        except (ValueError, IndexError):
            raise LutError(f"{path}: malformed row {r!r}") from None
        if v <= 0:
            raise LutError(f"{path}: non-positive throughput for entry ({px},{pw})")
        table[(px, pw)] = v
    lut = CostLUT(table)
    if pset_x is not None and pset_w is not None:
        lut.validate(pset_x, pset_w)
    return lut


@dataclass
class Ne16Params:
    """NE16 accelerator geometry; activations are fixed at 8 bit."""

    streamer_bandwidth_bits: float = 288.0
    store_bandwidth_bits: float = 64.0
    channel_group: int = 32
    input_group: int = 16
    spatial_tile: int = 3
    act_bits: int = 8
    smooth_c: float = 0.1

    def __post_init__(self):
        if self.streamer_bandwidth_bits <= 0 or self.store_bandwidth_bits <= 0:
            raise ConfigError("NE16 bandwidths must be positive")
        if self.channel_group != 32:
            raise ConfigError(f"NE16 output channel group must be 32, got {self.channel_group}")

    @classmethod
    def from_json(cls, doc: dict) -> "Ne16Params":
        return cls(**{k: doc[k] for k in doc if k in cls.__dataclass_fields__})


def cycles_to_latency(cycles: float, clock: HwClock) -> float:
    """Seconds taken by `cycles` at the clock frequency."""
    if cycles < 0:
        raise ValueError(f"cycle count must be non-negative, got {cycles}")
    return cycles / clock.frequency_hz


# ---------------------------------------------------------------------------
# expression helpers (float or Tensor operands)


def _mul(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return ad.mul(a, b)
    if isinstance(a, Tensor):
        return ad.scale(a, float(b))
    if isinstance(b, Tensor):
        return ad.scale(b, float(a))
    return a * b


def _accumulate(total, term):
    if total is None:
        return term
    if isinstance(total, Tensor) or isinstance(term, Tensor):
        t = total if isinstance(total, Tensor) else Tensor(np.asarray(total, dtype=np.float64))
        u = term if isinstance(term, Tensor) else Tensor(np.asarray(term, dtype=np.float64))
        return ad.add(t, u)
    return total + term


def _gamma_of(graph, sampled, layer):
    return sampled[graph.group_of(layer.name)][0]


def effective_input_channels(graph: NetworkGraph, layer, sampled: dict, pset_w: PrecisionSet):
    """Expected unpruned input channels: C_out(producer) - sum_i gamma_hat[i, 0].

    Returns a float for fixed inputs (network input, depthwise fan-in of 1),
    a Tensor expression otherwise.
    """
    if layer.kind == "depthwise2d":
        return 1.0
    prod = graph.producer_quant(layer.inputs[0])
    if prod is None:
        return float(layer.c_in)
    mult = graph.input_multiplier(layer)
    gh = _gamma_of(graph, sampled, prod)
    pruned = ad.ssum(ad.get_column(gh, pset_w.index(0)))
    kept = ad.const_minus(float(prod.c_out), pruned)
    return ad.scale(kept, float(mult)) if mult != 1 else kept


def _delta_coeffs(graph, layer, sampled, pset_x: PrecisionSet):
    """Input-activation precision weights for a layer: {bits: coeff}, coeff float or Tensor."""
    prod = graph.producer_quant(layer.inputs[0])
    dh = sampled[graph.group_of(prod.name)][1] if prod is not None else None
    if dh is None:
        return {FIXED_INPUT_BITS: 1.0}
    return {p: ad.get_column(dh, j) for j, p in enumerate(pset_x.bits)}


def _channel_count(gamma_hat: Tensor, pset_w: PrecisionSet, p: int) -> Tensor:
    """Expected number of output channels selected at precision p."""
    return ad.ssum(ad.get_column(gamma_hat, pset_w.index(p)))


def _smooth_groups(x, size: int, c: float):
    """Differentiable stand-in for ceil(x / size): x/size + c * (1 - cos(2 pi x / size))."""
    if not isinstance(x, Tensor):
        return x / size + c * (1.0 - math.cos(2 * math.pi * x / size))
    wave = ad.const_minus(1.0, ad.cos(ad.scale(x, 2 * math.pi / size)))
    return ad.add(ad.scale(x, 1.0 / size), ad.scale(wave, c))


# ---------------------------------------------------------------------------
# differentiable regularizers


def size_cost(graph: NetworkGraph, sampled: dict, pset_w: PrecisionSet) -> Tensor:
    """Expected total weight bits (Eq.-level: C_in_eff * Kx * Ky * sum gamma_hat * p)."""
    total = None
    for l in graph.quantizable_layers():
        gh = _gamma_of(graph, sampled, l)
        p_row = Tensor(np.asarray([list(pset_w.bits)], dtype=gh.data.dtype))
        bits = ad.ssum(ad.mul(gh, p_row))
        term = _mul(ad.scale(bits, float(l.k_x * l.k_y)),
                    effective_input_channels(graph, l, sampled, pset_w))
        total = _accumulate(total, term)
    return total


def bitops_cost(graph: NetworkGraph, sampled: dict, pset_w: PrecisionSet,
                pset_x: PrecisionSet) -> Tensor:
    """Expected MACs x activation bits x weight bits, summed over precision pairs."""
    total = None
    for l in graph.quantizable_layers():
        gh = _gamma_of(graph, sampled, l)
        cin = effective_input_channels(graph, l, sampled, pset_w)
        base = float(l.k_x * l.k_y * l.h_out * l.w_out)
        for px, dcoef in _delta_coeffs(graph, l, sampled, pset_x).items():
            for pw in pset_w.nonzero:
                n = _channel_count(gh, pset_w, pw)
                term = _mul(_mul(ad.scale(n, base * px * pw), dcoef), cin)
                total = _accumulate(total, term)
    return total


def mpic_cost(graph: NetworkGraph, sampled: dict, pset_w: PrecisionSet,
              pset_x: PrecisionSet, lut: CostLUT) -> Tensor:
    """Expected MPIC cycles: per precision pair, MACs / LUT throughput."""
    total = None
    for l in graph.quantizable_layers():
        gh = _gamma_of(graph, sampled, l)
        cin = effective_input_channels(graph, l, sampled, pset_w)
        base = float(l.k_x * l.k_y * l.h_out * l.w_out)
        for px, dcoef in _delta_coeffs(graph, l, sampled, pset_x).items():
            for pw in pset_w.nonzero:
                n = _channel_count(gh, pset_w, pw)
                term = _mul(_mul(ad.scale(n, base / lut.macs_per_cycle(px, pw)), dcoef), cin)
                total = _accumulate(total, term)
    return total


def _ne16_supported(layer) -> bool:
    if layer.kind == "linear":
        return True
    if layer.kind in ("conv2d", "pointwise", "depthwise2d"):
        return layer.k_x == layer.k_y and layer.k_x in (1, 3)
    return False


def ne16_cost(graph: NetworkGraph, sampled: dict, pset_w: PrecisionSet,
              params: Ne16Params) -> Tensor:
    """Smooth NE16 cycle model: weight streaming + PE occupancy + result store.

    Channel-group ceilings are replaced by the smooth overestimate so the cost
    stays differentiable; the discrete evaluator applies true ceilings.
    """
    total = None
    c = params.smooth_c
    for l in graph.quantizable_layers():
        gh = _gamma_of(graph, sampled, l)
        cin = effective_input_channels(graph, l, sampled, pset_w)
        kk = float(l.k_x * l.k_y)
        if not _ne16_supported(l):
            base = kk * l.h_out * l.w_out
            for pw in pset_w.nonzero:
                n = _channel_count(gh, pset_w, pw)
                term = _mul(ad.scale(n, base * pw / 8.0), cin)
                total = _accumulate(total, term)
            continue
        tiles = float(math.ceil(l.h_out / params.spatial_tile) * math.ceil(l.w_out / params.spatial_tile))
        cin16 = 1.0 if l.kind == "depthwise2d" else _smooth_groups(cin, params.input_group, c)
        alive = None
        for pw in pset_w.nonzero:
            n = _channel_count(gh, pset_w, pw)
            load = _mul(ad.scale(n, kk * pw / params.streamer_bandwidth_bits), cin)
            pe = _mul(ad.scale(_smooth_groups(n, params.channel_group, c), tiles * pw), cin16)
            total = _accumulate(total, _accumulate(load, pe))
            alive = _accumulate(alive, n)
        store = _mul(alive, l.h_out * l.w_out * params.act_bits / params.store_bandwidth_bits)
        total = _accumulate(total, store)
    return total


# ---------------------------------------------------------------------------
# deterministic evaluators over a discrete assignment


def _kept_in(graph: NetworkGraph, layer, assignment: Assignment) -> int:
    if layer.kind == "depthwise2d":
        return 1
    prod = graph.producer_quant(layer.inputs[0])
    if prod is None:
        return layer.c_in
    kept = int(np.count_nonzero(assignment.weight_bits[prod.name]))
    return kept * graph.input_multiplier(layer)


def _act_bits_in(graph: NetworkGraph, layer, assignment: Assignment) -> int:
    prod = graph.producer_quant(layer.inputs[0])
    if prod is None:
        return FIXED_INPUT_BITS
    return int(assignment.act_bits.get(prod.name, FIXED_INPUT_BITS))


def exact_size_bits(graph: NetworkGraph, assignment: Assignment) -> int:
    """Exact stored weight bits of the discretized model (integer)."""
    total = 0
    for l in graph.quantizable_layers():
        bits = assignment.weight_bits[l.name]
        total += int(bits.sum()) * l.k_x * l.k_y * _kept_in(graph, l, assignment)
    return total


def exact_bitops(graph: NetworkGraph, assignment: Assignment) -> float:
    total = 0.0
    for l in graph.quantizable_layers():
        px = _act_bits_in(graph, l, assignment)
        cin = _kept_in(graph, l, assignment)
        base = l.k_x * l.k_y * l.h_out * l.w_out * cin
        for pw in np.unique(assignment.weight_bits[l.name]):
            if pw == 0:
                continue
            n = int(np.count_nonzero(assignment.weight_bits[l.name] == pw))
            total += base * n * px * int(pw)
    return float(total)


def mpic_cycles_discrete(graph: NetworkGraph, assignment: Assignment, lut: CostLUT) -> float:
    """Independent per-layer loop over MACs / LUT(p_x, p_w)."""
    total = 0.0
    for l in graph.quantizable_layers():
        px = _act_bits_in(graph, l, assignment)
        cin = _kept_in(graph, l, assignment)
        base = l.k_x * l.k_y * l.h_out * l.w_out * cin
        for pw in np.unique(assignment.weight_bits[l.name]):
            if pw == 0:
                continue
            n = int(np.count_nonzero(assignment.weight_bits[l.name] == pw))
            total += base * n / lut.macs_per_cycle(px, int(pw))
    return float(total)


def ne16_cycles_discrete(graph: NetworkGraph, assignment: Assignment, params: Ne16Params):
    """Exact-ceiling NE16 model. Returns (total cycles, per-layer breakdown)."""
    breakdown = {}
    total = 0.0
    for l in graph.quantizable_layers():
        bits = assignment.weight_bits[l.name]
        cin = _kept_in(graph, l, assignment)
        kk = l.k_x * l.k_y
        counts = {int(p): int(np.count_nonzero(bits == p)) for p in np.unique(bits) if p != 0}
        entry = {"load": 0.0, "pe": 0.0, "store": 0.0, "fallback": False}
        if not _ne16_supported(l):
            entry["fallback"] = True
            cycles = sum(kk * l.h_out * l.w_out * cin * n * p / 8.0 for p, n in counts.items())
            entry["pe"] = cycles
        else:
            tiles = math.ceil(l.h_out / params.spatial_tile) * math.ceil(l.w_out / params.spatial_tile)
            cin16 = 1 if l.kind == "depthwise2d" else math.ceil(cin / params.input_group)
            for p, n in counts.items():
                entry["load"] += math.ceil(n * cin * kk * p / params.streamer_bandwidth_bits)
                entry["pe"] += tiles * math.ceil(n / params.channel_group) * p * cin16
            alive = sum(counts.values())
            if alive:
                entry["store"] = math.ceil(l.h_out * l.w_out * alive * params.act_bits
                                           / params.store_bandwidth_bits)
        entry["total"] = entry["load"] + entry["pe"] + entry["store"]
        breakdown[l.name] = entry
        total += entry["total"]
    return total, breakdown


# ---------------------------------------------------------------------------
# model registry used by the trainer and CLI

COST_KINDS = ("size", "bitops", "mpic", "ne16")


class CostModel:
    """Pairs a differentiable regularizer with its discrete evaluator."""

    def __init__(self, kind: str, graph: NetworkGraph, pset_w: PrecisionSet,
                 pset_x: PrecisionSet, lut: CostLUT | None = None,
                 ne16: Ne16Params | None = None):
        if kind not in COST_KINDS:
            raise ConfigError(f"unknown cost model '{kind}', expected one of {COST_KINDS}")
        if kind == "mpic":
            if lut is None:
                raise ConfigError("mpic cost model requires a LUT")
            lut.validate(pset_x, pset_w)
        if kind == "ne16":
            ne16 = ne16 or Ne16Params()
            if tuple(pset_x.bits) != (ne16.act_bits,):
                raise ConfigError(
                    f"ne16 cost model requires the activation set {{{ne16.act_bits}}}, got {pset_x.bits}")
        self.kind = kind
        self.graph = graph
        self.pset_w = pset_w
        self.pset_x = pset_x
        self.lut = lut
        self.ne16 = ne16
        self.unit = {"size": "bits", "bitops": "bitops", "mpic": "cycles", "ne16": "cycles"}[kind]

    def soft(self, sampled: dict) -> Tensor:
        if self.kind == "size":
            return size_cost(self.graph, sampled, self.pset_w)
        if self.kind == "bitops":
            return bitops_cost(self.graph, sampled, self.pset_w, self.pset_x)
        if self.kind == "mpic":
            return mpic_cost(self.graph, sampled, self.pset_w, self.pset_x, self.lut)
        return ne16_cost(self.graph, sampled, self.pset_w, self.ne16)

    def discrete(self, assignment: Assignment) -> float:
        if self.kind == "size":
            return float(exact_size_bits(self.graph, assignment))
        if self.kind == "bitops":
            return exact_bitops(self.graph, assignment)
        if self.kind == "mpic":
            return mpic_cycles_discrete(self.graph, assignment, self.lut)
        return ne16_cycles_discrete(self.graph, assignment, self.ne16)[0]


def load_hw_config(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: hardware config must be a JSON object")
    return doc
