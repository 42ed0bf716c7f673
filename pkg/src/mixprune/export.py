"""Post-search transformations and the deployable model container.

Pipeline: (optional) NE16 refinement, zero-channel removal, channel
reordering by descending bit-width, then splitting each layer into one
sub-layer per surviving precision and packing the integer weights.

Deploy container (magic MXPR): version u16, JSON manifest, tensor blobs,
CRC-32 trailer, little-endian throughout. Integer weights are stored as
two's-complement fields of the assigned width, packed LSB-first, with every
channel padded to a byte boundary (recorded in the manifest).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cost as costmod
from .containers import read_container, write_container
from .errors import ConfigError, DegenerateModelError, FormatError
from .graph import INPUT_REF, NetworkGraph, LayerSpec
from .mps import Assignment
from .network import act_sites
from .quant import PrecisionSet, fake_quantize_activations_np, round_half_away

MAGIC = b"MXPR"
VERSION = 1


# ---------------------------------------------------------------------------
# NE16 refinement


def ne16_refine(assignment: Assignment, graph: NetworkGraph, params: costmod.Ne16Params,
                pset_w: PrecisionSet) -> Assignment:
    """Greedily promote channel bit-widths while the discrete NE16 cost strictly drops.

    Promotions never demote and never touch pruned (0-bit) channels; shared
    selector groups are promoted together, so group consistency is preserved.
    When several channels sit at the source precision the lowest-indexed one
    is promoted, which is cost-neutral (the model only sees counts).
    """
    assignment = assignment.copy()
    candidates = [p for p in pset_w.nonzero]
    while True:
        base, _ = costmod.ne16_cycles_discrete(graph, assignment, params)
        best = None  # (cycles, gid, channel, p_to)
        for gid, group in enumerate(graph.selector_groups):
            bits = assignment.weight_bits[group[0]]
            for p_from in candidates:
                idx = np.nonzero(bits == p_from)[0]
                if idx.size == 0:
                    continue
                ch = int(idx[0])
                for p_to in candidates:
                    if p_to <= p_from:
                        continue
                    trial = assignment.copy()
                    for name in group:
                        trial.weight_bits[name][ch] = p_to
                    cycles, _ = costmod.ne16_cycles_discrete(graph, trial, params)
                    if cycles < base and (best is None or cycles < best[0]):
                        best = (cycles, gid, ch, p_to)
        if best is None:
            return assignment
        _, gid, ch, p_to = best
        for name in graph.selector_groups[gid]:
            assignment.weight_bits[name][ch] = p_to


# ---------------------------------------------------------------------------
# channel reordering and pruning


@dataclass
class Permutation:
    """Output-channel permutation per layer; consumers reuse their producer's order."""

    by_layer: dict  # layer name -> int array

    def input_perm(self, graph: NetworkGraph, layer: LayerSpec):
        prod = graph.producer_quant(layer.inputs[0])
        return None if prod is None else self.by_layer[prod.name]


def _permute_consumer_inputs(graph: NetworkGraph, name: str, weights: dict, order: np.ndarray):
    """Apply a producer's output order to each consumer's input axis."""
    for consumer in graph.quantizable_layers():
        prod = graph.producer_quant(consumer.inputs[0])
        if prod is None or prod.name != name or consumer.kind == "depthwise2d":
            continue  # depthwise filters follow their own (shared) output order
        w = weights[f"{consumer.name}.weight"]
        mult = graph.input_multiplier(consumer)
        if mult == 1:
            weights[f"{consumer.name}.weight"] = w[:, order]
        else:
            blocks = w.reshape(w.shape[0], prod.c_out, mult, *w.shape[2:])
            weights[f"{consumer.name}.weight"] = blocks[:, order].reshape(w.shape)


def reorder_channels(assignment: Assignment, graph: NetworkGraph, weights: dict):
    """Stable-sort channels by descending bit-width. Returns (Permutation, weights, assignment)."""
    weights = {k: np.array(v) for k, v in weights.items()}
    assignment = assignment.copy()
    perms = {}
    for gid, group in enumerate(graph.selector_groups):
        bits = assignment.weight_bits[group[0]]
        order = np.argsort(-bits, kind="stable")
        for name in group:
            perms[name] = order.copy()
            weights[f"{name}.weight"] = weights[f"{name}.weight"][order]
            weights[f"{name}.bias"] = weights[f"{name}.bias"][order]
            assignment.weight_bits[name] = assignment.weight_bits[name][order]
            _permute_consumer_inputs(graph, name, weights, order)
    return Permutation(perms), weights, assignment


def prune_zero_channels(assignment: Assignment, graph: NetworkGraph, weights: dict):
    """Remove 0-bit channels from producers and the matching consumer input slices."""
    weights = {k: np.array(v) for k, v in weights.items()}
    assignment = assignment.copy()
    keep_by_layer = {}
    for group in graph.selector_groups:
        bits = assignment.weight_bits[group[0]]
        keep = bits != 0
        if not keep.any():
            raise DegenerateModelError(f"layer(s) {group} have no surviving channels")
        for name in group:
            keep_by_layer[name] = keep
    for l in graph.quantizable_layers():
        keep = keep_by_layer[l.name]
        weights[f"{l.name}.weight"] = weights[f"{l.name}.weight"][keep]
        weights[f"{l.name}.bias"] = weights[f"{l.name}.bias"][keep]
        assignment.weight_bits[l.name] = assignment.weight_bits[l.name][keep]
        _permute_consumer_inputs(graph, l.name, weights, np.nonzero(keep)[0])
    # rebuild the graph with compacted channel counts
    new_layers = []
    for l in graph.layers:
        nl = LayerSpec(l.name, l.kind, l.inputs, c_in=l.c_in, c_out=l.c_out,
                       k_x=l.k_x, k_y=l.k_y, stride=l.stride, padding=l.padding)
        if l.quantizable:
            nl.c_out = int(keep_by_layer[l.name].sum())
            prod = graph.producer_quant(l.inputs[0])
            if prod is not None:
                mult = graph.input_multiplier(l)
                nl.c_in = int(keep_by_layer[prod.name].sum()) * mult
        new_layers.append(nl)
    new_graph = NetworkGraph(new_layers, graph.selector_groups, graph.input_shape)
    return new_graph, weights, assignment


# ---------------------------------------------------------------------------
# deploy model


@dataclass
class SubLayer:
    bits: int
    q_weights: np.ndarray   # integer levels, shape (channels, ...) in signed range
    scales: np.ndarray      # per-channel dequantization step
    bias: np.ndarray


@dataclass
class DeployLayer:
    name: str
    kind: str
    inputs: tuple
    c_in: int
    c_out: int
    k_x: int
    k_y: int
    stride: int
    padding: int
    act_bits: int | None
    act_clip: float | None
    sublayers: list


@dataclass
class DeployModel:
    input_shape: tuple
    layers: list
    selector_groups: tuple

    def graph(self) -> NetworkGraph:
        specs = [LayerSpec(l.name, l.kind, tuple(l.inputs), c_in=l.c_in, c_out=l.c_out,
                           k_x=l.k_x, k_y=l.k_y, stride=l.stride, padding=l.padding)
                 for l in self.layers]
        return NetworkGraph(specs, self.selector_groups, self.input_shape)


def _quantize_channels(w: np.ndarray, bits: np.ndarray):
    """Integer levels + per-channel steps for already-assigned channels (all bits > 0)."""
    q = np.zeros_like(w, dtype=np.int64)
    steps = np.zeros(w.shape[0], dtype=np.float32)
    for i in range(w.shape[0]):
        levels = 2 ** (int(bits[i]) - 1) - 1
        scale = float(np.abs(w[i]).max())
        step = scale / levels if scale > 0 else 1.0
        q[i] = np.clip(round_half_away(w[i] / step), -levels, levels).astype(np.int64)
        steps[i] = step
    return q, steps


def build_deploy_model(graph: NetworkGraph, weights: dict, assignment: Assignment,
                       clips: dict | None = None) -> DeployModel:
    """Split each (reordered, pruned) layer into one sub-layer per precision."""
    clips = clips or {}
    site_owner = {owner: relu for relu, owner in act_sites(graph).items()}
    layers = []
    for l in graph.layers:
        if not l.quantizable:
            layers.append(DeployLayer(l.name, l.kind, tuple(l.inputs), l.c_in, l.c_out,
                                      l.k_x, l.k_y, l.stride, l.padding, None, None, []))
            continue
        bits = assignment.weight_bits[l.name]
        if np.any(bits == 0):
            raise DegenerateModelError(f"{l.name}: deploy model requires pruned channels removed")
        if np.any(np.diff(bits) > 0):
            raise ConfigError(f"{l.name}: channels must be reordered by descending bit-width first")
        w = weights[f"{l.name}.weight"]
        b = weights[f"{l.name}.bias"]
        subs = []
        start = 0
        for p in sorted(set(int(x) for x in bits), reverse=True):
            count = int(np.count_nonzero(bits == p))
            sl = slice(start, start + count)
            q, steps = _quantize_channels(w[sl], bits[sl])
            subs.append(SubLayer(p, q, steps, b[sl].astype(np.float32)))
            start += count
        act_bits = assignment.act_bits.get(l.name)
        relu = site_owner.get(l.name)
        clip = float(clips.get(f"{relu}.clip")) if relu and f"{relu}.clip" in clips else None
        layers.append(DeployLayer(l.name, l.kind, tuple(l.inputs), l.c_in, l.c_out,
                                  l.k_x, l.k_y, l.stride, l.padding,
                                  int(act_bits) if act_bits is not None else None,
                                  clip, subs))
    return DeployModel(graph.input_shape, layers, graph.selector_groups)


# ---------------------------------------------------------------------------
# bit packing


def pack_bits(values: np.ndarray, bits: int) -> bytes:
    """Pack signed integers as `bits`-wide two's-complement fields, LSB-first.

    Each row (channel) is padded to a byte boundary.
    """
    mask = (1 << bits) - 1
    rows = values.reshape(values.shape[0], -1)
    out = bytearray()
    for row in rows:
        acc = 0
        nbits = 0
        for v in row:
            acc |= (int(v) & mask) << nbits
            nbits += bits
        out.extend(int(acc).to_bytes((nbits + 7) // 8, "little"))
    return bytes(out)


def unpack_bits(raw: bytes, bits: int, shape: tuple) -> np.ndarray:
    channels = shape[0]
    per_row = int(np.prod(shape[1:], dtype=np.int64))
    row_bytes = (per_row * bits + 7) // 8
    mask = (1 << bits) - 1
    sign = 1 << (bits - 1)
    out = np.zeros((channels, per_row), dtype=np.int64)
    for c in range(channels):
        acc = int.from_bytes(raw[c * row_bytes:(c + 1) * row_bytes], "little")
        for j in range(per_row):
            v = acc & mask
            out[c, j] = v - (1 << bits) if v & sign else v
            acc >>= bits
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# serialization


def serialize(model: DeployModel, path) -> None:
    tensors = {}
    layers_doc = []
    for l in model.layers:
        entry = {
            "name": l.name, "kind": l.kind, "inputs": list(l.inputs),
            "c_in": l.c_in, "c_out": l.c_out, "k_x": l.k_x, "k_y": l.k_y,
            "stride": l.stride, "padding": l.padding,
            "act_bits": l.act_bits, "act_clip": l.act_clip,
            "sublayers": [],
        }
        for si, sub in enumerate(l.sublayers):
            key = f"{l.name}.s{si}"
            tensors[f"{key}.scales"] = sub.scales.astype(np.float32)
            tensors[f"{key}.bias"] = sub.bias.astype(np.float32)
            packed = pack_bits(sub.q_weights, sub.bits)
            tensors[f"{key}.weights"] = np.frombuffer(packed, dtype=np.uint8)
            entry["sublayers"].append({
                "bits": sub.bits,
                "channels": int(sub.q_weights.shape[0]),
                "weight_shape": list(sub.q_weights.shape),
            })
        layers_doc.append(entry)
    manifest = {
        "input_shape": list(model.input_shape),
        "selector_groups": [list(g) for g in model.selector_groups],
        "layers": layers_doc,
        "packing": {"two_complement": True, "bit_order": "lsb_first",
                    "channel_byte_aligned": True},
    }
    write_container(path, MAGIC, VERSION, manifest, tensors)


def deserialize(path) -> DeployModel:
    _, manifest, tensors = read_container(path, MAGIC, max_version=VERSION)
    layers = []
    for entry in manifest["layers"]:
        subs = []
        for si, sdoc in enumerate(entry["sublayers"]):
            key = f"{entry['name']}.s{si}"
            shape = tuple(sdoc["weight_shape"])
            q = unpack_bits(tensors[f"{key}.weights"].tobytes(), sdoc["bits"], shape)
            subs.append(SubLayer(sdoc["bits"], q, tensors[f"{key}.scales"],
                                 tensors[f"{key}.bias"]))
        layers.append(DeployLayer(
            entry["name"], entry["kind"], tuple(entry["inputs"]),
            entry["c_in"], entry["c_out"], entry["k_x"], entry["k_y"],
            entry["stride"], entry["padding"], entry["act_bits"], entry["act_clip"], subs))
    return DeployModel(tuple(manifest["input_shape"]), layers,
                       tuple(tuple(g) for g in manifest["selector_groups"]))


def deploy_assignment(model: DeployModel) -> Assignment:
    weight_bits, act_bits = {}, {}
    for l in model.layers:
        if not l.sublayers:
            continue
        weight_bits[l.name] = np.concatenate(
            [np.full(s.q_weights.shape[0], s.bits, dtype=np.int64) for s in l.sublayers])
        if l.act_bits is not None:
            act_bits[l.name] = l.act_bits
    return Assignment(weight_bits, act_bits)


# ---------------------------------------------------------------------------
# independent deploy-model evaluation (numpy only, sub-layer by sub-layer)


def _conv_np(x, w, b, stride, padding):
    from numpy.lib.stride_tricks import sliding_window_view
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    view = sliding_window_view(xp, w.shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwuv,ocuv->nohw", view, w, optimize=True) + b[None, :, None, None]


def _dwconv_np(x, w, b, stride, padding):
    from numpy.lib.stride_tricks import sliding_window_view
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    view = sliding_window_view(xp, w.shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwuv,cuv->nchw", view, w[:, 0], optimize=True) + b[None, :, None, None]


def forward_deploy(model: DeployModel, x: np.ndarray) -> np.ndarray:
    """Evaluate the deploy model: concurrent sub-layers, outputs concatenated in order."""
    vals = {INPUT_REF: np.asarray(x, dtype=np.float32)}
    g = model.graph()
    site = {owner: relu for relu, owner in act_sites(g).items()}
    pending_act = {}  # relu layer name -> (bits, clip)

    def dequant(sub):
        return sub.q_weights.astype(np.float32) * sub.scales.reshape(
            (-1,) + (1,) * (sub.q_weights.ndim - 1))

    for l in model.layers:
        if l.sublayers:
            xin = vals[l.inputs[0]]
            if l.kind == "depthwise2d":
                # each depthwise sub-layer reads its matching slice of input channels
                start = 0
                outs = []
                for sub in l.sublayers:
                    count = sub.q_weights.shape[0]
                    outs.append(_dwconv_np(xin[:, start:start + count], dequant(sub),
                                           sub.bias, l.stride, l.padding))
                    start += count
            elif l.kind == "linear":
                outs = [xin @ dequant(sub).T + sub.bias for sub in l.sublayers]
            else:
                outs = [_conv_np(xin, dequant(sub), sub.bias, l.stride, l.padding)
                        for sub in l.sublayers]
            vals[l.name] = np.concatenate(outs, axis=1)
            if l.act_bits is not None and site.get(l.name):
                pending_act[site[l.name]] = (l.act_bits, l.act_clip)
        elif l.kind == "relu":
            xin = vals[l.inputs[0]]
            if l.name in pending_act and pending_act[l.name][1] is not None:
                bits, clip = pending_act[l.name]
                vals[l.name] = fake_quantize_activations_np(xin, clip, bits)
            else:
                vals[l.name] = np.maximum(xin, 0)
        elif l.kind == "add":
            vals[l.name] = vals[l.inputs[0]] + vals[l.inputs[1]]
        elif l.kind == "pool":
            xin = vals[l.inputs[0]]
            n, c, h, w = xin.shape
            vals[l.name] = xin.reshape(n, c, h // l.k_y, l.k_y, w // l.k_x, l.k_x).mean(axis=(3, 5))
        elif l.kind == "flatten":
            xin = vals[l.inputs[0]]
            vals[l.name] = xin.reshape(xin.shape[0], -1)
        else:
            raise FormatError(f"deploy model cannot evaluate kind '{l.kind}'")
    return vals[g.output_layer().name]


# ---------------------------------------------------------------------------
# cost report


def cost_report(graph: NetworkGraph, assignment: Assignment, *, lut=None, mpic_clock=None,
                ne16=None, ne16_clock=None, extras: dict | None = None):
    """Deterministic cost summary. Returns (doc, text). Missing hardware configs
    omit their column with a note."""
    size_bits = costmod.exact_size_bits(graph, assignment)
    degenerate = all(np.all(v == 0) for v in assignment.weight_bits.values())
    doc = {
        "size": {"bits": int(size_bits), "bytes": size_bits / 8.0},
        "bitops": costmod.exact_bitops(graph, assignment),
        "degenerate": degenerate,
        "notes": [],
    }
    if lut is not None:
        cycles = costmod.mpic_cycles_discrete(graph, assignment, lut)
        entry = {"cycles": cycles}
        if mpic_clock is not None:
            entry["latency_ms"] = costmod.cycles_to_latency(cycles, mpic_clock) * 1e3
        doc["mpic"] = entry
    else:
        doc["notes"].append("mpic column omitted: no LUT configured")
    if ne16 is not None:
        cycles, breakdown = costmod.ne16_cycles_discrete(graph, assignment, ne16)
        entry = {"cycles": cycles,
                 "fallback_layers": [k for k, v in breakdown.items() if v["fallback"]]}
        if ne16_clock is not None:
            entry["latency_ms"] = costmod.cycles_to_latency(cycles, ne16_clock) * 1e3
        doc["ne16"] = entry
    else:
        doc["notes"].append("ne16 column omitted: no hardware config")
    if degenerate:
        doc["notes"].append("assignment is fully pruned; all costs are zero")
    if extras:
        doc.update(extras)

    rows = [("size", f"{doc['size']['bits']} bits ({doc['size']['bytes']:.1f} B)"),
            ("bitops", f"{doc['bitops']:.3e}")]
    for hw in ("mpic", "ne16"):
        if hw in doc:
            lat = doc[hw].get("latency_ms")
            rows.append((hw, f"{doc[hw]['cycles']:.4g} cycles"
                             + (f", {lat:.4g} ms" if lat is not None else "")))
    width = max(len(r[0]) for r in rows)
    lines = [f"{name.ljust(width)}  {val}" for name, val in rows]
    lines += [f"note: {n}" for n in doc["notes"]]
    return doc, "\n".join(lines)
