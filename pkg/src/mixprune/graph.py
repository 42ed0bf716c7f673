"""Network intermediate representation, toy builders, and batch-norm folding.

Graphs are restricted to the topologies the search supports: sequential
chains, two-branch residual adds, and pointwise->depthwise pairs. Layers that
quantize their weights (conv2d, depthwise2d, pointwise, linear) are
partitioned into selector groups; the two reconvergent producers of a
residual add and every pointwise->depthwise pair must share one group so that
pruning decisions stay consistent and pruned channels remain removable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import GraphError

INPUT_REF = "input"
QUANTIZABLE = ("conv2d", "depthwise2d", "pointwise", "linear")
KINDS = QUANTIZABLE + ("relu", "add", "pool", "flatten", "batchnorm")


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: tuple = ()
    c_in: int = 0
    c_out: int = 0
    k_x: int = 1
    k_y: int = 1
    stride: int = 1
    padding: int = 0
    # output dims, filled by shape inference
    h_out: int = 0
    w_out: int = 0

    @property
    def quantizable(self) -> bool:
        return self.kind in QUANTIZABLE


class NetworkGraph:
    """Immutable-after-construction layer DAG with selector group structure."""

    def __init__(self, layers, selector_groups, input_shape):
        self.layers = list(layers)
        self.by_name = {l.name: l for l in self.layers}
        self.selector_groups = tuple(tuple(g) for g in selector_groups)
        self.input_shape = tuple(input_shape)
        self._group_of = {}
        for gid, group in enumerate(self.selector_groups):
            for name in group:
                self._group_of[name] = gid
        self._infer_shapes()
        self._validate()

    # -- structure queries ---------------------------------------------------

    def quantizable_layers(self):
        return [l for l in self.layers if l.quantizable]

    def group_of(self, name: str) -> int:
        return self._group_of[name]

    def group_members(self, gid: int):
        return self.selector_groups[gid]

    def consumers(self, name: str):
        return [l for l in self.layers if name in l.inputs]

    def output_layer(self) -> LayerSpec:
        consumed = {ref for l in self.layers for ref in l.inputs}
        outs = [l for l in self.layers if l.name not in consumed]
        if len(outs) != 1:
            raise GraphError(f"expected exactly one output layer, found {[l.name for l in outs]}")
        return outs[0]

    def producer_quant(self, ref: str):
        """Nearest quantizable ancestor of a tensor reference, or None for the input."""
        while True:
            if ref == INPUT_REF:
                return None
            layer = self.by_name[ref]
            if layer.quantizable:
                return layer
            # both inputs of an add share a selector group, so either branch works
            ref = layer.inputs[0]

    def out_shape(self, ref: str):
        if ref == INPUT_REF:
            return self.input_shape
        l = self.by_name[ref]
        return (l.c_out, l.h_out, l.w_out)

    def input_multiplier(self, layer: LayerSpec) -> int:
        """Input features consumed per producer output channel (spatial fan-in of flatten)."""
        prod = self.producer_quant(layer.inputs[0])
        c_prod = prod.c_out if prod is not None else self.input_shape[0]
        if layer.c_in % c_prod:
            raise GraphError(f"{layer.name}: c_in {layer.c_in} not a multiple of producer channels {c_prod}")
        return layer.c_in // c_prod

    # -- construction checks ---------------------------------------------------

    def _infer_shapes(self):
        for l in self.layers:
            for ref in l.inputs:
                if ref != INPUT_REF and ref not in self.by_name:
                    raise GraphError(f"{l.name}: unknown input '{ref}'")
                if ref != INPUT_REF and self.layers.index(self.by_name[ref]) >= self.layers.index(l):
                    raise GraphError(f"{l.name}: inputs must be earlier layers (acyclic order)")
            shapes = [self.out_shape(r) for r in l.inputs]
            if l.kind == "add":
                if len(shapes) != 2 or shapes[0] != shapes[1]:
                    raise GraphError(f"{l.name}: add needs two inputs of equal shape, got {shapes}")
                c, h, w = shapes[0]
                l.c_in, l.c_out, l.h_out, l.w_out = c, c, h, w
                continue
            if len(shapes) != 1:
                raise GraphError(f"{l.name}: expected one input, got {len(shapes)}")
            c, h, w = shapes[0]
            if l.kind in ("conv2d", "depthwise2d", "pointwise"):
                if l.c_in != c:
                    raise GraphError(f"{l.name}: c_in {l.c_in} != producer channels {c}")
                l.h_out = (h + 2 * l.padding - l.k_y) // l.stride + 1
                l.w_out = (w + 2 * l.padding - l.k_x) // l.stride + 1
                if l.h_out < 1 or l.w_out < 1:
                    raise GraphError(f"{l.name}: kernel {l.k_y}x{l.k_x} does not fit input {h}x{w}")
            elif l.kind == "linear":
                if h != 1 or w != 1:
                    raise GraphError(f"{l.name}: linear input must be flattened, got {h}x{w}")
                if l.c_in != c:
                    raise GraphError(f"{l.name}: c_in {l.c_in} != producer features {c}")
                l.h_out = l.w_out = 1
            elif l.kind == "pool":
                if h % l.k_y or w % l.k_x:
                    raise GraphError(f"{l.name}: pool window {l.k_y}x{l.k_x} must divide input {h}x{w}")
                l.c_in = l.c_out = c
                l.h_out, l.w_out = h // l.k_y, w // l.k_x
            elif l.kind == "flatten":
                l.c_in = c
                l.c_out = c * h * w
                l.h_out = l.w_out = 1
            elif l.kind in ("relu", "batchnorm"):
                l.c_in = l.c_out = c
                l.h_out, l.w_out = h, w
            else:
                raise GraphError(f"{l.name}: unknown kind '{l.kind}'")

    def _validate(self):
        entry = [l for l in self.layers if INPUT_REF in l.inputs]
        if len(entry) != 1:
            raise GraphError(f"expected exactly one entry layer, found {[l.name for l in entry]}")
        head = self.output_layer()
        if head.kind != "linear":
            raise GraphError(f"output layer must be linear, got {head.kind} '{head.name}'")
        for l in self.layers:
            if l.kind == "depthwise2d" and l.c_out != l.c_in:
                raise GraphError(f"{l.name}: depthwise requires c_out == c_in")
            if l.kind == "pointwise" and (l.k_x != 1 or l.k_y != 1):
                raise GraphError(f"{l.name}: pointwise kernel must be 1x1")
            if l.quantizable and l.c_out < 1:
                raise GraphError(f"{l.name}: needs at least one output channel")
        qnames = {l.name for l in self.quantizable_layers()}
        grouped = [n for g in self.selector_groups for n in g]
        if sorted(grouped) != sorted(qnames):
            raise GraphError("selector groups must partition the quantizable layers")
        for g in self.selector_groups:
            widths = {self.by_name[n].c_out for n in g}
            if len(widths) != 1:
                raise GraphError(f"selector group {g} mixes channel counts {widths}")
        # sharing rules
        for l in self.layers:
            if l.kind == "add":
                pa, pb = (self.producer_quant(r) for r in l.inputs)
                if pa is None or pb is None or self.group_of(pa.name) != self.group_of(pb.name):
                    raise GraphError(f"{l.name}: reconvergent producers must share a selector group")
            if l.kind == "depthwise2d":
                prod = self.producer_quant(l.inputs[0])
                if prod is not None and prod.kind == "pointwise" and \
                        self.group_of(prod.name) != self.group_of(l.name):
                    raise GraphError(f"{l.name}: pointwise->depthwise pair must share a selector group")

    # -- serialization ---------------------------------------------------------

    def to_json(self) -> dict:
        layers = []
        for l in self.layers:
            entry = {"name": l.name, "kind": l.kind, "inputs": list(l.inputs)}
            if l.quantizable:
                entry.update(c_in=l.c_in, c_out=l.c_out, k_x=l.k_x, k_y=l.k_y,
                             stride=l.stride, padding=l.padding)
            elif l.kind == "pool":
                entry.update(k_x=l.k_x, k_y=l.k_y)
            layers.append(entry)
        return {
            "input_shape": list(self.input_shape),
            "layers": layers,
            "selector_groups": [list(g) for g in self.selector_groups],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NetworkGraph":
        layers = []
        for entry in doc["layers"]:
            k = entry.get("k")
            layers.append(LayerSpec(
                name=entry["name"],
                kind=entry["kind"],
                inputs=tuple(entry["inputs"]),
                c_in=int(entry.get("c_in", 0)),
                c_out=int(entry.get("c_out", 0)),
                k_x=int(entry.get("k_x", k if k is not None else 1)),
                k_y=int(entry.get("k_y", k if k is not None else 1)),
                stride=int(entry.get("stride", 1)),
                padding=int(entry.get("padding", 0)),
            ))
        return cls(layers, doc["selector_groups"], doc["input_shape"])


def load_graph(path) -> NetworkGraph:
    return NetworkGraph.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# toy builder


@dataclass
class ToyConfig:
    """Desk-scale convnet: residual trunk, optional separable block, linear head."""

    depth: int = 3              # conv layers in the trunk (stem + residual branch)
    width: int = 8
    input_shape: tuple = (1, 16, 16)
    classes: int = 4
    separable: bool = False     # append pointwise -> depthwise block
    batchnorm: bool = False
    kernel: int = 3

    @classmethod
    def from_json(cls, doc: dict) -> "ToyConfig":
        kwargs = {k: doc[k] for k in doc if k in cls.__dataclass_fields__}
        if "input_shape" in kwargs:
            kwargs["input_shape"] = tuple(kwargs["input_shape"])
        return cls(**kwargs)


def build_toy_convnet(config: ToyConfig, seed: int = 0):
    """Build the toy graph plus seeded float parameters.

    Returns (graph, params) where params maps "{layer}.weight" / "{layer}.bias"
    (and batch-norm gain/beta/mean/var/eps) to numpy arrays.
    """
    c0, h0, w0 = config.input_shape
    if config.width < 1:
        raise GraphError(f"width must be >= 1, got {config.width}")
    if config.depth < 2:
        raise GraphError(f"depth must be >= 2 to form a residual block, got {config.depth}")
    if config.classes < 2:
        raise GraphError(f"classes must be >= 2, got {config.classes}")
    if c0 < 1 or h0 < config.kernel or w0 < config.kernel:
        raise GraphError(f"input shape {config.input_shape} too small for kernel {config.kernel}")

    k, pad = config.kernel, config.kernel // 2
    wdt = config.width
    layers = []
    rng = np.random.default_rng(seed)
    params = {}

    def conv(name, kind, cin, cout, kk, inputs, stride=1, padding=0):
        layers.append(LayerSpec(name, kind, inputs, c_in=cin, c_out=cout,
                                k_x=kk, k_y=kk, stride=stride, padding=padding))
        fan_in = cin * kk * kk if kind != "depthwise2d" else kk * kk
        std = float(np.sqrt(2.0 / fan_in))
        if kind == "depthwise2d":
            shape = (cout, 1, kk, kk)
        elif kind == "linear":
            shape = (cout, cin)
        else:
            shape = (cout, cin, kk, kk)
        params[f"{name}.weight"] = rng.normal(0.0, std, shape).astype(np.float32)
        params[f"{name}.bias"] = np.zeros(cout, dtype=np.float32)
        return name

    def maybe_bn(prev, cout):
        if not config.batchnorm:
            return prev
        name = f"bn_{prev}"
        layers.append(LayerSpec(name, "batchnorm", (prev,)))
        params[f"{name}.gain"] = rng.uniform(0.8, 1.2, cout).astype(np.float32)
        params[f"{name}.beta"] = rng.normal(0.0, 0.1, cout).astype(np.float32)
        params[f"{name}.mean"] = rng.normal(0.0, 0.1, cout).astype(np.float32)
        params[f"{name}.var"] = rng.uniform(0.5, 1.5, cout).astype(np.float32)
        params[f"{name}.eps"] = np.asarray(1e-5, dtype=np.float32)
        return name

    def relu_after(prev):
        name = f"relu_{prev}" if not prev.startswith("bn_") else f"relu_{prev[3:]}"
        layers.append(LayerSpec(name, "relu", (prev,)))
        return name

    prev = conv("conv1", "conv2d", c0, wdt, k, (INPUT_REF,), padding=pad)
    prev = maybe_bn(prev, wdt)
    skip = relu_after(prev)
    prev = skip
    for i in range(2, config.depth + 1):
        prev = conv(f"conv{i}", "conv2d", wdt, wdt, k, (prev,), padding=pad)
        prev = maybe_bn(prev, wdt)
        if i < config.depth:
            prev = relu_after(prev)
    layers.append(LayerSpec("add1", "add", (prev, skip)))
    prev = relu_after("add1")

    groups = [("conv1", f"conv{config.depth}")]
    groups += [(f"conv{i}",) for i in range(2, config.depth)]

    feat = wdt
    if config.separable:
        prev = conv("pw1", "pointwise", wdt, 2 * wdt, 1, (prev,))
        prev = maybe_bn(prev, 2 * wdt)
        prev = relu_after(prev)
        prev = conv("dw1", "depthwise2d", 2 * wdt, 2 * wdt, k, (prev,), padding=pad)
        prev = maybe_bn(prev, 2 * wdt)
        prev = relu_after(prev)
        groups.append(("pw1", "dw1"))
        feat = 2 * wdt

    layers.append(LayerSpec("pool", "pool", (prev,), k_x=w0, k_y=h0))
    layers.append(LayerSpec("flatten", "flatten", ("pool",)))
    conv("head", "linear", feat, config.classes, 1, ("flatten",))
    groups.append(("head",))

    return NetworkGraph(layers, groups, config.input_shape), params


# ---------------------------------------------------------------------------
# batch-norm folding


def fold_batchnorm(g: NetworkGraph, params: dict):
    """Fold every batch-norm node into its producer; returns (graph, folded params).

    Per channel i: w' = w * s_i, b' = (b - mean_i) * s_i + beta_i with
    s_i = gain_i / sqrt(var_i + eps). The producer must be a conv or linear
    layer and var + eps must be positive.
    """
    params = {k: np.array(v) for k, v in params.items()}
    layers = [replace(l) for l in g.layers]
    by_name = {l.name: l for l in layers}
    bns = [l for l in layers if l.kind == "batchnorm"]
    for bn in bns:
        prod = by_name.get(bn.inputs[0])
        if prod is None or not prod.quantizable:
            raise GraphError(f"{bn.name}: batch-norm must follow a conv or linear layer")
        var = params[f"{bn.name}.var"].astype(np.float64)
        eps = float(params.get(f"{bn.name}.eps", np.asarray(1e-5)))
        if np.any(var + eps <= 0):
            raise ValueError(f"{bn.name}: variance + eps must be positive")
        s = params[f"{bn.name}.gain"] / np.sqrt(var + eps)
        w = params[f"{prod.name}.weight"]
        b = params[f"{prod.name}.bias"]
        bshape = (w.shape[0],) + (1,) * (w.ndim - 1)
        params[f"{prod.name}.weight"] = (w * s.reshape(bshape)).astype(w.dtype)
        params[f"{prod.name}.bias"] = ((b - params[f"{bn.name}.mean"]) * s + params[f"{bn.name}.beta"]).astype(b.dtype)
        for key in ("gain", "beta", "mean", "var", "eps"):
            params.pop(f"{bn.name}.{key}", None)
        for l in layers:
            l.inputs = tuple(prod.name if r == bn.name else r for r in l.inputs)
    layers = [l for l in layers if l.kind != "batchnorm"]
    return NetworkGraph(layers, g.selector_groups, g.input_shape), params
