"""Forward execution of a NetworkGraph in float, search, and fixed-assignment modes.

The executor walks the layer list (already topologically ordered) and builds an
autodiff tape. In search mode each quantizable layer combines its fake-quantized
weight variants with the sampled selectors and every relu becomes a PACT
quantization site governed by its owning layer's group. The raw network input
is treated as pre-quantized 8-bit data and is not part of the search space.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import mps, quant
from .autodiff import Tensor
from .errors import GraphError
from .graph import INPUT_REF, NetworkGraph


def act_sites(graph: NetworkGraph) -> dict:
    """Map relu layer name -> owning quantizable layer name."""
    sites = {}
    for l in graph.layers:
        if l.kind == "relu":
            owner = graph.producer_quant(l.inputs[0])
            if owner is not None:
                sites[l.name] = owner.name
    return sites


def groups_with_activation(graph: NetworkGraph) -> set:
    """Selector group ids that own at least one activation quantization site."""
    return {graph.group_of(owner) for owner in act_sites(graph).values()}


def init_clips(graph: NetworkGraph, dtype=np.float32) -> dict:
    return {f"{name}.clip": np.asarray(quant.CLIP_INIT, dtype=dtype) for name in act_sites(graph)}


def make_leaves(arrays: dict, requires_grad: bool = False) -> dict:
    return {k: Tensor(np.asarray(v), requires_grad=requires_grad) for k, v in arrays.items()}


class Executor:
    """Binds a graph and the candidate precision sets; forward methods build tapes."""

    def __init__(self, graph: NetworkGraph, pset_w: quant.PrecisionSet | None = None,
                 pset_x: quant.PrecisionSet | None = None):
        self.graph = graph
        self.pset_w = pset_w
        self.pset_x = pset_x
        self.sites = act_sites(graph)

    # -- layer primitives ----------------------------------------------------

    def _apply(self, layer, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        if layer.kind in ("conv2d", "pointwise"):
            return ad.conv2d(x, w, b, stride=layer.stride, padding=layer.padding)
        if layer.kind == "depthwise2d":
            return ad.depthwise_conv2d(x, w, b, stride=layer.stride, padding=layer.padding)
        if layer.kind == "linear":
            return ad.linear(x, w, b)
        raise GraphError(f"{layer.name}: not a weighted layer")

    def _structural(self, layer, vals) -> Tensor:
        if layer.kind == "add":
            return ad.add(vals[layer.inputs[0]], vals[layer.inputs[1]])
        if layer.kind == "pool":
            return ad.avg_pool2d(vals[layer.inputs[0]], layer.k_y)
        if layer.kind == "flatten":
            x = vals[layer.inputs[0]]
            return ad.reshape(x, (x.data.shape[0], -1))
        raise GraphError(f"{layer.name}: unhandled kind '{layer.kind}'")

    # -- forward modes ---------------------------------------------------------

    def float_forward(self, params: dict, x: np.ndarray | Tensor) -> Tensor:
        """Plain float evaluation; batch-norm runs in inference mode."""
        vals = {INPUT_REF: x if isinstance(x, Tensor) else Tensor(np.asarray(x))}
        for l in self.graph.layers:
            if l.quantizable:
                vals[l.name] = self._apply(l, vals[l.inputs[0]],
                                           params[f"{l.name}.weight"], params[f"{l.name}.bias"])
            elif l.kind == "relu":
                vals[l.name] = ad.relu(vals[l.inputs[0]])
            elif l.kind == "batchnorm":
                xin = vals[l.inputs[0]]
                gain = params[f"{l.name}.gain"].data
                beta = params[f"{l.name}.beta"].data
                mean = params[f"{l.name}.mean"].data
                var = params[f"{l.name}.var"].data
                eps = float(params[f"{l.name}.eps"].data)
                s = (gain / np.sqrt(var + eps)).reshape(1, -1, 1, 1)
                off = (beta - mean * gain / np.sqrt(var + eps)).reshape(1, -1, 1, 1)
                vals[l.name] = ad.add(ad.mul(xin, Tensor(s.astype(xin.data.dtype))),
                                      Tensor(off.astype(xin.data.dtype)))
            else:
                vals[l.name] = self._structural(l, vals)
        return vals[self.graph.output_layer().name]

    def search_forward(self, params: dict, x: np.ndarray | Tensor, sampled: dict,
                       rounding: bool = True) -> Tensor:
        """Effective-tensor evaluation under sampled selectors.

        sampled maps group id -> (gamma_hat Tensor, delta_hat Tensor or None).
        """
        self._require_folded()
        vals = {INPUT_REF: x if isinstance(x, Tensor) else Tensor(np.asarray(x))}
        for l in self.graph.layers:
            if l.quantizable:
                gamma_hat = sampled[self.graph.group_of(l.name)][0]
                w_eff = mps.effective_weights(params[f"{l.name}.weight"], gamma_hat,
                                              self.pset_w, rounding=rounding)
                b_eff = mps.effective_bias(params[f"{l.name}.bias"], gamma_hat, self.pset_w)
                vals[l.name] = self._apply(l, vals[l.inputs[0]], w_eff, b_eff)
            elif l.kind == "relu":
                xin = vals[l.inputs[0]]
                owner = self.sites.get(l.name)
                delta_hat = sampled[self.graph.group_of(owner)][1] if owner else None
                if delta_hat is None:
                    vals[l.name] = ad.relu(xin)
                else:
                    vals[l.name] = mps.effective_activations(
                        xin, delta_hat, self.pset_x, params[f"{l.name}.clip"], rounding=rounding)
            else:
                vals[l.name] = self._structural(l, vals)
        return vals[self.graph.output_layer().name]

    def assigned_forward(self, params: dict, x: np.ndarray | Tensor,
                         assignment: mps.Assignment, rounding: bool = True) -> Tensor:
        """Fixed-assignment evaluation: per-channel weight bits, per-layer activation bits.

        With every channel masked by its assigned precision this doubles as the
        masked-original oracle for export equivalence checks.
        """
        self._require_folded()
        vals = {INPUT_REF: x if isinstance(x, Tensor) else Tensor(np.asarray(x))}
        for l in self.graph.layers:
            if l.quantizable:
                bits = assignment.weight_bits[l.name]
                w_q = quant.fake_quantize_weights_assigned(params[f"{l.name}.weight"], bits, rounding)
                alive = Tensor((bits != 0).astype(params[f"{l.name}.bias"].data.dtype))
                b_q = ad.mul(params[f"{l.name}.bias"], alive)
                vals[l.name] = self._apply(l, vals[l.inputs[0]], w_q, b_q)
            elif l.kind == "relu":
                xin = vals[l.inputs[0]]
                owner = self.sites.get(l.name)
                nbits = assignment.act_bits.get(owner) if owner else None
                if nbits is None:
                    vals[l.name] = ad.relu(xin)
                else:
                    vals[l.name] = quant.fake_quantize_activations(
                        xin, params[f"{l.name}.clip"], int(nbits), rounding)
            else:
                vals[l.name] = self._structural(l, vals)
        return vals[self.graph.output_layer().name]

    def _require_folded(self):
        if any(l.kind == "batchnorm" for l in self.graph.layers):
            raise GraphError("quantized execution requires batch-norm folding first")


def predictions(logits: Tensor) -> np.ndarray:
    return np.argmax(logits.data, axis=1)


def accuracy(logits: Tensor, labels: np.ndarray) -> float:
    return float(np.mean(predictions(logits) == labels))
