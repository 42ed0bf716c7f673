"""Three-phase training pipeline: float warmup, joint search, fixed fine-tune.

The search phase minimizes task loss + lambda * cost over both the network
weights and the bit-width selection parameters, with one selector sample per
optimizer step shared by the task and cost terms. Runs are deterministic given
(config, seed): every random draw comes from per-phase seeded generators and
evaluation never consumes random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import mps, network, quant
from .autodiff import Tensor
from .cost import CostModel
from .data import Dataset
from .errors import ConfigError, DegenerateModelError
from .graph import NetworkGraph
from .optim import OptimSpec, make_optimizer

PHASES = ("warmup", "search", "finetune")


@dataclass
class TauSchedule:
    initial: float = 1.0
    factor: float = float(np.exp(-0.045))
    floor: float = 1e-3

    @classmethod
    def from_json(cls, doc: dict) -> "TauSchedule":
        return cls(**{k: doc[k] for k in doc if k in cls.__dataclass_fields__})


@dataclass
class EarlyStopSpec:
    patience: int = 50
    metric: str = "val_accuracy"  # "val_accuracy" | "val_loss"

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.metric not in ("val_accuracy", "val_loss"):
            raise ConfigError(f"unknown control metric '{self.metric}'")

    @classmethod
    def from_json(cls, doc: dict) -> "EarlyStopSpec":
        return cls(**{k: doc[k] for k in doc if k in cls.__dataclass_fields__})


@dataclass
class TrainConfig:
    warmup_epochs: int = 24
    search_epochs: int = 24
    finetune_epochs: int = 12
    batch_size: int = 96
    weight_opt: OptimSpec = field(default_factory=lambda: OptimSpec("adam", 1e-3, 0.0, 1e-4))
    selector_opt: OptimSpec = field(default_factory=lambda: OptimSpec("sgd", 1e-2, 0.9, 0.0))
    lam: float = 0.0
    sampling: str = "sm"
    tau: TauSchedule = field(default_factory=TauSchedule)
    early_stop: EarlyStopSpec = field(default_factory=EarlyStopSpec)
    class_weights: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.sampling not in mps.SAMPLING_METHODS:
            raise ConfigError(f"unknown sampling method '{self.sampling}'")
        for name in ("warmup_epochs", "search_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        kwargs = {k: doc[k] for k in doc if k in cls.__dataclass_fields__}
        if "weight_opt" in kwargs:
            kwargs["weight_opt"] = OptimSpec.from_json(kwargs["weight_opt"])
        if "selector_opt" in kwargs:
            kwargs["selector_opt"] = OptimSpec.from_json(kwargs["selector_opt"])
        if "tau" in kwargs:
            kwargs["tau"] = TauSchedule.from_json(kwargs["tau"])
        if "early_stop" in kwargs:
            kwargs["early_stop"] = EarlyStopSpec.from_json(kwargs["early_stop"])
        return cls(**kwargs)


@dataclass
class SearchResult:
    params: dict
    selectors: dict
    assignment: mps.Assignment
    history: list
    final: dict


@dataclass
class ParetoFront:
    points: list  # non-dominated, each {"lambda", "seed", "accuracy", "cost", "checkpoint"}

    def __post_init__(self):
        for a in self.points:
            for b in self.points:
                if a is not b and _dominates(a, b):
                    raise ValueError("Pareto front contains a dominated point")


def _dominates(a: dict, b: dict) -> bool:
    return (a["accuracy"] >= b["accuracy"] and a["cost"] <= b["cost"]
            and (a["accuracy"] > b["accuracy"] or a["cost"] < b["cost"]))


def pareto_filter(points: list) -> list:
    ok = [p for p in points if not p.get("failed")]
    front = [p for p in ok if not any(_dominates(q, p) for q in ok if q is not p)]
    # drop exact duplicates in (accuracy, cost)
    seen, unique = set(), []
    for p in front:
        key = (p["accuracy"], p["cost"])
        if key not in seen:
            seen.add(key)
            unique.append(p)
    return unique


def early_stop(history: list, patience: int, metric: str = "val_accuracy") -> bool:
    """True when the control metric has not improved for `patience` epochs."""
    if patience < 1:
        raise ConfigError(f"patience must be >= 1, got {patience}")
    values = [h[metric] for h in history] if history and isinstance(history[0], dict) else list(history)
    if not values:
        return False
    sign = -1.0 if metric == "val_loss" else 1.0
    best = 0
    for i, v in enumerate(values):
        if sign * v > sign * values[best]:
            best = i
    return (len(values) - 1 - best) >= patience


# ---------------------------------------------------------------------------
# helpers


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _leaf_params(params: dict) -> dict:
    return {k: Tensor(np.asarray(v), requires_grad=True) for k, v in params.items()}


def _grads_of(leaves: dict) -> dict:
    return {k: t.grad for k, t in leaves.items() if t.grad is not None}


def _zero_grads(*leaf_dicts):
    for d in leaf_dicts:
        for t in d.values():
            t.grad = None


def _snapshot(arrs: dict) -> dict:
    return {k: v.copy() for k, v in arrs.items()}


def _check_finite(value: float, phase: str, epoch: int):
    if not math.isfinite(value):
        raise RuntimeError(f"{phase} diverged at epoch {epoch}: loss={value}")


def _evaluate(forward, x: np.ndarray, y: np.ndarray, class_weights=None, chunk: int = 512):
    """Deterministic loss/accuracy over a split, in chunks."""
    losses, hits, total_w = [], 0, 0.0
    for i in range(0, len(x), chunk):
        logits = forward(x[i:i + chunk])
        yb = y[i:i + chunk]
        loss = ad.softmax_cross_entropy(logits, yb, class_weights)
        w = float(len(yb)) if class_weights is None else float(np.sum(np.asarray(class_weights)[yb]))
        losses.append(float(loss.data) * w)
        total_w += w
        hits += int(np.sum(network.predictions(logits) == yb))
    return sum(losses) / total_w, hits / len(x)


class _BestTracker:
    def __init__(self, metric: str):
        self.metric = metric
        self.sign = -1.0 if metric == "val_loss" else 1.0
        self.best_value = -np.inf
        self.state = None

    def update(self, record: dict, state: dict) -> None:
        v = self.sign * record[self.metric]
        if v > self.best_value:
            self.best_value = v
            self.state = state


# ---------------------------------------------------------------------------
# phases


def warmup(graph: NetworkGraph, params: dict, dataset: Dataset, config: TrainConfig,
           log=None) -> tuple:
    """Float-weight training on the task loss only. Returns (params, history)."""
    ex = network.Executor(graph)
    params = _snapshot(params)
    rng = np.random.default_rng([config.seed, 0])
    opt = make_optimizer(config.weight_opt)
    cw = dataset.class_weights() if config.class_weights else None
    history = []
    best = _BestTracker(config.early_stop.metric)
    for epoch in range(config.warmup_epochs):
        leaves = _leaf_params(params)
        task_sum, nb = 0.0, 0
        for idx in _batches(len(dataset.x_train), config.batch_size, rng):
            _zero_grads(leaves)
            logits = ex.float_forward(leaves, dataset.x_train[idx])
            loss = ad.softmax_cross_entropy(logits, dataset.y_train[idx], cw)
            ad.backward(loss)
            opt.step(params, _grads_of(leaves))
            task_sum += float(loss.data)
            nb += 1
        task = task_sum / max(nb, 1)
        _check_finite(task, "warmup", epoch)
        eval_leaves = network.make_leaves(params)
        val_loss, val_acc = _evaluate(lambda xb: ex.float_forward(eval_leaves, xb),
                                      dataset.x_val, dataset.y_val, cw)
        rec = {"phase": "warmup", "epoch": epoch, "task_loss": task, "cost": 0.0,
               "total_loss": task, "val_loss": val_loss, "val_accuracy": val_acc, "tau": None}
        history.append(rec)
        if log:
            log(rec)
        best.update(rec, _snapshot(params))
        if early_stop(history, config.early_stop.patience, config.early_stop.metric):
            break
    if best.state is not None:
        params = best.state
    return params, history


def _init_search_state(graph: NetworkGraph, config: TrainConfig,
                       pset_w: quant.PrecisionSet, pset_x: quant.PrecisionSet):
    groups_act = network.groups_with_activation(graph)
    selectors = {}
    for gid, group in enumerate(graph.selector_groups):
        c_out = graph.by_name[group[0]].c_out
        gamma = mps.init_selectors(pset_w, rows=c_out)
        delta = mps.init_selectors(pset_x) if gid in groups_act else None
        selectors[gid] = mps.SelectorParams(
            gamma=Tensor(gamma, requires_grad=True),
            delta=Tensor(delta, requires_grad=True) if delta is not None else None,
            tau=config.tau.initial, method=config.sampling)
    return selectors


def _deterministic_sample(sel: mps.SelectorParams, tau: float):
    """Noise-free sample used for evaluation, rescaling and discretization."""
    method = "sm" if sel.method == "sm" else "am"
    gh = mps.sample(sel.gamma, method, tau)
    dh = mps.sample(sel.delta, method, tau) if sel.delta is not None else None
    return gh, dh


def _sample_step(selectors: dict, tau: float, method: str, rng: np.random.Generator) -> dict:
    sampled = {}
    for gid in sorted(selectors):
        sel = selectors[gid]
        noise_g = rng.gumbel(size=sel.gamma.data.shape) if method == "hgsm" else None
        gh = mps.sample(sel.gamma, method, tau, noise=noise_g)
        dh = None
        if sel.delta is not None:
            noise_d = rng.gumbel(size=sel.delta.data.shape) if method == "hgsm" else None
            dh = mps.sample(sel.delta, method, tau, noise=noise_d)
        sampled[gid] = (gh, dh)
    return sampled


def discretize(graph: NetworkGraph, selectors: dict, pset_w: quant.PrecisionSet,
               pset_x: quant.PrecisionSet, tau: float) -> mps.Assignment:
    """Argmax assignment; raises DegenerateModelError if a layer loses every channel."""
    weight_bits, act_bits = {}, {}
    dead = []
    for gid, group in enumerate(graph.selector_groups):
        gh, dh = _deterministic_sample(selectors[gid], tau)
        bits = mps.discretize_row(gh.data, pset_w)
        for name in group:
            weight_bits[name] = bits.copy()
            if dh is not None:
                act_bits[name] = int(np.asarray(pset_x.bits)[mps._argmax_highest(dh.data)])
        if np.all(bits == 0):
            dead.extend(group)
    if dead:
        raise DegenerateModelError(f"discretization pruned every channel of: {', '.join(dead)}")
    return mps.Assignment(weight_bits, act_bits)


def search(graph: NetworkGraph, params: dict, dataset: Dataset, config: TrainConfig,
           cost_model: CostModel, log=None) -> SearchResult:
    """Joint optimization of weights and selectors under task loss + lambda * cost."""
    pset_w, pset_x = cost_model.pset_w, cost_model.pset_x
    ex = network.Executor(graph, pset_w, pset_x)
    params = _snapshot(params)
    for name, c in network.init_clips(graph).items():
        params.setdefault(name, c)
    rng = np.random.default_rng([config.seed, 1])
    selectors = _init_search_state(graph, config, pset_w, pset_x)

    # one-time weight rescaling by the initial nonzero-precision mass
    for gid, group in enumerate(graph.selector_groups):
        gh, _ = _deterministic_sample(selectors[gid], config.tau.initial)
        for name in group:
            params[f"{name}.weight"] = mps.rescale_weights(
                params[f"{name}.weight"], gh.data, pset_w)

    w_opt = make_optimizer(config.weight_opt)
    s_opt = make_optimizer(config.selector_opt)
    cw = dataset.class_weights() if config.class_weights else None
    history = []
    best = _BestTracker(config.early_stop.metric)

    def selector_arrays():
        out = {}
        for gid, sel in selectors.items():
            out.update(sel.state_arrays(f"g{gid}"))
        return out

    def eval_forward(tau):
        sampled = {gid: _deterministic_sample(sel, tau) for gid, sel in selectors.items()}
        leaves = network.make_leaves(params)
        return lambda xb: ex.search_forward(leaves, xb, sampled)

    tau = config.tau.initial
    for epoch in range(config.search_epochs):
        tau = mps.temperature_step(epoch, config.tau.initial, config.tau.factor, config.tau.floor)
        for sel in selectors.values():
            sel.tau = tau
        leaves = _leaf_params(params)
        sel_leaves = {}
        for gid, sel in selectors.items():
            sel_leaves[f"g{gid}.gamma"] = sel.gamma
            if sel.delta is not None:
                sel_leaves[f"g{gid}.delta"] = sel.delta
        task_sum = cost_sum = 0.0
        nb = 0
        for idx in _batches(len(dataset.x_train), config.batch_size, rng):
            _zero_grads(leaves, sel_leaves)
            sampled = _sample_step(selectors, tau, config.sampling, rng)
            logits = ex.search_forward(leaves, dataset.x_train[idx], sampled)
            task = ad.softmax_cross_entropy(logits, dataset.y_train[idx], cw)
            cost = cost_model.soft(sampled)
            total = ad.add(task, ad.scale(cost, config.lam))
            ad.backward(total)
            w_opt.step(params, _grads_of(leaves))
            sel_arrays = {k: t.data for k, t in sel_leaves.items()}
            s_opt.step(sel_arrays, _grads_of(sel_leaves))
            for name in params:
                if name.endswith(".clip"):
                    np.maximum(params[name], quant.CLIP_FLOOR, out=params[name])
            task_sum += float(task.data)
            cost_sum += float(cost.data)
            nb += 1
        task_m, cost_m = task_sum / max(nb, 1), cost_sum / max(nb, 1)
        _check_finite(task_m + config.lam * cost_m, "search", epoch)
        val_loss, val_acc = _evaluate(eval_forward(tau), dataset.x_val, dataset.y_val, cw)
        rec = {"phase": "search", "epoch": epoch, "task_loss": task_m, "cost": cost_m,
               "total_loss": task_m + config.lam * cost_m,
               "val_loss": val_loss, "val_accuracy": val_acc, "tau": tau}
        history.append(rec)
        if log:
            log(rec)
        best.update(rec, {"params": _snapshot(params), "selectors": _snapshot(selector_arrays())})
        if early_stop(history, config.early_stop.patience, config.early_stop.metric):
            break

    if best.state is not None:
        params = best.state["params"]
        for gid, sel in selectors.items():
            sel.gamma.data = best.state["selectors"][f"g{gid}.gamma"]
            if sel.delta is not None:
                sel.delta.data = best.state["selectors"][f"g{gid}.delta"]

    assignment = discretize(graph, selectors, pset_w, pset_x, tau)
    eval_leaves = network.make_leaves(params)
    val_loss, val_acc = _evaluate(
        lambda xb: ex.assigned_forward(eval_leaves, xb, assignment),
        dataset.x_val, dataset.y_val, cw)
    final = {"val_accuracy": val_acc, "val_loss": val_loss,
             "cost": cost_model.discrete(assignment), "cost_unit": cost_model.unit}
    return SearchResult(params, selector_arrays(), assignment, history, final)


def finetune(graph: NetworkGraph, params: dict, assignment: mps.Assignment,
             dataset: Dataset, config: TrainConfig, cost_model: CostModel | None = None,
             log=None) -> tuple:
    """Quantization-aware training at the frozen assignment; weights (and clips) only."""
    pset_w = cost_model.pset_w if cost_model else None
    pset_x = cost_model.pset_x if cost_model else None
    ex = network.Executor(graph, pset_w, pset_x)
    params = _snapshot(params)
    for name, c in network.init_clips(graph).items():
        params.setdefault(name, c)
    rng = np.random.default_rng([config.seed, 2])
    opt = make_optimizer(config.weight_opt)
    cw = dataset.class_weights() if config.class_weights else None
    history = []
    best = _BestTracker(config.early_stop.metric)
    for epoch in range(config.finetune_epochs):
        leaves = _leaf_params(params)
        task_sum, nb = 0.0, 0
        for idx in _batches(len(dataset.x_train), config.batch_size, rng):
            _zero_grads(leaves)
            logits = ex.assigned_forward(leaves, dataset.x_train[idx], assignment)
            loss = ad.softmax_cross_entropy(logits, dataset.y_train[idx], cw)
            ad.backward(loss)
            opt.step(params, _grads_of(leaves))
            for name in params:
                if name.endswith(".clip"):
                    np.maximum(params[name], quant.CLIP_FLOOR, out=params[name])
            task_sum += float(loss.data)
            nb += 1
        task = task_sum / max(nb, 1)
        _check_finite(task, "finetune", epoch)
        eval_leaves = network.make_leaves(params)
        val_loss, val_acc = _evaluate(
            lambda xb: ex.assigned_forward(eval_leaves, xb, assignment),
            dataset.x_val, dataset.y_val, cw)
        rec = {"phase": "finetune", "epoch": epoch, "task_loss": task, "cost": 0.0,
               "total_loss": task, "val_loss": val_loss, "val_accuracy": val_acc, "tau": None}
        history.append(rec)
        if log:
            log(rec)
        best.update(rec, _snapshot(params))
        if early_stop(history, config.early_stop.patience, config.early_stop.metric):
            break
    if best.state is not None:
        params = best.state
    return params, history


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class PipelineResult:
    params: dict
    assignment: mps.Assignment | None
    selectors: dict
    history: list
    final: dict


def run_pipeline(graph: NetworkGraph, params: dict, dataset: Dataset, config: TrainConfig,
                 cost_model: CostModel, phases=PHASES, log=None) -> PipelineResult:
    history = []

    def tee(rec):
        history.append(rec)
        if log:
            log(rec)

    assignment, selectors, final = None, {}, {}
    if "warmup" in phases:
        params, _ = warmup(graph, params, dataset, config, log=tee)
    if "search" in phases:
        res = search(graph, params, dataset, config, cost_model, log=tee)
        params, assignment, selectors, final = res.params, res.assignment, res.selectors, res.final
    if "finetune" in phases:
        if assignment is None:
            raise ConfigError("finetune phase requires a search assignment")
        params, _ = finetune(graph, params, assignment, dataset, config, cost_model, log=tee)
        ex = network.Executor(graph, cost_model.pset_w, cost_model.pset_x)
        cw = dataset.class_weights() if config.class_weights else None
        leaves = network.make_leaves(params)
        val_loss, val_acc = _evaluate(
            lambda xb: ex.assigned_forward(leaves, xb, assignment),
            dataset.x_val, dataset.y_val, cw)
        _, test_acc = _evaluate(
            lambda xb: ex.assigned_forward(leaves, xb, assignment),
            dataset.x_test, dataset.y_test, cw)
        final = dict(final, val_accuracy=val_acc, val_loss=val_loss, test_accuracy=test_acc)
    return PipelineResult(params, assignment, selectors, history, final)


def pareto_sweep(graph: NetworkGraph, params: dict, dataset: Dataset, config: TrainConfig,
                 cost_model: CostModel, lambdas, seeds=None, log=None, on_point=None):
    """Independent pipeline per (lambda, seed); returns (all points, Pareto front).

    The float warmup does not depend on lambda, so one deterministic warmup per
    seed is shared by that seed's lambda runs (bit-identical to re-running it).
    Failed runs are recorded and the sweep continues.
    """
    lams = list(dict.fromkeys(float(l) for l in lambdas))
    if len(lambdas) < 2:
        raise ConfigError("a sweep needs at least 2 lambda values")
    seeds = [config.seed] if seeds is None else list(seeds)
    points = []
    for seed in seeds:
        cfg_seed = replace(config, seed=seed)
        warm, _ = warmup(graph, params, dataset, cfg_seed, log=log)
        for lam in lams:
            cfg = replace(cfg_seed, lam=lam)
            point = {"lambda": lam, "seed": seed, "accuracy": None, "cost": None,
                     "checkpoint": None, "failed": False, "error": None}
            try:
                res = run_pipeline(graph, warm, dataset, cfg, cost_model,
                                   phases=("search", "finetune"), log=log)
                point["accuracy"] = res.final["val_accuracy"]
                point["cost"] = res.final["cost"]
                if on_point:
                    point["checkpoint"] = on_point(cfg, res, point)
            except (DegenerateModelError, RuntimeError) as e:
                point["failed"] = True
                point["error"] = f"{type(e).__name__}: {e}"
            points.append(point)
    front = ParetoFront(pareto_filter(points))
    return points, front
