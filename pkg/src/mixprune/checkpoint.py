"""Checkpoint container: JSON manifest + named float32 tensor blobs."""

from __future__ import annotations

import numpy as np

from .containers import read_container, write_container
from .errors import ConfigError, FormatError
from .graph import NetworkGraph
from .mps import Assignment

MAGIC = b"MXCK"


def save_checkpoint(path, phase: str, graph: NetworkGraph, params: dict,
                    config: dict | None = None, assignment: Assignment | None = None,
                    selectors: dict | None = None, metrics: dict | None = None) -> None:
    tensors = {f"param/{k}": np.asarray(v, dtype=np.float32) for k, v in params.items()}
    if selectors:
        tensors.update({f"selector/{k}": np.asarray(v, dtype=np.float32)
                        for k, v in selectors.items()})
    manifest = {
        "phase": phase,
        "graph": graph.to_json(),
        "config": config or {},
        "assignment": assignment.to_json() if assignment is not None else None,
        "metrics": metrics or {},
    }
    write_container(path, MAGIC, 1, manifest, tensors)


class Checkpoint:
    def __init__(self, phase, graph, params, config, assignment, selectors, metrics):
        self.phase = phase
        self.graph = graph
        self.params = params
        self.config = config
        self.assignment = assignment
        self.selectors = selectors
        self.metrics = metrics


def load_checkpoint(path) -> Checkpoint:
    try:
        _, manifest, tensors = read_container(path, MAGIC, max_version=1)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    selectors = {k[len("selector/"):]: v for k, v in tensors.items() if k.startswith("selector/")}
    assignment = manifest.get("assignment")
    return Checkpoint(
        phase=manifest.get("phase", ""),
        graph=NetworkGraph.from_json(manifest["graph"]),
        params=params,
        config=manifest.get("config", {}),
        assignment=Assignment.from_json(assignment) if assignment else None,
        selectors=selectors,
        metrics=manifest.get("metrics", {}),
    )
