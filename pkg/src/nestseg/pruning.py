"""Inference-time pruning of a deep-supervised nested network to one output head."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import List, Optional, Set

import numpy as np

from .data import DataSplit
from .graph import INPUT, ModelGraph, NodeId, dependency_cone, flop_count, forward, param_count
from .losses import dice_per_image, iou_per_image
from .tensor import Tensor
from .trainer import Checkpoint

REPORT_HEADER = ("level", "params", "flops", "seconds_per_image", "iou", "dice")


def pruned_node_set(depth: int, level: int) -> Set[NodeId]:
    """Closed form of the nodes head ``level`` depends on: all ``i + j <= level``."""
    return {NodeId(i, j) for i in range(depth) for j in range(depth) if i + j <= level}


@dataclass
class PrunedModel:
    level: int
    graph: ModelGraph  # shares Parameter objects with the parent

    def forward(self, x: Tensor) -> Tensor:
        return forward(self.graph, x, ("fast", self.level))

    @property
    def nodes(self) -> Set[NodeId]:
        return set(self.graph.nodes)


def prune(graph: ModelGraph, level: int, checkpoint: Optional[Checkpoint] = None) -> PrunedModel:
    """Cut ``graph`` down to what head ``X[0, level]`` needs.

    The kept nodes are found by walking input edges back from the head and
    cross-checked against the closed form. No parameter is copied or
    modified; a ``checkpoint`` is only verified and loaded into ``graph``.
    """
    spec = graph.spec
    if spec.variant != "unetpp" or not spec.deep_supervision:
        raise ValueError("pruning needs a deep-supervised unetpp graph")
    if not 1 <= level <= spec.depth - 1:
        raise ValueError(f"pruning level must be in [1, {spec.depth - 1}], got {level}")
    if level not in graph.heads:
        raise ValueError(f"graph has no head at X0,{level}")
    if checkpoint is not None:
        checkpoint.restore(graph)
    keep = dependency_cone(spec, [NodeId(0, level)])
    if set(keep) != pruned_node_set(spec.depth, level):
        raise AssertionError(f"reachability {sorted(keep)} disagrees with the i+j<={level} rule")
    nodes = {n: graph.nodes[n] for n in keep}
    edges = [e for e in graph.edges if e[2] in nodes and (e[0] == INPUT or e[0] in nodes)]
    sub = ModelGraph(spec, nodes, {level: graph.heads[level]}, edges)
    return PrunedModel(level, sub)


@dataclass
class PruneRow:
    level: int
    params: int
    flops: int
    seconds_per_image: float
    iou: float
    dice: float


def pruning_report(graph: ModelGraph, split: DataSplit, checkpoint: Optional[Checkpoint] = None,
                   n_images: Optional[int] = None, warmup: int = 10, batch_size: int = 1) -> List[PruneRow]:
    """Parameters, FLOPs, per-image wall time and accuracy for every level.

    Timing covers ``n_images`` images (default: the whole split) after
    ``warmup`` untimed passes; only relative times are meaningful.
    """
    if checkpoint is not None:
        checkpoint.restore(graph)
    if len(split) == 0:
        raise ValueError(f"split {split.name!r} is empty")
    dtype = next(iter(graph.parameters.values())).dtype
    n = len(split) if n_images is None else min(n_images, len(split))
    rows = []
    for level in range(1, graph.spec.depth):
        model = prune(graph, level)
        for k in range(warmup):
            model.forward(Tensor(split.images[k % len(split):k % len(split) + 1].astype(dtype)))
        ious, dices = [], []
        elapsed = 0.0
        for start in range(0, len(split), batch_size):
            x = split.images[start:start + batch_size].astype(dtype)
            t0 = time.perf_counter()
            out = model.forward(Tensor(x))
            if start < n:
                elapsed += time.perf_counter() - t0
            y = split.masks[start:start + batch_size]
            ious.extend(iou_per_image(out.data, y))
            dices.extend(dice_per_image(out.data, y))
        rows.append(PruneRow(level, param_count(model.graph), flop_count(model.graph),
                             elapsed / max(n, 1), float(np.mean(ious)), float(np.mean(dices))))
    return rows


def write_report_csv(path, rows: List[PruneRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r.level, r.params, r.flops, f"{r.seconds_per_image:.6f}", f"{r.iou:.6f}", f"{r.dice:.6f}"])
