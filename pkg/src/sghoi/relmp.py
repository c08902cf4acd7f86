"""Relation-aware message passing over the scene graph.

Human and object nodes are refined by inter-class and intra-class messages
gated by predicate-embedding vectors, applied synchronously for a fixed
number of rounds.  Neighborhoods include edges in both directions; the gate
uses the edge's stored predicate regardless of traversal direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import ops
from .datamodel import ContractError, FeatureBundle, SceneGraph, Vocabulary
from .sgembed import predicate_mixture


@dataclass(frozen=True)
class PassingConfig:
    """Round count and the relation-awareness switch (False = uniform gates)."""

    rounds: int = 2
    relation_aware: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ContractError(f"passing rounds must be >= 1, got {self.rounds}")


@dataclass
class RefinedFeatures:
    """Per-node refined feature vectors after ``rounds`` passing rounds."""

    features: Dict[int, object]
    rounds: int

    def array(self, node_id: int) -> np.ndarray:
        return ops.value_of(self.features[node_id])


def _as_feature_map(features) -> Dict[int, object]:
    if isinstance(features, FeatureBundle):
        return dict(features.features)
    return dict(features)


def edge_gates(sg: SceneGraph, vocab: Vocabulary, params, relation_aware: bool, d_f: int):
    """Per-edge gate vectors in feature space; all-ones when not relation-aware."""
    if not relation_aware:
        ones = np.ones(d_f, dtype=np.float64)
        return [ones for _ in sg.edges]
    return [
        ops.matmul(params["msg.alpha_proj"], predicate_mixture(edge, vocab))
        for edge in sg.edges
    ]


def _path_keys(target_is_human: bool, same_class: bool):
    if same_class:
        return ("msg.h2h", "msg.o2o")[0 if target_is_human else 1]
    return ("msg.o2h", "msg.h2o")[0 if target_is_human else 1]


def neighbor_index(sg: SceneGraph) -> Dict[int, list]:
    """Per node: incident (edge_index, other_id, other_is_human) triples,
    in edge order, covering both traversal directions."""
    human = {n.node_id: n.is_human for n in sg.nodes}
    index: Dict[int, list] = {n.node_id: [] for n in sg.nodes}
    for k, edge in enumerate(sg.edges):
        index[edge.subject_id].append((k, edge.object_id, human[edge.object_id]))
        index[edge.object_id].append((k, edge.subject_id, human[edge.subject_id]))
    return index


def _messages(
    target_id: int,
    sg: SceneGraph,
    features: Dict[int, object],
    params,
    gates,
    same_class: bool,
    d_f: int,
    index: Optional[Dict[int, list]] = None,
):
    target = sg.node_by_id(target_id)
    path = _path_keys(target.is_human, same_class)
    if index is None:
        index = neighbor_index(sg)
    acc = None
    for edge_idx, other_id, other_is_human in index[target_id]:
        if (other_is_human == target.is_human) != same_class:
            continue
        term = ops.mul(ops.matmul(params[f"{path}.src"], features[other_id]), gates[edge_idx])
        acc = term if acc is None else ops.add(acc, term)
    if acc is None:
        return np.zeros(d_f, dtype=np.float64)
    return ops.matmul(params[f"{path}.out"], acc)


def _feature_dim(features: Dict[int, object]) -> int:
    for vec in features.values():
        return int(ops.value_of(vec).shape[0])
    return 0


def inter_class_messages(
    target_id: int,
    sg: SceneGraph,
    features,
    vocab: Vocabulary,
    params,
    relation_aware: bool = True,
    gates=None,
):
    """Aggregated gated message from neighbors of the other class."""
    feature_map = _as_feature_map(features)
    d_f = _feature_dim(feature_map)
    if gates is None:
        gates = edge_gates(sg, vocab, params, relation_aware, d_f)
    return _messages(target_id, sg, feature_map, params, gates, same_class=False, d_f=d_f)


def intra_class_messages(
    target_id: int,
    sg: SceneGraph,
    features,
    vocab: Vocabulary,
    params,
    relation_aware: bool = True,
    gates=None,
):
    """Aggregated gated message from neighbors of the same class."""
    feature_map = _as_feature_map(features)
    d_f = _feature_dim(feature_map)
    if gates is None:
        gates = edge_gates(sg, vocab, params, relation_aware, d_f)
    return _messages(target_id, sg, feature_map, params, gates, same_class=True, d_f=d_f)


def refine_round(
    sg: SceneGraph,
    features,
    vocab: Vocabulary,
    params,
    relation_aware: bool = True,
    gates=None,
    index=None,
) -> RefinedFeatures:
    """One synchronous round: refined = feature + intra + inter per node.

    Messages are grouped by class-pair path and applied as batched products;
    every message reads the round's input features, so node iteration order
    cannot change the result.
    """
    feature_map = _as_feature_map(features)
    d_f = _feature_dim(feature_map)
    if gates is None:
        gates = edge_gates(sg, vocab, params, relation_aware, d_f)
    if index is None:
        index = neighbor_index(sg)
    n = len(sg.nodes)
    position = {node.node_id: i for i, node in enumerate(sg.nodes)}

    grouped: Dict[str, list] = {"msg.h2h": [], "msg.o2o": [], "msg.o2h": [], "msg.h2o": []}
    for node in sg.nodes:
        for edge_idx, other_id, other_is_human in index[node.node_id]:
            path = _path_keys(node.is_human, same_class=(other_is_human == node.is_human))
            grouped[path].append((position[node.node_id], other_id, edge_idx))

    total = ops.stack_rows([feature_map[node.node_id] for node in sg.nodes])
    for path, entries in grouped.items():
        if not entries:
            continue
        sources = ops.stack_rows([feature_map[src] for _, src, _ in entries])
        gating = ops.stack_rows([gates[edge_idx] for _, _, edge_idx in entries])
        terms = ops.mul(ops.matmul(sources, ops.transpose(params[f"{path}.src"])), gating)
        aggregated = ops.index_add(n, [tgt for tgt, _, _ in entries], terms)
        total = ops.add(total, ops.matmul(aggregated, ops.transpose(params[f"{path}.out"])))

    refined = {node.node_id: ops.row(total, i) for i, node in enumerate(sg.nodes)}
    return RefinedFeatures(refined, rounds=1)


def run_passing(
    sg: SceneGraph,
    features,
    vocab: Vocabulary,
    params,
    config: Optional[PassingConfig] = None,
) -> RefinedFeatures:
    """Iterated refinement, each round feeding the next."""
    config = config or PassingConfig()
    feature_map = _as_feature_map(features)
    d_f = _feature_dim(feature_map)
    gates = edge_gates(sg, vocab, params, config.relation_aware, d_f)
    index = neighbor_index(sg)
    for _ in range(config.rounds):
        feature_map = refine_round(
            sg, feature_map, vocab, params, config.relation_aware, gates=gates, index=index
        ).features
    return RefinedFeatures(feature_map, rounds=config.rounds)
