"""Scene-level composition: pair enumeration, labels, forward pass, detections."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import ops, pairfeat, relmp, sgembed
from .datamodel import (
    AnnotationSet,
    DataError,
    FeatureBundle,
    HOIDetection,
    SceneGraph,
    Vocabulary,
    iou,
    load_annotations,
    load_features,
    load_scene_graph,
    read_json,
)


@dataclass
class SceneSample:
    """One scene's inputs: graph, appearance features, optional ground truth."""

    graph: SceneGraph
    features: FeatureBundle
    annotations: Optional[AnnotationSet] = None


@dataclass
class ScenePrep:
    """Precomputed pair bookkeeping; masks are rasterized lazily per pass."""

    pairs: List[Tuple[int, int]]
    lam: np.ndarray
    labels: Optional[np.ndarray]


def _node_score(sample: SceneSample, node_id: int) -> float:
    score = sample.features.scores.get(node_id)
    if score is None:
        score = sample.graph.node_by_id(node_id).score
    return float(score)


def enumerate_pairs(sample: SceneSample, config) -> Tuple[List[Tuple[int, int]], np.ndarray]:
    """All (human, partner) pairs passing detector-score thresholds.

    Humans pair with every other node, including other humans in the object
    role.  The pair prior is (s_h * s_o) ** lambda_gamma.
    """
    data_cfg = config["data"]
    gamma = float(config["train"]["lambda_gamma"])
    pairs: List[Tuple[int, int]] = []
    lams: List[float] = []
    for human in sample.graph.nodes:
        if not human.is_human:
            continue
        s_h = _node_score(sample, human.node_id)
        if s_h < data_cfg["human_score_threshold"]:
            continue
        for other in sample.graph.nodes:
            if other.node_id == human.node_id:
                continue
            s_o = _node_score(sample, other.node_id)
            if s_o < data_cfg["object_score_threshold"]:
                continue
            pairs.append((human.node_id, other.node_id))
            lams.append(min(1.0, max(0.0, (s_h * s_o) ** gamma)))
    return pairs, np.asarray(lams, dtype=np.float64)


def labels_for_pairs(
    sample: SceneSample, pairs: List[Tuple[int, int]], num_interactions: int
) -> np.ndarray:
    """Multi-hot targets per pair, matched to ground truth by box overlap."""
    labels = np.zeros((len(pairs), num_interactions), dtype=np.float64)
    if sample.annotations is None:
        return labels
    for row, (h_id, o_id) in enumerate(pairs):
        h_box = sample.graph.node_by_id(h_id).box
        o_node = sample.graph.node_by_id(o_id)
        for gt in sample.annotations.hois:
            if gt.interaction_id >= num_interactions:
                continue
            if iou(h_box, gt.human_box) <= 0.5:
                continue
            if gt.object_box is not None:
                if iou(o_node.box, gt.object_box) <= 0.5:
                    continue
                if gt.object_category is not None and gt.object_category != o_node.category_id:
                    continue
            labels[row, gt.interaction_id] = 1.0
    return labels


def prepare_scene(sample: SceneSample, vocab: Vocabulary, config) -> ScenePrep:
    pairs, lam = enumerate_pairs(sample, config)
    labels = labels_for_pairs(sample, pairs, vocab.num_interactions)
    return ScenePrep(pairs=pairs, lam=lam, labels=labels)


def mask_matrix(sample: SceneSample, prep: ScenePrep, vocab: Vocabulary, size: int) -> np.ndarray:
    """Flattened semantic-mask rows for every pair of one scene."""
    rows = []
    for h_id, o_id in prep.pairs:
        human = sample.graph.node_by_id(h_id)
        obj = sample.graph.node_by_id(o_id)
        rows.append(
            pairfeat.build_semantic_masks(
                human.box,
                obj.box,
                human.category_id,
                obj.category_id,
                sample.graph.image_width,
                sample.graph.image_height,
                vocab,
                size=size,
            ).flat()
        )
    return np.stack(rows)


def mask_gates(mask_inputs: np.ndarray, params):
    """Sigmoid spatial gates for a batch of flattened mask rows."""
    return ops.sigmoid(
        ops.add(
            ops.matmul(mask_inputs, params["mask.proj.weight"]),
            params["mask.proj.bias"],
        )
    )


def scene_probabilities(
    sample: SceneSample, prep: ScenePrep, vocab: Vocabulary, params, config, gates=None
):
    """Fused per-pair interaction probabilities, shape (num_pairs, classes).

    Returns a traced Var when ``params`` holds graph leaves, else an ndarray.
    ``gates`` may carry precomputed spatial gates (the trainer projects whole
    batches of mask rows in one product).
    """
    n_pairs = len(prep.pairs)
    K = vocab.num_interactions
    if n_pairs == 0:
        return np.zeros((0, K), dtype=np.float64)
    model_cfg = config["model"]
    passing_cfg = config["passing"]
    ablation = config["ablation"]

    raw = {node_id: vec for node_id, vec in sample.features.features.items()}
    if passing_cfg["enabled"]:
        refined = relmp.run_passing(
            sample.graph,
            raw,
            vocab,
            params,
            relmp.PassingConfig(
                rounds=int(passing_cfg["rounds"]),
                relation_aware=bool(passing_cfg["relation_aware"]),
            ),
        ).features
    else:
        refined = raw

    d_g = int(model_cfg["d_g"])
    if ablation["sge"]:
        g_vec = sgembed.embed_scene_graph(
            sample.graph, vocab, params, cell=model_cfg["encoder_cell"]
        )
    elif ablation["cov"]:
        mean_feature = np.mean(
            [np.asarray(raw[n.node_id]) for n in sample.graph.nodes], axis=0
        )
        g_vec = ops.matmul(params["cov.proj"], mean_feature)
    else:
        g_vec = np.zeros(d_g, dtype=np.float64)

    if gates is None:
        gates = mask_gates(mask_matrix(sample, prep, vocab, int(model_cfg["mask_size"])), params)
    raw_rows = np.stack(
        [np.concatenate([raw[h], raw[o]]) for h, o in prep.pairs]
    )
    p_v = ops.sigmoid(
        ops.add(
            ops.matmul(ops.mul(gates, raw_rows), ops.transpose(params["head.visual.weight"])),
            params["head.visual.bias"],
        )
    )

    refined_rows = ops.stack_rows(
        [ops.concat([refined[h], refined[o]]) for h, o in prep.pairs]
    )
    message_input = ops.concat([ops.repeat_row(g_vec, n_pairs), refined_rows], axis=1)
    p_m = ops.sigmoid(
        ops.add(
            ops.matmul(message_input, ops.transpose(params["head.message.weight"])),
            params["head.message.bias"],
        )
    )
    return ops.mul(ops.mul(p_v, p_m), prep.lam[:, None])


def detections_from_probs(
    sample: SceneSample,
    prep: ScenePrep,
    probs: np.ndarray,
    min_score: float,
) -> List[HOIDetection]:
    """All (pair, class) scores strictly above ``min_score``, best first."""
    probs = ops.value_of(probs)
    detections = []
    for row, (h_id, o_id) in enumerate(prep.pairs):
        human = sample.graph.node_by_id(h_id)
        obj = sample.graph.node_by_id(o_id)
        for k in range(probs.shape[1]):
            score = float(probs[row, k])
            if score > min_score:
                detections.append(
                    HOIDetection(
                        human_box=human.box,
                        object_box=obj.box,
                        object_category=obj.category_id,
                        interaction_id=k,
                        score=score,
                    )
                )
    detections.sort(key=lambda d: -d.score)
    return detections


def predict_scene(sample: SceneSample, vocab: Vocabulary, store, config) -> List[HOIDetection]:
    prep = prepare_scene(sample, vocab, config)
    if not prep.pairs:
        return []
    probs = scene_probabilities(sample, prep, vocab, store, config)
    return detections_from_probs(sample, prep, probs, float(config["eval"]["min_score"]))


# ---------------------------------------------------------------------------
# Dataset directory loading


def parse_slice(text: Optional[str], length: int) -> slice:
    if not text:
        return slice(0, length)
    parts = text.split(":")
    if len(parts) != 2:
        raise DataError(f"scene range must look like 'start:stop', got {text!r}")
    start = int(parts[0]) if parts[0] else 0
    stop = int(parts[1]) if parts[1] else length
    return slice(start, stop)


def load_dataset(
    data_dir: str,
    vocab: Vocabulary,
    config,
    scenes: Optional[str] = None,
    with_annotations: bool = True,
) -> List[SceneSample]:
    manifest = read_json(os.path.join(data_dir, "manifest.json"))
    entries = manifest.get("scenes")
    if entries is None:
        raise DataError(f"manifest in {data_dir} lacks a 'scenes' list")
    window = entries[parse_slice(scenes, len(entries))]
    threshold = float(config["data"]["relation_threshold"])
    samples = []
    for entry in window:
        sg = load_scene_graph(
            os.path.join(data_dir, entry["scene_graph"]),
            threshold=threshold,
            person_index=vocab.person_index,
            num_predicates=vocab.num_predicates,
        )
        bundle = load_features(os.path.join(data_dir, entry["features"]))
        annotations = None
        if with_annotations and entry.get("annotations"):
            annotations = load_annotations(os.path.join(data_dir, entry["annotations"]))
        samples.append(SceneSample(sg, bundle, annotations))
    return samples
