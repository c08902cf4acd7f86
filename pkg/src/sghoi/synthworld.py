"""Deterministic synthetic scene-world generator.

Scenes place well-separated humans with owned objects clustered nearby;
relations are sampled human-to-object (and human-to-human on dedicated
predicates), and ground-truth interactions are a fixed rule-table function of
(predicate, object category).  Appearance vectors are per-category prototypes
plus Gaussian noise, so relation information is never encoded in appearance.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .datamodel import (
    AnnotationSet,
    BoundingBox,
    ConfigError,
    ContractError,
    FeatureBundle,
    GroundTruthHOI,
    SceneGraph,
    SGEdge,
    SGNode,
    Vocabulary,
    save_annotations,
    save_features,
    save_scene_graph,
    save_vocabulary,
    write_json,
)

_OBJECT_NAMES = [
    "person", "cup", "bicycle", "chair", "laptop",
    "bottle", "book", "dog", "ball", "table",
    "plate", "phone", "bag", "guitar", "kite",
]
_PREDICATE_NAMES = [
    "hold", "ride", "look_at", "sit_on", "carry", "touch",
    "push", "pull", "reach_for", "point_at",
]
_HH_PREDICATE_NAMES = ["next_to", "face"]
_INTERACTION_NAMES = [
    "holding", "riding", "looking_at", "sitting_on", "carrying",
    "touching", "pushing", "pulling", "reaching", "pointing",
]


@dataclass(frozen=True)
class WorldConfig:
    """Generator knobs; every scene is a pure function of (seed, index)."""

    seed: int
    num_scenes: int = 600
    humans_per_scene: Tuple[int, int] = (1, 2)
    objects_per_scene: Tuple[int, int] = (3, 5)
    canvas: Tuple[int, int] = (640, 480)
    num_object_categories: int = 10
    num_predicates: int = 8
    num_interactions: int = 6
    feature_dim: int = 256
    feature_noise: float = 0.1
    edge_prob: float = 0.85
    human_edge_prob: float = 0.5
    edge_dropout: float = 0.0
    score_range: Tuple[float, float] = (0.85, 1.0)
    confidence_range: Tuple[float, float] = (0.78, 0.98)

    def __post_init__(self):
        if self.num_scenes < 1:
            raise ConfigError("num_scenes must be >= 1")
        for name, (lo, hi) in (
            ("humans_per_scene", self.humans_per_scene),
            ("objects_per_scene", self.objects_per_scene),
        ):
            if lo < 1 or hi < lo:
                raise ConfigError(f"{name} range {lo}..{hi} must satisfy 1 <= lo <= hi")
        if min(self.num_object_categories, self.num_predicates, self.num_interactions) < 1:
            raise ConfigError("vocabulary sizes must be >= 1")
        if self.feature_noise < 0:
            raise ConfigError("feature_noise must be >= 0")
        if not 0.0 <= self.edge_dropout < 1.0:
            raise ConfigError("edge_dropout must lie in [0, 1)")

    def payload(self) -> dict:
        return {
            "seed": self.seed,
            "num_scenes": self.num_scenes,
            "humans_per_scene": list(self.humans_per_scene),
            "objects_per_scene": list(self.objects_per_scene),
            "canvas": list(self.canvas),
            "num_object_categories": self.num_object_categories,
            "num_predicates": self.num_predicates,
            "num_interactions": self.num_interactions,
            "feature_dim": self.feature_dim,
            "feature_noise": self.feature_noise,
            "edge_prob": self.edge_prob,
            "human_edge_prob": self.human_edge_prob,
            "edge_dropout": self.edge_dropout,
            "score_range": list(self.score_range),
            "confidence_range": list(self.confidence_range),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "WorldConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        kwargs = dict(payload)
        for key in ("humans_per_scene", "objects_per_scene", "canvas", "score_range", "confidence_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def num_hh_predicates(num_predicates: int) -> int:
    """Predicates reserved for human-human edges (never rule-mapped)."""
    if num_predicates < 2:
        return 0
    return max(1, num_predicates // 4)


@dataclass(frozen=True)
class Rule:
    predicate_id: int
    category_id: Optional[int]  # None = wildcard
    interaction_id: int


@dataclass(frozen=True)
class RuleTable:
    """Disjoint (predicate, category) -> interaction mapping; default: none."""

    rules: Tuple[Rule, ...]

    def __post_init__(self):
        seen: Set[Tuple[int, Optional[int]]] = set()
        wildcard_preds = {r.predicate_id for r in self.rules if r.category_id is None}
        for rule in self.rules:
            key = (rule.predicate_id, rule.category_id)
            if key in seen:
                raise ConfigError(f"duplicate rule key {key}")
            if rule.category_id is not None and rule.predicate_id in wildcard_preds:
                raise ConfigError(
                    f"rule {key} overlaps the wildcard rule on predicate {rule.predicate_id}"
                )
            seen.add(key)

    def lookup(self, predicate_id: int, category_id: int) -> Optional[int]:
        for rule in self.rules:
            if rule.predicate_id != predicate_id:
                continue
            if rule.category_id is None or rule.category_id == category_id:
                return rule.interaction_id
        return None

    def referenced_categories(self) -> Set[int]:
        return {r.category_id for r in self.rules if r.category_id is not None}

    def max_predicate(self) -> int:
        return max((r.predicate_id for r in self.rules), default=-1)

    def max_interaction(self) -> int:
        return max((r.interaction_id for r in self.rules), default=-1)


def default_vocabulary(
    num_objects: int = 10,
    num_predicates: int = 8,
    num_interactions: int = 6,
    embedding_dim: int = 300,
) -> Vocabulary:
    """Named synthetic vocabulary; person is always category 0."""
    objects = [_OBJECT_NAMES[i % len(_OBJECT_NAMES)] if i < len(_OBJECT_NAMES) else f"object_{i}" for i in range(num_objects)]
    hh = num_hh_predicates(num_predicates)
    regular = num_predicates - hh
    predicates = [
        _PREDICATE_NAMES[i] if i < len(_PREDICATE_NAMES) else f"relation_{i}"
        for i in range(regular)
    ] + [
        _HH_PREDICATE_NAMES[j] if j < len(_HH_PREDICATE_NAMES) else f"social_{j}"
        for j in range(hh)
    ]
    interactions = [
        _INTERACTION_NAMES[i] if i < len(_INTERACTION_NAMES) else f"interaction_{i}"
        for i in range(num_interactions)
    ]
    return Vocabulary(
        objects=objects,
        predicates=predicates,
        interactions=interactions,
        person_index=0,
        embedding_dim=embedding_dim,
    )


def default_rule_table(vocab: Vocabulary) -> RuleTable:
    """Half the interactions follow from the predicate alone (wildcard rules),
    the rest additionally require a specific object category."""
    usable = vocab.num_predicates - num_hh_predicates(vocab.num_predicates)
    K = vocab.num_interactions
    if usable < 1:
        raise ConfigError("need at least one non-social predicate for rules")
    wild_count = min(math.ceil(K / 2), usable)
    if wild_count == usable and K > wild_count:
        wild_count = usable - 1  # leave room for category-keyed rules
    rules = [Rule(p, None, p) for p in range(wild_count)]
    categories = [c for c in range(vocab.num_objects) if c != vocab.person_index]
    if K > wild_count and not categories:
        raise ConfigError("category-keyed rules need a non-person category")
    cat_preds = list(range(wild_count, usable))
    for j, k in enumerate(range(wild_count, K)):
        predicate = cat_preds[j % len(cat_preds)]
        category = categories[j % len(categories)]
        rules.append(Rule(predicate, category, k))
    return RuleTable(tuple(rules))


def predicate_only_rule_table(vocab: Vocabulary) -> RuleTable:
    """Every interaction keyed purely on a predicate (wildcard category)."""
    usable = vocab.num_predicates - num_hh_predicates(vocab.num_predicates)
    if vocab.num_interactions > usable:
        raise ConfigError(
            f"predicate-only rules need {vocab.num_interactions} non-social predicates, have {usable}"
        )
    return RuleTable(tuple(Rule(k, None, k) for k in range(vocab.num_interactions)))


def rule_label(sg: SceneGraph, human_id: int, object_id: int, rules: RuleTable) -> Set[int]:
    """Interactions implied by the human-to-object edges of one pair."""
    human = sg.node_by_id(human_id)
    if not human.is_human:
        raise ContractError(f"node {human_id} is not a human")
    target = sg.node_by_id(object_id)
    labels: Set[int] = set()
    for edge in sg.edges:
        if edge.subject_id != human_id or edge.object_id != object_id:
            continue
        hit = rules.lookup(edge.predicate_id, target.category_id)
        if hit is not None:
            labels.add(hit)
    return labels


def category_weights(config: WorldConfig, rules: RuleTable, person_index: int) -> np.ndarray:
    """Sampling weights over object categories; rule categories drawn 3x as
    often so category-keyed interactions stay learnable."""
    weights = np.ones(config.num_object_categories, dtype=np.float64)
    weights[person_index] = 0.0
    for category in rules.referenced_categories():
        weights[category] = 3.0
    return weights / weights.sum()


def _clamped_box(rng, cx: float, cy: float, w: float, h: float, canvas) -> BoundingBox:
    W, H = canvas
    w = min(w, W - 2.0)
    h = min(h, H - 2.0)
    x_tl = min(max(cx - w / 2, 1.0), W - 1.0 - w)
    y_tl = min(max(cy - h / 2, 1.0), H - 1.0 - h)
    return BoundingBox(x_tl, y_tl, x_tl + w, y_tl + h)


def _human_anchors(rng, count: int, canvas, min_dist: float = 170.0) -> List[Tuple[float, float]]:
    W, H = canvas
    anchors: List[Tuple[float, float]] = []
    for _ in range(count):
        placed = False
        for _attempt in range(60):
            x = rng.uniform(0.15 * W, 0.85 * W)
            y = rng.uniform(0.2 * H, 0.8 * H)
            if all((x - ax) ** 2 + (y - ay) ** 2 >= min_dist**2 for ax, ay in anchors):
                anchors.append((x, y))
                placed = True
                break
        if not placed:  # crowded canvas: accept the last candidate
            anchors.append((x, y))
    return anchors


def _generate_scene(
    config: WorldConfig,
    rules: RuleTable,
    vocab: Vocabulary,
    prototypes: np.ndarray,
    cat_weights: np.ndarray,
    index: int,
) -> Tuple[SceneGraph, FeatureBundle, AnnotationSet]:
    rng = np.random.default_rng([config.seed, 0, index])
    image_id = f"synth-{config.seed}-{index:05d}"
    W, H = config.canvas

    k_h = int(rng.integers(config.humans_per_scene[0], config.humans_per_scene[1] + 1))
    k_o = int(rng.integers(config.objects_per_scene[0], config.objects_per_scene[1] + 1))
    anchors = _human_anchors(rng, k_h, config.canvas)

    nodes: List[SGNode] = []
    for i, (ax, ay) in enumerate(anchors):
        box = _clamped_box(rng, ax, ay, rng.uniform(50, 90), rng.uniform(100, 160), config.canvas)
        nodes.append(
            SGNode(
                node_id=i,
                category_id=vocab.person_index,
                box=box,
                score=float(rng.uniform(*config.score_range)),
                is_human=True,
            )
        )

    owners: List[int] = []
    for j in range(k_o):
        owner = int(rng.integers(k_h))
        owners.append(owner)
        ax, ay = anchors[owner]
        cx = ax + rng.uniform(-80, 80)
        cy = ay + rng.uniform(-80, 80)
        box = _clamped_box(rng, cx, cy, rng.uniform(25, 60), rng.uniform(25, 60), config.canvas)
        category = int(rng.choice(config.num_object_categories, p=cat_weights))
        nodes.append(
            SGNode(
                node_id=k_h + j,
                category_id=category,
                box=box,
                score=float(rng.uniform(*config.score_range)),
                is_human=False,
            )
        )

    hh = num_hh_predicates(config.num_predicates)
    usable = config.num_predicates - hh
    edges: List[SGEdge] = []

    def make_edge(subject: int, obj: int, predicate: int) -> SGEdge:
        confidence = float(rng.uniform(*config.confidence_range))
        soft = np.full(config.num_predicates, 0.0)
        if config.num_predicates == 1:
            confidence = 1.0
            soft[0] = 1.0
        else:
            soft[:] = (1.0 - confidence) / (config.num_predicates - 1)
            soft[predicate] = confidence
        return SGEdge(
            subject_id=subject,
            object_id=obj,
            predicate_id=predicate,
            confidence=confidence,
            soft_distribution=tuple(float(v) for v in soft),
        )

    for j, owner in enumerate(owners):
        if rng.uniform() < config.edge_prob:
            predicate = int(rng.integers(usable))
            edges.append(make_edge(owner, k_h + j, predicate))
    if hh > 0:
        for i in range(k_h - 1):
            if rng.uniform() < config.human_edge_prob:
                predicate = usable + int(rng.integers(hh))
                edges.append(make_edge(i, i + 1, predicate))

    sg_full = SceneGraph(
        image_id=image_id,
        image_width=float(W),
        image_height=float(H),
        nodes=tuple(nodes),
        edges=tuple(edges),
    )

    # ground truth reflects the full relation set, before any dropout noise
    hois: List[GroundTruthHOI] = []
    for human in nodes[:k_h]:
        for obj in nodes[k_h:]:
            for interaction in sorted(rule_label(sg_full, human.node_id, obj.node_id, rules)):
                hois.append(
                    GroundTruthHOI(
                        human_box=human.box,
                        object_box=obj.box,
                        object_category=obj.category_id,
                        interaction_id=interaction,
                    )
                )

    kept_edges = tuple(
        e for e in edges if config.edge_dropout == 0.0 or rng.uniform() >= config.edge_dropout
    )
    sg = SceneGraph(
        image_id=image_id,
        image_width=float(W),
        image_height=float(H),
        nodes=tuple(nodes),
        edges=kept_edges,
    )

    features: Dict[int, np.ndarray] = {}
    scores: Dict[int, float] = {}
    for node in nodes:
        noise = rng.standard_normal(config.feature_dim)
        features[node.node_id] = prototypes[node.category_id] + config.feature_noise * noise
        scores[node.node_id] = node.score
    bundle = FeatureBundle(image_id=image_id, features=features, scores=scores)

    return sg, bundle, AnnotationSet(image_id=image_id, hois=tuple(hois))


def generate_world(
    config: WorldConfig, rules: RuleTable
) -> List[Tuple[SceneGraph, FeatureBundle, AnnotationSet]]:
    """All scenes for one world; deterministic in the config seed."""
    if rules.max_predicate() >= config.num_predicates:
        raise ConfigError(
            f"rule references predicate {rules.max_predicate()}, vocabulary has {config.num_predicates}"
        )
    if rules.max_interaction() >= config.num_interactions:
        raise ConfigError(
            f"rule references interaction {rules.max_interaction()}, vocabulary has {config.num_interactions}"
        )
    for category in rules.referenced_categories():
        if category >= config.num_object_categories:
            raise ConfigError(f"rule references category {category}, vocabulary has {config.num_object_categories}")

    vocab = default_vocabulary(
        config.num_object_categories, config.num_predicates, config.num_interactions
    )
    proto_rng = np.random.default_rng([config.seed, 1])
    # unit variance per coordinate keeps feature magnitudes independent of d_f
    prototypes = proto_rng.standard_normal((config.num_object_categories, config.feature_dim))
    weights = category_weights(config, rules, vocab.person_index)
    return [
        _generate_scene(config, rules, vocab, prototypes, weights, i)
        for i in range(config.num_scenes)
    ]


def interaction_counts(scenes, num_interactions: int) -> List[int]:
    counts = [0] * num_interactions
    for _, _, ann in scenes:
        for hoi in ann.hois:
            counts[hoi.interaction_id] += 1
    return counts


def rare_classes(counts: Sequence[int]) -> List[int]:
    """Classes with fewer than half the uniform share of ground truths."""
    total = sum(counts)
    if total == 0:
        return []
    cutoff = 0.5 * total / len(counts)
    return [k for k, c in enumerate(counts) if c < cutoff]


def write_dataset(
    config: WorldConfig,
    rules: RuleTable,
    out_dir: str,
) -> dict:
    """Generate and write a dataset directory; returns the manifest payload."""
    scenes = generate_world(config, rules)
    vocab = default_vocabulary(
        config.num_object_categories, config.num_predicates, config.num_interactions
    )
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, (sg, bundle, ann) in enumerate(scenes):
        stem = f"scene_{i:05d}"
        save_scene_graph(sg, os.path.join(out_dir, f"{stem}.graph.json"))
        save_features(bundle, os.path.join(out_dir, f"{stem}.features.json"))
        save_annotations(ann, os.path.join(out_dir, f"{stem}.annotations.json"))
        entries.append(
            {
                "image_id": sg.image_id,
                "scene_graph": f"{stem}.graph.json",
                "features": f"{stem}.features.json",
                "annotations": f"{stem}.annotations.json",
            }
        )
    counts = interaction_counts(scenes, config.num_interactions)
    rare = rare_classes(counts)
    save_vocabulary(vocab, os.path.join(out_dir, "vocabulary.json"))
    write_json(rare, os.path.join(out_dir, "rare.json"))
    manifest = {
        "world_config": config.payload(),
        "rules": [
            {"predicate": r.predicate_id, "category": r.category_id, "interaction": r.interaction_id}
            for r in rules.rules
        ],
        "scenes": entries,
        "interaction_counts": counts,
        "rare_classes": rare,
    }
    write_json(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest
