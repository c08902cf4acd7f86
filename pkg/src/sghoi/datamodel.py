"""Core domain types, JSON file I/O, geometry, and validation."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class SGHOIError(Exception):
    """Base class for package errors."""


class ConfigError(SGHOIError):
    """Invalid or conflicting configuration (CLI exit code 2)."""


class DataError(SGHOIError):
    """Malformed or inconsistent data on disk or in memory (exit code 3)."""


class ContractError(SGHOIError):
    """A caller violated an operation's contract (exit code 3)."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in corner convention (x_tl, y_tl, x_br, y_br), pixels."""

    x_tl: float
    y_tl: float
    x_br: float
    y_br: float

    @property
    def width(self) -> float:
        return self.x_br - self.x_tl

    @property
    def height(self) -> float:
        return self.y_br - self.y_tl

    @property
    def center(self) -> Tuple[float, float]:
        return (0.5 * (self.x_tl + self.x_br), 0.5 * (self.y_tl + self.y_br))

    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def is_valid(self) -> bool:
        return (
            self.x_tl >= 0
            and self.y_tl >= 0
            and self.x_br > self.x_tl
            and self.y_br > self.y_tl
        )

    def as_list(self) -> List[float]:
        return [self.x_tl, self.y_tl, self.x_br, self.y_br]


@dataclass(frozen=True)
class SGNode:
    """Detected object: one node of a scene graph."""

    node_id: int
    category_id: int
    box: BoundingBox
    score: float
    is_human: bool = False


@dataclass(frozen=True)
class SGEdge:
    """Directed relation triple (subject, predicate, object) with soft labels.

    ``soft_distribution`` is the full predicate probability vector; its entry
    at ``predicate_id`` equals ``confidence``.
    """

    subject_id: int
    object_id: int
    predicate_id: int
    confidence: float
    soft_distribution: Tuple[float, ...]


@dataclass(frozen=True)
class SceneGraph:
    """Nodes and relation edges detected in one image."""

    image_id: str
    image_width: float
    image_height: float
    nodes: Tuple[SGNode, ...]
    edges: Tuple[SGEdge, ...]

    def node_by_id(self, node_id: int) -> SGNode:
        for node in self.nodes:
            if node.node_id == node_id:
                return node
        raise ContractError(f"node {node_id} not in scene graph {self.image_id}")

    def humans(self) -> List[SGNode]:
        return [n for n in self.nodes if n.is_human]

    def incident_edges(self, node_id: int) -> List[SGEdge]:
        return [
            e for e in self.edges if e.subject_id == node_id or e.object_id == node_id
        ]


@dataclass(frozen=True)
class FeatureBundle:
    """Per-node appearance vectors and detector scores for one scene graph."""

    image_id: str
    features: Dict[int, np.ndarray]
    scores: Dict[int, float]

    def dim(self) -> int:
        for vec in self.features.values():
            return int(vec.shape[0])
        return 0

    def covers(self, sg: SceneGraph) -> bool:
        return all(n.node_id in self.features for n in sg.nodes)


@dataclass(frozen=True)
class GroundTruthHOI:
    """Annotated interaction; object fields are absent for object-less actions."""

    human_box: BoundingBox
    object_box: Optional[BoundingBox]
    object_category: Optional[int]
    interaction_id: int


@dataclass(frozen=True)
class HOIDetection:
    """Scored interaction triple emitted by the predictor."""

    human_box: BoundingBox
    object_box: BoundingBox
    object_category: int
    interaction_id: int
    score: float


@dataclass(frozen=True)
class AnnotationSet:
    """Ground-truth interactions for one image."""

    image_id: str
    hois: Tuple[GroundTruthHOI, ...]
    rare_classes: Optional[Tuple[int, ...]] = None


def _hash_seed(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def hashed_unit_vector(word: str, dim: int) -> np.ndarray:
    """Deterministic unit-norm stand-in embedding for out-of-table words."""
    rng = np.random.default_rng(_hash_seed(word))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


class Vocabulary:
    """Object / predicate / interaction names plus the word-embedding table."""

    def __init__(
        self,
        objects: Sequence[str],
        predicates: Sequence[str],
        interactions: Sequence[str],
        person_index: int = 0,
        embedding_dim: int = 300,
        embeddings: Optional[Dict[str, np.ndarray]] = None,
    ):
        if not 0 <= person_index < len(objects):
            raise DataError(f"person_index {person_index} outside object vocabulary")
        self.objects = tuple(objects)
        self.predicates = tuple(predicates)
        self.interactions = tuple(interactions)
        self.person_index = person_index
        self.embedding_dim = embedding_dim
        self._table = dict(embeddings or {})
        for word, vec in self._table.items():
            if vec.shape != (embedding_dim,):
                raise DataError(
                    f"embedding for {word!r} has dimension {vec.shape}, expected ({embedding_dim},)"
                )
        self._cache: Dict[str, np.ndarray] = {}
        self._predicate_matrix: Optional[np.ndarray] = None

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_predicates(self) -> int:
        return len(self.predicates)

    @property
    def num_interactions(self) -> int:
        return len(self.interactions)

    def with_embedding_dim(self, dim: int) -> "Vocabulary":
        """Same names at a different fallback-embedding width.

        Only legal when no explicit embedding table is loaded (stored vectors
        cannot be resized).
        """
        if dim == self.embedding_dim:
            return self
        if self._table:
            raise ConfigError(
                f"cannot resize explicit embeddings from {self.embedding_dim} to {dim}"
            )
        return Vocabulary(
            self.objects,
            self.predicates,
            self.interactions,
            person_index=self.person_index,
            embedding_dim=dim,
        )

    def embedding(self, word: str) -> np.ndarray:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        vec = self._table.get(word)
        if vec is None:
            vec = hashed_unit_vector(word, self.embedding_dim)
        self._cache[word] = vec
        return vec

    def object_embedding(self, category_id: int) -> np.ndarray:
        if not 0 <= category_id < len(self.objects):
            raise ContractError(f"unknown category id {category_id}")
        return self.embedding(self.objects[category_id])

    def predicate_embedding(self, predicate_id: int) -> np.ndarray:
        if not 0 <= predicate_id < len(self.predicates):
            raise ContractError(f"unknown predicate id {predicate_id}")
        return self.embedding(self.predicates[predicate_id])

    def predicate_matrix(self) -> np.ndarray:
        """All predicate embeddings stacked, shape (num_predicates, dim)."""
        if self._predicate_matrix is None:
            self._predicate_matrix = np.stack(
                [self.predicate_embedding(i) for i in range(len(self.predicates))]
            )
        return self._predicate_matrix


# ---------------------------------------------------------------------------
# Geometry


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 for disjoint boxes, error for degenerate ones."""
    if a.area() <= 0 or b.area() <= 0:
        raise DataError("iou of a zero-area box is undefined")
    ix = min(a.x_br, b.x_br) - max(a.x_tl, b.x_tl)
    iy = min(a.y_br, b.y_br) - max(a.y_tl, b.y_tl)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area() + b.area() - inter)


# ---------------------------------------------------------------------------
# Validation


def validate_scene_graph(sg: SceneGraph) -> List[str]:
    """Check every type invariant; violations are returned, never raised."""
    violations: List[str] = []
    seen_ids = set()
    for node in sg.nodes:
        if node.node_id in seen_ids:
            violations.append(f"node {node.node_id}: duplicate node_id")
        seen_ids.add(node.node_id)
        if not node.box.is_valid():
            violations.append(f"node {node.node_id}: degenerate or negative box")
        if not 0.0 <= node.score <= 1.0:
            violations.append(f"node {node.node_id}: score {node.score} outside [0, 1]")
    for k, edge in enumerate(sg.edges):
        label = f"edge {k} ({edge.subject_id}->{edge.object_id})"
        if edge.subject_id == edge.object_id:
            violations.append(f"{label}: self-loop")
        for endpoint in (edge.subject_id, edge.object_id):
            if endpoint not in seen_ids:
                violations.append(f"{label}: endpoint {endpoint} not in nodes")
        soft = np.asarray(edge.soft_distribution, dtype=np.float64)
        if soft.size <= edge.predicate_id or edge.predicate_id < 0:
            violations.append(f"{label}: predicate {edge.predicate_id} outside soft distribution")
            continue
        if np.any(soft < 0):
            violations.append(f"{label}: negative soft probability")
        if abs(soft.sum() - 1.0) > 1e-6:
            violations.append(f"{label}: soft distribution sums to {soft.sum():.6f}")
        if abs(soft[edge.predicate_id] - edge.confidence) > 1e-6:
            violations.append(f"{label}: confidence differs from soft[{edge.predicate_id}]")
        if not 0.0 <= edge.confidence <= 1.0:
            violations.append(f"{label}: confidence {edge.confidence} outside [0, 1]")
    return violations


# ---------------------------------------------------------------------------
# JSON I/O (canonical writer: sorted keys, atomic replace)


def write_json(payload, path: str) -> None:
    text = json.dumps(payload, sort_keys=True, indent=1)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
            handle.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_json(path: str):
    try:
        with open(path) as handle:
            return json.load(handle)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}")


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise DataError(f"{context}: missing field {key!r}")
    return mapping[key]


def _parse_box(raw, context: str) -> BoundingBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise DataError(f"{context}: box must be a list [x1, y1, x2, y2]")
    return BoundingBox(*[float(v) for v in raw])


def _reconstruct_soft(confidence: float, predicate_id: int, num_predicates: int) -> Tuple[float, ...]:
    # Missing soft labels: put the stated confidence on the predicate and
    # spread the remainder uniformly, so confidence == soft[predicate] holds.
    soft = np.full(num_predicates, 0.0)
    if num_predicates == 1:
        soft[0] = 1.0
    else:
        soft[:] = (1.0 - confidence) / (num_predicates - 1)
        soft[predicate_id] = confidence
    return tuple(float(v) for v in soft)


def load_scene_graph(
    path: str,
    threshold: float = 0.2,
    *,
    person_index: Optional[int] = None,
    num_predicates: Optional[int] = None,
) -> SceneGraph:
    """Load and validate a scene graph, dropping edges below ``threshold``.

    ``person_index`` marks nodes of that category as humans; when omitted all
    nodes load with ``is_human=False`` (callers that need pair enumeration
    must pass it).  ``num_predicates`` sizes reconstructed soft distributions
    when the file omits them; defaults to ``max(predicate) + 1``.
    """
    raw = read_json(path)
    context = f"scene graph {path}"
    image_id = str(_require(raw, "image_id", context))
    width = float(_require(raw, "width", context))
    height = float(_require(raw, "height", context))

    nodes = []
    for entry in _require(raw, "nodes", context):
        node_context = f"{context}: node {entry.get('id', '?')}"
        category = int(_require(entry, "category", node_context))
        nodes.append(
            SGNode(
                node_id=int(_require(entry, "id", node_context)),
                category_id=category,
                box=_parse_box(_require(entry, "box", node_context), node_context),
                score=float(_require(entry, "score", node_context)),
                is_human=(person_index is not None and category == person_index),
            )
        )

    raw_edges = _require(raw, "edges", context)
    max_pred = max((int(e.get("predicate", 0)) for e in raw_edges), default=-1)
    soft_size = num_predicates if num_predicates is not None else max_pred + 1
    edges = []
    for entry in raw_edges:
        edge_context = f"{context}: edge {entry.get('subject', '?')}->{entry.get('object', '?')}"
        confidence = float(_require(entry, "confidence", edge_context))
        if confidence < threshold:
            continue
        predicate = int(_require(entry, "predicate", edge_context))
        soft_raw = entry.get("soft")
        if soft_raw is None:
            soft = _reconstruct_soft(confidence, predicate, max(soft_size, predicate + 1))
        else:
            soft = tuple(float(v) for v in soft_raw)
        edges.append(
            SGEdge(
                subject_id=int(_require(entry, "subject", edge_context)),
                object_id=int(_require(entry, "object", edge_context)),
                predicate_id=predicate,
                confidence=confidence,
                soft_distribution=soft,
            )
        )

    sg = SceneGraph(
        image_id=image_id,
        image_width=width,
        image_height=height,
        nodes=tuple(nodes),
        edges=tuple(edges),
    )
    violations = validate_scene_graph(sg)
    if violations:
        raise DataError(f"{context}: " + "; ".join(violations))
    return sg


def scene_graph_payload(sg: SceneGraph) -> dict:
    return {
        "image_id": sg.image_id,
        "width": sg.image_width,
        "height": sg.image_height,
        "nodes": [
            {
                "id": n.node_id,
                "category": n.category_id,
                "box": n.box.as_list(),
                "score": n.score,
            }
            for n in sg.nodes
        ],
        "edges": [
            {
                "subject": e.subject_id,
                "object": e.object_id,
                "predicate": e.predicate_id,
                "confidence": e.confidence,
                "soft": list(e.soft_distribution),
            }
            for e in sg.edges
        ],
    }


def save_scene_graph(sg: SceneGraph, path: str) -> None:
    write_json(scene_graph_payload(sg), path)


def load_features(path: str) -> FeatureBundle:
    raw = read_json(path)
    context = f"features {path}"
    features = {
        int(k): np.asarray(v, dtype=np.float64)
        for k, v in _require(raw, "features", context).items()
    }
    dims = {v.shape for v in features.values()}
    if len(dims) > 1:
        raise DataError(f"{context}: mixed feature dimensions {sorted(dims)}")
    scores = {int(k): float(v) for k, v in raw.get("scores", {}).items()}
    return FeatureBundle(
        image_id=str(_require(raw, "image_id", context)),
        features=features,
        scores=scores,
    )


def save_features(bundle: FeatureBundle, path: str) -> None:
    write_json(
        {
            "image_id": bundle.image_id,
            "features": {str(k): [float(x) for x in v] for k, v in bundle.features.items()},
            "scores": {str(k): v for k, v in bundle.scores.items()},
        },
        path,
    )


def load_annotations(path: str) -> AnnotationSet:
    raw = read_json(path)
    context = f"annotations {path}"
    hois = []
    for entry in _require(raw, "hois", context):
        object_box = entry.get("object_box")
        hois.append(
            GroundTruthHOI(
                human_box=_parse_box(_require(entry, "human_box", context), context),
                object_box=_parse_box(object_box, context) if object_box is not None else None,
                object_category=(
                    int(entry["object_category"]) if entry.get("object_category") is not None else None
                ),
                interaction_id=int(_require(entry, "interaction", context)),
            )
        )
    rare = raw.get("rare_classes")
    return AnnotationSet(
        image_id=str(_require(raw, "image_id", context)),
        hois=tuple(hois),
        rare_classes=tuple(int(c) for c in rare) if rare is not None else None,
    )


def save_annotations(ann: AnnotationSet, path: str) -> None:
    payload = {
        "image_id": ann.image_id,
        "hois": [
            {
                "human_box": h.human_box.as_list(),
                "object_box": h.object_box.as_list() if h.object_box is not None else None,
                "object_category": h.object_category,
                "interaction": h.interaction_id,
            }
            for h in ann.hois
        ],
    }
    if ann.rare_classes is not None:
        payload["rare_classes"] = list(ann.rare_classes)
    write_json(payload, path)


def load_detections(path: str) -> Dict[str, List[HOIDetection]]:
    raw = read_json(path)
    context = f"detections {path}"
    result: Dict[str, List[HOIDetection]] = {}
    for image in _require(raw, "images", context):
        image_id = str(_require(image, "image_id", context))
        dets = []
        for entry in _require(image, "detections", context):
            dets.append(
                HOIDetection(
                    human_box=_parse_box(_require(entry, "human_box", context), context),
                    object_box=_parse_box(_require(entry, "object_box", context), context),
                    object_category=int(_require(entry, "object_category", context)),
                    interaction_id=int(_require(entry, "interaction", context)),
                    score=float(_require(entry, "score", context)),
                )
            )
        result[image_id] = dets
    return result


def save_detections(dets_by_image: Dict[str, List[HOIDetection]], path: str) -> None:
    write_json(
        {
            "images": [
                {
                    "image_id": image_id,
                    "detections": [
                        {
                            "human_box": d.human_box.as_list(),
                            "object_box": d.object_box.as_list(),
                            "object_category": d.object_category,
                            "interaction": d.interaction_id,
                            "score": d.score,
                        }
                        for d in dets
                    ],
                }
                for image_id, dets in sorted(dets_by_image.items())
            ]
        },
        path,
    )


def load_embedding_table(path: str, dim: int) -> Dict[str, np.ndarray]:
    """Plain-text table: one ``word v1 ... v_dim`` line per entry."""
    table: Dict[str, np.ndarray] = {}
    try:
        with open(path) as handle:
            for line_no, line in enumerate(handle, start=1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != dim + 1:
                    raise DataError(
                        f"embeddings {path}:{line_no}: expected {dim} floats, got {len(parts) - 1}"
                    )
                table[parts[0]] = np.asarray([float(v) for v in parts[1:]], dtype=np.float64)
    except FileNotFoundError:
        raise DataError(f"embedding file not found: {path}")
    return table


def load_vocabulary(path: str) -> Vocabulary:
    raw = read_json(path)
    context = f"vocabulary {path}"
    dim = int(raw.get("embedding_dim", 300))
    embeddings = None
    embeddings_path = raw.get("embeddings_path")
    if embeddings_path:
        base = os.path.dirname(os.path.abspath(path))
        resolved = embeddings_path if os.path.isabs(embeddings_path) else os.path.join(base, embeddings_path)
        embeddings = load_embedding_table(resolved, dim)
    return Vocabulary(
        objects=_require(raw, "objects", context),
        predicates=_require(raw, "predicates", context),
        interactions=_require(raw, "interactions", context),
        person_index=int(raw.get("person_index", 0)),
        embedding_dim=dim,
        embeddings=embeddings,
    )


def save_vocabulary(vocab: Vocabulary, path: str, embeddings_path: Optional[str] = None) -> None:
    payload = {
        "objects": list(vocab.objects),
        "predicates": list(vocab.predicates),
        "interactions": list(vocab.interactions),
        "person_index": vocab.person_index,
        "embedding_dim": vocab.embedding_dim,
    }
    if embeddings_path is not None:
        payload["embeddings_path"] = embeddings_path
    write_json(payload, path)
