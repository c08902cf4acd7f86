import numpy as np
import pytest

from sghoi import synthworld
from sghoi.config import RunConfig
from sghoi.datamodel import BoundingBox, SceneGraph, SGEdge, SGNode
from sghoi.params import ParameterStore


def box(x1, y1, x2, y2):
    return BoundingBox(float(x1), float(y1), float(x2), float(y2))


def tiny_run_config(seed=3, **model_overrides):
    model = {"d_s": 5, "d_h": 6, "d_g": 5, "d_f": 6, "word_dim": 10, "mask_size": 8}
    model.update(model_overrides)
    return RunConfig.resolve({"model": model}, seed=seed)


def tiny_vocab(num_objects=5, num_predicates=4, num_interactions=3, dim=10):
    return synthworld.default_vocabulary(num_objects, num_predicates, num_interactions, embedding_dim=dim)


def tiny_store(cfg=None, vocab=None, seed=5):
    cfg = cfg or tiny_run_config()
    vocab = vocab or tiny_vocab()
    return ParameterStore.build(cfg.model_dims(), vocab.num_interactions, cfg.switches(), seed=seed)


def onehot_soft(predicate_id, num_predicates):
    soft = [0.0] * num_predicates
    soft[predicate_id] = 1.0
    return tuple(soft)


def make_edge(subject, obj, predicate, num_predicates, confidence=1.0):
    if confidence >= 1.0 or num_predicates == 1:
        soft = onehot_soft(predicate, num_predicates)
        confidence = 1.0
    else:
        rest = (1.0 - confidence) / (num_predicates - 1)
        soft = tuple(
            confidence if i == predicate else rest for i in range(num_predicates)
        )
    return SGEdge(
        subject_id=subject,
        object_id=obj,
        predicate_id=predicate,
        confidence=confidence,
        soft_distribution=soft,
    )


def random_scene_graph(rng, n_nodes, n_edges, vocab, canvas=(200.0, 160.0), human_frac=0.4):
    """Random valid scene graph; node ids are shuffled, boxes non-degenerate."""
    W, H = canvas
    ids = list(rng.permutation(n_nodes * 3)[:n_nodes])
    nodes = []
    for node_id in ids:
        is_human = rng.uniform() < human_frac
        category = vocab.person_index if is_human else int(
            rng.integers(1, vocab.num_objects)
        )
        x1 = rng.uniform(0, W - 20)
        y1 = rng.uniform(0, H - 20)
        nodes.append(
            SGNode(
                node_id=int(node_id),
                category_id=category,
                box=BoundingBox(x1, y1, x1 + rng.uniform(5, 20), y1 + rng.uniform(5, 20)),
                score=float(rng.uniform(0.5, 1.0)),
                is_human=is_human,
            )
        )
    edges = []
    if n_nodes >= 2:
        for _ in range(n_edges):
            a, b = rng.choice(n_nodes, size=2, replace=False)
            predicate = int(rng.integers(vocab.num_predicates))
            raw = rng.uniform(0.2, 1.0, size=vocab.num_predicates)
            raw[predicate] += 2.0
            soft = raw / raw.sum()
            edges.append(
                SGEdge(
                    subject_id=nodes[a].node_id,
                    object_id=nodes[b].node_id,
                    predicate_id=predicate,
                    confidence=float(soft[predicate]),
                    soft_distribution=tuple(float(v) for v in soft),
                )
            )
    return SceneGraph(
        image_id="random",
        image_width=W,
        image_height=H,
        nodes=tuple(nodes),
        edges=tuple(edges),
    )


def random_features(rng, sg, d_f=6):
    return {n.node_id: rng.normal(size=d_f) for n in sg.nodes}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
