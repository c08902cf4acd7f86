"""Two-branch interaction prediction, BCE objective, SGD training loop, and
the finite-difference gradient checker."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import ops
from .datamodel import ContractError, SGHOIError, Vocabulary
from .params import ParameterStore

BCE_EPS = 1e-7


class TrainingDiverged(SGHOIError):
    """Raised when the loss stops being finite."""


def predict_visual(f_s, f_h, f_o, params):
    """Visual branch: sigmoid(W_v . (f_s gate * [f_h; f_o]))."""
    gate = ops.value_of(f_s)
    pair = ops.concat([f_h, f_o])
    if gate.shape[-1] != ops.value_of(pair).shape[-1]:
        raise ContractError(
            f"spatial gate width {gate.shape[-1]} != pair feature width {ops.value_of(pair).shape[-1]}"
        )
    logits = ops.add(
        ops.matmul(params["head.visual.weight"], ops.mul(f_s, pair)),
        params["head.visual.bias"],
    )
    return ops.sigmoid(logits)


def predict_message(g_vec, f_h_ref, f_o_ref, params):
    """Message branch: sigmoid(W_m . [g; refined human; refined object])."""
    logits = ops.add(
        ops.matmul(params["head.message.weight"], ops.concat([g_vec, f_h_ref, f_o_ref])),
        params["head.message.bias"],
    )
    return ops.sigmoid(logits)


def combine(lam: float, p_v, p_m):
    """Fused score: lam * p_v * p_m with the detector-score prior lam."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"pair prior lambda must lie in [0, 1], got {lam}")
    return ops.scale(ops.mul(p_v, p_m), lam)


def bce_terms(p, y):
    """Elementwise y log p + (1 - y) log(1 - p), with p clamped."""
    clamped = ops.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    yv = np.asarray(ops.value_of(y), dtype=np.float64)
    return ops.add(
        ops.mul(yv, ops.log(clamped)),
        ops.mul(1.0 - yv, ops.log(ops.sub(1.0, clamped))),
    )


def bce_loss(p, y):
    """Mean over classes of the negative log-likelihood."""
    pv, yv = ops.value_of(p), np.asarray(ops.value_of(y))
    if np.shape(pv) != np.shape(yv):
        raise ContractError(f"prediction shape {np.shape(pv)} != label shape {np.shape(yv)}")
    return ops.scale(ops.sum_all(bce_terms(p, y)), -1.0 / max(1, yv.size))


# ---------------------------------------------------------------------------
# Training


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    wall_ms: float

    def payload(self) -> dict:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "mean_loss": self.mean_loss,
            "wall_ms": self.wall_ms,
        }


def learning_rate(epoch: int, base: float, decay: float, every: int) -> float:
    return base * decay ** (epoch // every)


def train(
    dataset,
    config,
    params: ParameterStore,
    vocab: Vocabulary,
    log_path: Optional[str] = None,
) -> List[EpochRecord]:
    """Minibatch SGD over all enumerated pairs of all scenes.

    ``dataset`` is a list of :class:`~sghoi.pipeline.SceneSample`; the epoch
    record stream is returned and optionally written to ``log_path`` as JSON
    lines.  Deterministic given (dataset, config, seed).
    """
    from . import pipeline  # local import: pipeline builds on the heads above

    if not dataset:
        raise ContractError("training dataset must be nonempty")
    t_cfg = config["train"]
    preps = [pipeline.prepare_scene(sample, vocab, config) for sample in dataset]
    trainable = [i for i, prep in enumerate(preps) if prep.pairs]
    if not trainable:
        raise ContractError("no trainable pairs in dataset (check score thresholds)")

    rng = np.random.default_rng([config.seed, 0x7E41])
    batch_size = int(t_cfg["batch_size"])
    records: List[EpochRecord] = []
    log_handle = open(log_path, "w") if log_path else None
    try:
        for epoch in range(int(t_cfg["epochs"])):
            started = time.perf_counter()
            lr = learning_rate(
                epoch, t_cfg["learning_rate"], t_cfg["lr_decay"], int(t_cfg["decay_every"])
            )
            order = rng.permutation(len(trainable))
            loss_sum, pair_count = 0.0, 0
            mask_size = int(config["model"]["mask_size"])
            for start in range(0, len(order), batch_size):
                batch = [trainable[i] for i in order[start : start + batch_size]]
                leaves = params.leaves()
                # one projection for all mask rows of the batch
                mask_rows = [
                    pipeline.mask_matrix(dataset[idx], preps[idx], vocab, mask_size)
                    for idx in batch
                ]
                batch_gates = pipeline.mask_gates(np.concatenate(mask_rows, axis=0), leaves)
                offsets = np.cumsum([0] + [rows.shape[0] for rows in mask_rows])
                terms = []
                n_pairs = 0
                for slot, idx in enumerate(batch):
                    prep = preps[idx]
                    probs = pipeline.scene_probabilities(
                        dataset[idx],
                        prep,
                        vocab,
                        leaves,
                        config,
                        gates=ops.slice_rows(batch_gates, offsets[slot], offsets[slot + 1]),
                    )
                    # sum over pairs of the per-pair class-mean BCE
                    scene_term = ops.scale(
                        ops.sum_all(bce_terms(probs, prep.labels)),
                        -1.0 / prep.labels.shape[1],
                    )
                    terms.append(scene_term)
                    n_pairs += len(prep.pairs)
                loss = terms[0]
                for term in terms[1:]:
                    loss = ops.add(loss, term)
                loss = ops.scale(loss, 1.0 / n_pairs)
                loss_value = float(ops.value_of(loss))
                if not np.isfinite(loss_value):
                    raise TrainingDiverged(
                        f"non-finite loss in epoch {epoch}, batch starting at scene index {start}"
                    )
                ops.backward(loss)
                params.apply_sgd({n: leaf.grad for n, leaf in leaves.items()}, lr)
                loss_sum += loss_value * n_pairs
                pair_count += n_pairs
            record = EpochRecord(
                epoch=epoch,
                lr=lr,
                mean_loss=loss_sum / pair_count,
                wall_ms=(time.perf_counter() - started) * 1e3,
            )
            records.append(record)
            if log_handle:
                log_handle.write(json.dumps(record.payload(), sort_keys=True) + "\n")
                log_handle.flush()
    finally:
        if log_handle:
            log_handle.close()
    return records


# ---------------------------------------------------------------------------
# Gradient checking


def _probe(seed: int, tag: int, shape) -> np.ndarray:
    return np.random.default_rng([seed, 0x9B0B, tag]).normal(size=shape)


@dataclass
class GradFixture:
    """Small random scene used to exercise one differentiable path."""

    seed: int
    sg: object
    features: Dict[int, np.ndarray]
    vocab: Vocabulary
    config: object
    sample: object
    prep: object


def make_grad_fixture(seed: int, config=None) -> GradFixture:
    """Random 3-5 node scene with tiny dimensions, for fast finite differences."""
    from . import pipeline, synthworld
    from .config import RunConfig

    if config is None:
        config = RunConfig.resolve(
            {
                "model": {
                    "d_s": 5,
                    "d_h": 6,
                    "d_g": 5,
                    "d_f": 6,
                    "word_dim": 10,
                    "mask_size": 8,
                }
            },
            seed=seed,
        )
    vocab = synthworld.default_vocabulary(
        num_objects=5, num_predicates=4, num_interactions=3, embedding_dim=config["model"]["word_dim"]
    )
    world = synthworld.WorldConfig(
        seed=seed,
        num_scenes=1,
        humans_per_scene=(2, 2),
        objects_per_scene=(2, 3),
        canvas=(96, 96),
        num_object_categories=5,
        num_predicates=4,
        num_interactions=3,
        feature_dim=config["model"]["d_f"],
        feature_noise=0.3,
        edge_prob=1.0,
        human_edge_prob=1.0,
    )
    scenes = synthworld.generate_world(world, synthworld.default_rule_table(vocab))
    sg, bundle, ann = scenes[0]
    sample = pipeline.SceneSample(sg, bundle, ann)
    prep = pipeline.prepare_scene(sample, vocab, config)
    return GradFixture(
        seed=seed,
        sg=sg,
        features=dict(bundle.features),
        vocab=vocab,
        config=config,
        sample=sample,
        prep=prep,
    )


def _loss_spatial(fx: GradFixture, params):
    from . import sgembed

    total = None
    for i, node in enumerate(fx.sg.nodes):
        vec = sgembed.spatial_encode(node.box, fx.sg.image_width, fx.sg.image_height, params)
        term = ops.sum_all(ops.mul(vec, _probe(fx.seed, 10 + i, ops.value_of(vec).shape)))
        total = term if total is None else ops.add(total, term)
    return total


def _codewords(fx: GradFixture, params):
    from . import sgembed

    return [
        ops.concat(
            [
                sgembed.spatial_encode(n.box, fx.sg.image_width, fx.sg.image_height, params),
                sgembed.semantic_lookup(n.category_id, fx.vocab),
            ]
        )
        for n in fx.sg.nodes
    ]


def _context(fx: GradFixture, params):
    from . import sgembed

    return sgembed.context_encode(
        _codewords(fx, params),
        [n.box for n in fx.sg.nodes],
        params,
        node_ids=[n.node_id for n in fx.sg.nodes],
        cell=fx.config["model"]["encoder_cell"],
    )


def _loss_context(fx: GradFixture, params):
    hidden = _context(fx, params)
    total = None
    for i, h in enumerate(hidden):
        term = ops.sum_all(ops.mul(h, _probe(fx.seed, 40 + i, ops.value_of(h).shape)))
        total = term if total is None else ops.add(total, term)
    return total


def _loss_relation(fx: GradFixture, params):
    from . import sgembed

    hidden = _context(fx, params)
    by_id = {n.node_id: hidden[i] for i, n in enumerate(fx.sg.nodes)}
    total = None
    for k, edge in enumerate(fx.sg.edges):
        e_k = sgembed.relation_feature(by_id[edge.subject_id], by_id[edge.object_id], edge, fx.vocab, params)
        term = ops.sum_all(ops.mul(e_k, _probe(fx.seed, 70 + k, ops.value_of(e_k).shape)))
        total = term if total is None else ops.add(total, term)
    return total


def _loss_graph_embed(fx: GradFixture, params):
    from . import sgembed

    g = sgembed.embed_scene_graph(fx.sg, fx.vocab, params, cell=fx.config["model"]["encoder_cell"])
    return ops.sum_all(ops.mul(g, _probe(fx.seed, 100, ops.value_of(g).shape)))


def _message_loss(fx: GradFixture, params, which: str):
    from . import relmp

    total = None
    for i, node in enumerate(fx.sg.nodes):
        fn = relmp.inter_class_messages if which == "inter" else relmp.intra_class_messages
        msg = fn(node.node_id, fx.sg, fx.features, fx.vocab, params)
        term = ops.sum_all(ops.mul(msg, _probe(fx.seed, 130 + i, ops.value_of(msg).shape)))
        total = term if total is None else ops.add(total, term)
    return total


def _loss_inter(fx, params):
    return _message_loss(fx, params, "inter")


def _loss_intra(fx, params):
    return _message_loss(fx, params, "intra")


def _loss_refine(fx: GradFixture, params):
    from . import relmp

    refined = relmp.refine_round(fx.sg, fx.features, fx.vocab, params)
    total = None
    for i, node in enumerate(fx.sg.nodes):
        vec = refined.features[node.node_id]
        term = ops.sum_all(ops.mul(vec, _probe(fx.seed, 160 + i, ops.value_of(vec).shape)))
        total = term if total is None else ops.add(total, term)
    return total


def _loss_passing(fx: GradFixture, params):
    from . import relmp

    refined = relmp.run_passing(
        fx.sg, fx.features, fx.vocab, params, relmp.PassingConfig(rounds=2)
    )
    total = None
    for i, node in enumerate(fx.sg.nodes):
        vec = refined.features[node.node_id]
        term = ops.sum_all(ops.mul(vec, _probe(fx.seed, 190 + i, ops.value_of(vec).shape)))
        total = term if total is None else ops.add(total, term)
    return total


def _loss_visual_head(fx: GradFixture, params):
    from . import pairfeat

    size = fx.config["model"]["mask_size"]
    total = None
    for p, (h_id, o_id) in enumerate(fx.prep.pairs):
        human, obj = fx.sg.node_by_id(h_id), fx.sg.node_by_id(o_id)
        masks = pairfeat.build_semantic_masks(
            human.box, obj.box, human.category_id, obj.category_id,
            fx.sg.image_width, fx.sg.image_height, fx.vocab, size=size,
        )
        f_s = pairfeat.project_masks(masks, params)
        p_v = predict_visual(f_s, fx.features[h_id], fx.features[o_id], params)
        term = ops.sum_all(ops.mul(p_v, _probe(fx.seed, 220 + p, ops.value_of(p_v).shape)))
        total = term if total is None else ops.add(total, term)
    return total


def _loss_message_head(fx: GradFixture, params):
    d_g = fx.config["model"]["d_g"]
    g = _probe(fx.seed, 250, (d_g,))
    total = None
    for p, (h_id, o_id) in enumerate(fx.prep.pairs):
        p_m = predict_message(g, fx.features[h_id], fx.features[o_id], params)
        term = ops.sum_all(ops.mul(p_m, _probe(fx.seed, 251 + p, ops.value_of(p_m).shape)))
        total = term if total is None else ops.add(total, term)
    return total


def _loss_pipeline(fx: GradFixture, params):
    from . import pipeline

    probs = pipeline.scene_probabilities(fx.sample, fx.prep, fx.vocab, params, fx.config)
    return ops.scale(
        ops.sum_all(bce_terms(probs, fx.prep.labels)),
        -1.0 / fx.prep.labels.size,
    )


GRAD_CHECK_OPS = {
    "spatial": _loss_spatial,
    "context": _loss_context,
    "relation": _loss_relation,
    "graph_embed": _loss_graph_embed,
    "inter_messages": _loss_inter,
    "intra_messages": _loss_intra,
    "refine_round": _loss_refine,
    "run_passing": _loss_passing,
    "visual_head": _loss_visual_head,
    "message_head": _loss_message_head,
    "pipeline": _loss_pipeline,
}


def grad_check(
    op_name: str,
    fixture: GradFixture,
    store: ParameterStore,
    step: float = 1e-5,
    samples_per_tensor: int = 12,
    seed: int = 0,
) -> float:
    """Max relative error between traced gradients and central differences.

    A handful of coordinates per tensor is sampled; the error denominator is
    floored at 1e-6 so finite-difference noise on near-zero gradients does
    not register as failure.  Non-finite values come back as ``inf``.
    """
    fn = GRAD_CHECK_OPS[op_name]
    leaves = store.leaves()
    loss = fn(fixture, leaves)
    if not ops.is_var(loss):
        raise ContractError(f"op {op_name!r} has no trainable path under this store")
    ops.backward(loss)

    arrays = {name: array.copy() for name, array in store.arrays.items()}
    rng = np.random.default_rng([seed, 0xF1D])
    worst = 0.0
    for name, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        if not np.all(np.isfinite(analytic)):
            return float("inf")
        size = arrays[name].size
        count = min(samples_per_tensor, size) if leaf.grad is not None else min(2, size)
        coords = rng.choice(size, size=count, replace=False)
        for coord in coords:
            original = arrays[name].flat[coord]
            arrays[name].flat[coord] = original + step
            plus = float(ops.value_of(fn(fixture, arrays)))
            arrays[name].flat[coord] = original - step
            minus = float(ops.value_of(fn(fixture, arrays)))
            arrays[name].flat[coord] = original
            numeric = (plus - minus) / (2.0 * step)
            if not np.isfinite(numeric):
                return float("inf")
            a = float(analytic.flat[coord])
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
