import numpy as np
import pytest

from sghoi import relmp
from sghoi.datamodel import BoundingBox, SceneGraph, SGNode
from tests.conftest import (
    make_edge,
    random_features,
    random_scene_graph,
    tiny_store,
    tiny_vocab,
)

D_F = 6


def _graph(nodes, edges):
    return SceneGraph("t", 200.0, 160.0, tuple(nodes), tuple(edges))


def _node(node_id, is_human, cx=None):
    cx = 10.0 * node_id if cx is None else cx
    return SGNode(
        node_id,
        0 if is_human else 1,
        BoundingBox(cx, 0.0, cx + 8.0, 12.0),
        0.9,
        is_human,
    )


def identity_params(vocab, d_f=D_F):
    params = {"msg.alpha_proj": np.zeros((d_f, vocab.embedding_dim))}
    for path in ("o2h", "h2h", "h2o", "o2o"):
        params[f"msg.{path}.src"] = np.eye(d_f)
        params[f"msg.{path}.out"] = np.eye(d_f)
    return params


class TestMessages:
    def test_no_other_class_neighbors_gives_zero(self, rng):
        vocab = tiny_vocab()
        sg = _graph([_node(0, True), _node(1, True)], [make_edge(0, 1, 3, 4)])
        feats = random_features(rng, sg)
        out = relmp.inter_class_messages(0, sg, feats, vocab, identity_params(vocab))
        assert np.array_equal(out, np.zeros(D_F))

    def test_identity_weights_single_neighbor(self, rng):
        vocab = tiny_vocab()
        sg = _graph([_node(0, True), _node(1, False)], [make_edge(0, 1, 0, 4)])
        feats = random_features(rng, sg)
        # relation_aware=False makes the gate the all-ones vector
        out = relmp.inter_class_messages(
            0, sg, feats, vocab, identity_params(vocab), relation_aware=False
        )
        assert np.allclose(out, feats[1], atol=1e-12)

    def test_intra_only_object_neighbors_gives_zero(self, rng):
        vocab = tiny_vocab()
        sg = _graph([_node(0, True), _node(1, False)], [make_edge(0, 1, 0, 4)])
        feats = random_features(rng, sg)
        out = relmp.intra_class_messages(0, sg, feats, vocab, identity_params(vocab))
        assert np.array_equal(out, np.zeros(D_F))

    def test_intra_identity_single_human_neighbor(self, rng):
        vocab = tiny_vocab()
        sg = _graph([_node(0, True), _node(1, True)], [make_edge(0, 1, 3, 4)])
        feats = random_features(rng, sg)
        out = relmp.intra_class_messages(
            0, sg, feats, vocab, identity_params(vocab), relation_aware=False
        )
        assert np.allclose(out, feats[1], atol=1e-12)

    def test_two_object_neighbors_loop_oracle(self, rng):
        vocab = tiny_vocab()
        store = tiny_store()
        sg = _graph(
            [_node(0, True), _node(1, False), _node(2, False)],
            [make_edge(0, 1, 0, 4), make_edge(2, 0, 1, 4)],
        )
        feats = random_features(rng, sg)
        out = relmp.inter_class_messages(0, sg, feats, vocab, store)
        acc = np.zeros(D_F)
        for edge, other in ((sg.edges[0], 1), (sg.edges[1], 2)):
            soft = np.asarray(edge.soft_distribution)
            alpha = soft @ vocab.predicate_matrix()
            gate = store["msg.alpha_proj"] @ alpha
            acc += (store["msg.o2h.src"] @ feats[other]) * gate
        assert np.allclose(out, store["msg.o2h.out"] @ acc, atol=1e-10)

    def test_three_human_neighbors_loop_oracle(self, rng):
        vocab = tiny_vocab()
        store = tiny_store()
        edges = [make_edge(0, 1, 3, 4), make_edge(2, 0, 3, 4), make_edge(3, 0, 2, 4)]
        sg = _graph([_node(i, True) for i in range(4)], edges)
        feats = random_features(rng, sg)
        out = relmp.intra_class_messages(0, sg, feats, vocab, store)
        acc = np.zeros(D_F)
        for edge, other in ((edges[0], 1), (edges[1], 2), (edges[2], 3)):
            soft = np.asarray(edge.soft_distribution)
            gate = store["msg.alpha_proj"] @ (soft @ vocab.predicate_matrix())
            acc += (store["msg.h2h.src"] @ feats[other]) * gate
        assert np.allclose(out, store["msg.h2h.out"] @ acc, atol=1e-10)


class TestRefineRound:
    def test_edgeless_graph_is_identity(self, rng):
        vocab = tiny_vocab()
        sg = _graph([_node(0, True), _node(1, False)], [])
        feats = random_features(rng, sg)
        refined = relmp.refine_round(sg, feats, vocab, tiny_store())
        for node_id, vec in feats.items():
            assert np.array_equal(refined.features[node_id], vec)

    def test_zero_message_weights_identity(self, rng):
        vocab = tiny_vocab()
        sg = _graph(
            [_node(0, True), _node(1, False), _node(2, True)],
            [make_edge(0, 1, 0, 4), make_edge(0, 2, 3, 4)],
        )
        feats = random_features(rng, sg)
        params = identity_params(vocab)
        for path in ("o2h", "h2h", "h2o", "o2o"):
            params[f"msg.{path}.out"] = np.zeros((D_F, D_F))
        refined = relmp.refine_round(sg, feats, vocab, params)
        for node_id, vec in feats.items():
            assert np.array_equal(refined.features[node_id], vec)

    def test_four_node_fixture_against_oracle(self, rng):
        vocab = tiny_vocab()
        store = tiny_store()
        sg = _graph(
            [_node(0, True), _node(1, True), _node(2, False), _node(3, False)],
            [
                make_edge(0, 2, 0, 4),
                make_edge(0, 1, 3, 4),
                make_edge(3, 1, 1, 4),
                make_edge(2, 3, 2, 4),
            ],
        )
        feats = random_features(rng, sg)
        refined = relmp.refine_round(sg, feats, vocab, store)
        oracle = _oracle_round(sg, feats, vocab, store)
        for node_id in feats:
            assert np.allclose(refined.features[node_id], oracle[node_id], atol=1e-10)

    def test_node_iteration_order_irrelevant(self, rng):
        vocab = tiny_vocab()
        store = tiny_store()
        sg = random_scene_graph(rng, 6, 8, vocab)
        feats = random_features(rng, sg)
        base = relmp.refine_round(sg, feats, vocab, store)
        reversed_sg = SceneGraph(
            sg.image_id,
            sg.image_width,
            sg.image_height,
            tuple(reversed(sg.nodes)),
            sg.edges,
        )
        flipped = relmp.refine_round(reversed_sg, feats, vocab, store)
        for node_id in feats:
            assert np.array_equal(base.features[node_id], flipped.features[node_id])


def _oracle_round(sg, feats, vocab, params, relation_aware=True):
    """Dict/loop reimplementation of one synchronous refinement round."""
    out = {}
    for node in sg.nodes:
        total = np.array(feats[node.node_id], dtype=float)
        for same_class in (True, False):
            if same_class:
                path = "msg.h2h" if node.is_human else "msg.o2o"
            else:
                path = "msg.o2h" if node.is_human else "msg.h2o"
            acc = None
            for edge in sg.edges:
                if edge.subject_id == node.node_id:
                    other = sg.node_by_id(edge.object_id)
                elif edge.object_id == node.node_id:
                    other = sg.node_by_id(edge.subject_id)
                else:
                    continue
                if (other.is_human == node.is_human) != same_class:
                    continue
                if relation_aware:
                    soft = np.asarray(edge.soft_distribution)
                    gate = params["msg.alpha_proj"] @ (soft @ vocab.predicate_matrix())
                else:
                    gate = np.ones(len(feats[node.node_id]))
                term = (params[f"{path}.src"] @ feats[other.node_id]) * gate
                acc = term if acc is None else acc + term
            if acc is not None:
                total = total + params[f"{path}.out"] @ acc
        out[node.node_id] = total
    return out


class TestRunPassing:
    def test_single_round_equals_refine_round(self, rng):
        vocab = tiny_vocab()
        store = tiny_store()
        sg = random_scene_graph(rng, 5, 6, vocab)
        feats = random_features(rng, sg)
        single = relmp.run_passing(sg, feats, vocab, store, relmp.PassingConfig(rounds=1))
        direct = relmp.refine_round(sg, feats, vocab, store)
        for node_id in feats:
            assert np.array_equal(single.features[node_id], direct.features[node_id])

    def test_two_rounds_edgeless_identity(self, rng):
        vocab = tiny_vocab()
        sg = _graph([_node(0, True), _node(1, False)], [])
        feats = random_features(rng, sg)
        out = relmp.run_passing(sg, feats, vocab, tiny_store(), relmp.PassingConfig(rounds=2))
        for node_id, vec in feats.items():
            assert np.array_equal(out.features[node_id], vec)

    def test_two_rounds_equal_iterated_oracle(self, rng):
        vocab = tiny_vocab()
        store = tiny_store()
        sg = _graph(
            [_node(0, True), _node(1, False), _node(2, False)],
            [make_edge(0, 1, 0, 4), make_edge(0, 2, 1, 4)],
        )
        feats = random_features(rng, sg)
        out = relmp.run_passing(sg, feats, vocab, store, relmp.PassingConfig(rounds=2))
        oracle = _oracle_round(sg, _oracle_round(sg, feats, vocab, store), vocab, store)
        for node_id in feats:
            assert np.allclose(out.features[node_id], oracle[node_id], atol=1e-10)

    def test_rounds_must_be_positive(self):
        with pytest.raises(Exception):
            relmp.PassingConfig(rounds=0)

    def test_oracle_equivalence_many_instances(self, rng):
        vocab = tiny_vocab()
        store = tiny_store()
        for _ in range(30):
            sg = random_scene_graph(rng, int(rng.integers(2, 8)), int(rng.integers(1, 16)), vocab)
            feats = random_features(rng, sg)
            mine = relmp.run_passing(sg, feats, vocab, store, relmp.PassingConfig(rounds=2))
            oracle = _oracle_round(sg, _oracle_round(sg, feats, vocab, store), vocab, store)
            for node_id in feats:
                assert np.allclose(mine.features[node_id], oracle[node_id], atol=1e-10)


class TestStructuralProperties:
    def test_locality_beyond_t_rounds(self, rng):
        """A node more than T hops away cannot influence the refinement."""
        vocab = tiny_vocab()
        store = tiny_store()
        # chain 0 - 1 - 2 - 3: node 3 is 3 hops from node 0
        nodes = [_node(0, True), _node(1, False), _node(2, True), _node(3, False)]
        edges = [make_edge(0, 1, 0, 4), make_edge(2, 1, 1, 4), make_edge(2, 3, 0, 4)]
        sg = _graph(nodes, edges)
        feats = random_features(rng, sg)
        far = dict(feats)
        far[3] = feats[3] + 10.0
        for rounds in (1, 2):
            cfg = relmp.PassingConfig(rounds=rounds)
            a = relmp.run_passing(sg, feats, vocab, store, cfg)
            b = relmp.run_passing(sg, far, vocab, store, cfg)
            assert np.array_equal(a.features[0], b.features[0])

    def test_class_discipline(self, rng):
        vocab = tiny_vocab()
        store = tiny_store()
        nodes = [_node(0, True), _node(1, True), _node(2, False)]
        edges = [make_edge(0, 1, 3, 4), make_edge(0, 2, 0, 4)]
        sg = _graph(nodes, edges)
        feats = random_features(rng, sg)

        perturbed_human = dict(feats)
        perturbed_human[1] = feats[1] + 5.0
        a = relmp.inter_class_messages(0, sg, feats, vocab, store)
        b = relmp.inter_class_messages(0, sg, perturbed_human, vocab, store)
        assert np.array_equal(a, b)

        perturbed_object = dict(feats)
        perturbed_object[2] = feats[2] + 5.0
        a = relmp.intra_class_messages(0, sg, feats, vocab, store)
        b = relmp.intra_class_messages(0, sg, perturbed_object, vocab, store)
        assert np.array_equal(a, b)

    def test_parallel_edges_contribute_once_each(self, rng):
        vocab = tiny_vocab()
        sg = _graph(
            [_node(0, True), _node(1, False)],
            [make_edge(0, 1, 0, 4), make_edge(0, 1, 0, 4)],
        )
        feats = random_features(rng, sg)
        out = relmp.inter_class_messages(
            0, sg, feats, vocab, identity_params(vocab), relation_aware=False
        )
        assert np.allclose(out, 2.0 * feats[1], atol=1e-12)

    def test_relation_agnostic_gate_is_ones(self, rng):
        vocab = tiny_vocab()
        gates = relmp.edge_gates(
            random_scene_graph(rng, 3, 2, vocab), vocab, {}, relation_aware=False, d_f=D_F
        )
        for gate in gates:
            assert np.array_equal(gate, np.ones(D_F))
