"""Scene-graph embedding: spatial/semantic layout codes, sequence context,
attention-based relation fusion, and the pooled per-image graph vector.

All functions accept parameter mappings holding either plain arrays or traced
:class:`~sghoi.ops.Var` leaves; outputs follow the inputs' kind.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from . import ops
from .datamodel import BoundingBox, ContractError, DataError, SceneGraph, SGEdge, Vocabulary


def spatial_pre_vector(box: BoundingBox, image_w: float, image_h: float) -> np.ndarray:
    """Normalized 8-vector [x_tl, y_tl, x_br, y_br, x_c, y_c, w, h].

    x-terms are divided by image width, y-terms by image height, so the code
    is invariant to canvas scale.
    """
    if box.width <= 0 or box.height <= 0:
        raise DataError(f"zero-area box {box}")
    cx, cy = box.center
    return np.array(
        [
            box.x_tl / image_w,
            box.y_tl / image_h,
            box.x_br / image_w,
            box.y_br / image_h,
            cx / image_w,
            cy / image_h,
            box.width / image_w,
            box.height / image_h,
        ],
        dtype=np.float64,
    )


def spatial_encode(box: BoundingBox, image_w: float, image_h: float, params):
    """Project the normalized coordinate 8-vector through the spatial layer."""
    return ops.matmul(params["spatial.proj"], spatial_pre_vector(box, image_w, image_h))


def semantic_lookup(category_id: int, vocab: Vocabulary) -> np.ndarray:
    """Frozen word embedding of an object category (with hashed fallback)."""
    return vocab.object_embedding(category_id)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _gru_sequence_fused(X, params, prefix: str, half: int, reverse: bool):
    """One GRU direction as a single graph node with hand-written BPTT.

    Functionally identical to composing per-step ops (the composed form in
    ``_encoder_direction`` is kept as the reference); collapsing the loop into
    one node keeps the tape small on hot training paths.  Returns the (n, half)
    matrix of per-position states.
    """
    keys = [
        f"{prefix}.update_in", f"{prefix}.reset_in", f"{prefix}.cand_in",
        f"{prefix}.update_rec", f"{prefix}.reset_rec", f"{prefix}.cand_rec",
        f"{prefix}.update_bias", f"{prefix}.reset_bias", f"{prefix}.cand_bias",
    ]
    Xv = ops.value_of(X)
    Wz, Wr, Wc, Uz, Ur, Uc, bz, br, bc = [ops.value_of(params[k]) for k in keys]
    n = Xv.shape[0]
    pre_z = Xv @ Wz.T + bz
    pre_r = Xv @ Wr.T + br
    pre_c = Xv @ Wc.T + bc
    steps = range(n - 1, -1, -1) if reverse else range(n)
    h = np.zeros(half, dtype=np.float64)
    h_prev = np.empty((n, half))
    Z, R, C, H = (np.empty((n, half)) for _ in range(4))
    for t in steps:
        h_prev[t] = h
        z = _sigmoid(pre_z[t] + Uz @ h)
        r = _sigmoid(pre_r[t] + Ur @ h)
        c = np.tanh(pre_c[t] + Uc @ (r * h))
        h = (1.0 - z) * h + z * c
        Z[t], R[t], C[t], H[t] = z, r, c, h

    traced = [k for k in keys if ops.is_var(params[k])]
    if not traced and not ops.is_var(X):
        return H

    memo = {}

    def bptt(dH):
        if memo.get("seed") is dH:
            return memo["grads"]
        dPz, dPr, dPc = np.empty((n, half)), np.empty((n, half)), np.empty((n, half))
        dh = np.zeros(half)
        for t in reversed(list(steps)):
            dht = dH[t] + dh
            z, r, c, hp = Z[t], R[t], C[t], h_prev[t]
            dz = dht * (c - hp)
            dc = dht * z
            dh = dht * (1.0 - z)
            dac = dc * (1.0 - c * c)
            drh = Uc.T @ dac
            dr = drh * hp
            dh = dh + drh * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            dPz[t], dPr[t], dPc[t] = daz, dar, dac
            dh = dh + Uz.T @ daz + Ur.T @ dar
        grads = {
            f"{prefix}.update_in": dPz.T @ Xv,
            f"{prefix}.reset_in": dPr.T @ Xv,
            f"{prefix}.cand_in": dPc.T @ Xv,
            f"{prefix}.update_rec": dPz.T @ h_prev,
            f"{prefix}.reset_rec": dPr.T @ h_prev,
            f"{prefix}.cand_rec": dPc.T @ (R * h_prev),
            f"{prefix}.update_bias": dPz.sum(axis=0),
            f"{prefix}.reset_bias": dPr.sum(axis=0),
            f"{prefix}.cand_bias": dPc.sum(axis=0),
            "__X__": dPz @ Wz + dPr @ Wr + dPc @ Wc,
        }
        memo["seed"] = dH
        memo["grads"] = grads
        return grads

    parents = []
    if ops.is_var(X):
        parents.append((X, lambda g: bptt(g)["__X__"]))
    for key in traced:
        parents.append((params[key], lambda g, key=key: bptt(g)[key]))
    return ops.Var(H, parents=tuple(parents))


def _encoder_direction(X, params, prefix: str, cell: str, half: int, reverse: bool):
    """One direction of the sequence encoder over input rows X (n, d).

    Input-side projections for all steps run as a single product; only the
    recurrent half stays sequential.  Returns per-position states in sequence
    order.
    """
    n = ops.value_of(X).shape[0]
    h = np.zeros(half, dtype=np.float64)
    states = []
    steps = range(n - 1, -1, -1) if reverse else range(n)
    if cell == "gru":
        w_in = ops.concat(
            [params[f"{prefix}.update_in"], params[f"{prefix}.reset_in"], params[f"{prefix}.cand_in"]],
            axis=0,
        )
        bias = ops.concat(
            [params[f"{prefix}.update_bias"], params[f"{prefix}.reset_bias"], params[f"{prefix}.cand_bias"]]
        )
        pre = ops.add(ops.matmul(X, ops.transpose(w_in)), bias)
        w_zr = ops.concat([params[f"{prefix}.update_rec"], params[f"{prefix}.reset_rec"]], axis=0)
        w_cand = params[f"{prefix}.cand_rec"]
        for t in steps:
            p = ops.row(pre, t)
            zr = ops.sigmoid(ops.add(ops.slice_rows(p, 0, 2 * half), ops.matmul(w_zr, h)))
            z = ops.slice_rows(zr, 0, half)
            r = ops.slice_rows(zr, half, 2 * half)
            cand = ops.tanh(
                ops.add(ops.slice_rows(p, 2 * half, 3 * half), ops.matmul(w_cand, ops.mul(r, h)))
            )
            h = ops.add(ops.mul(ops.sub(1.0, z), h), ops.mul(z, cand))
            states.append(h)
    else:
        pre = ops.add(ops.matmul(X, ops.transpose(params[f"{prefix}.in"])), params[f"{prefix}.bias"])
        for t in steps:
            h = ops.tanh(ops.add(ops.row(pre, t), ops.matmul(params[f"{prefix}.rec"], h)))
            states.append(h)
    if reverse:
        states.reverse()
    return states


def sequence_order(boxes: Sequence[BoundingBox], node_ids: Optional[Sequence[int]] = None) -> List[int]:
    """Left-to-right reading order: ascending center-x, ties by node id."""
    n = len(boxes)
    ids = list(node_ids) if node_ids is not None else list(range(n))
    return sorted(range(n), key=lambda i: (boxes[i].center[0], ids[i]))


def context_matrix(codewords, boxes, params, node_ids=None, cell: str = "gru"):
    """Hidden context states in canonical (sorted) order, shape (n, d_h).

    Returns (matrix, order) with ``order[position] = caller index``.
    """
    if isinstance(codewords, (list, tuple)):
        n = len(codewords)
        stacked = ops.stack_rows(codewords) if n else None
    else:
        n = ops.value_of(codewords).shape[0]
        stacked = codewords
    if n == 0:
        return None, []
    order = sequence_order(boxes, node_ids)
    inputs = ops.matmul(
        ops.gather_rows(stacked, order), ops.transpose(params["context.input_proj"])
    )
    half = ops.value_of(params["context.input_proj"]).shape[0] // 2
    if cell == "gru":
        fwd = _gru_sequence_fused(inputs, params, "context.fwd", half, reverse=False)
        bwd = _gru_sequence_fused(inputs, params, "context.bwd", half, reverse=True)
        return ops.concat([fwd, bwd], axis=1), order
    fwd = _encoder_direction(inputs, params, "context.fwd", cell, half, reverse=False)
    bwd = _encoder_direction(inputs, params, "context.bwd", cell, half, reverse=True)
    rows = [ops.concat([fwd[t], bwd[t]]) for t in range(n)]
    return ops.stack_rows(rows), order


def context_encode(
    codewords,
    boxes: Sequence[BoundingBox],
    params,
    node_ids: Optional[Sequence[int]] = None,
    cell: str = "gru",
):
    """Bidirectional recurrent context over nodes in left-to-right order.

    ``codewords`` holds per-node [spatial; semantic] vectors (a list, or an
    already stacked matrix) in the caller's node order; outputs come back in
    that same order.
    """
    matrix, order = context_matrix(codewords, boxes, params, node_ids, cell)
    if matrix is None:
        return []
    hidden = [None] * len(order)
    for position, original in enumerate(order):
        hidden[original] = ops.row(matrix, position)
    return hidden


def predicate_mixture(edge: SGEdge, vocab: Vocabulary) -> np.ndarray:
    """Soft-label weighted average of predicate word embeddings."""
    soft = np.asarray(edge.soft_distribution, dtype=np.float64)
    matrix = vocab.predicate_matrix()
    if soft.shape[0] != matrix.shape[0]:
        raise ContractError(
            f"edge soft distribution has {soft.shape[0]} entries, vocabulary has {matrix.shape[0]} predicates"
        )
    return soft @ matrix


def relation_feature(h_i, h_j, edge: SGEdge, vocab: Vocabulary, params):
    """Project [h_subject; predicate mixture; h_object] into the edge code."""
    alpha = predicate_mixture(edge, vocab)
    return ops.matmul(params["relation.proj"], ops.concat([h_i, alpha, h_j]))


def correlation(H, E, params):
    """Self-attention correlation between node and edge features: (n, m)."""
    n = ops.value_of(H).shape[0]
    m = ops.value_of(E).shape[0]
    if n == 0 or m == 0:
        return np.zeros((n, m), dtype=np.float64)
    weighted = ops.mul(H, params["attention.weights"])
    return ops.matmul(weighted, ops.transpose(E))


def fuse(C, H, E):
    """Layout-relation fusion: (C^T . H) elementwise E, shape (m, d)."""
    return ops.mul(ops.matmul(ops.transpose(C), H), E)


def pool_embed(g_ring, params):
    """Sum fused edge rows and project into the final graph vector."""
    value = ops.value_of(g_ring)
    d_g = ops.value_of(params["graph.proj"]).shape[0]
    if value.shape[0] == 0:
        return np.zeros(d_g, dtype=np.float64)
    return ops.matmul(params["graph.proj"], ops.sum_axis0(g_ring))


def embed_scene_graph(sg: SceneGraph, vocab: Vocabulary, params, cell: str = "gru"):
    """Full composition over one scene graph; zero vector when it has no edges.

    Nodes are processed in canonical (center-x, node id) order so any
    permutation of the input node list yields bit-identical output.
    """
    d_g = ops.value_of(params["graph.proj"]).shape[0]
    if len(sg.edges) == 0 or len(sg.nodes) == 0:
        return np.zeros(d_g, dtype=np.float64)

    order = sequence_order([n.box for n in sg.nodes], [n.node_id for n in sg.nodes])
    sorted_nodes = [sg.nodes[i] for i in order]
    pre = np.stack(
        [spatial_pre_vector(n.box, sg.image_width, sg.image_height) for n in sorted_nodes]
    )
    semantic = np.stack([semantic_lookup(n.category_id, vocab) for n in sorted_nodes])
    codewords = ops.concat(
        [ops.matmul(pre, ops.transpose(params["spatial.proj"])), semantic], axis=1
    )
    # caller order is already canonical, so the context matrix rows align
    H, _ = context_matrix(
        codewords,
        [n.box for n in sorted_nodes],
        params,
        node_ids=[n.node_id for n in sorted_nodes],
        cell=cell,
    )
    by_id = {node.node_id: ops.row(H, i) for i, node in enumerate(sorted_nodes)}

    edge_rows = ops.stack_rows(
        [
            ops.concat([by_id[e.subject_id], predicate_mixture(e, vocab), by_id[e.object_id]])
            for e in sg.edges
        ]
    )
    E = ops.matmul(edge_rows, ops.transpose(params["relation.proj"]))
    C = correlation(H, E, params)
    return pool_embed(fuse(C, H, E), params)
