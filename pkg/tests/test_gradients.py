"""Finite-difference checks for every differentiable path (fast variant;
the acceptance suite runs the full ten-fixture sweep)."""

import numpy as np
import pytest

from sghoi import hoihead, ops
from sghoi.params import ParameterStore

TOLERANCE = 1e-4


def _store_for(fixture, seed):
    return ParameterStore.build(
        fixture.config.model_dims(),
        fixture.vocab.num_interactions,
        fixture.config.switches(),
        seed=seed,
    )


@pytest.mark.parametrize("op_name", sorted(hoihead.GRAD_CHECK_OPS))
def test_gradients_match_central_differences(op_name):
    for seed in (3, 41):
        fixture = hoihead.make_grad_fixture(seed)
        store = _store_for(fixture, seed + 100)
        err = hoihead.grad_check(op_name, fixture, store, samples_per_tensor=8, seed=seed)
        assert err <= TOLERANCE, f"{op_name} seed {seed}: rel err {err:.3e}"


def test_linear_map_quadratic_loss_near_exact():
    """Central differences are exact for quadratics up to float rounding."""
    rng = np.random.default_rng(0)
    W_value = rng.normal(size=(4, 6))
    x = rng.normal(size=6)

    def loss_fn(W_array):
        leaf = ops.Var(W_array) if isinstance(W_array, np.ndarray) else W_array
        y = ops.matmul(leaf, x)
        return ops.scale(ops.sum_all(ops.mul(y, y)), 0.5), leaf

    loss, leaf = loss_fn(W_value)
    ops.backward(loss)
    analytic = leaf.grad
    step = 1e-5
    worst = 0.0
    for index in range(W_value.size):
        perturbed = W_value.copy()
        perturbed.flat[index] += step
        plus = float(ops.value_of(loss_fn(perturbed)[0]))
        perturbed.flat[index] -= 2 * step
        minus = float(ops.value_of(loss_fn(perturbed)[0]))
        numeric = (plus - minus) / (2 * step)
        a = analytic.flat[index]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    assert worst < 1e-8


def test_non_finite_gradient_reported_as_failure():
    fixture = hoihead.make_grad_fixture(5)
    store = _store_for(fixture, 5)
    store.arrays["head.visual.weight"][0, 0] = np.inf
    err = hoihead.grad_check("visual_head", fixture, store, samples_per_tensor=2)
    assert err == float("inf")


def test_fused_encoder_matches_composed_reference():
    """The fused recurrent kernel must equal the op-composed direction."""
    from sghoi import sgembed

    rng = np.random.default_rng(7)
    fixture = hoihead.make_grad_fixture(7)
    store = _store_for(fixture, 7)
    half = fixture.config["model"]["d_h"] // 2
    X = rng.normal(size=(5, fixture.config["model"]["d_h"]))
    for reverse in (False, True):
        fused = sgembed._gru_sequence_fused(X, store, "context.fwd", half, reverse)
        composed = sgembed._encoder_direction(X, store, "context.fwd", "gru", half, reverse)
        stacked = np.stack([ops.value_of(h) for h in composed])
        assert np.allclose(ops.value_of(fused), stacked, atol=1e-12)

    # gradients agree too: probe both paths with the same scalar loss
    probe = rng.normal(size=(5, half))
    leaves = store.leaves()
    fused = sgembed._gru_sequence_fused(X, leaves, "context.fwd", half, False)
    ops.backward(ops.sum_all(ops.mul(fused, probe)))
    fused_grads = {k: v.grad.copy() for k, v in leaves.items() if v.grad is not None}

    leaves2 = store.leaves()
    composed = sgembed._encoder_direction(X, leaves2, "context.fwd", "gru", half, False)
    loss = None
    for t, h in enumerate(composed):
        term = ops.sum_all(ops.mul(h, probe[t]))
        loss = term if loss is None else ops.add(loss, term)
    ops.backward(loss)
    for name, grad in fused_grads.items():
        assert np.allclose(grad, leaves2[name].grad, atol=1e-10), name
