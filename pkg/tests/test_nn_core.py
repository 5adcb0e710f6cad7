import math

import numpy as np
import pytest

from commands.utils import nn_core
from commands.utils.exceptions import (FrozenParameterError, LabelRangeError, MissingStateError, NonFiniteError,
                                       ShapeError)
from commands.utils.losses import LossSpec, Variant, loss_hr


def test_relu_single_layer_forward():
    f = nn_core.MlpParams([np.array([[1.0, -1.0]])], [np.array([0.0])], 'relu')

    assert nn_core.mlp_forward(f, np.array([2.0, 1.0])) == pytest.approx([1.0])
    assert nn_core.mlp_forward(f, np.array([1.0, 2.0])) == pytest.approx([0.0])


def test_forward_shapes(tiny_state):
    x = np.zeros((7, 3))

    assert nn_core.mlp_forward(tiny_state.f, x).shape == (7, 3)
    assert nn_core.mlp_forward(tiny_state.f, x[0]).shape == (3,)
    assert nn_core.head_forward(tiny_state.h, np.zeros(3)).shape == (3,)
    with pytest.raises(ShapeError):
        nn_core.mlp_forward(tiny_state.f, np.zeros((2, 4)))


def test_init_is_seeded_and_bounded():
    a = nn_core.init_mlp([5, 6, 2], seed=4)
    b = nn_core.init_mlp([5, 6, 2], seed=4)
    c = nn_core.init_mlp([5, 6, 2], seed=5)

    assert all(np.array_equal(x, y) for x, y in zip(a.buffers(), b.buffers()))
    assert not np.array_equal(a.weights[0], c.weights[0])
    assert np.abs(a.weights[0]).max() <= math.sqrt(1 / 5)
    assert np.abs(a.weights[1]).max() <= math.sqrt(1 / 6)


def test_softmax_is_stable_and_normalised():
    probs = nn_core.softmax(np.array([[1000.0, 1000.0], [0.0, -1000.0]]))

    assert probs[0] == pytest.approx([0.5, 0.5])
    assert probs.sum(axis=1) == pytest.approx([1.0, 1.0])
    with pytest.raises(NonFiniteError):
        nn_core.softmax(np.array([np.nan, 0.0]))


def test_cross_entropy_values_and_label_range():
    assert nn_core.cross_entropy(np.zeros((2, 4)), np.array([0, 3])) == pytest.approx(math.log(4))
    with pytest.raises(LabelRangeError):
        nn_core.cross_entropy(np.zeros((1, 3)), np.array([3]))
    with pytest.raises(ValueError):
        nn_core.cross_entropy(np.zeros((1, 3)), np.array([-1]))


@pytest.mark.parametrize('terms', [
    {'lp': 1.0},
    {'lpft': 1.0},
    {'fr': 1.0},
    {'hr': 1.0},
    {'hr_f': 1.0},
    {'ent_min_hr': 1.0},
    {'lpft': 1.0, 'fr': 0.7, 'hr': 0.3}
])
def test_gradients_match_finite_differences(tiny_state, tiny_batch, tiny_prototypes, terms):
    report = nn_core.finite_difference_check(tiny_state, tiny_batch, terms, step=1e-5, tol=1e-4,
                                             prototypes=tiny_prototypes)

    assert report.checked == tiny_state.f.num_parameters() + 12
    assert report.max_rel_err < 1e-4
    assert report.passed


def test_total_objective_of_every_variant_matches_finite_differences(tiny_state, tiny_batch, tiny_prototypes):
    for variant in Variant:
        report = nn_core.finite_difference_check(tiny_state, tiny_batch, LossSpec(variant), prototypes=tiny_prototypes)
        assert report.passed, variant


def test_relu_network_gradients(tiny_batch, tiny_prototypes):
    f = nn_core.init_mlp([3, 5, 3], seed=8, activation='relu')
    state = nn_core.ModelState(f, nn_core.init_head(3, 3, seed=8))

    report = nn_core.finite_difference_check(state, tiny_batch, {'lpft': 1.0, 'fr': 1.0}, prototypes=tiny_prototypes)

    assert report.max_rel_err < 1e-4


def test_head_terms_never_reach_the_extractor(tiny_state, tiny_batch):
    for term in ('hr', 'hr_f', 'ent_min_hr', 'lp'):
        grads = nn_core.compute_gradients(tiny_state, tiny_batch, {term: 1.0})
        assert all(not g.any() for g in grads.f_buffers()), term
        assert any(g.any() for g in grads.h_buffers()), term


def test_feature_regulariser_never_reaches_the_head(tiny_state, tiny_batch, tiny_prototypes):
    grads = nn_core.compute_gradients(tiny_state, tiny_batch, {'fr': 1.0}, tiny_prototypes)

    assert all(not g.any() for g in grads.h_buffers())
    assert any(g.any() for g in grads.f_buffers())


def test_missing_state_is_reported(tiny_batch):
    state = nn_core.ModelState(nn_core.init_mlp([3, 3], seed=0), nn_core.init_head(3, 3, seed=0))

    with pytest.raises(MissingStateError):
        nn_core.compute_gradients(state, tiny_batch, {'hr': 1.0})
    with pytest.raises(MissingStateError):
        nn_core.compute_gradients(state, tiny_batch, {'fr': 1.0})
    with pytest.raises(MissingStateError):
        nn_core.compute_gradients(state, tiny_batch, LossSpec(Variant.LPFT))


def test_zero_coefficients_are_skipped(tiny_state, tiny_batch):
    with_zero = nn_core.compute_gradients(tiny_state, tiny_batch, {'lpft': 1.0, 'hr': 0.0, 'fr': 0.0})
    without = nn_core.compute_gradients(tiny_state, tiny_batch, {'lpft': 1.0})

    assert with_zero.components == without.components
    assert all(np.array_equal(a, b) for a, b in zip(with_zero.buffers(), without.buffers()))


def test_sgd_step_updates_trainable_parameters_only(tiny_state, tiny_batch, tiny_prototypes):
    before = [buffer.copy() for buffer in tiny_state.trainable_buffers()]
    f0_before = [buffer.copy() for buffer in tiny_state.f0.buffers()]
    grads = nn_core.compute_gradients(tiny_state, tiny_batch, LossSpec(Variant.RPF), tiny_prototypes)

    nn_core.sgd_step(tiny_state, grads, nn_core.OptimizerState(0.1, decay_epoch=10))

    for old, new, grad in zip(before, tiny_state.trainable_buffers(), grads.buffers()):
        assert new == pytest.approx(old - 0.1 * grad)
    assert all(np.array_equal(a, b) for a, b in zip(f0_before, tiny_state.f0.buffers()))


def test_step_decay_schedule():
    opt = nn_core.OptimizerState(0.1, decay_epoch=2)
    rates = []
    for _ in range(4):
        rates.append(opt.effective_lr)
        opt.next_epoch()

    assert rates == pytest.approx([0.1, 0.1, 0.01, 0.01])


def test_snapshots_are_read_only(tiny_state):
    with pytest.raises(ValueError):
        tiny_state.f0.weights[0][0, 0] = 1.0
    with pytest.raises(ValueError):
        tiny_state.h_lp.W[0, 0] = 1.0
    with pytest.raises(FrozenParameterError):
        tiny_state.f0 = nn_core.init_mlp([3, 4, 3], seed=0)


def test_entropy_term_is_bounded():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        num_classes = int(rng.integers(2, 6))
        h = nn_core.HeadParams(rng.normal(scale=3, size=(num_classes, 4)), rng.normal(size=num_classes))
        value = loss_hr(h, rng.normal(size=(8, 4)))
        assert -math.log(num_classes) - 1e-12 <= value <= 1e-12


def test_head_regulariser_increases_entropy(tiny_state, tiny_batch):
    batch = nn_core.Batch(tiny_batch.x, tiny_batch.y, nn_core.mlp_forward(tiny_state.f0, tiny_batch.x))
    opt = nn_core.OptimizerState(0.1, decay_epoch=100)

    entropies = [-loss_hr(tiny_state.h, batch.f0_features)]
    for _ in range(10):
        grads = nn_core.compute_gradients(tiny_state, batch, {'hr': 1.0})
        nn_core.sgd_step(tiny_state, grads, opt)
        entropies.append(-loss_hr(tiny_state.h, batch.f0_features))

    assert all(b > a for a, b in zip(entropies, entropies[1:]))


def test_zero_learning_rate_leaves_parameters_unchanged(tiny_state, tiny_batch):
    before = [buffer.copy() for buffer in tiny_state.trainable_buffers()]
    grads = nn_core.compute_gradients(tiny_state, tiny_batch, {'lpft': 1.0})

    nn_core.sgd_step(tiny_state, grads, nn_core.OptimizerState(0.0, decay_epoch=1))

    assert all(np.array_equal(a, b) for a, b in zip(before, tiny_state.trainable_buffers()))


def test_gradient_check_catches_a_corrupted_gradient(tiny_state, tiny_batch):
    grads = nn_core.compute_gradients(tiny_state, tiny_batch, {'lpft': 1.0})
    grads.h_b[0] += 1.0

    report = nn_core.finite_difference_check(tiny_state, tiny_batch, {'lpft': 1.0}, grads=grads)

    assert not report.passed
    assert report.worst == (len(tiny_state.trainable_buffers()) - 1, 0)


def test_softmax_ignores_a_constant_shift():
    rng = np.random.default_rng(4)
    for _ in range(100):
        z = rng.normal(scale=5, size=(3, int(rng.integers(2, 8))))
        shift = rng.uniform(-50, 50, size=(3, 1))
        assert nn_core.softmax(z + shift) == pytest.approx(nn_core.softmax(z), abs=1e-12)


def test_gradient_clipping_rescales_to_the_global_norm(tiny_state, tiny_batch, tiny_prototypes):
    before = [buffer.copy() for buffer in tiny_state.trainable_buffers()]
    grads = nn_core.compute_gradients(tiny_state, tiny_batch, LossSpec(Variant.RPF), tiny_prototypes)
    norm = nn_core.grad_norm(grads.buffers())
    clip = norm / 4

    nn_core.sgd_step(tiny_state, grads, nn_core.OptimizerState(0.1, decay_epoch=10, grad_clip=clip))

    for old, new, grad in zip(before, tiny_state.trainable_buffers(), grads.buffers()):
        assert new == pytest.approx(old - 0.1 * clip * grad / norm, abs=1e-12)
    step = nn_core.grad_norm([old - new for old, new in zip(before, tiny_state.trainable_buffers())])
    assert step == pytest.approx(0.1 * clip)


def test_gradient_clipping_leaves_small_gradients_alone(tiny_state, tiny_batch):
    before = [buffer.copy() for buffer in tiny_state.trainable_buffers()]
    grads = nn_core.compute_gradients(tiny_state, tiny_batch, {'lpft': 1.0})

    nn_core.sgd_step(tiny_state, grads, nn_core.OptimizerState(0.1, decay_epoch=10,
                                                               grad_clip=2 * nn_core.grad_norm(grads.buffers())))

    for old, new, grad in zip(before, tiny_state.trainable_buffers(), grads.buffers()):
        assert new == pytest.approx(old - 0.1 * grad)
    for clip in (0.0, -1.0):
        with pytest.raises(ShapeError):
            nn_core.OptimizerState(0.1, decay_epoch=10, grad_clip=clip)
