import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from softmax_ntk.errors import DomainError, NonFiniteError, ShapeError
from softmax_ntk.model import (Dataset, NetworkState, analytic_gradient, circle_inputs,
                               fd_gradient, forward, loss, make_dataset, predict_all,
                               sample_unit_ball, softmax_batch, softmax_state)
from softmax_ntk.training import symmetric_init

from conftest import random_instance


def test_softmax_sums_to_one_and_matches_naive(rng):
    W = rng.standard_normal((3, 7))
    x = sample_unit_ball(rng, 3, 1)[:, 0]
    st_ = softmax_state(W, x)
    naive = np.exp(W.T @ x) / np.exp(W.T @ x).sum()
    np.testing.assert_allclose(st_.S, naive, rtol=1e-14)
    np.testing.assert_allclose(st_.exps, np.exp(W.T @ x), rtol=1e-14)
    assert st_.alpha == pytest.approx(np.exp(W.T @ x).sum(), rel=1e-14)


def test_softmax_large_logits_stay_finite():
    W = np.array([[800.0, 790.0, -5.0]])
    S = softmax_state(W, np.array([1.0])).S
    assert np.all(np.isfinite(S))
    np.testing.assert_allclose(S[:2], [1 / (1 + np.exp(-10)), np.exp(-10) / (1 + np.exp(-10))],
                               rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)),
       arrays(np.float64, 4, elements=st.floats(-1, 1)))
def test_softmax_is_a_distribution(W, x):
    S = softmax_state(W, x).S
    assert np.all(S >= 0)
    assert abs(S.sum() - 1) < 1e-12


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-5, 5)), st.floats(-20, 20))
def test_softmax_shift_invariant_along_columns(W, c):
    # adding c to every logit leaves S unchanged: use x = e_0 and shift row 0
    x = np.array([1.0, 0.0, 0.0])
    W2 = W.copy()
    W2[0] += c
    np.testing.assert_allclose(softmax_state(W, x).S, softmax_state(W2, x).S, atol=1e-12)


def test_softmax_batch_matches_single(rng):
    W = rng.standard_normal((2, 9))
    X = sample_unit_ball(rng, 2, 4)
    batch = softmax_batch(W, X)
    for i in range(4):
        np.testing.assert_allclose(batch.S[i], softmax_state(W, X[:, i]).S, rtol=1e-14)


def test_shape_errors(rng):
    with pytest.raises(ShapeError):
        softmax_state(np.ones((3, 4)), np.ones(2))
    with pytest.raises(ShapeError):
        Dataset(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        NetworkState(np.zeros((2, 3)), np.ones((2, 4)))


def test_dataset_rejects_large_norms_and_nonfinite():
    with pytest.raises(DomainError):
        Dataset(np.array([[1.1], [0.0]]), np.zeros((2, 1)))
    with pytest.raises(NonFiniteError):
        Dataset(np.array([[np.nan], [0.0]]), np.zeros((2, 1)))


def test_dataset_is_read_only(rng):
    data = make_dataset(rng, 3, 2)
    with pytest.raises(ValueError):
        data.X[0, 0] = 0.5


def test_signs_must_be_plus_minus_one():
    with pytest.raises(DomainError):
        NetworkState(np.zeros((2, 2)), np.array([[1.0, 0.5]]))


def test_forward_matches_predict_all(small_instance):
    data, net = small_instance
    F = predict_all(net, data)
    for i in range(data.n):
        np.testing.assert_allclose(F[:, i], forward(net, data.X[:, i]), rtol=1e-13)


def test_uniform_softmax_output_is_sign_sum():
    # W = 0 gives S = 1/m, so F_l = sum_r a_lr
    a = np.array([[1.0, 1.0, -1.0, 1.0]])
    net = NetworkState(np.zeros((2, 4)), a)
    assert forward(net, np.array([0.3, 0.4]))[0] == pytest.approx(2.0)


def test_loss_is_half_squared_frobenius():
    F = np.array([[1.0, 2.0], [0.0, -1.0]])
    Y = np.zeros((2, 2))
    assert loss(F, Y) == 3.0


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    data, net = random_instance(rng, n=6, d=3, m=16)
    g = analytic_gradient(net, data)
    g_fd = fd_gradient(net, data)
    assert np.max(np.abs(g - g_fd)) / np.max(np.abs(g)) <= 1e-6


def test_gradient_forms_agree(small_instance):
    data, net = small_instance
    g1 = analytic_gradient(net, data, "claim")
    g2 = analytic_gradient(net, data, "definition")
    assert np.max(np.abs(g1 - g2)) <= 1e-12 * max(1.0, np.max(np.abs(g1)))


def test_unknown_gradient_form(small_instance):
    data, net = small_instance
    with pytest.raises(DomainError):
        analytic_gradient(net, data, "other")


def test_fd_step_must_be_positive(small_instance):
    data, net = small_instance
    with pytest.raises(DomainError):
        fd_gradient(net, data, h=0.0)


def test_symmetric_init_outputs_zero(rng):
    net = symmetric_init(64, 3, 2, sigma=1.0, seed=5)
    X = sample_unit_ball(rng, 3, 20)
    for x in X.T:
        assert np.max(np.abs(forward(net, x))) <= 1e-12


def test_unit_ball_samples_inside(rng):
    X = sample_unit_ball(rng, 4, 500)
    assert X.shape == (4, 500)
    assert np.max(np.linalg.norm(X, axis=0)) <= 1.0 + 1e-15


def test_circle_inputs_are_evenly_spaced(rng):
    X = circle_inputs(rng, 8)
    np.testing.assert_allclose(np.linalg.norm(X, axis=0), 1.0, rtol=1e-15)
    gaps = np.diff(np.unwrap(np.arctan2(X[1], X[0])))
    np.testing.assert_allclose(gaps, 2 * np.pi / 8, rtol=1e-12)


def test_circle_layout_needs_two_dims(rng):
    with pytest.raises(DomainError):
        make_dataset(rng, 4, 3, inputs="circle")


def test_hand_evaluated_two_neuron_network():
    W = np.array([[np.log(3.0), 0.0]])
    st_ = softmax_state(W, np.array([1.0]))
    np.testing.assert_allclose(st_.exps, [3.0, 1.0], rtol=1e-15)
    assert st_.alpha == pytest.approx(4.0, rel=1e-15)
    np.testing.assert_allclose(st_.S, [0.75, 0.25], rtol=1e-15)
    net = NetworkState(W, np.array([[1.0, -1.0]]))
    assert forward(net, np.array([1.0]))[0] == pytest.approx(1.0, rel=1e-15)


def test_zero_weights_give_uniform_softmax(rng):
    st_ = softmax_state(np.zeros((3, 5)), rng.standard_normal(3))
    np.testing.assert_array_equal(st_.S, np.full(5, 0.2))
    assert st_.alpha == 5.0
    net = NetworkState(np.zeros((1, 2)), np.array([[1.0, -1.0]]))
    assert forward(net, np.array([0.5]))[0] == 0.0


def test_loss_examples(rng):
    Y = sample_unit_ball(rng, 3, 4)
    assert loss(Y, Y) == 0.0
    unit = Y / np.linalg.norm(Y, axis=0)
    assert loss(np.zeros_like(unit), unit) == pytest.approx(2.0, rel=1e-14)
    F = rng.standard_normal((3, 4))
    naive = 0.5 * sum((F[l, i] - Y[l, i]) ** 2 for l in range(3) for i in range(4))
    assert loss(F, Y) == pytest.approx(naive, rel=1e-14)


def test_single_sample_prediction_is_bitwise_forward(rng):
    data, net = random_instance(rng, n=1, d=2, m=6)
    assert np.array_equal(predict_all(net, data)[:, 0], forward(net, data.X[:, 0]))


def test_gradient_vanishes_at_a_fitted_point(rng):
    W = 0.1 * rng.standard_normal((2, 6))
    a = np.array([[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]])
    net = NetworkState(W, a)
    X = sample_unit_ball(rng, 2, 3)
    data = Dataset(X, predict_all(net, Dataset(X, np.zeros((1, 3)))))
    assert np.max(np.abs(analytic_gradient(net, data))) <= 1e-14
    assert np.max(np.abs(fd_gradient(net, data))) <= 10 * (1e-5) ** 2


def test_finite_differences_are_second_order(rng):
    data, net = random_instance(rng, n=4, d=2, m=8)
    g = analytic_gradient(net, data)
    err = [np.max(np.abs(fd_gradient(net, data, h) - g)) for h in (2e-2, 1e-2)]
    assert 3.0 <= err[0] / err[1] <= 5.0
