import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sdgod_lab import grad as G
from gradcases import CASES, check_op


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_finite_differences(name):
    assert check_op(name, trials=100) < 1e-4


def test_l2_normalize_345():
    y = G.l2_normalize(G.Tensor([3.0, 4.0]))
    np.testing.assert_allclose(y.data, [0.6, 0.8], atol=1e-15)


def test_cosine_self_is_one():
    x = G.Tensor([[0.3, -1.2, 2.0]])
    assert G.cosine_similarity_matrix(x, x).data[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(G.matmul(G.Tensor(a), G.Tensor(np.eye(2))).data, a)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(G.ShapeError) as err:
        G.matmul(G.Tensor(np.ones((2, 3))), G.Tensor(np.ones((2, 3))))
    assert err.value.op == "matmul"
    assert err.value.shapes == ((2, 3), (2, 3))
    with pytest.raises(G.ShapeError, match="add"):
        G.add(G.Tensor(np.ones(3)), G.Tensor(np.ones(4)))
    with pytest.raises(G.ShapeError, match="concat"):
        G.concat([G.Tensor(np.ones((2, 3))), G.Tensor(np.ones((2, 4)))], axis=0)


def test_backward_sum_is_ones():
    x = G.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    G.backward(G.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_mean_of_square():
    x = G.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    G.backward(G.mean(x * x))
    np.testing.assert_allclose(x.grad, [2 / 3, 4 / 3, 2.0], rtol=1e-15)


def test_no_grad_for_frozen_input():
    x = G.Tensor([1.0, 2.0])
    w = G.Tensor([1.0, 1.0], requires_grad=True)
    G.backward(G.sum(x * w))
    assert x.grad is None
    np.testing.assert_array_equal(w.grad, [1.0, 2.0])


def test_backward_accumulates():
    x = G.Tensor([1.0, -2.0], requires_grad=True)
    loss = G.sum(G.scale(x, 3.0))
    G.backward(loss)
    G.backward(loss)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_rejects_non_scalar():
    x = G.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(G.GradError):
        G.backward(x * 2.0)


def test_tape_is_in_execution_order():
    x = G.Tensor(np.ones((2, 2)), requires_grad=True)
    y = G.relu(x @ x)
    z = G.mean(G.l2_normalize(y))
    tape = G.Tape.collect(z)
    assert tape.ops() == ["matmul", "relu", "l2_normalize", "mean"]
    seqs = [t._node.seq for t in tape.tensors]
    assert seqs == sorted(seqs)


def test_no_grad_records_nothing():
    x = G.Tensor([1.0], requires_grad=True)
    with G.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.op is None


def test_concat_splits_gradient_exactly():
    rng = np.random.default_rng(3)
    a = G.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = G.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = rng.normal(size=(6, 3))
    G.backward(G.sum(G.concat([a, b], 0) * w))
    np.testing.assert_array_equal(a.grad, w[:2])
    np.testing.assert_array_equal(b.grad, w[2:])


def test_l2_normalize_zero_vector():
    x = G.Tensor(np.array([[0.0, 0.0], [1.0, 1.0]]), requires_grad=True)
    y = G.l2_normalize(x)
    assert np.all(y.data[0] == 0) and np.all(np.isfinite(y.data))
    G.backward(G.sum(y))
    np.testing.assert_array_equal(x.grad[0], [0.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (4, 7), elements=st.floats(-1e6, 1e6)))
def test_l2_normalize_unit_norm(x):
    nonzero = np.linalg.norm(x, axis=1) > 1e-150
    y = G.l2_normalize(G.Tensor(x)).data
    norms = np.linalg.norm(y, axis=1)
    assert np.all(np.abs(norms[nonzero] - 1) < 1e-12)


def test_sgd_plain_step():
    p = G.Tensor([0.0], requires_grad=True)
    p.grad = np.array([1.0])
    G.sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.0)
    np.testing.assert_allclose(p.data, [-0.1])
    np.testing.assert_array_equal(p.grad, [0.0])


def test_sgd_momentum_two_steps():
    p = G.Tensor([0.0], requires_grad=True)
    state = {}
    for _ in range(2):
        p.grad = np.array([1.0])
        G.sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.0, state=state)
    np.testing.assert_allclose(p.data, [-0.29], rtol=1e-14)


def test_sgd_pure_decay():
    p = G.Tensor([1.0], requires_grad=True)
    p.grad = np.array([0.0])
    G.sgd_step([p], lr=1.0, momentum=0.0, weight_decay=0.1)
    np.testing.assert_allclose(p.data, [0.9])


def test_sgd_missing_grad():
    with pytest.raises(G.GradError):
        G.sgd_step([G.Tensor([1.0], requires_grad=True)], lr=0.1)
