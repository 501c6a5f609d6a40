import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dfpl import autodiff as ad
from dfpl.autodiff import DomainError, ShapeError, Tensor, backward, grad_check, grad_check_report


def leaf(values):
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


# frozen oracle values

def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_mean():
    assert ad.mean(Tensor([1.0, 2.0, 3.0, 6.0])).item() == 3.0


def test_sigmoid_gradient_at_zero():
    w = leaf(0.0)
    backward(ad.sigmoid(w))
    assert w.grad == pytest.approx(0.25, abs=1e-15)


def test_quadratic_gradient():
    w = leaf([1.0, -2.0])
    backward(ad.sum(ad.mul(w, w)))
    assert np.array_equal(w.grad, [2.0, -4.0])


def test_grad_check_of_sum_is_exact():
    x = Tensor(np.random.default_rng(1).normal(size=7))
    assert grad_check(lambda v: ad.sum(v), x) <= 1e-9


def test_grad_check_sigmoid_tanh_product():
    x = Tensor([0.3, -0.7])

    def f(v):
        return ad.sum(ad.mul(ad.sigmoid(ad.slice_last(v, 0, 1)), ad.tanh(ad.slice_last(v, 1, 2))))

    assert grad_check(f, x) <= 1e-4


def test_relu_kink_is_skipped():
    x = Tensor([0.0, 1.5])
    rep = grad_check_report(lambda v: ad.sum(ad.relu(v)), x)
    assert rep.skipped == [0]
    assert rep.n_checked == 1
    assert rep.max_error <= 1e-9


def test_relu_gradient_zero_at_kink():
    w = leaf([0.0, -1.0, 2.0])
    backward(ad.sum(ad.relu(w)))
    assert np.array_equal(w.grad, [0.0, 0.0, 1.0])


# errors

def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_no_silent_broadcast_of_column():
    with pytest.raises(ShapeError):
        ad.mul(Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 1))))


def test_log_domain_error():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        ad.log(Tensor([-2.0]))


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        backward(ad.mul(leaf([1.0, 2.0]), leaf([3.0, 4.0])))


def test_grad_check_reports_nonfinite_coordinate():
    x = Tensor([1.0, 1e-6])

    def f(v):
        return ad.sum(ad.log(v))

    with pytest.raises((FloatingPointError, DomainError)):
        grad_check(f, x, step=1e-3)


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda v: ad.sum(v), Tensor([1.0]), step=0.0)


# broadcast, accumulation and graph lifetime

def test_bias_broadcast_gradient_sums_batch():
    b = leaf([1.0, 2.0])
    x = Tensor(np.ones((3, 2)))
    backward(ad.sum(ad.add(x, b)))
    assert np.array_equal(b.grad, [3.0, 3.0])


def test_leaf_grads_accumulate_and_graph_is_freed():
    w = leaf([1.0])
    y = ad.scale(w, 3.0)
    loss = ad.sum(y)
    backward(loss)
    assert y._backward is None and y._parents == ()
    backward(ad.sum(ad.scale(w, 2.0)))
    assert w.grad[0] == 5.0


def test_clamp_and_maximum():
    x = leaf([-1.0, 0.5, 2.0])
    backward(ad.sum(ad.clamp(x, 0.0, 1.0)))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])
    y = leaf([-1.0, 0.5])
    out = ad.maximum(y, 0.0)
    assert np.array_equal(out.data, [0.0, 0.5])


def test_concat_and_slice_roundtrip_gradient():
    a, b = leaf(np.ones((2, 2))), leaf(np.ones((2, 3)))
    c = ad.concat([a, b])
    assert c.shape == (2, 5)
    backward(ad.sum(ad.mul(ad.slice_last(c, 1, 4), Tensor(np.full((2, 3), 2.0)))))
    assert np.array_equal(a.grad, [[0, 2], [0, 2]])
    assert np.array_equal(b.grad, [[2, 2, 0], [2, 2, 0]])


def test_sigmoid_extreme_inputs_are_finite():
    x = leaf([-800.0, 800.0])
    out = ad.sigmoid(x)
    backward(ad.sum(out))
    assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(x.grad))


def test_tape_determinism():
    def run():
        rng = np.random.default_rng(5)
        w = leaf(rng.normal(size=(4, 3)))
        x = Tensor(rng.normal(size=(6, 4)))
        backward(ad.mean(ad.tanh(ad.matmul(x, w))))
        return w.grad

    assert np.array_equal(run(), run())


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_two_layer_net_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(3, 4)))
    w1 = Tensor(rng.normal(size=(4, 5)))
    w2 = Tensor(rng.normal(size=(5, 1)))

    def f(w):
        return ad.mean(ad.sigmoid(ad.matmul(ad.tanh(ad.matmul(x, w)), w2)))

    assert grad_check(f, w1) <= 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-5, 5)))
def test_sum_of_squares_gradient_property(values):
    w = leaf(values)
    backward(ad.sum(ad.mul(w, w)))
    assert np.allclose(w.grad, 2 * values)
