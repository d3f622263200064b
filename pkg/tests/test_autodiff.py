import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nerfedit import autodiff as ad
from nerfedit.autodiff import Tensor
from nerfedit.errors import ContractError, DimensionError, NumericError

from util import finite_difference_check


def rand(rng, *shape):
    return Tensor(rng.uniform(-1, 1, shape).astype(np.float32), requires_grad=True)


def test_sum_gradient_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.tsum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_quadratic_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.tsum(x * x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], rtol=1e-6)


def test_backward_accumulates_without_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.tsum(x))
    ad.backward(ad.tsum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_backward_rejects_non_finite_loss():
    x = Tensor([np.inf], requires_grad=True)
    with pytest.raises(NumericError):
        ad.backward(ad.tsum(x * 1.0))


def test_matmul_shape_errors():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        ad.matmul(a, b)


def test_no_grad_suppresses_taping():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y._parents == ()


def test_no_grad_is_thread_local():
    import threading

    results = {}

    def worker():
        with ad.no_grad():
            results["inner"] = ad.grad_enabled()

    with ad.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert results["inner"] is False
    assert ad.grad_enabled() is True


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        x = rand(rng, 4, 3)
        y = ad.softmax(ad.matmul(x, rand(rng, 3, 5)))
        loss = ad.tmean(y * y)
        ad.backward(loss)
        return loss.data.copy(), x.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


# -- finite-difference checks for every differentiable op ---------------------------

OP_CASES = {
    "add": lambda r: (lambda a, b: ad.tsum(ad.add(a, b) ** 2.0), [rand(r, 3, 4), rand(r, 3, 4)]),
    "add_broadcast": lambda r: (lambda a, b: ad.tsum(ad.add(a, b) ** 2.0), [rand(r, 3, 4), rand(r, 4)]),
    "sub": lambda r: (lambda a, b: ad.tsum(ad.sub(a, b) ** 2.0), [rand(r, 5), rand(r, 5)]),
    "mul": lambda r: (lambda a, b: ad.tsum(ad.mul(a, b)), [rand(r, 3, 2), rand(r, 3, 2)]),
    "div": lambda r: (lambda a, b: ad.tsum(ad.div(a, b + 3.0)), [rand(r, 4), rand(r, 4)]),
    "neg": lambda r: (lambda a: ad.tsum(ad.neg(a) * 2.0), [rand(r, 4)]),
    "power": lambda r: (lambda a: ad.tsum((a + 2.0) ** 3.0), [rand(r, 4)]),
    "exp": lambda r: (lambda a: ad.tsum(ad.exp(a)), [rand(r, 6)]),
    "log": lambda r: (lambda a: ad.tsum(ad.log(a + 2.0)), [rand(r, 6)]),
    "sqrt": lambda r: (lambda a: ad.tsum(ad.sqrt(a + 2.0)), [rand(r, 6)]),
    "abs": lambda r: (lambda a: ad.tsum(ad.absolute(a + 0.2)), [rand(r, 5)]),
    "clip": lambda r: (lambda a: ad.tsum(ad.clip(a * 2.0, -0.5, 0.5) ** 2.0), [rand(r, 8)]),
    "maximum": lambda r: (lambda a, b: ad.tsum(ad.maximum(a, b)), [rand(r, 6), rand(r, 6)]),
    "minimum": lambda r: (lambda a, b: ad.tsum(ad.minimum(a, b)), [rand(r, 6), rand(r, 6)]),
    "relu": lambda r: (lambda a: ad.tsum(ad.relu(a)), [rand(r, 10)]),
    "sigmoid": lambda r: (lambda a: ad.tsum(ad.sigmoid(a) ** 2.0), [rand(r, 6)]),
    "tanh": lambda r: (lambda a: ad.tsum(ad.tanh(a) ** 2.0), [rand(r, 6)]),
    "softmax": lambda r: (lambda a: ad.tsum(ad.softmax(a, axis=1) ** 2.0), [rand(r, 3, 4)]),
    "tsum_axis": lambda r: (lambda a: ad.tsum(ad.tsum(a, axis=1) ** 2.0), [rand(r, 3, 4)]),
    "tmean": lambda r: (lambda a: ad.tmean(a * a), [rand(r, 3, 4)]),
    "tmax": lambda r: (lambda a: ad.tsum(ad.tmax(a, axis=1)), [rand(r, 3, 4)]),
    "cumsum": lambda r: (lambda a: ad.tsum(ad.cumsum(a, axis=1) ** 2.0), [rand(r, 3, 4)]),
    "reshape": lambda r: (lambda a: ad.tsum(ad.reshape(a, (6,)) ** 2.0), [rand(r, 2, 3)]),
    "transpose": lambda r: (lambda a: ad.tsum(ad.transpose(a) ** 2.0), [rand(r, 2, 3)]),
    "concat": lambda r: (lambda a, b: ad.tsum(ad.concat([a, b], axis=1) ** 2.0),
                         [rand(r, 2, 3), rand(r, 2, 2)]),
    "getitem": lambda r: (lambda a: ad.tsum(a[1:, ::2] ** 2.0), [rand(r, 3, 4)]),
    "getitem_fancy": lambda r: (lambda a: ad.tsum(a[np.array([0, 2, 2])] ** 2.0), [rand(r, 3, 4)]),
    "matmul": lambda r: (lambda a, b: ad.tsum(ad.matmul(a, b) ** 2.0), [rand(r, 3, 4), rand(r, 4, 2)]),
    "matmul64": lambda r: (lambda a, b: ad.tsum(ad.matmul64(a, b) ** 2.0), [rand(r, 3, 4), rand(r, 4, 2)]),
    "take_rows": lambda r: (lambda t: ad.tsum(ad.take_rows(t, np.array([[0, 1], [3, 1]])) ** 2.0),
                            [rand(r, 4, 2)]),
    "take_flat": lambda r: (lambda t: ad.tsum(ad.take_flat(t, np.array([0, 5, 5, 2])) ** 2.0),
                            [rand(r, 2, 3)]),
    "weighted_row_sum": lambda r: (
        lambda t: ad.tsum(ad.weighted_row_sum(
            t, np.array([[0, 1, 1], [2, 3, 0]]),
            np.array([[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]], dtype=np.float32)) ** 2.0),
        [rand(r, 4, 2)]),
    "scatter": lambda r: (
        lambda v: ad.tsum(ad.scatter(v, (np.array([0, 2]), np.array([1, 0])), (3, 2)) ** 2.0),
        [rand(r, 2)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(11)
    fn, tensors = OP_CASES[name](rng)
    finite_difference_check(fn, tensors)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_softmax_stays_on_simplex(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-30, 30, (4, 6)).astype(np.float32))
    y = ad.softmax(x, axis=1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_unbroadcast_matches_numpy_semantics(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.uniform(-1, 1, (3, 1, 4)).astype(np.float32), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (5, 4)).astype(np.float32), requires_grad=True)
    out = a * b
    assert out.shape == (3, 5, 4)
    ad.backward(ad.tsum(out))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
