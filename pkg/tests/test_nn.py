import numpy as np
import pytest

from nerfedit import autodiff as ad
from nerfedit.autodiff import Tensor
from nerfedit.errors import DimensionError, NumericError
from nerfedit.nn import Adam, Mlp

from util import finite_difference_check


def test_identity_layer_passes_input_through():
    mlp = Mlp([(Tensor(np.eye(2, dtype=np.float32)), Tensor(np.zeros(2, np.float32)))])
    out = mlp(Tensor([[3.0, 4.0]]))
    np.testing.assert_allclose(out.data, [[3.0, 4.0]])


def test_relu_clips_negative_preactivation():
    # y = relu(x1 + x2 - 5) on input (2, 2): pre-activation -1 -> 0
    mlp = Mlp([
        (Tensor(np.array([[1.0, 1.0]], np.float32)), Tensor(np.array([-5.0], np.float32))),
        (Tensor(np.eye(1, dtype=np.float32)), Tensor(np.zeros(1, np.float32))),
    ])
    out = mlp(Tensor([[2.0, 2.0]]))
    np.testing.assert_allclose(out.data, [[0.0]])


def test_two_layer_forward_matches_scripted_oracle():
    rng = np.random.default_rng(3)
    mlp = Mlp.create([4, 8, 3], "sigmoid", rng)
    x = rng.uniform(-1, 1, (6, 4)).astype(np.float32)

    # independent dense-algebra oracle in float64
    w0, b0 = mlp.layers[0][0].data, mlp.layers[0][1].data
    w1, b1 = mlp.layers[1][0].data, mlp.layers[1][1].data
    h = np.maximum(x.astype(np.float64) @ w0.T + b0, 0.0)
    expect = 1.0 / (1.0 + np.exp(-(h @ w1.T + b1)))

    out = mlp(Tensor(x)).data
    assert np.abs(out - expect).max() < 1e-6


def test_mlp_rejects_bad_width_and_nonfinite():
    mlp = Mlp.create([4, 8, 3], rng=np.random.default_rng(0))
    with pytest.raises(DimensionError):
        mlp(Tensor(np.zeros((2, 5), np.float32)))
    bad = np.zeros((2, 4), np.float32)
    bad[0, 0] = np.nan
    with pytest.raises(NumericError):
        mlp(Tensor(bad))


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    mlp = Mlp.create([3, 6, 2], "tanh", rng)
    x = Tensor(rng.uniform(-1, 1, (5, 3)).astype(np.float32))

    def loss(*params):
        return ad.tmean(mlp(x) ** 2.0)

    finite_difference_check(loss, mlp.parameters())


def test_mlp_checkpoint_roundtrip():
    rng = np.random.default_rng(9)
    mlp = Mlp.create([3, 5, 2], rng=rng, name="m")
    arrs = {k: v.copy() for k, v in mlp.state_arrays().items()}
    clone = Mlp.create([3, 5, 2], rng=np.random.default_rng(1), name="m")
    clone.load_state_arrays(arrs)
    x = Tensor(rng.uniform(-1, 1, (4, 3)).astype(np.float32))
    np.testing.assert_array_equal(mlp(x).data, clone(x).data)


# -- Adam -------------------------------------------------------------------------


def test_adam_first_step_matches_sign_update():
    p = Tensor([1.0], requires_grad=True, name="p")
    opt = Adam([p], lr=0.1)
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    # first bias-corrected step reduces to lr * sign(g) up to eps
    np.testing.assert_allclose(p.data, [0.9], atol=1e-6)
    assert p.grad is None


def test_adam_zero_gradient_leaves_parameter_unchanged():
    p = Tensor([2.5], requires_grad=True, name="p")
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(p.data, [2.5])
    np.testing.assert_array_equal(opt.m[0], [0.0])
    np.testing.assert_array_equal(opt.v[0], [0.0])


def test_adam_nan_gradient_raises_with_name():
    p = Tensor([1.0], requires_grad=True, name="theta")
    opt = Adam([p])
    p.grad = np.array([np.nan], dtype=np.float32)
    with pytest.raises(NumericError, match="theta"):
        opt.step()


def _scripted_adam(theta, grads, lr=0.1, b1=0.9, b2=0.999, eps=1e-8):
    """Reference Adam in float64, independent of the optimizer under test."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_minimizes_quadratic_and_matches_scripted_oracle():
    p = Tensor([0.0], requires_grad=True, name="p")
    opt = Adam([p], lr=0.1)
    ref = 0.0
    ref_grads = []
    for _ in range(100):
        g = 2.0 * (float(p.data[0]) - 3.0)
        p.grad = np.array([g], dtype=np.float32)
        opt.step()
        ref_grads.append(2.0 * (ref - 3.0))
        ref = _scripted_adam(0.0, ref_grads)
    assert abs(float(p.data[0]) - 3.0) < 0.05
    assert abs(float(p.data[0]) - ref) < 1e-4


def test_adam_lr_overrides_apply_by_name():
    slow = Tensor([1.0], requires_grad=True, name="slow")
    fast = Tensor([1.0], requires_grad=True, name="fast")
    opt = Adam([slow, fast], lr=0.01, lr_overrides={"fast": 0.1})
    slow.grad = np.array([1.0], np.float32)
    fast.grad = np.array([1.0], np.float32)
    opt.step()
    np.testing.assert_allclose(slow.data, [0.99], atol=1e-6)
    np.testing.assert_allclose(fast.data, [0.9], atol=1e-6)
