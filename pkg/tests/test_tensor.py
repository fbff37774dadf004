import numpy as np
import pytest

from npid import tensor as T
from npid.tensor import DegenerateInputError, DimensionError, Tensor

from _fd import numeric_grad, rel_err

SEEDS = range(20)


def check_unary(op, x, seed, tol=1e-5):
    """Compare backward of ``sum(op(x) * r)`` with finite differences."""
    r = np.random.default_rng(seed + 1000).standard_normal(op(Tensor(x)).shape)
    leaf = Tensor(x, requires_grad=True)
    out = op(leaf)
    out.backward(r)
    fd = numeric_grad(lambda z: float(np.sum(op(Tensor(z)).data * r)), x)
    assert rel_err(leaf.grad, fd) < tol


def check_binary(op, a, b, seed, tol=1e-5):
    shape = op(Tensor(a), Tensor(b)).shape
    r = np.random.default_rng(seed + 2000).standard_normal(shape)
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    op(ta, tb).backward(r)
    fa = numeric_grad(lambda z: float(np.sum(op(Tensor(z), Tensor(b)).data * r)), a)
    fb = numeric_grad(lambda z: float(np.sum(op(Tensor(a), Tensor(z)).data * r)), b)
    assert rel_err(ta.grad, fa) < tol
    assert rel_err(tb.grad, fb) < tol


# --- examples ---------------------------------------------------------------

def test_matmul_identity():
    eye = np.eye(2)
    np.testing.assert_array_equal(T.matmul(Tensor(eye), Tensor(eye)).data, eye)


def test_matmul_row_sums():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv_all_ones_gives_nine():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k), pad=1).data, x)


def test_conv_kernel_larger_than_padded_input():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), pad=1)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2, 6, 5))
    k = rng.standard_normal((3, 2, 3, 2))
    stride, pad = 2, 1
    out = T.conv2d(Tensor(x), Tensor(k), stride, pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (6 + 2 - 3) // 2 + 1
    wo = (5 + 2 - 2) // 2 + 1
    ref = np.zeros((2, 3, ho, wo))
    for n in range(2):
        for f in range(3):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[n, :, i * stride : i * stride + 3, j * stride : j * stride + 2]
                    ref[n, f, i, j] = np.sum(patch * k[f])
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_relu_sign_cases():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_sum_of_ones():
    assert T.sum(Tensor(np.ones((3, 4)))).data == 12.0


def test_exp_log_inverse():
    x = np.random.default_rng(0).uniform(0.1, 5.0, size=(4, 3))
    np.testing.assert_allclose(T.exp(T.log(Tensor(x))).data, x, rtol=1e-12, atol=0)


def test_log_clamps_at_floor():
    out = T.log(Tensor([0.0, 1.0]))
    assert out.data[0] == np.log(T.LOG_FLOOR)
    assert np.isfinite(out.data).all()
    custom = T.log(Tensor([0.0]), floor=1e-3)
    assert custom.data[0] == pytest.approx(np.log(1e-3))


def test_add_rejects_broadcasting():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))))
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_scalar_add_and_scale():
    x = Tensor(np.ones((2, 2)))
    np.testing.assert_array_equal((x + 2.0).data, 3 * np.ones((2, 2)))
    np.testing.assert_array_equal(T.scale(x, -0.5).data, -0.5 * np.ones((2, 2)))


def test_zero_extent_axis_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.ones((0, 3)))


def test_leaf_gradient_shapes_after_backward():
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    x = Tensor(rng.standard_normal((5, 3)))
    T.sum(T.relu(T.add_bias(T.matmul(x, w), b))).backward()
    assert w.grad.shape == w.shape
    assert b.grad.shape == b.shape
    assert x.grad is None


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = T.mul(x, x)  # x used twice
    T.sum(T.add(y, x)).backward()
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)


def test_deterministic_bitwise():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 7, 7))
    k = rng.standard_normal((4, 3, 3, 3))

    def run():
        tk = Tensor(k, requires_grad=True)
        out = T.conv2d(Tensor(x), tk, 2, 1)
        T.sum(T.mul(out, out)).backward()
        return out.data.tobytes(), tk.grad.tobytes()

    assert run() == run()


def test_l2_normalize_rows_zero_row_errors():
    with pytest.raises(DegenerateInputError, match="re-initialize"):
        T.l2_normalize_rows(Tensor(np.array([[1.0, 0.0], [0.0, 0.0]])))


# --- finite-difference oracles ----------------------------------------------

@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    check_binary(T.matmul, rng.uniform(-1, 1, (4, 5)), rng.uniform(-1, 1, (5, 3)), seed, tol=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d_gradient(seed):
    rng = np.random.default_rng(seed)
    stride, pad = [(1, 0), (1, 1), (2, 1), (2, 0)][seed % 4]
    x = rng.uniform(-1, 1, (2, 3, 8, 8))
    k = rng.uniform(-1, 1, (4, 3, 3, 3))
    check_binary(lambda a, b: T.conv2d(a, b, stride, pad), x, k, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_l2_normalize_rows_gradient(seed):
    x = np.random.default_rng(seed).uniform(-1, 1, (3, 6))
    check_unary(T.l2_normalize_rows, x, seed, tol=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (3, 4))
    b = rng.uniform(-1, 1, (3, 4))
    # keep relu away from its kink for the difference quotient
    a_relu = np.where(np.abs(a) < 1e-3, 0.5, a)
    check_binary(T.add, a, b, seed)
    check_binary(T.mul, a, b, seed)
    check_unary(T.relu, a_relu, seed)
    check_unary(T.exp, a, seed)
    check_unary(lambda t: T.log(t), np.abs(a) + 0.1, seed)
    check_unary(lambda t: T.scale(t, -1.7), a, seed)
    check_unary(T.sum, a, seed)
    check_unary(T.mean, a, seed)
    check_unary(lambda t: T.reshape(t, (2, 6)), a, seed)
    check_unary(T.transpose, a, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_bias_and_channel_scale_gradients(seed):
    rng = np.random.default_rng(seed)
    x4 = rng.uniform(-1, 1, (2, 3, 4, 4))
    check_binary(T.add_bias, x4, rng.uniform(-1, 1, 3), seed)
    check_binary(T.channel_scale, x4, rng.uniform(-1, 1, 3), seed)
    check_binary(T.add_bias, rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, 3), seed)


def test_chain_rule_composite_matches_fused_difference():
    rng = np.random.default_rng(11)
    w = rng.uniform(-1, 1, (4, 3))
    x = rng.uniform(-1, 1, (5, 4))

    def fused(wv):
        return float(np.sum(2.0 * np.exp(x @ wv)))

    leaf = Tensor(w, requires_grad=True)
    T.sum(T.scale(T.exp(T.matmul(Tensor(x), leaf)), 2.0)).backward()
    assert rel_err(leaf.grad, numeric_grad(fused, w)) < 1e-6
