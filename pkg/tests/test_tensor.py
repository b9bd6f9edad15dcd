import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lipforge import tensor as T
from lipforge.tensor import ContractError, DimensionError, GradientTape, Tensor
from oracles import finite_diff_grad, naive_matmul

RTOL = 1e-5


def grad_of(fn, *arrays_):
    """Tape gradient of scalar fn(*tensors) with respect to every argument."""
    ts = [Tensor(a) for a in arrays_]
    with GradientTape() as tape:
        tape.watch(*ts)
        loss = fn(*ts)
    return [g.data for g in tape.gradient(loss, ts)]


def check_fd(fn, *arrays_, h=1e-6):
    grads = grad_of(fn, *arrays_)
    for k, a in enumerate(arrays_):
        def f(v, k=k):
            args = [Tensor(v) if j == k else Tensor(arrays_[j]) for j in range(len(arrays_))]
            return fn(*args).item()

        fd = finite_diff_grad(f, a, h)
        scale = max(np.abs(fd).max(), 1e-8)
        assert np.abs(grads[k] - fd).max() / scale < RTOL, f"argument {k}"


def avoid_kinks(a, gap=1e-3):
    a = np.asarray(a, dtype=float).copy()
    a[np.abs(a) < gap] = gap * 5
    return a


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestTensorBasics:
    def test_data_is_read_only_copy(self):
        src = np.array([1.0, 2.0])
        t = Tensor(src)
        src[0] = 9.0
        assert t.data[0] == 1.0
        with pytest.raises(ValueError):
            t.data[0] = 3.0

    def test_item_requires_single_element(self):
        assert Tensor(2.5).item() == 2.5
        with pytest.raises(ValueError):
            Tensor([1.0, 2.0]).item()

    def test_l2_norm(self):
        assert T.l2_norm(Tensor([[3.0, 4.0]])) == 5.0
        assert T.l2_norm(np.zeros(3)) == 0.0


class TestMatmul:
    def test_matches_triple_loop(self, rng):
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-13)

    def test_inner_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient(self, rng):
        check_fd(lambda a, b: T.tsum(T.mul(T.matmul(a, b), T.matmul(a, b))),
                 rng.standard_normal((3, 4)), rng.standard_normal((4, 2)))


class TestElementwiseGradients:
    def test_add_mul_scale_transpose(self, rng):
        a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        check_fd(lambda x, y: T.tsum(T.mul(T.add(x, T.scale(y, 1.5)), T.transpose(x))), a, b)

    def test_add_bias_rows(self, rng):
        check_fd(lambda x, bias: T.tsum(T.mul(T.add_bias(x, bias), x)),
                 rng.standard_normal((4, 3)), rng.standard_normal(3))

    def test_add_bias_channel_axis(self, rng):
        check_fd(lambda x, bias: T.tsum(T.mul(T.add_bias(x, bias, axis=1), x)),
                 rng.standard_normal((2, 3, 2, 2)), rng.standard_normal(3))

    @pytest.mark.parametrize("op", [T.relu, T.silu, T.gelu])
    def test_activations(self, rng, op):
        x = avoid_kinks(rng.standard_normal((3, 4)))
        check_fd(lambda t: T.tsum(T.mul(op(t), op(t))), x)

    def test_relu_values(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_gelu_exact_form(self):
        # x * Phi(x) at x=1: Phi(1) = 0.8413447460685429
        assert T.gelu(Tensor([1.0])).data[0] == pytest.approx(0.8413447460685429, rel=1e-14)

    def test_threshold_gradient_is_keep_mask(self, rng):
        x = rng.uniform(-1, 1, size=(5, 4))
        x[np.abs(np.abs(x) - 0.3) < 1e-3] = 0.9
        check_fd(lambda t: T.tsum(T.mul(T.threshold(t, 0.3), t)), x)

    def test_threshold_zero_returns_same_object(self):
        t = Tensor([0.0, -1e-300, 2.0])
        assert T.threshold(t, 0.0) is t

    def test_threshold_negative_rejected(self):
        with pytest.raises(ContractError):
            T.threshold(Tensor([1.0]), -0.1)

    def test_reshape(self, rng):
        check_fd(lambda t: T.tsum(T.mul(T.reshape(t, (6,)), T.reshape(t, (6,)))), rng.standard_normal((2, 3)))
        with pytest.raises(DimensionError):
            T.reshape(Tensor(np.ones(6)), (4,))


def naive_conv(x, k, b, stride, pad):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for s in range(n):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[s, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[s, o, i, j] = float((patch * k[o]).sum()) + b[o]
    return out


class TestConv:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_forward_matches_loops(self, rng, stride, pad):
        x = rng.standard_normal((2, 3, 5, 6))
        k = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        got = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).data
        np.testing.assert_allclose(got, naive_conv(x, k, b, stride, pad), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
    def test_gradients(self, rng, stride, pad):
        x = rng.standard_normal((2, 2, 4, 4))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        check_fd(lambda a, kk, bb: T.tsum(T.mul(T.conv2d(a, kk, bb, stride, pad),
                                                T.conv2d(a, kk, bb, stride, pad))), x, k, b)

    def test_im2col_rows_are_patches(self, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        cols = T.im2col(x, 2, 2, 1, 0)
        assert cols.shape == (4, 8)
        np.testing.assert_array_equal(cols[3], x[0, :, 1:3, 1:3].reshape(-1))

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            T.im2col(np.zeros((1, 1, 2, 2)), 3, 3)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))


class TestLosses:
    def test_cross_entropy_uniform_logits(self):
        loss = T.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [0, 3])
        assert loss.item() == pytest.approx(np.log(4.0), rel=1e-15)

    @pytest.mark.parametrize("reduction", ["mean", "sum"])
    def test_cross_entropy_gradient(self, rng, reduction):
        y = np.array([0, 2, 1])
        check_fd(lambda z: T.softmax_cross_entropy(z, y, reduction), rng.standard_normal((3, 4)))

    def test_cross_entropy_none_is_per_sample(self, rng):
        z = rng.standard_normal((3, 4))
        y = np.array([1, 1, 0])
        per = T.softmax_cross_entropy(Tensor(z), y, "none").data
        assert per.shape == (3,)
        assert per.mean() == pytest.approx(T.softmax_cross_entropy(Tensor(z), y).item(), rel=1e-14)

    def test_cross_entropy_large_logits_stable(self):
        loss = T.softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [1])
        assert loss.item() == pytest.approx(1000.0)

    def test_unknown_reduction(self):
        with pytest.raises(ContractError):
            T.softmax_cross_entropy(Tensor(np.zeros((1, 2))), [0], "median")

    def test_margin_values_and_gradient(self, rng):
        z = np.array([[3.0, 1.0, 2.0], [0.0, 4.0, 1.0]])
        np.testing.assert_array_equal(T.margin(Tensor(z), [0, 0]).data, [1.0, 0.0])
        np.testing.assert_array_equal(T.margin(Tensor(z), [0, 0], kappa=2.0).data, [1.0, -2.0])
        np.testing.assert_array_equal(T.margin(Tensor(z), [0, 0], kappa=10.0).data, [1.0, -4.0])
        zz = rng.standard_normal((4, 3))
        check_fd(lambda t: T.tsum(T.margin(t, [0, 1, 2, 0], kappa=10.0)), zz)


class TestTape:
    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0])
        with GradientTape() as tape:
            tape.watch(x)
            y = T.scale(x, 2.0)
        with pytest.raises(ContractError):
            tape.gradient(y, [x])

    def test_single_use(self):
        x = Tensor([1.0])
        with GradientTape() as tape:
            tape.watch(x)
            y = T.tsum(x)
        tape.gradient(y, [x])
        with pytest.raises(ContractError):
            tape.gradient(y, [x])

    def test_unused_source_gets_zero(self):
        x, z = Tensor([1.0, 2.0]), Tensor([5.0])
        with GradientTape() as tape:
            tape.watch(x, z)
            y = T.tsum(x)
        gx, gz = tape.gradient(y, [x, z])
        np.testing.assert_array_equal(gz.data, [0.0])
        np.testing.assert_array_equal(gx.data, [1.0, 1.0])

    def test_fan_out_accumulates(self):
        x = Tensor([3.0])
        with GradientTape() as tape:
            tape.watch(x)
            y = T.tsum(T.add(T.mul(x, x), x))
        (g,) = tape.gradient(y, [x])
        assert g.data[0] == 7.0

    def test_ops_outside_tape_not_recorded(self):
        x = Tensor([1.0])
        T.scale(x, 2.0)
        with GradientTape() as tape:
            pass
        assert tape._records == []

    def test_backward_counter(self):
        T.counters.reset()
        x = Tensor([1.0])
        with GradientTape() as tape:
            tape.watch(x)
            y = T.tsum(x)
        tape.gradient(y, [x])
        assert T.counters.backward_passes == 1


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), st.floats(0, 3))
def test_threshold_idempotent_and_range_contained(x, c):
    once = T.threshold(Tensor(x), c).data
    twice = T.threshold(Tensor(once), c).data
    np.testing.assert_array_equal(once, twice)
    nz = once != 0
    np.testing.assert_array_equal(once[nz], x[nz])
