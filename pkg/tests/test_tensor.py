import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resvit import functional as F
from resvit.errors import ConfigError, ContractError, DimensionError, NumericError
from resvit.gradcheck import PRIMITIVE_TOL, _primitive_cases, grad_check, primitive_suite
from resvit.tensor import (Parameter, Tensor, concat, default_dtype, get_default_dtype,
                           is_grad_enabled, no_grad, unbroadcast)


class TestTensorBasics:
    def test_default_dtype_is_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32
        assert get_default_dtype() == np.float32

    def test_float64_context_restores(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_shape_matches_data(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.shape == (2, 3, 4) and t.size == 24 and t.ndim == 3

    def test_detached_tensor_gets_no_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        d = x.detach()
        y = (d * x).sum()
        y.backward()
        assert d.grad is None
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            assert not is_grad_enabled()
            y = x * 2.0
        assert is_grad_enabled()
        assert not y.requires_grad

    def test_grad_shape_matches_data(self, rng):
        x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
        (x * x).sum().backward()
        assert x.grad.shape == x.shape

    def test_nonscalar_backward_needs_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(RuntimeError):
            (x * 2.0).backward()

    def test_parameter_carries_group(self):
        p = Parameter(np.zeros(2), group="g")
        assert p.requires_grad and p.group == "g"


class TestAccumulation:
    def test_fan_out_sums_gradients(self, rng):
        data = rng.standard_normal(4)
        a = Tensor(data.copy(), requires_grad=True)
        b = Tensor(data.copy(), requires_grad=True)

        def g(t):
            return (t * t * t).sum()

        (g(a) + g(a)).backward()
        (2.0 * g(b)).backward()
        np.testing.assert_allclose(a.grad, b.grad, rtol=1e-6)

    def test_diamond_graph_visits_each_node_once(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * 3.0
        z = y * y + y  # dz/dx = (2y + 1) * 3
        z.sum().backward()
        assert x.grad[0] == pytest.approx((2 * 6.0 + 1) * 3)

    def test_repeated_backward_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * 1.0).sum().backward()
        (x * 1.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])


class TestUnbroadcast:
    @given(st.lists(st.integers(1, 3), min_size=1, max_size=3), st.integers(0, 2))
    @settings(max_examples=40, deadline=None)
    def test_sums_broadcast_axes(self, shape, extra):
        shape = tuple(shape)
        full = (2,) * extra + shape
        target = tuple(1 if i % 2 else s for i, s in enumerate(shape))
        g = np.ones(full)
        out = unbroadcast(g, target)
        assert out.shape == target
        assert out.sum() == pytest.approx(g.sum())


class TestMatmul:
    def test_hand_product(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_identity(self, rng):
        a = rng.standard_normal((3, 4)).astype(np.float32)
        np.testing.assert_array_equal((Tensor(a) @ Tensor(np.eye(4, dtype=np.float32))).data, a)

    def test_batched_shape(self):
        out = F.matmul(Tensor(np.zeros((2, 256, 8))), Tensor(np.zeros((8, 8))))
        assert out.shape == (2, 256, 8)

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            F.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def _direct_conv(x, w, b, stride, pad):
    """Loop-by-loop cross-correlation."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,fckl->nf", patch, w)
    return out + (0 if b is None else b.reshape(1, -1, 1, 1))


class TestConv2d:
    def test_unit_kernel_is_identity(self, rng):
        x = rng.standard_normal((2, 1, 5, 5)).astype(np.float32)
        out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0

    def test_default_scale_shape(self):
        out = F.conv2d(Tensor(np.zeros((1, 1, 256, 256))), Tensor(np.zeros((64, 1, 7, 7))),
                       padding=3)
        assert out.shape == (1, 64, 256, 256)

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 1, 4), (1, 3, 7)])
    def test_matches_direct_loop(self, rng, stride, pad, k):
        x = rng.standard_normal((2, 3, 9, 9))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        with default_dtype(np.float64):
            out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        np.testing.assert_allclose(out.data, _direct_conv(x, w, b, stride, pad), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestConvTranspose2d:
    def test_output_size(self):
        out = F.conv_transpose2d(Tensor(np.zeros((1, 2, 16, 16))), Tensor(np.zeros((2, 3, 3, 3))),
                                 stride=2, padding=1, output_padding=1)
        assert out.shape == (1, 3, 32, 32)

    def test_unit_kernel_is_identity(self, rng):
        x = rng.standard_normal((1, 1, 4, 4)).astype(np.float32)
        out = F.conv_transpose2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)))
        np.testing.assert_array_equal(out.data, x)

    def test_negative_output_size(self):
        with pytest.raises(DimensionError):
            F.conv_transpose2d(Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.zeros((1, 1, 1, 1))),
                               padding=2)

    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 1, 4)])
    def test_adjoint_of_conv(self, rng, stride, pad, k):
        x = rng.standard_normal((2, 3, 4 * stride, 4 * stride)).astype(np.float32)
        w = rng.standard_normal((5, 3, k, k)).astype(np.float32)
        y_shape = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).shape
        y = rng.standard_normal(y_shape).astype(np.float32)
        lhs = np.vdot(F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data, y)
        back = F.conv_transpose2d(Tensor(y), Tensor(w), stride=stride, padding=pad,
                                  output_padding=x.shape[-1] - ((y_shape[-1] - 1) * stride - 2 * pad + k))
        rhs = np.vdot(x, back.data)
        assert lhs == pytest.approx(rhs, rel=1e-5)


@given(st.integers(1, 3), st.integers(1, 4), st.integers(2, 5))
@settings(max_examples=25, deadline=None)
def test_matmul_adjoint(m, k, n):
    rng = np.random.default_rng(m * 100 + k * 10 + n)
    a = rng.standard_normal((m, k)).astype(np.float32)
    x = rng.standard_normal((k, n)).astype(np.float32)
    y = rng.standard_normal((m, n)).astype(np.float32)
    lhs = np.vdot((Tensor(a) @ Tensor(x)).data, y)
    rhs = np.vdot(x, (Tensor(a.T.copy()) @ Tensor(y)).data)
    assert lhs == pytest.approx(rhs, rel=1e-5, abs=1e-5)


class TestSoftmax:
    def test_constant_row_uniform(self):
        np.testing.assert_allclose(F.softmax(Tensor(np.full((1, 4), 3.0))).data, 0.25)

    def test_log_two(self):
        with default_dtype(np.float64):
            out = F.softmax(Tensor([[0.0, np.log(2.0)]])).data
        np.testing.assert_allclose(out, [[1 / 3, 2 / 3]], atol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one(self, row):
        out = F.softmax(Tensor(np.array([row]))).data
        assert out.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(out >= 0)

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            F.softmax(Tensor([[0.0, np.nan]]))


class TestNormalize:
    def test_constant_input_gives_zero(self):
        out = F.normalize(Tensor(np.full((2, 5), 7.0)), "layer")
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_hand_layer_norm(self):
        with default_dtype(np.float64):
            out = F.normalize(Tensor([[1.0, 2.0, 3.0]]), "layer", eps=1e-12).data
        r = np.sqrt(1.5)
        np.testing.assert_allclose(out, [[-r, 0.0, r]], atol=1e-9)

    @pytest.mark.parametrize("kind,shape,axes", [("layer", (3, 4, 32), (-1,)),
                                                 ("instance", (2, 3, 8, 8), (2, 3))])
    def test_standardises(self, rng, kind, shape, axes):
        x = Tensor(rng.standard_normal(shape) * 3 + 1)
        out = F.normalize(x, kind).data
        np.testing.assert_allclose(out.mean(axis=axes), 0.0, atol=1e-4)
        np.testing.assert_allclose(out.var(axis=axes), 1.0, atol=1e-3)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            F.normalize(Tensor(np.zeros((2, 2))), "batch")


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(F.activation("relu", Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_tanh_zero(self):
        assert F.activation("tanh", Tensor([0.0])).data[0] == 0.0

    def test_gelu(self):
        with default_dtype(np.float64):
            out = F.activation("gelu", Tensor([0.0, 10.0])).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(10.0, abs=1e-12)

    def test_unknown(self):
        with pytest.raises(ConfigError):
            F.activation("swish", Tensor([0.0]))


class TestResampling:
    def test_bilinear_rows_are_convex(self):
        m = F.bilinear_matrix(4, 16)
        np.testing.assert_allclose(m.sum(axis=1), 1.0)
        assert (m >= 0).all()

    def test_upsample_constant(self):
        out = F.upsample_bilinear(Tensor(np.full((1, 1, 2, 2), 3.0)), (8, 8))
        np.testing.assert_allclose(out.data, 3.0, rtol=1e-6)

    def test_max_pool(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(F.max_pool2d(Tensor(x), 2).data[0, 0], [[5, 7], [13, 15]])


class TestConcat:
    def test_values_and_grad_split(self):
        a = Tensor(np.ones((1, 2)), requires_grad=True)
        b = Tensor(np.zeros((1, 1)), requires_grad=True)
        c = concat([a, b], axis=1)
        (c * Tensor([[1.0, 2.0, 3.0]])).sum().backward()
        np.testing.assert_array_equal(a.grad, [[1.0, 2.0]])
        np.testing.assert_array_equal(b.grad, [[3.0]])


class TestGradCheck:
    def test_quadratic(self, f64, rng):
        x = Tensor(rng.standard_normal(6))
        assert grad_check(lambda t: (t * t).sum(), x) < 1e-8

    def test_l1_away_from_kink(self, f64, rng):
        x = Tensor(rng.uniform(0.5, 1.0, 5) * rng.choice([-1, 1], 5))
        y = Tensor(np.zeros(5))
        assert grad_check(lambda t: F.l1(t, y), x) < 1e-6

    def test_nonscalar_rejected(self, f64):
        with pytest.raises(ContractError):
            grad_check(lambda t: t * 2.0, Tensor(np.ones(3)))

    def test_detects_wrong_gradient(self, f64):
        from resvit.tensor import make_node

        def bad(t):
            return make_node(t.data ** 2, (t,), lambda g: (g * 3.0,), "bad").sum()

        assert grad_check(bad, Tensor(np.array([1.0, 2.0]))) > 0.1


NAMES = [name for name, _, _ in _primitive_cases(np.random.default_rng(0))]


@pytest.fixture(scope="module")
def primitive_errors():
    return dict(primitive_suite(seed=5))


@pytest.mark.parametrize("name", NAMES)
def test_primitive_gradients(primitive_errors, name):
    assert primitive_errors[name] < PRIMITIVE_TOL


def test_determinism(rng):
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = F.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = F.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


def test_deepcopy_gets_fresh_node_id():
    import copy

    p = Parameter(np.ones(3))
    q = copy.deepcopy(p)
    assert q.node_id != p.node_id
    ((p * 2.0).sum() + (q * 3.0).sum()).backward()
    np.testing.assert_array_equal(p.grad, 2.0)
    np.testing.assert_array_equal(q.grad, 3.0)
