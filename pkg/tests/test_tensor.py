import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petdenoise.autodiff import (
    Adam,
    AdamState,
    Tensor,
    adam_step,
    backward,
    conv_forward,
    deconv_forward,
    dense_forward,
    grad,
    input_gradient_node,
    leaky_relu,
    no_grad,
    relu,
    sample_norm,
)
from petdenoise.autodiff import engine as T

from oracles import adam_scalar, conv_loop, deconv_loop, numeric_grad


def check_grad(fn, x, rtol=1e-4, atol=1e-7):
    """Compare reverse-mode and central-difference gradients of a scalar
    function of one float64 array."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    (g,) = grad(fn(xt), [xt])
    num = numeric_grad(lambda a: fn(Tensor(a)).item(), x)
    np.testing.assert_allclose(g.data, num, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestTensorBasics:
    def test_float64_kept(self):
        assert Tensor(np.zeros(3)).dtype == np.float64

    def test_ints_become_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad
        assert y.is_leaf

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(x * 2.0, [x])

    def test_unreachable_input(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="not reachable"):
            grad((x * 2.0).sum(), [y])
        (g,) = grad((x * 2.0).sum(), [y], allow_unused=True)
        assert g is None

    def test_backward_zero_for_unused_param(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(2), requires_grad=True)
        gm = backward((x * 3.0).sum(), [x, y])
        np.testing.assert_array_equal(gm[x], 3.0)
        np.testing.assert_array_equal(gm[y], 0.0)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        gm = backward((y + y).sum(), [x])
        assert gm[x][0] == pytest.approx(8.0)

    def test_graph_freed_after_backward(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = (x * x).sum()
        backward(y, [x])
        assert y._node is None


UNARY = {
    "exp": lambda x: T.exp(x).sum(),
    "log": lambda x: T.log(x * x + 1.0).sum(),
    "sqrt": lambda x: T.sqrt(x * x + 0.5).sum(),
    "power3": lambda x: T.power(x, 3.0).sum(),
    "power2": lambda x: (T.power(x, 2.0) * x).sum(),
    "neg_div": lambda x: T.div(T.neg(x), x * x + 2.0).sum(),
    "mean_axis": lambda x: (T.tmean(x, axis=0) ** 2).sum(),
    "transpose": lambda x: (T.transpose(x) * Tensor(np.arange(x.size).reshape(x.shape[::-1]))).sum(),
    "reshape": lambda x: (T.reshape(x, (-1,)) * T.reshape(x, (-1,))).sum(),
    "getitem": lambda x: (x[1:, ::2] * 3.0).sum() + (x[0] ** 2).sum(),
    "broadcast": lambda x: (T.broadcast_to(x[:1], x.shape) * x).sum(),
    "sum_to": lambda x: (T.sum_to(x, (1, x.shape[1])) ** 2).sum(),
    "stack": lambda x: (T.stack([x, x * 2.0], axis=1) ** 2).sum(),
    "concat": lambda x: (T.concatenate([x, x * x], axis=0) * 1.5).sum(),
    "matmul": lambda x: (T.matmul(x, T.transpose(x)) ** 2).sum(),
    "sample_norm": lambda x: sample_norm(x).sum(),
    "relu": lambda x: (relu(x) * x).sum(),
    "leaky": lambda x: (leaky_relu(x, 0.2) ** 2).sum(),
}


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_matches_finite_differences(self, name, rng):
        x = rng.normal(size=(3, 4))
        # keep away from the relu kink
        x[np.abs(x) < 1e-2] = 0.1
        check_grad(UNARY[name], x)

    @pytest.mark.parametrize("shape_a, shape_b", [((3, 4), (4,)), ((3, 1), (1, 4)), ((2, 3), ())])
    def test_broadcast_binary(self, shape_a, shape_b, rng):
        b = rng.normal(size=shape_b) + 3.0
        for op in (T.add, T.sub, T.mul, T.div):
            check_grad(lambda x: (op(x, Tensor(b)) ** 2).sum(), rng.normal(size=shape_a))
        a = rng.normal(size=shape_a)
        for op in (T.add, T.sub, T.mul):
            check_grad(lambda y: (op(Tensor(a), y) ** 2).sum(), b)

    def test_relu_kink_has_zero_gradient(self):
        x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
        gm = backward(relu(x).sum(), [x])
        np.testing.assert_array_equal(gm[x], [0.0, 1.0, 0.0])

    def test_sample_norm_zero_sample(self):
        x = Tensor(np.zeros((2, 3)), requires_grad=True)
        gm = backward(sample_norm(x).sum(), [x])
        assert np.all(np.isfinite(gm[x]))
        np.testing.assert_array_equal(gm[x], 0.0)


class TestConvolution:
    @pytest.mark.parametrize("nd", [2, 3])
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("padding, pad", [("zero", 1), ("none", 0)])
    def test_conv_matches_loop(self, nd, stride, padding, pad, rng):
        x = rng.normal(size=(2, 3) + (6,) * nd)
        w = rng.normal(size=(4, 3) + (3,) * nd)
        y = conv_forward(Tensor(x), Tensor(w), stride=stride, padding=padding, dims=nd)
        np.testing.assert_allclose(y.data, conv_loop(x, w, stride, pad), atol=1e-12)

    @pytest.mark.parametrize("nd", [2, 3])
    @pytest.mark.parametrize("padding, pad", [("zero", 1), ("none", 0)])
    def test_deconv_matches_loop(self, nd, padding, pad, rng):
        x = rng.normal(size=(2, 3) + (5,) * nd)
        w = rng.normal(size=(3, 2) + (3,) * nd)
        y = deconv_forward(Tensor(x), Tensor(w), padding=padding, dims=nd)
        np.testing.assert_allclose(y.data, deconv_loop(x, w, 1, pad), atol=1e-12)

    def test_strided_deconv_matches_loop(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(2, 3, 3, 3))
        y = deconv_forward(Tensor(x), Tensor(w), stride=2, padding="none", dims=2)
        np.testing.assert_allclose(y.data, deconv_loop(x, w, 2, 0), atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_adjoint_identity(self, stride, rng):
        w = rng.normal(size=(4, 3, 3, 3, 3))
        x = rng.normal(size=(2, 3, 7, 7, 7))
        y = conv_forward(Tensor(x), Tensor(w), stride=stride, padding="zero", dims=3)
        u = rng.normal(size=y.shape)
        back = deconv_forward(Tensor(u), Tensor(w), stride=stride, padding="zero", dims=3, output_size=x.shape[2:])
        assert np.vdot(y.data, u) == pytest.approx(np.vdot(x, back.data), rel=1e-10)

    def test_output_size_arithmetic(self):
        x = Tensor(np.zeros((1, 1, 9, 12)))
        w = Tensor(np.zeros((2, 1, 3, 3)))
        assert conv_forward(x, w, padding="none").shape == (1, 2, 7, 10)
        assert conv_forward(x, w, stride=2, padding="zero").shape == (1, 2, 5, 6)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(ValueError, match="channel axis"):
            conv_forward(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ValueError, match="axis 3"):
            conv_forward(Tensor(np.zeros((1, 1, 5, 2))), Tensor(np.zeros((1, 1, 3, 3))), padding="none")

    def test_rejects_bad_stride(self):
        with pytest.raises(ValueError, match="stride"):
            conv_forward(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)

    @pytest.mark.parametrize("which", ["input", "kernel", "bias"])
    @pytest.mark.parametrize("op", ["conv", "deconv"])
    def test_gradients(self, which, op, rng):
        x = rng.normal(size=(2, 2, 5, 4, 4))
        w = rng.normal(size=(2, 2, 3, 3, 3))
        b = rng.normal(size=2)
        fn = conv_forward if op == "conv" else deconv_forward
        probe = rng.normal(size=fn(Tensor(x), Tensor(w), Tensor(b), 1, "zero", 3).shape)

        def f(arg):
            vals = {"input": Tensor(x), "kernel": Tensor(w), "bias": Tensor(b)}
            vals[which] = arg
            return (fn(vals["input"], vals["kernel"], vals["bias"], 1, "zero", 3) * Tensor(probe)).sum()

        check_grad(f, {"input": x, "kernel": w, "bias": b}[which])

    def test_dense_gradient(self, rng):
        w = rng.normal(size=(3, 5))
        check_grad(lambda x: (dense_forward(x, Tensor(w), Tensor(np.ones(3))) ** 2).sum(), rng.normal(size=(2, 5)))

    def test_dense_shape_error(self):
        with pytest.raises(ValueError, match="features"):
            dense_forward(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 5))))


class TestDoubleBackprop:
    def test_cubic(self, rng):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        (g,) = grad((x * x * x).sum(), [x], create_graph=True)
        (h,) = grad(g.sum(), [x])
        np.testing.assert_allclose(h.data, 6 * x.data)

    def test_input_gradient_node_is_differentiable(self, rng):
        w = Tensor(rng.normal(size=(1, 1, 3, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(1, 1, 6, 6)), requires_grad=True)
        gx = input_gradient_node((relu(conv_forward(x, w)) ** 2).sum(), x)
        gm = backward((gx * gx).sum(), [w])
        assert np.abs(gm[w]).sum() > 0

    @pytest.mark.parametrize("op", ["conv", "deconv"])
    def test_penalty_style_parameter_gradient(self, op, rng):
        """d/dw of ||d/dx f(x; w)||^2 against finite differences in w."""
        x = rng.normal(size=(2, 1, 5, 5))
        fn = conv_forward if op == "conv" else deconv_forward

        def penalty(w):
            xt = Tensor(x, requires_grad=True)
            y = fn(xt, w, None, 1, "zero", 2)
            (gx,) = grad((leaky_relu(y, 0.2) ** 2).sum(), [xt], create_graph=True)
            return (sample_norm(gx) - 1.0) ** 2

        def scalar(w):
            return penalty(w).mean()

        check_grad(scalar, rng.normal(size=(1, 1, 3, 3)), rtol=1e-4)


class TestAdam:
    def test_scalar_oracle(self):
        p = Tensor(np.array([0.5]), requires_grad=True)
        state = AdamState(lr=1e-3)
        seq = [0.3, -1.2, 0.7, 2.0, -0.1]
        for g in seq:
            adam_step([p], {p: np.array([g])}, state)
        assert p.data[0] == pytest.approx(adam_scalar(0.5, seq, lr=1e-3), rel=1e-12)
        assert state.t == len(seq)

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
        opt = Adam([p], lr=0.01)
        opt.step({p: np.array([5.0, -0.2])})
        np.testing.assert_allclose(p.data, [0.99, -0.99], rtol=1e-6)

    def test_missing_gradient(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        q = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(KeyError):
            adam_step([p, q], {p: np.zeros(2)}, AdamState())

    def test_zero_gradient_is_a_no_op(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        adam_step([p], {p: np.array([0.0])}, AdamState())
        assert p.data[0] == 3.0


@settings(max_examples=30, deadline=None)
@given(
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
    seed=st.integers(0, 2**16),
)
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 1, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 1, 3, 3)))
    f = (conv_forward(x, w) ** 2).sum()
    g = T.exp(x * 0.1).sum()
    combined = backward(f * a + g * b, [x])[x]
    x2 = Tensor(x.data, requires_grad=True)
    gf = backward((conv_forward(x2, w) ** 2).sum(), [x2])[x2]
    x3 = Tensor(x.data, requires_grad=True)
    gg = backward(T.exp(x3 * 0.1).sum(), [x3])[x3]
    np.testing.assert_allclose(combined, a * gf + b * gg, rtol=1e-9, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.1, 10))
def test_conv_is_linear_in_input(seed, scale):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 1, 2, 6, 6))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    lhs = conv_forward(Tensor(x * scale + y), w).data
    rhs = scale * conv_forward(Tensor(x), w).data + conv_forward(Tensor(y), w).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


def test_repeated_runs_are_bitwise_identical(rng):
    x = rng.normal(size=(2, 3, 5, 6, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3, 3)).astype(np.float32)

    def run():
        wt = Tensor(w, requires_grad=True)
        return backward((relu(conv_forward(Tensor(x), wt)) ** 2).sum(), [wt])[wt]

    assert run().tobytes() == run().tobytes()
