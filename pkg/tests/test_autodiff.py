import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from tassn import autodiff as ad

from .oracles import central_difference, conv2d_loop

TRIALS = 20


def _param(rng, shape, scale=1.0):
    return ad.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _passes(fn, tensor):
    report = ad.check_gradient(fn, tensor, step=1e-5, tol=1e-4)
    assert report.passed, str(report)
    return report


class TestTensor:
    def test_grad_initially_zero(self):
        t = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        assert t.shape == (2, 3)
        assert t.size == t.values.size == t.grad.size == 6
        assert_array_equal(t.grad, np.zeros((2, 3)))

    def test_zero_grad_resets(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.CompGraph() as g:
            loss = ad.sum(x * x)
        g.backpropagate(loss)
        assert np.any(x.grad != 0)
        x.zero_grad()
        assert_array_equal(x.grad, [0.0, 0.0])

    def test_float64(self):
        assert ad.Tensor([1, 2]).data.dtype == np.float64


class TestEvaluate:
    def test_add(self):
        out = ad.CompGraph(lambda x, y: ad.add(x, y)).evaluate(x=ad.Tensor([1, 2]), y=ad.Tensor([3, 4]))
        assert_array_equal(out["output"].data, [4, 6])

    def test_identity_matmul(self):
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = ad.CompGraph(lambda a, b: ad.matmul(a, b)).evaluate(a=ad.Tensor(np.eye(2)), b=ad.Tensor(b))
        assert_array_equal(out["output"].data, b)

    def test_ones_convolution_center(self):
        x = ad.Tensor(np.ones((1, 1, 5, 5)))
        w = ad.Tensor(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, w, padding=1).data
        assert out[0, 0, 2, 2] == 9.0
        assert_array_equal(out, conv2d_loop(x.data, w.data, padding=1))

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_conv_matches_loop(self, rng, stride, padding):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        got = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride=stride, padding=padding).data
        assert_allclose(got, conv2d_loop(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)

    def test_shape_mismatch_names_node(self):
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_detected(self):
        x = ad.Tensor([1.0, -1.0], requires_grad=True)
        with pytest.raises(ad.NonFiniteError):
            with ad.CompGraph():
                ad.sqrt(x)

    def test_pure(self, rng):
        w = _param(rng, (3, 4))
        x = ad.Tensor(rng.standard_normal((4, 2)))
        g = ad.CompGraph(lambda: ad.sigmoid(ad.matmul(w, x)))
        a = g.evaluate()["output"].data.copy()
        b = g.evaluate()["output"].data.copy()
        assert a.tobytes() == b.tobytes()

    def test_topological_order(self, rng):
        w = _param(rng, (3, 3))
        with ad.CompGraph() as g:
            h = ad.relu(ad.matmul(w, w))
            ad.sum(h * h + h)
        position = {id(n.output): n.index for n in g.nodes}
        for node in g.nodes:
            for t in node.inputs:
                if id(t) in position:
                    assert position[id(t)] < node.index


class TestBackpropagate:
    def test_sum_grad_ones(self, rng):
        x = _param(rng, (2, 3, 4))
        with ad.CompGraph() as g:
            loss = ad.sum(x)
        g.backpropagate(loss)
        assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square_grad(self):
        x = ad.Tensor([3.0, -2.0], requires_grad=True)
        with ad.CompGraph() as g:
            loss = ad.sum(x * x)
        g.backpropagate(loss)
        assert_array_equal(x.grad, [6.0, -4.0])

    def test_linear_least_squares_matches_fd(self, rng):
        w = _param(rng, (4, 4))
        x = rng.standard_normal((4, 1))
        y = rng.standard_normal((4, 1))

        def f():
            return ad.frobenius_sq(ad.matmul(w, ad.Tensor(x)) - ad.Tensor(y))

        with ad.CompGraph() as g:
            loss = f()
        g.backpropagate(loss)

        def numeric(wv):
            return float(np.sum((wv @ x - y) ** 2))

        fd = central_difference(numeric, w.data)
        rel = np.abs(w.grad - fd) / np.maximum(np.maximum(np.abs(w.grad), np.abs(fd)), 1e-6)
        assert rel.max() <= 1e-4

    def test_non_scalar_rejected(self, rng):
        x = _param(rng, (3,))
        with ad.CompGraph() as g:
            y = x * 2.0
        with pytest.raises(ad.ShapeError):
            g.backpropagate(y)

    def test_requires_evaluation(self):
        g = ad.CompGraph(lambda: ad.Tensor(1.0))
        with pytest.raises(ad.GraphStateError):
            g.backpropagate()

    def test_single_backward_per_forward(self, rng):
        x = _param(rng, (3,))
        with ad.CompGraph() as g:
            loss = ad.sum(x * x)
        g.backpropagate(loss)
        with pytest.raises(ad.GraphStateError):
            g.backpropagate(loss)

    def test_additive_linearity(self, rng):
        w = _param(rng, (3, 3))
        x = ad.Tensor(rng.standard_normal((3, 2)))
        a, b = 1.7, -0.4

        def l1():
            return ad.sum(ad.sigmoid(ad.matmul(w, x)))

        def l2():
            return ad.frobenius_sq(ad.relu(ad.matmul(w, x)))

        grads = []
        for fn in (l1, l2, lambda: a * l1() + b * l2()):
            w.zero_grad()
            g = ad.CompGraph(fn)
            g.evaluate()
            g.backpropagate()
            grads.append(w.grad.copy())
        assert_allclose(grads[2], a * grads[0] + b * grads[1], atol=1e-10, rtol=0)

    def test_no_record_skips_tape(self, rng):
        x = _param(rng, (3,))
        with ad.CompGraph() as g:
            with ad.no_record():
                ad.sum(x * x)
        assert g.nodes == []


class TestCheckGradient:
    def test_sigmoid_sum_passes(self, rng):
        x = _param(rng, (5, 3))
        report = ad.check_gradient(lambda: ad.sum(ad.sigmoid(x)), x, step=1e-5, tol=1e-4)
        assert report.passed
        assert report.checked == 15

    def test_constant_tensor_zero_checked(self):
        x = ad.Tensor([1.0, 2.0])
        report = ad.check_gradient(lambda: ad.sum(x), x)
        assert report.checked == 0
        assert report.notes and "0 elements" in report.notes[0]

    def test_corrupted_rule_fails(self, rng):
        x = _param(rng, (4,))

        def bad_square(t):
            return ad.primitive("bad_square", (t,), t.data**2, lambda g: (g * 3.0 * t.data,))

        report = ad.check_gradient(lambda: ad.sum(bad_square(x)), x)
        assert not report.passed

    def test_non_finite_reported(self):
        x = ad.Tensor([1.0], requires_grad=True)

        def weird(t):
            return ad.primitive("weird", (t,), t.data, lambda g: (g * np.nan,))

        report = ad.check_gradient(lambda: ad.sum(weird(x)), x)
        assert not report.passed
        assert any("non-finite" in n for n in report.notes)

    def test_step_must_be_positive(self, rng):
        x = _param(rng, (2,))
        with pytest.raises(ValueError):
            ad.check_gradient(lambda: ad.sum(x), x, step=0.0)


def _primitive_cases(rng):
    """(name, loss builder, tensor) for every primitive, one random draw."""
    a = _param(rng, (3, 4))
    b = _param(rng, (3, 4))
    m = _param(rng, (4, 2))
    pos = ad.Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    img = _param(rng, (2, 2, 6, 6))
    ker = _param(rng, (3, 2, 3, 3), 0.5)
    bias = _param(rng, (3,))
    # keep relu/maxpool inputs away from kinks
    kinked = ad.Tensor(rng.choice([-1, 1], (2, 3, 4, 4)) * rng.uniform(0.1, 1.0, (2, 3, 4, 4)), requires_grad=True)
    w = ad.Tensor(rng.standard_normal((3, 4)))
    w_img = ad.Tensor(rng.standard_normal((2, 2, 12, 12)))
    w6 = ad.Tensor(rng.standard_normal((2, 2, 6, 6)))
    w_cat = ad.Tensor(rng.standard_normal((2, 5, 6, 6)))
    return [
        ("add", lambda: ad.sum(w * ad.add(a, b)), a),
        ("sub", lambda: ad.sum(w * ad.sub(a, b)), b),
        ("mul", lambda: ad.sum(w * ad.mul(a, b)), a),
        ("div", lambda: ad.sum(w * ad.div(a, pos)), pos),
        ("matmul_left", lambda: ad.sum(ad.matmul(a, m)), a),
        ("matmul_right", lambda: ad.sum(ad.sigmoid(ad.matmul(a, m))), m),
        ("conv_s1_x", lambda: ad.sum(ad.sigmoid(ad.conv2d(img, ker, bias, stride=1, padding=1))), img),
        ("conv_s1_w", lambda: ad.sum(ad.sigmoid(ad.conv2d(img, ker, bias, stride=1, padding=1))), ker),
        ("conv_s2_x", lambda: ad.sum(ad.sigmoid(ad.conv2d(img, ker, bias, stride=2, padding=1))), img),
        ("conv_s2_b", lambda: ad.sum(ad.sigmoid(ad.conv2d(img, ker, bias, stride=2, padding=1))), bias),
        ("upsample", lambda: ad.sum(w_img * ad.upsample2d(img, 2)), img),
        ("maxpool", lambda: ad.sum(ad.maxpool2x2(kinked) * ad.maxpool2x2(kinked)), kinked),
        ("relu", lambda: ad.sum(w * ad.relu(ad.Tensor(np.sign(a.data) * 0.1) + a)), a),
        ("sigmoid", lambda: ad.sum(w * ad.sigmoid(a)), a),
        ("exp", lambda: ad.sum(w * ad.exp(a)), a),
        ("sqrt", lambda: ad.sum(w * ad.sqrt(pos)), pos),
        ("spatial_softmax", lambda: ad.sum(w6 * ad.spatial_softmax(img)), img),
        ("concat", lambda: ad.sum(w_cat * ad.concat([img, ad.square(img), ad.slice_axis(img, 1, 0, 1)], axis=1)), img),
        ("reshape", lambda: ad.sum(ad.Tensor(np.arange(12.0).reshape(4, 3)) * ad.reshape(a, (4, 3))), a),
        ("transpose", lambda: ad.sum(ad.Tensor(np.arange(12.0).reshape(4, 3)) * ad.transpose(a)), a),
        ("mean", lambda: ad.sum(ad.square(ad.mean(a, axis=1))), a),
        ("sum_axis", lambda: ad.sum(ad.square(ad.sum(a, axis=0, keepdims=True))), a),
        ("frobenius_sq", lambda: ad.frobenius_sq(a - b), a),
        ("stack", lambda: ad.sum(ad.Tensor(np.arange(24.0).reshape(2, 3, 4)) * ad.stack([a, b])), b),
    ]


CASE_NAMES = [name for name, _, _ in _primitive_cases(np.random.default_rng(0))]


@pytest.mark.parametrize("name", CASE_NAMES)
def test_primitive_gradients_random_inputs(name):
    """Each primitive passes central differences on TRIALS independent draws."""
    for trial in range(TRIALS):
        cases = {n: (f, t) for n, f, t in _primitive_cases(np.random.default_rng([7, trial]))}
        fn, tensor = cases[name]
        _passes(fn, tensor)


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
)
def test_add_mul_values(xs, ys):
    n = min(len(xs), len(ys))
    x, y = np.array(xs[:n]), np.array(ys[:n])
    assert_array_equal(ad.add(ad.Tensor(x), ad.Tensor(y)).data, x + y)
    assert_array_equal(ad.mul(ad.Tensor(x), ad.Tensor(y)).data, x * y)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
def test_broadcast_grad_shapes(r, c, seed):
    rng = np.random.default_rng(seed)
    a = _param(rng, (r, c))
    b = _param(rng, (1, c))
    with ad.CompGraph() as g:
        loss = ad.sum(ad.mul(a, b))
    g.backpropagate(loss)
    assert b.grad.shape == (1, c)
    assert_allclose(b.grad, a.data.sum(axis=0, keepdims=True), rtol=1e-12)


def test_maxpool_and_upsample_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert_array_equal(ad.maxpool2x2(ad.Tensor(x)).data, [[[[5, 7], [13, 15]]]])
    up = ad.upsample2d(ad.Tensor([[[[1.0, 2.0]]]]), 2).data
    assert_array_equal(up, [[[[1, 1, 2, 2], [1, 1, 2, 2]]]])


def test_spatial_softmax_normalized(rng):
    out = ad.spatial_softmax(ad.Tensor(rng.standard_normal((2, 3, 5, 4)))).data
    assert_allclose(out.sum(axis=(2, 3)), np.ones((2, 3)), rtol=1e-12)
