import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shade4d import autodiff as ad
from shade4d.autodiff import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    finite_diff_check,
)


def scalar_loss(fn):
    """Wrap an elementwise builder into a scalar function for grad checks."""

    def f(x):
        return fn(x).sum()

    return f


RNG = np.random.default_rng(7)


def check(fn, x, tol=1e-6, eps=1e-5):
    rep = finite_diff_check(scalar_loss(fn), Tensor(x), eps=eps, tol=tol)
    assert rep.passed, str(rep)
    return rep


class TestElementwise:
    def test_add_sub_mul_div(self):
        x = RNG.normal(size=(4, 3))
        c = RNG.normal(size=(4, 3)) + 3.0
        check(lambda t: t + Tensor(c), x)
        check(lambda t: Tensor(c) - t, x)
        check(lambda t: t * Tensor(c), x)
        check(lambda t: t / Tensor(c), x)
        check(lambda t: Tensor(c) / (t * t + 1.0), x)

    def test_broadcasting_grads(self):
        x = RNG.normal(size=(5, 1, 3))
        c = Tensor(RNG.normal(size=(4, 3)))
        check(lambda t: t * c, x)
        check(lambda t: t + c, x)

    def test_scalar_operand_broadcast(self):
        x = RNG.normal(size=(6,))
        check(lambda t: 2.5 * t + 1.0, x)
        check(lambda t: 1.0 / (t * t + 2.0), x)

    def test_unary(self):
        x = RNG.uniform(0.5, 2.0, size=(3, 4))
        check(ad.exp, x)
        check(ad.log, x)
        check(ad.sqrt, x)
        check(ad.sin, x)
        check(ad.cos, x)
        check(ad.sigmoid, x)
        check(ad.softplus, x)
        check(ad.tanh, x)
        check(lambda t: ad.pow_const(t, 3.0), x)
        check(ad.neg, x)

    def test_relu_away_from_kink(self):
        x = RNG.normal(size=(40,))
        x[np.abs(x) < 1e-2] = 0.5
        check(ad.relu, x)

    def test_sigmoid_extreme_inputs_stable(self):
        y = ad.sigmoid(Tensor([-800.0, 800.0, 0.0]))
        assert np.all(np.isfinite(y.data))
        assert y.data[0] == 0.0 and y.data[1] == 1.0

    def test_softplus_extreme_inputs_stable(self):
        y = ad.softplus(Tensor([-800.0, 800.0]))
        assert np.all(np.isfinite(y.data))
        assert y.data[1] == pytest.approx(800.0)


class TestMatmulAndShapes:
    def test_matmul_grad(self):
        a = RNG.normal(size=(4, 5))
        b = Tensor(RNG.normal(size=(5, 3)))
        check(lambda t: t @ b, a)
        a_t = Tensor(a)
        check(lambda t: a_t @ t, RNG.normal(size=(5, 3)))

    def test_batched_matmul_grad(self):
        a = RNG.normal(size=(2, 3, 4))
        b = Tensor(RNG.normal(size=(2, 4, 3)))
        check(lambda t: t @ b, a)
        # broadcast on the batch dim
        b2 = Tensor(RNG.normal(size=(4, 3)))
        check(lambda t: t @ b2, a)

    def test_matmul_shape_error_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))

    def test_add_shape_error(self):
        with pytest.raises(ShapeError, match="add"):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))

    def test_reshape_transpose_grads(self):
        x = RNG.normal(size=(2, 3, 4))
        check(lambda t: ad.reshape(t, (6, 4)), x)
        check(lambda t: ad.transpose(t, (2, 0, 1)), x)

    def test_reshape_error(self):
        with pytest.raises(ShapeError, match="reshape"):
            ad.reshape(Tensor(np.ones((2, 3))), (7,))


class TestReductionsAndIndexing:
    def test_sum_mean_axes(self):
        x = RNG.normal(size=(3, 4, 5))
        check(lambda t: t.sum(), x)
        check(lambda t: t.sum(axis=1), x)
        check(lambda t: t.sum(axis=2, keepdims=True), x)
        check(lambda t: t.mean(axis=0), x)
        check(lambda t: t.mean(), x)

    def test_amax(self):
        x = np.arange(12.0).reshape(3, 4)  # unique values, no ties
        check(lambda t: ad.amax(t, axis=1), x)
        check(lambda t: ad.amax(t), x)

    def test_cumsum_inclusive_exclusive(self):
        x = RNG.normal(size=(3, 6))
        check(lambda t: ad.cumsum(t, axis=1), x)
        check(lambda t: ad.cumsum(t, axis=1, exclusive=True), x)
        y = ad.cumsum(Tensor([1.0, 2.0, 3.0]), axis=0, exclusive=True)
        np.testing.assert_allclose(y.data, [0.0, 1.0, 3.0])

    def test_getitem(self):
        x = RNG.normal(size=(5, 4))
        check(lambda t: t[1:4], x)
        check(lambda t: t[:, 2], x)

    def test_gather_rows(self):
        x = RNG.normal(size=(6, 3))
        idx = np.array([0, 2, 2, 5, 1])
        check(lambda t: ad.gather(t, idx), x)

    def test_gather_rejects_float_index(self):
        with pytest.raises(ShapeError, match="gather"):
            ad.gather(Tensor(np.ones((3, 2))), np.array([0.0, 1.0]))

    def test_scatter_add_accumulates_duplicates(self):
        base = Tensor(np.zeros((4, 2)), requires_grad=True)
        src = Tensor(np.ones((3, 2)), requires_grad=True)
        idx = np.array([1, 1, 3])
        with Tape() as tape:
            out = ad.scatter_add(base, idx, src)
            loss = out.sum()
        np.testing.assert_allclose(out.data[1], [2.0, 2.0])
        np.testing.assert_allclose(out.data[3], [1.0, 1.0])
        np.testing.assert_allclose(out.data[0], [0.0, 0.0])
        gb, gs = tape.gradient(loss, [base, src])
        np.testing.assert_allclose(gb, np.ones((4, 2)))
        np.testing.assert_allclose(gs, np.ones((3, 2)))

    def test_scatter_add_grad_check(self):
        idx = np.array([0, 3, 3, 1])
        base = Tensor(RNG.normal(size=(5, 2)))

        def fn(t):
            return ad.mul(ad.scatter_add(base, idx, t), ad.scatter_add(base, idx, t))

        check(fn, RNG.normal(size=(4, 2)))


class TestSoftmaxClamp:
    def test_softmax_rows_sum_to_one(self):
        x = RNG.normal(size=(7, 11)) * 10
        y = ad.softmax(Tensor(x), axis=-1)
        np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_grad(self):
        x = RNG.normal(size=(3, 5))
        w = Tensor(RNG.normal(size=(3, 5)))
        check(lambda t: ad.softmax(t, axis=-1) * w, x)

    def test_softmax_shift_invariance(self):
        x = RNG.normal(size=(4,))
        a = ad.softmax(Tensor(x)).data
        b = ad.softmax(Tensor(x + 1000.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_clamp_grad_interior_and_exterior(self):
        x = np.array([-2.0, -0.5, 0.3, 0.9, 2.0])
        t = Tensor(x, requires_grad=True)
        with Tape() as tape:
            loss = ad.clamp(t, -1.0, 1.0).sum()
        (g,) = tape.gradient(loss, [t])
        np.testing.assert_allclose(g, [0.0, 1.0, 1.0, 1.0, 0.0])

    def test_clamp_boundary_counts_as_inside(self):
        t = Tensor(np.array([-1.0, 1.0]), requires_grad=True)
        with Tape() as tape:
            loss = ad.clamp(t, -1.0, 1.0).sum()
        (g,) = tape.gradient(loss, [t])
        np.testing.assert_allclose(g, [1.0, 1.0])


class TestTapeSemantics:
    def test_diamond_reuse_accumulates_once_per_consumer(self):
        # y = x*x + x*x : dy/dx = 4x
        t = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            a = t * t
            loss = (a + a).sum()
        (g,) = tape.gradient(loss, [t])
        np.testing.assert_allclose(g, [12.0])

    def test_deep_chain_visits_each_node_once(self):
        t = Tensor(np.ones(4), requires_grad=True)
        with Tape() as tape:
            y = t
            for _ in range(50):
                y = y * 1.01
            loss = y.sum()
        (g,) = tape.gradient(loss, [t])
        np.testing.assert_allclose(g, np.full(4, 1.01**50))
        assert len(tape) == 51

    def test_unused_leaf_gets_zero_grad(self):
        used = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = (used * 2.0).sum()
            _ = unused * 3.0  # recorded but not part of loss
        tape.backward(loss)
        np.testing.assert_allclose(used.grad, np.full(3, 2.0))
        np.testing.assert_allclose(unused.grad, np.zeros(2))

    def test_no_tape_is_fast_path(self):
        t = Tensor(np.ones(3), requires_grad=True)
        y = t * 2.0
        assert not y.requires_grad  # nothing recorded without a tape

    def test_backward_rejects_nonscalar(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = t * 2.0
        with pytest.raises(ShapeError, match="backward"):
            tape.backward(y)

    def test_gradient_of_independent_output_is_zero(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = (a * 3.0).sum()
            _ = b + 1.0
        ga, gb = tape.gradient(loss, [a, b])
        np.testing.assert_allclose(ga, [3.0, 3.0])
        np.testing.assert_allclose(gb, [0.0, 0.0])

    def test_nested_tensor_expressions_compose(self):
        x = RNG.normal(size=(5,))

        def fn(t):
            return ad.sigmoid(t * 2.0 + 1.0) * ad.exp(ad.neg(t * t))

        check(fn, x)

    def test_assign_respects_shape(self):
        t = Tensor(np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            t.assign_(np.zeros(3))
        t.assign_(np.ones((2, 2)))
        np.testing.assert_allclose(t.data, 1.0)


class TestFiniteChecks:
    def test_nonfinite_forward_raises(self):
        with np.errstate(invalid="ignore"):
            with pytest.raises(NonFiniteError, match="log"):
                ad.log(Tensor([-1.0]))

    def test_finite_checks_can_be_disabled(self):
        prev = ad.set_finite_checks(False)
        try:
            with np.errstate(invalid="ignore"):
                y = ad.log(Tensor([-1.0]))
            assert np.isnan(y.data[0])
        finally:
            ad.set_finite_checks(prev)

    def test_div_by_zero_raises(self):
        with np.errstate(divide="ignore"):
            with pytest.raises(NonFiniteError, match="div"):
                Tensor([1.0]) / Tensor([0.0])


class TestEvalGraph:
    def test_linear_program_matches_eager(self):
        x = Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
        w = Tensor(RNG.normal(size=(4, 2)), requires_grad=True)
        b = Tensor(RNG.normal(size=(2,)), requires_grad=True)
        program = [
            ("matmul", (0, 1)),  # x @ w
            ("add", (3, 2)),  # + b
            ("relu", (4,)),
            ("sum", (5,)),
        ]
        with Tape() as tape:
            out = ad.eval_graph([x, w, b], program)
        expected = np.maximum(x.data @ w.data + b.data, 0.0).sum()
        np.testing.assert_allclose(out.item(), expected)
        gx, gw = tape.gradient(out, [x, w])
        assert gx.shape == x.shape and gw.shape == w.shape

    def test_concat_step(self):
        a = Tensor(np.ones((2, 2)))
        b = Tensor(np.zeros((2, 2)))
        out = ad.eval_graph([a, b], [("concat", (0, 1), {"axis": 1})])
        assert out.shape == (2, 4)

    def test_unknown_op_rejected(self):
        with pytest.raises(ValueError, match="unknown op"):
            ad.eval_graph([Tensor([1.0])], [("frobnicate", (0,))])

    def test_empty_program_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            ad.eval_graph([Tensor([1.0])], [])


class TestGradCheckHarness:
    def test_detects_wrong_gradient(self):
        # A deliberately corrupted op: forward x^2 but gradient of 3x^2.
        def bad(t):
            out = t.data**2

            def backward(g):
                return (g * 3.0 * t.data**2,)

            return ad.record_op("bad", out, (t,), backward).sum()

        rep = finite_diff_check(bad, Tensor(np.array([1.0, 2.0])), tol=1e-6)
        assert not rep.passed

    def test_subset_of_coords(self):
        rep = finite_diff_check(
            lambda t: (t * t).sum(),
            Tensor(RNG.normal(size=(100,))),
            max_coords=10,
        )
        assert rep.passed and len(rep.coords) == 10

    def test_report_str_mentions_status(self):
        rep = finite_diff_check(lambda t: (t * t).sum(), Tensor(np.ones(3)))
        assert "PASS" in str(rep)


SMOOTH_OPS = {
    "add": lambda t, c: t + c,
    "sub": lambda t, c: c - t,
    "mul": lambda t, c: t * c,
    "div": lambda t, c: t / (c * c + 0.5),
    "matmul": lambda t, c: ad.reshape(t, (2, 3)) @ ad.reshape(c, (3, 2)),
    "exp": lambda t, c: ad.exp(t),
    "sin": lambda t, c: ad.sin(t),
    "cos": lambda t, c: ad.cos(t),
    "sigmoid": lambda t, c: ad.sigmoid(t),
    "softplus": lambda t, c: ad.softplus(t),
    "tanh": lambda t, c: ad.tanh(t),
    "softmax": lambda t, c: ad.softmax(t) * c,
    "sum": lambda t, c: (t * c).sum(),
    "mean": lambda t, c: (t * c).mean(),
    "cumsum": lambda t, c: ad.cumsum(t, axis=0) * c,
    "pow": lambda t, c: ad.pow_const(t * t + 1.0, 1.5),
}


@pytest.mark.parametrize("seed", range(100))
def test_property_primitive_ops_match_finite_difference(seed):
    """Every smooth primitive's VJP agrees with central differences."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=6)
    name = list(SMOOTH_OPS)[seed % len(SMOOTH_OPS)]
    fn = SMOOTH_OPS[name]
    c = Tensor(rng.normal(size=6))
    rep = finite_diff_check(
        lambda t: fn(t, c).sum(), Tensor(x), eps=1e-6, tol=1e-6
    )
    assert rep.passed, f"{name}: {rep}"


def test_add_backward_distributes_exactly():
    a = Tensor(RNG.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(RNG.normal(size=(3, 2)), requires_grad=True)
    up = RNG.normal(size=(3, 2))
    with Tape() as tape:
        loss = ((a + b) * Tensor(up)).sum()
    ga, gb = tape.gradient(loss, [a, b])
    assert np.array_equal(ga, up) and np.array_equal(gb, up)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(min_value=1, max_value=5),
    st.integers(min_value=1, max_value=5),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_property_mul_chain_gradient(rows, cols, seed):
    """d/dx sum(x * c) == c for arbitrary shapes and values."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(rows, cols)), requires_grad=True)
    c = rng.normal(size=(rows, cols))
    with Tape() as tape:
        loss = (x * Tensor(c)).sum()
    (g,) = tape.gradient(loss, [x])
    np.testing.assert_allclose(g, c, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_property_softmax_simplex(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 9)) * rng.uniform(0.1, 30)
    y = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
