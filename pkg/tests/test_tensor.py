import numpy as np
import pytest
import scipy.special
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from avfulldit import tensor as T


def numeric_grad(f, x, h=1e-6):
    """Independent central difference over every coordinate of ``x`` (numpy in, float out)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def analytic_grad(build, x):
    leaf = T.tensor(x, requires_grad=True)
    build(leaf).backward()
    return leaf.grad


finite = st.floats(-3, 3, allow_nan=False, width=64)


def test_matmul_matches_numpy_and_closed_form_gradient(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    r = rng.standard_normal((3, 5))
    ta, tb = T.tensor(a, requires_grad=True), T.tensor(b, requires_grad=True)
    out = T.matmul(ta, tb)
    np.testing.assert_array_equal(out.data, a @ b)
    T.sum(T.mul(out, T.constant(r))).backward()
    np.testing.assert_allclose(ta.grad, r @ b.T, rtol=1e-13)
    np.testing.assert_allclose(tb.grad, a.T @ r, rtol=1e-13)


def test_batched_matmul_weight_gradient_folds_batch(rng):
    a, w = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))
    tw = T.tensor(w, requires_grad=True)
    T.sum(T.matmul(T.constant(a), tw)).backward()
    np.testing.assert_allclose(tw.grad, np.einsum("bij->j", a)[:, None] * np.ones((1, 2)), rtol=1e-13)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5), elements=finite))
def test_softmax_is_a_simplex(x):
    y = T.softmax(T.tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(y, scipy.special.softmax(x, axis=-1), rtol=1e-12, atol=1e-15)


def test_softmax_survives_large_logits():
    y = T.softmax(T.tensor([[1e3, 0.0, -1e9]])).data
    assert np.isfinite(y).all()
    np.testing.assert_allclose(y, [[1.0, 0.0, 0.0]], atol=1e-300)


def test_layer_norm_forward_matches_formula(rng):
    x, g, b = rng.standard_normal((2, 3, 6)), rng.standard_normal(6), rng.standard_normal(6)
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    expected = (x - mu) / np.sqrt(var + 1e-5) * g + b
    np.testing.assert_allclose(T.layer_norm(T.tensor(x), T.tensor(g), T.tensor(b)).data, expected, rtol=1e-12)


CASES = {
    "matmul": lambda t, c: T.matmul(t, T.constant(c[:4, :3])),
    "softmax": lambda t, c: T.softmax(T.scale(t, 2.0)),
    "layer_norm": lambda t, c: T.layer_norm(t, T.constant(c[0, :4]), T.constant(c[1, :4])),
    "add": lambda t, c: T.add(t, T.constant(c[0, :4])),
    "mul": lambda t, c: T.mul(t, t),
    "scale": lambda t, c: T.scale(t, -0.7),
    "silu": lambda t, c: T.silu(t),
    "reshape": lambda t, c: T.reshape(t, (4, 3)),
    "transpose": lambda t, c: T.transpose(t, (1, 0)),
    "concat": lambda t, c: T.concat([t, T.scale(t, 3.0)], axis=1),
    "split": lambda t, c: T.split(t, [1, 3], axis=1)[1],
    "rope": lambda t, c: T.rope_rotate(T.reshape(t, (3, 1, 4)), c[:3, :2]),
}


@pytest.mark.parametrize("op", sorted(CASES))
def test_every_op_gradient_matches_independent_differences(op, rng):
    x = rng.standard_normal((3, 4))
    c = rng.standard_normal((6, 6))
    r = rng.standard_normal(CASES[op](T.tensor(x), c).shape)

    def loss(t):
        return T.sum(T.mul(CASES[op](t, c), T.constant(r)))

    def f(arr):
        with T.no_grad():
            return float(loss(T.tensor(arr)).data)

    np.testing.assert_allclose(analytic_grad(loss, x), numeric_grad(f, x), rtol=1e-6, atol=1e-8)


def test_mse_gradient_is_two_diff_over_n(rng):
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    ta, tb = T.tensor(a, requires_grad=True), T.tensor(b, requires_grad=True)
    loss = T.mse(ta, tb)
    assert loss.item() == pytest.approx(np.mean((a - b) ** 2), rel=1e-15)
    loss.backward()
    np.testing.assert_allclose(ta.grad, 2 * (a - b) / 6, rtol=1e-14)
    np.testing.assert_allclose(tb.grad, -2 * (a - b) / 6, rtol=1e-14)


def test_broadcast_add_reduces_gradient(rng):
    bias = T.tensor(rng.standard_normal(4), requires_grad=True)
    T.sum(T.add(T.constant(rng.standard_normal((2, 3, 4))), bias)).backward()
    np.testing.assert_array_equal(bias.grad, np.full(4, 6.0))


@given(st.integers(1, 4), st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
def test_concat_split_round_trip_is_bitwise(rows, widths, seed):
    r = np.random.default_rng(seed)
    parts = [r.standard_normal((rows, w)) for w in widths]
    joined = T.concat([T.tensor(p) for p in parts], axis=1)
    for got, want in zip(T.split(joined, widths, axis=1), parts):
        assert got.data.tobytes() == want.tobytes()


def test_shared_node_accumulates_gradient():
    x = T.tensor([2.0], requires_grad=True)
    y = T.mul(x, x)
    T.sum(T.add(y, y)).backward()
    np.testing.assert_array_equal(x.grad, [8.0])


def test_shape_errors_are_specific():
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))
    with pytest.raises(T.ShapeError, match="split"):
        T.split(T.tensor(np.ones((2, 3))), [1, 1], axis=1)
    with pytest.raises(T.ShapeError, match="mse"):
        T.mse(T.tensor(np.ones(2)), T.tensor(np.ones(3)))
    with pytest.raises(ValueError, match="scalar"):
        T.tensor(np.ones(3), requires_grad=True).backward()


def test_no_grad_builds_no_graph():
    x = T.tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert y.parents == () and not y.requires_grad


def test_debug_mode_flags_non_finite():
    with T.debug_mode(True):
        with pytest.raises(FloatingPointError):
            T.scale(T.tensor([np.inf]), 1.0)


def test_finite_difference_oracle_detects_each_mutated_rule(rng):
    x = rng.standard_normal((3, 4))
    c = rng.standard_normal((6, 6))
    for op, build in CASES.items():
        leaf = T.tensor(x, requires_grad=True)
        r = T.constant(rng.standard_normal(build(leaf, c).shape))
        f = lambda: T.sum(T.mul(build(leaf, c), r))
        assert T.finite_difference_check(f, [leaf]) < 1e-6, op
        with T.mutated_rule(op):
            assert T.finite_difference_check(f, [leaf]) > 0.1, op


def test_forward_and_backward_are_deterministic(rng):
    x = rng.standard_normal((3, 4))

    def run():
        t = T.tensor(x, requires_grad=True)
        T.sum(T.silu(T.matmul(t, T.constant(np.eye(4))))).backward()
        return t.grad.tobytes()

    assert run() == run()
