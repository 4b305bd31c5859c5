import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedci import tensor as tn
from fedci.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_tensor_rejects_bad_shapes():
    with pytest.raises(tn.DimensionError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(tn.DimensionError):
        Tensor(np.zeros((2, 0)))


def test_linear_examples():
    y = tn.linear(Tensor([1.0, 2.0]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(y.data, [1.0, 2.0])
    y = tn.linear(Tensor([1.0, 1.0]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(y.data, [6.0])


def test_linear_shape_error_names_shapes():
    with pytest.raises(tn.DimensionError, match=r"\(3, 2\).*\(4,\)"):
        tn.linear(Tensor(np.ones(4)), Tensor(np.ones((3, 2))), Tensor(np.ones(2)))


def test_linear_grad_check():
    rng = np.random.default_rng(0)
    p = {"x": rng.normal(size=(3, 4, 5)), "W": rng.normal(size=(5, 2)), "b": rng.normal(size=2)}
    err = tn.grad_check(lambda v: tn.total(tn.linear(v["x"], v["W"], v["b"])), p)
    assert err <= 1e-6


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(tn.layer_norm(Tensor([5.0, 5.0, 5.0]), one, zero).data, [0, 0, 0])
    y = tn.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(y.data, [-1.0, 1.0], atol=1e-9)


def test_layer_norm_moments():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, size=(6, 16))
    y = tn.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(y.mean(axis=-1)).max() <= 1e-9
    # eps=1e-5 shrinks the variance by var/(var+eps)
    assert np.abs(y.var(axis=-1) - 1).max() <= 1e-5


def probe(y, seed=99):
    """Scalar sum(y @ w) with a fixed random column w; exercises every output element."""
    w = np.random.default_rng(seed).normal(size=(y.shape[-1], 1))
    return tn.total(tn.linear(y, Tensor(w)))


def test_layer_norm_grad_check():
    rng = np.random.default_rng(2)
    p = {"x": rng.normal(size=(4, 7)), "g": rng.normal(size=7), "b": rng.normal(size=7)}
    assert tn.grad_check(lambda v: probe(tn.layer_norm(v["x"], v["g"], v["b"])), p) <= 1e-6


def test_relu_and_dropout_examples():
    np.testing.assert_array_equal(tn.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = Tensor(np.arange(6.0))
    assert tn.dropout(x, 0.0, np.random.default_rng(0), training=True) is x
    assert tn.dropout(x, 0.5, None, training=False) is x


def test_dropout_rate_and_reproducibility():
    x = Tensor(np.ones((200, 500)))
    a = tn.dropout(x, 0.3, np.random.default_rng(5), training=True).data
    b = tn.dropout(x, 0.3, np.random.default_rng(5), training=True).data
    np.testing.assert_array_equal(a, b)
    assert abs((a == 0).mean() - 0.3) < 0.01
    assert set(np.unique(a)) == {0.0, a.max()}
    assert abs(a.mean() - 1.0) < 0.01


def test_dropout_rejects_p_one():
    with pytest.raises(ValueError):
        tn.dropout(Tensor(np.ones(3)), 1.0, np.random.default_rng(0), training=True)


def test_fused_block_matches_reference_ops():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3, 8))
    g, b = rng.normal(size=8), rng.normal(size=8)
    outs = []
    for fused in (True, False):
        xv, gv, bv = leaf(x), leaf(g), leaf(b)
        rng_drop = np.random.default_rng(11)
        if fused:
            y = tn.norm_relu_dropout(xv, gv, bv, 0.2, rng_drop, training=True)
        else:
            y = tn.dropout(tn.relu(tn.layer_norm(xv, gv, bv)), 0.2, rng_drop, training=True)
        probe(y).backward()
        outs.append((y.data, xv.grad, gv.grad, bv.grad))
    for a, c in zip(*outs):
        np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-12)


def test_gather_rows_examples_and_errors():
    table = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(tn.gather_rows(table, np.array([1, 0])).data, [[3, 4], [1, 2]])
    np.testing.assert_array_equal(tn.gather_rows(table, np.zeros(3, int)).data, [[1, 2]] * 3)
    with pytest.raises(IndexError, match="7"):
        tn.gather_rows(table, np.array([0, 7]))


def test_gather_rows_grad_check_and_untouched_rows():
    rng = np.random.default_rng(4)
    idx = np.array([[0, 2], [2, 2]])
    p = {"t": rng.normal(size=(4, 3))}
    f = lambda v: probe(tn.gather_rows(v["t"], idx))
    assert tn.grad_check(f, p) <= 1e-6
    lv = tn.leaves(p)
    f(lv).backward()
    assert np.all(lv["t"].grad[[1, 3]] == 0)


def test_concat_split_roundtrip():
    a, b = leaf(np.ones((2, 1))), leaf(np.full((2, 3), 2.0))
    c = tn.concat_last([a, b])
    np.testing.assert_array_equal(tn.concat_last([Tensor([[1.0]]), Tensor([[2.0]])]).data, [[1.0, 2.0]])
    assert tn.concat_last([a]) is a
    g = np.arange(8.0).reshape(2, 4)
    c.backward(g)
    np.testing.assert_array_equal(np.concatenate([a.grad, b.grad], axis=-1), g)
    parts = tn.split_last(c.data, [1, 3])
    np.testing.assert_array_equal(parts[1], b.data)
    with pytest.raises(tn.DimensionError):
        tn.concat_last([Tensor(np.ones((2, 1))), Tensor(np.ones((3, 1)))])


def test_linear_concat_matches_concat_of_broadcasts():
    rng = np.random.default_rng(3)
    p = {"a": rng.normal(size=(2, 3, 1, 4)), "b": rng.normal(size=(1, 1, 5, 2)),
         "W": rng.normal(size=(6, 3)), "c": rng.normal(size=3)}
    lead = (2, 3, 5)

    def ref(v):
        cat = tn.concat_last([tn.broadcast_to(v["a"], lead + (4,)), tn.broadcast_to(v["b"], lead + (2,))])
        return tn.linear(cat, v["W"], v["c"])

    got = tn.linear_concat([Tensor(p["a"]), Tensor(p["b"])], Tensor(p["W"]), Tensor(p["c"]), lead)
    np.testing.assert_allclose(got.data, ref(tn.leaves(p)).data, rtol=1e-12, atol=1e-12)
    f = lambda v: probe(tn.linear_concat([v["a"], v["b"]], v["W"], v["c"], lead))
    assert tn.grad_check(f, p) <= 1e-6
    with pytest.raises(tn.DimensionError):
        tn.linear_concat([Tensor(p["a"])], Tensor(p["W"]), Tensor(p["c"]), lead)
    with pytest.raises(tn.DimensionError):
        tn.linear_concat([Tensor(p["a"]), Tensor(p["b"])], Tensor(p["W"]), Tensor(p["c"]), (2, 4, 5))


def test_swap_time_hidden():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
    y = tn.swap_time_hidden(Tensor(x))
    assert y.shape == (2, 5, 4, 3)
    np.testing.assert_array_equal(tn.swap_time_hidden(y).data, x)
    np.testing.assert_array_equal(tn.swap_time_hidden(Tensor(np.ones((1, 1, 1, 1)))).data, np.ones((1, 1, 1, 1)))
    with pytest.raises(tn.DimensionError):
        tn.swap_time_hidden(Tensor(np.ones((2, 3))))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(*[st.integers(1, 4)] * 4), elements=st.floats(-1e3, 1e3)))
def test_swap_is_involution(x):
    np.testing.assert_array_equal(tn.swap_time_hidden(tn.swap_time_hidden(Tensor(x))).data, x)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=st.floats(-10, 10)))
def test_grad_check_of_sum_is_exact(x):
    # only floating-point rounding of f(x+h)-f(x-h) remains, about eps*abs(f)/h
    assert tn.grad_check(lambda v: tn.total(v["x"]), {"x": x}) <= 1e-8


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    st_ = tn.AdamState(lr=0.1)
    tn.adam_step(p, {"w": np.zeros(2)}, st_)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert st_.t == 1


def test_adam_first_step_is_lr():
    p = {"w": np.array([0.5])}
    tn.adam_step(p, {"w": np.array([1.0])}, tn.AdamState(lr=1e-3))
    assert abs(p["w"][0] - (0.5 - 1e-3)) < 1e-9


def test_adam_minimizes_square():
    p = {"x": np.array([3.0])}
    st_ = tn.AdamState(lr=0.01)
    for _ in range(2000):
        tn.adam_step(p, {"x": 2 * p["x"]}, st_)
    assert abs(p["x"][0]) < 1e-3


def test_adam_rejects_non_finite_with_name():
    with pytest.raises(FloatingPointError, match="encoder.0.weight"):
        tn.adam_step({"encoder.0.weight": np.zeros(2)}, {"encoder.0.weight": np.array([1.0, np.nan])}, tn.AdamState())


def test_mae_subgradient():
    pred = leaf([1.0, 3.0, 2.0])
    tn.mean_abs_error(pred, np.array([2.0, 1.0, 2.0])).backward()
    np.testing.assert_allclose(pred.grad, [-1 / 3, 1 / 3, 0.0])


def test_grad_check_detects_a_wrong_backward():
    def bad_square(x):
        return Tensor(x.data ** 2, requires_grad=True, _parents=(x,),
                      _backward=lambda g: tn._accumulate(x, g * x.data))  # missing factor 2

    p = {"x": np.array([1.0, 2.0])}
    assert tn.grad_check(lambda v: tn.total(bad_square(v["x"])), p) > 0.4
