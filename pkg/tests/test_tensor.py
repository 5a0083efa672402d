import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynspot import tensor as tn
from dynspot.tensor import NonFiniteError, ShapeError, Tape, Tensor, backward, grad_check


def grads_of(fn, *xs):
    leaves = [Tensor(x, requires_grad=True) for x in xs]
    with Tape() as tape:
        out = fn(*leaves)
    g = backward(out, tape)
    return out, [g[t] for t in leaves]


def test_sigmoid_at_zero():
    assert tn.sigmoid(Tensor(0.0)).item() == 0.5


def test_softmax_uniform_row():
    out = tn.softmax(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], rtol=0, atol=1e-15)


def test_matmul_of_ones():
    out = tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_sum_gradient_is_ones():
    _, (g,) = grads_of(lambda x: tn.sum(x), np.random.default_rng(0).normal(size=(3, 4, 2)))
    np.testing.assert_array_equal(g, np.ones((3, 4, 2)))


def test_sigmoid_gradient_at_zero():
    _, (g,) = grads_of(lambda x: tn.sigmoid(x), np.array(0.0))
    assert g == 0.25


def test_mean_squared_error_matches_finite_differences():
    rng = np.random.default_rng(1)
    y = Tensor(rng.uniform(-1, 1, (4, 4)))

    def fn(x):
        d = tn.sub(x, y)
        return tn.mean(tn.mul(d, d))

    assert grad_check(fn, Tensor(rng.uniform(-1, 1, (4, 4)))) < 1e-6


def test_affine_map_is_exact():
    rng = np.random.default_rng(2)
    w = Tensor(rng.normal(size=(3, 2)))
    b = Tensor(rng.normal(size=2))
    assert grad_check(lambda x: tn.sum(tn.add(tn.matmul(x, w), b)), Tensor(rng.normal(size=(4, 3)))) < 1e-9


def test_constant_function_has_zero_gradient():
    c = Tensor(3.0)
    _, (g,) = grads_of(lambda x: tn.add(tn.sum(tn.scale(x, 0.0)), c), np.ones(5))
    np.testing.assert_array_equal(g, np.zeros(5))


def test_unused_leaf_gets_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        tn.sum(b)  # recorded but not part of the loss
        loss = tn.sum(tn.mul(a, a))
    g = backward(loss, tape)
    np.testing.assert_array_equal(g[a], [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(g[b], np.zeros(2))


def test_replay_is_bit_identical():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    with Tape() as tape:
        loss = tn.sum(tn.softmax(tn.matmul(x, w)))
    first = backward(loss, tape)
    second = backward(loss, tape)
    for t in (x, w):
        assert np.array_equal(first[t], second[t])


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = tn.scale(x, 2.0)
    with pytest.raises(ShapeError, match="scalar"):
        backward(y, tape)


def test_shape_mismatch_names_operation():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        tn.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_non_finite_result_names_operation():
    with pytest.raises(NonFiniteError) as info:
        tn.log(Tensor([0.0, 1.0]))
    assert info.value.op == "log"


def test_tensors_are_immutable():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


def test_source_array_is_copied():
    src = np.zeros(3)
    t = Tensor(src)
    src[0] = 5.0
    assert t.data[0] == 0.0


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda x: tn.sum(x), Tensor(np.ones(2)), step=0.0)


def test_layer_norm_values():
    x = Tensor([[1.0, 2.0, 3.0, 4.0]])
    out = tn.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    xs = np.array([1.0, 2.0, 3.0, 4.0])
    expect = (xs - xs.mean()) / np.sqrt(xs.var() + 1e-5)
    np.testing.assert_allclose(out.data[0], expect, rtol=1e-14)


def test_take_accumulates_repeated_rows():
    _, (g,) = grads_of(lambda x: tn.sum(tn.take(x, [0, 0, 2])), np.ones((3, 2)))
    np.testing.assert_array_equal(g, [[2, 2], [0, 0], [1, 1]])


def test_concat_splits_gradient():
    def fn(a, b):
        return tn.sum(tn.mul(tn.concat([a, b], axis=1), Tensor([[1.0, 2.0, 3.0]])))

    _, (ga, gb) = grads_of(fn, np.ones((1, 1)), np.ones((1, 2)))
    np.testing.assert_array_equal(ga, [[1.0]])
    np.testing.assert_array_equal(gb, [[2.0, 3.0]])


UNARY = {
    "sigmoid": tn.sigmoid,
    "relu": tn.relu,
    "softplus": tn.softplus,
    "sin": tn.sin,
    "cos": tn.cos,
    "absolute": tn.absolute,
    "softmax": tn.softmax,
    "log": lambda x: tn.log(tn.add(tn.mul(x, x), Tensor(1.0))),
    "layer_norm": lambda x: tn.layer_norm(x, Tensor(np.linspace(0.5, 1.5, 4)), Tensor(np.arange(4.0))),
    "transpose": lambda x: tn.mul(tn.transpose(x), Tensor(np.arange(12.0).reshape(4, 3))),
    "reshape": lambda x: tn.mul(tn.reshape(x, (2, 6)), Tensor(np.arange(12.0).reshape(2, 6))),
    "mean_axis": lambda x: tn.mean(tn.mul(x, x), axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_primitive_gradients(name):
    op = UNARY[name]
    rng = np.random.default_rng(sorted(UNARY).index(name))
    x = rng.uniform(-1, 1, (3, 4))
    if name in ("relu", "absolute"):
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # stay off the kink
    weights = Tensor(rng.normal(size=op(Tensor(x)).shape))
    assert grad_check(lambda t: tn.sum(tn.mul(op(t), weights)), Tensor(x)) < 1e-7


@pytest.mark.parametrize("shape_a,shape_b", [((3, 4), (4,)), ((2, 3, 4), (1, 4)), ((3, 1), (1, 5))])
@pytest.mark.parametrize("op", [tn.add, tn.sub, tn.mul])
def test_broadcast_binary_gradients(op, shape_a, shape_b):
    rng = np.random.default_rng(4)
    a, b = rng.uniform(-1, 1, shape_a), rng.uniform(-1, 1, shape_b)
    w = Tensor(rng.normal(size=np.broadcast_shapes(shape_a, shape_b)))
    assert grad_check(lambda x, y: tn.sum(tn.mul(op(x, y), w)), [Tensor(a), Tensor(b)]) < 1e-7


def test_batched_matmul_gradient():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (4, 5))
    assert grad_check(lambda x, y: tn.sum(tn.sin(tn.matmul(x, y))), [Tensor(a), Tensor(b)]) < 1e-7


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-1, 1)))
def test_composed_program_matches_finite_differences(x):
    w = Tensor(np.linspace(-1, 1, 20).reshape(4, 5))

    def fn(t):
        h = tn.layer_norm(tn.matmul(t, w), Tensor(np.ones(5)), Tensor(np.zeros(5)))
        return tn.sum(tn.mul(tn.softmax(h), tn.sigmoid(h)))

    assert grad_check(fn, Tensor(x)) < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=st.floats(-50, 50)))
def test_sigmoid_and_softmax_ranges(x):
    s = tn.sigmoid(Tensor(x)).data
    assert np.all((s >= 0) & (s <= 1))
    p = tn.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=1e-12)
