import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedgc import tensor as T
from fedgc.tensor import ContractError, DimensionError, NumericError, Tape

from oracles import grads_agree, rel_err, stencil_grad

RNG = np.random.default_rng(1234)


def _pos(shape):
    return RNG.uniform(0.5, 2.0, size=shape)


def _any(shape):
    return RNG.normal(size=shape)


def _away_from_zero(shape):
    x = RNG.uniform(0.2, 1.5, size=shape)
    return x * RNG.choice([-1.0, 1.0], size=shape)


# (name, builder(args) -> Tensor, list of input arrays)
LABELS = np.array([0, 2, 1, 2])
MASK = np.array([True, False, True, True])
CASES = [
    ("matmul", lambda a, b: T.matmul(a, b), [_any((3, 4)), _any((4, 2))]),
    ("add", lambda a, b: T.add(a, b), [_any((3, 4)), _any((1, 4))]),
    ("sub", lambda a, b: T.sub(a, b), [_any((3, 4)), _any((3, 1))]),
    ("scale", lambda a: T.scale(a, -1.7), [_any((2, 3))]),
    ("mul", lambda a, b: T.mul(a, b), [_any((3, 4)), _any((3, 4))]),
    ("div", lambda a, b: T.div(a, b), [_any((3, 4)), _pos((3, 4))]),
    ("relu", lambda a: T.relu(a), [_away_from_zero((3, 4))]),
    ("sigmoid", lambda a: T.sigmoid(a), [_any((3, 4))]),
    ("softplus", lambda a: T.softplus(a), [_any((3, 4))]),
    ("exp", lambda a: T.exp(a), [_any((3, 4))]),
    ("log", lambda a: T.log(a), [_pos((3, 4))]),
    ("softmax", lambda a: T.softmax(a), [_any((3, 4))]),
    ("log_softmax", lambda a: T.log_softmax(a), [_any((3, 4))]),
    ("sum", lambda a: T.tsum(a, axis=0, keepdims=True), [_any((3, 4))]),
    ("mean", lambda a: T.mean(a, axis=1), [_any((3, 4))]),
    ("masked_cross_entropy", lambda a: T.masked_cross_entropy(a, LABELS, MASK), [_any((4, 3))]),
    ("square", lambda a: T.square(a), [_any((3, 4))]),
    ("sqrt", lambda a: T.sqrt(a), [_pos((3, 4))]),
    ("concat_cols", lambda a, b: T.concat_cols([a, b]), [_any((3, 2)), _any((3, 3))]),
    ("slice_cols", lambda a: T.slice_cols(a, 1, 3), [_any((3, 4))]),
    ("pad_cols", lambda a: T.pad_cols(a, 1, 5), [_any((3, 2))]),
    ("gather_rows", lambda a: T.gather_rows(a, [2, 0, 2, 1]), [_any((3, 4))]),
    ("scatter_rows", lambda a: T.scatter_rows(a, [1, 1, 0], 3), [_any((3, 4))]),
    ("transpose", lambda a: T.transpose(a), [_any((3, 4))]),
    ("reshape", lambda a: T.reshape(a, (2, 6)), [_any((3, 4))]),
    ("broadcast_to", lambda a: T.broadcast_to(a, (3, 4)), [_any((1, 4))]),
]


def test_every_primitive_has_a_gradcheck():
    assert {c[0] for c in CASES} == set(T.PRIMITIVES)


def _first_and_second_order(fn, inputs):
    """Autodiff gradient of ``sum(fn(*inputs) * R)`` and of its squared-norm gradient."""
    out_shape = fn(*inputs).shape
    r = np.random.default_rng(7).normal(size=out_shape)

    def scalar(*xs):
        return T.tsum(T.mul(fn(*xs), r))

    with Tape() as tape:
        ws = [tape.watch(x) for x in inputs]
        grads = tape.gradient(scalar(*ws), ws)
    return [g.value for g in grads], scalar


@pytest.mark.parametrize("name,fn,inputs", CASES, ids=[c[0] for c in CASES])
def test_primitive_gradcheck(name, fn, inputs):
    grads, scalar = _first_and_second_order(fn, inputs)
    for k, x in enumerate(inputs):
        def f(xk, k=k):
            xs = list(inputs)
            xs[k] = xk
            return scalar(*xs).item()

        assert rel_err(grads[k], stencil_grad(f, x)) < 1e-4, name


@pytest.mark.parametrize(
    "name,fn,inputs",
    [c for c in CASES if c[0] not in ("relu",)],
    ids=[c[0] for c in CASES if c[0] not in ("relu",)],
)
def test_primitive_second_order(name, fn, inputs):
    # d/dx ||d/dx sum(f(x) * r)||^2 through the recorded backward pass
    r = np.random.default_rng(7).normal(size=fn(*inputs).shape)

    def penalty(*xs, as_value=False):
        with Tape() as tape:
            ws = [tape.watch(x) for x in xs]
            g = tape.gradient(T.tsum(T.mul(fn(*ws), r)), ws, as_graph=True)
            total = T.tsum(T.square(g[0]))
            for gk in g[1:]:
                total = T.add(total, T.tsum(T.square(gk)))
            if as_value:
                return total.item()
            return [h.value for h in tape.gradient(total, ws)]

    grads = penalty(*inputs)
    for k, x in enumerate(inputs):
        def f(xk, k=k):
            xs = list(inputs)
            xs[k] = xk
            return penalty(*xs, as_value=True)

        assert grads_agree(grads[k], stencil_grad(f, x)), name


def test_relu_subgradient_at_zero_is_zero():
    with Tape() as tape:
        x = tape.watch(np.array([[-1.0, 0.0, 2.0]]))
        (g,) = tape.gradient(T.tsum(T.relu(x)), [x])
    np.testing.assert_array_equal(g.value, [[0.0, 0.0, 1.0]])


def test_non_scalar_output_rejected():
    with Tape() as tape:
        x = tape.watch(np.ones((2, 2)))
        with pytest.raises(ContractError):
            tape.gradient(T.square(x), [x])


def test_unreachable_target_gets_zero_gradient():
    with Tape() as tape:
        x = tape.watch(np.ones((2, 2)))
        y = tape.watch(np.ones((3, 1)))
        gx, gy = tape.gradient(T.tsum(T.square(x)), [x, y])
    np.testing.assert_array_equal(gy.value, np.zeros((3, 1)))
    np.testing.assert_array_equal(gx.value, 2 * np.ones((2, 2)))


def test_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        T.add(np.ones((2, 3)), np.ones((3, 2)))


@pytest.mark.filterwarnings("ignore:invalid value")
def test_non_finite_values_raise():
    with pytest.raises(NumericError):
        T.log(np.array([[0.0]]))
    with pytest.raises(NumericError):
        T.finite_diff(lambda x: float(np.log(x[0])), np.array([0.0]))


def test_empty_cross_entropy_mask_rejected():
    with pytest.raises(ContractError):
        T.masked_cross_entropy(np.zeros((2, 2)), [0, 1], [False, False])


def test_tensor_values_read_only():
    t = T.Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.value[0] = 2.0


def test_record_dispatch_matches_direct_call():
    a, b = _any((2, 3)), _any((3, 2))
    np.testing.assert_array_equal(T.record("matmul", [a, b]).value, a @ b)
    with pytest.raises(ContractError):
        T.record("no_such_op", [a])


def test_finite_diff_quadratic():
    # d/dx sum(x^2) = 2x
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(T.finite_diff(lambda v: float(np.sum(v * v)), x), 2 * x, atol=1e-7)


def test_gradient_outside_tape_scope_records_nothing():
    with Tape() as tape:
        x = tape.watch(np.ones((2, 2)))
    y = T.square(x)
    assert y.tape is None


matrices = arrays(np.float64, (3, 2), elements=st.floats(-3, 3, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(matrices, st.floats(-2, 2, allow_nan=False))
def test_gradient_is_linear_in_the_output(x, a):
    def grad_of(k):
        with Tape() as tape:
            w = tape.watch(x)
            (g,) = tape.gradient(T.scale(T.tsum(T.mul(T.sigmoid(w), w)), k), [w])
        return g.value

    np.testing.assert_allclose(grad_of(a), a * grad_of(1.0), rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(matrices, matrices)
def test_sum_rule(x, y):
    with Tape() as tape:
        w = tape.watch(x)
        f = T.tsum(T.square(w))
        g = T.tsum(T.mul(w, y))
        (both,) = tape.gradient(T.add(f, g), [w])
        (gf,) = tape.gradient(f, [w])
        (gg,) = tape.gradient(g, [w])
    np.testing.assert_allclose(both.value, gf.value + gg.value, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-30, 30, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    p = T.softmax(x).value
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-12)
