import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amp import autodiff as ad
from amp.autodiff import ContractError, DomainError, Parameter, ShapeError, Tensor

OP_TOL = 1e-5


def check(f, point, tol=OP_TOL):
    report = ad.grad_check(f, point, tolerance=tol)
    assert report.passed, f"relative error {report.max_rel_error:.3g}"
    return report


# --- elementwise -----------------------------------------------------------

UNARY = {
    "neg": (ad.neg, lambda r: r.normal(size=(3, 4))),
    "exp": (ad.exp, lambda r: r.normal(size=(3, 4))),
    "log": (ad.log, lambda r: r.uniform(0.5, 2.0, (3, 4))),
    "sigmoid": (ad.sigmoid, lambda r: r.normal(size=(3, 4))),
    "tanh": (ad.tanh, lambda r: r.normal(size=(3, 4))),
    "relu": (ad.relu, lambda r: r.choice([-1, 1], (3, 4)) * r.uniform(0.1, 2.0, (3, 4))),
    "square": (ad.square, lambda r: r.normal(size=(3, 4))),
    "sqrt": (ad.sqrt, lambda r: r.uniform(0.5, 2.0, (3, 4))),
    "erf": (ad.erf, lambda r: r.normal(size=(3, 4))),
    "xlogx": (ad.xlogx, lambda r: r.uniform(0.1, 2.0, (3, 4))),
    "transpose": (ad.transpose, lambda r: r.normal(size=(3, 4))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    op, sample = UNARY[name]
    weights = rng.normal(size=(4, 3) if name == "transpose" else (3, 4))
    check(lambda x: (op(x) * Tensor(weights)).sum(), sample(rng))


BINARY = {"add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("which", ["left", "right", "scalar_left", "scalar_right"])
def test_binary_gradients(name, which, rng):
    op = BINARY[name]
    other = rng.uniform(0.5, 1.5, (3, 2))
    point = rng.uniform(0.5, 1.5, (3, 2))
    w = Tensor(rng.normal(size=(3, 2)))
    if which == "left":
        f = lambda x: (op(x, Tensor(other)) * w).sum()
    elif which == "right":
        f = lambda x: (op(Tensor(other), x) * w).sum()
    elif which == "scalar_left":
        point = np.array([0.7])
        f = lambda x: (op(x, Tensor(other)) * w).sum()
    else:
        point = np.array([1.3])
        f = lambda x: (op(Tensor(other), x) * w).sum()
    check(f, point)


def test_erf_diff_gradients_both_tails(rng):
    for shift in (-6.0, 0.0, 6.0):
        lo = rng.normal(size=5) + shift
        hi = lo + rng.uniform(0.1, 1.0, 5)
        check(lambda x: ad.erf_diff(x, Tensor(hi)).sum() * 1e6, lo)
        check(lambda x: ad.erf_diff(Tensor(lo), x).sum() * 1e6, hi)


def test_erf_diff_accuracy_in_tail():
    import mpmath

    lo, hi = 7.0, 7.5
    exact = float(mpmath.erfc(lo) - mpmath.erfc(hi))
    got = ad.erf_diff(Tensor([lo]), Tensor([hi])).item()
    assert got == pytest.approx(exact, rel=1e-12)
    got = ad.erf_diff(Tensor([-hi]), Tensor([-lo])).item()
    assert got == pytest.approx(exact, rel=1e-12)


# --- structural ------------------------------------------------------------

def test_matmul_gradients(rng):
    b = rng.normal(size=(4, 2))
    a = rng.normal(size=(3, 4))
    w = Tensor(rng.normal(size=(3, 2)))
    check(lambda x: (ad.matmul(x, Tensor(b)) * w).sum(), a)
    check(lambda x: (ad.matmul(Tensor(a), x) * w).sum(), b)


def test_reshape_add_bias_scale_rows(rng):
    w = Tensor(rng.normal(size=(2, 6)))
    check(lambda x: (ad.reshape(x, (2, 6)) * w).sum(), rng.normal(size=(3, 4)))
    m = rng.normal(size=(3, 4))
    w2 = Tensor(rng.normal(size=(3, 4)))
    bias = Tensor(rng.normal(size=4))
    check(lambda x: (ad.add_bias(x, bias) * w2).sum(), m)
    check(lambda x: (ad.add_bias(Tensor(m), x) * w2).sum(), rng.normal(size=4))
    rows = rng.normal(size=3)
    check(lambda x: (ad.scale_rows(x, rows) * w2).sum(), m)


@pytest.mark.parametrize("kind", ["sum", "mean"])
@pytest.mark.parametrize("axis", [None, 0, 1])
def test_reductions(kind, axis, rng):
    m = rng.normal(size=(3, 4))
    out_len = {None: 1, 0: 4, 1: 3}[axis]
    w = Tensor(rng.normal(size=out_len))
    check(lambda x: (ad.reduce(kind, x, axis) * w).sum(), m)


def test_sum_squares(rng):
    other = Tensor(rng.normal(size=(2, 2)))
    check(lambda x: ad.sum_squares([x, other]), rng.normal(size=(3,)))
    a, b = rng.normal(size=(2, 3)), rng.normal(size=4)
    assert ad.sum_squares([Tensor(a), Tensor(b)]).item() == pytest.approx(np.sum(a * a) + np.sum(b * b))


def test_gather_and_scatter(rng):
    idx = np.array([2, 0, 2, 1, 2])
    w = Tensor(rng.normal(size=(5, 2)))
    check(lambda x: (ad.gather(x, idx) * w).sum(), rng.normal(size=(3, 2)))
    dest = np.array([0, 1, 1, 3, 3])
    w4 = Tensor(rng.normal(size=(4, 2)))
    for kind in ("sum", "mean"):
        check(lambda x: (ad.scatter_aggregate(x, dest, 4, kind) * w4).sum(), rng.normal(size=(5, 2)))


@pytest.mark.parametrize("weighted", [False, True])
def test_propagate_gradient_and_value(weighted, rng):
    src = np.array([0, 1, 1, 2, 3, 0])
    dst = np.array([1, 0, 2, 1, 0, 3])
    weights = rng.uniform(0.1, 1.0, 6) if weighted else None
    values = rng.normal(size=(4, 3))
    w = Tensor(rng.normal(size=(4, 3)))
    check(lambda x: (ad.propagate(x, src, dst, 4, weights) * w).sum(), values)
    expected = np.zeros((4, 3))
    for e in range(6):
        expected[dst[e]] += (1.0 if weights is None else weights[e]) * values[src[e]]
    np.testing.assert_allclose(ad.propagate(Tensor(values), src, dst, 4, weights).data, expected, atol=1e-14)


def test_composite_chain(rng):
    b = Tensor(rng.normal(size=(3, 3)))

    def f(x):
        h = ad.tanh(ad.matmul(x, b))
        return ad.log(ad.add(ad.exp(h), 1.0)).mean() + ad.sigmoid(h).sum() * 0.3

    check(f, rng.normal(size=(4, 3)))


# --- tape semantics ----------------------------------------------------------

def test_backward_accumulates_and_frees():
    p = Parameter(np.array([2.0, 3.0]), "p")
    y = (p * p).sum()
    ad.backward(y)
    np.testing.assert_array_equal(p.grad, [4.0, 6.0])
    assert len(ad.current_tape()) == 0
    ad.backward((p * 3.0).sum())
    np.testing.assert_array_equal(p.grad, [7.0, 9.0])
    p.zero_grad()
    np.testing.assert_array_equal(p.grad, [0.0, 0.0])


def test_reused_subexpression_fans_in():
    p = Parameter(np.array([1.5]), "p")
    h = ad.tanh(p)
    ad.backward(h * h + h)
    t = math.tanh(1.5)
    assert p.grad[0] == pytest.approx((2 * t + 1) * (1 - t * t))


def test_vjp_keeps_tape_and_no_grad_records_nothing():
    p = Parameter(np.ones((2, 2)), "p")
    y = ad.square(p)
    ad.vjp(y, np.eye(2))
    assert len(ad.current_tape()) == 1
    ad.vjp(y, np.eye(2))
    np.testing.assert_array_equal(p.grad, 4 * np.eye(2))
    ad.reset_tape()
    with ad.no_grad():
        z = ad.square(p)
    assert not z.requires_grad and len(ad.current_tape()) == 0


def test_numpy_operand_dispatches_to_tensor():
    t = Tensor([1.0, 2.0])
    out = np.array([3.0, 4.0]) + t
    assert isinstance(out, Tensor)
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


# --- errors ----------------------------------------------------------------

def test_shape_and_domain_errors():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(2)))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 2, 2)))
    with pytest.raises(DomainError) as exc:
        ad.log(Tensor([[1.0, -1.0]]))
    assert exc.value.index == (0, 1)
    with pytest.raises(DomainError):
        ad.sqrt(Tensor([-1.0]))
    with pytest.raises(DomainError):
        ad.div(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(ContractError):
        ad.backward(Tensor(np.ones(2), requires_grad=True) * 2.0)
    with pytest.raises(ContractError):
        ad.elementwise("cube", Tensor([1.0]))
    with pytest.raises(IndexError):
        ad.gather(Tensor(np.ones(3)), [3])
    with pytest.raises(IndexError):
        ad.propagate(Tensor(np.ones((2, 1))), [0], [5], 2)


# --- properties ------------------------------------------------------------

finite = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_linearity_of_gradients(a, b):
    p = Parameter(a.copy(), "p")
    ad.backward((ad.tanh(p) * Tensor(b)).sum())
    np.testing.assert_allclose(p.grad, b * (1 - np.tanh(a) ** 2), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 2), elements=finite), st.lists(st.integers(0, 3), min_size=1, max_size=8))
def test_gather_scatter_adjoint(values, index):
    """<gather(x), y> == <x, scatter(y)>: the two ops are adjoint."""
    idx = np.array(index)
    y = np.linspace(-1, 1, 2 * len(idx)).reshape(len(idx), 2)
    lhs = np.sum(ad.gather(Tensor(values), idx).data * y)
    rhs = np.sum(values * ad.scatter_aggregate(Tensor(y), idx, 4).data)
    assert lhs == pytest.approx(rhs, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(0, 4)))
def test_xlogx_matches_definition(x):
    expected = np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)
    np.testing.assert_allclose(ad.xlogx(Tensor(x)).data, expected, atol=1e-14)
