import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wchj.expr import Expression, ExpressionError, diff, evaluate, parse, unparse


@pytest.mark.parametrize(
    "src, env, expected",
    [
        ("1 + 2*3", {}, 7.0),
        ("2^3^2", {}, 512.0),
        ("-2^2", {}, -4.0),
        ("(1 - 4) / 2", {}, -1.5),
        ("sin(pi/2) + cos(0) + tanh(0) + exp(0) + sqrt(4)", {}, 5.0),
        ("π", {}, math.pi),
        ("x*u_2 - u_1", {"x": 2.0, "u_1": 1.0, "u_2": 3.0}, 5.0),
    ],
)
def test_evaluate(src, env, expected):
    assert Expression(src)(**env) == pytest.approx(expected, rel=1e-15)


def test_vectorized():
    x = np.linspace(0, 1, 5)
    np.testing.assert_array_equal(Expression("cos(2*pi*x)")(x=x), np.cos(2 * np.pi * x))


@pytest.mark.parametrize("bad", ["1 +", "sin 2", "(1", "1 2", "x $ 2", "foo(1)"])
def test_syntax_errors(bad):
    with pytest.raises(ExpressionError):
        Expression(bad, {"x"})


def test_unknown_name():
    with pytest.raises(ExpressionError, match="unknown name 'z'"):
        Expression("x + z", {"x"})


def test_unbound_variable():
    with pytest.raises(ExpressionError, match="no value bound"):
        Expression("x")()


@pytest.mark.parametrize(
    "src, var, point",
    [
        ("sin(2*pi*x)*tanh(u_1)", "u_1", {"x": 0.3, "u_1": 0.7}),
        ("sin(2*pi*x)*tanh(u_1)", "x", {"x": 0.3, "u_1": 0.7}),
        ("0.5*(1 + 0.1*sin(2*pi*x))*p^2", "p", {"x": 0.25, "p": 1.3}),
        ("exp(-x)/(1 + x^2) - sqrt(x + 2)", "x", {"x": 0.4}),
        ("cos(x)^3", "x", {"x": 1.1}),
    ],
)
def test_diff_matches_central_difference(src, var, point):
    e = Expression(src)
    d = e.diff(var)
    h = 1e-6
    lo, hi = dict(point), dict(point)
    lo[var] -= h
    hi[var] += h
    fd = (e(**hi) - e(**lo)) / (2 * h)
    assert d(**point) == pytest.approx(fd, rel=1e-7, abs=1e-8)


def test_diff_variable_exponent_unsupported():
    with pytest.raises(ExpressionError):
        diff(parse("x^x"), "x")


def test_diff_constant_is_zero():
    assert Expression("u_2").diff("x").source == "0"


_atoms = st.one_of(
    st.sampled_from(["x", "u_1", "pi"]),
    st.floats(min_value=-5, max_value=5, allow_nan=False).map(lambda v: repr(round(v, 3))),
)


def _combine(children):
    return st.one_of(
        st.tuples(children, st.sampled_from(["+", "-", "*", "/", "^"]), children).map(lambda t: f"({t[0]}) {t[1]} ({t[2]})"),
        st.tuples(st.sampled_from(["sin", "cos", "tanh", "exp"]), children).map(lambda t: f"{t[0]}({t[1]})"),
        children.map(lambda c: f"-({c})"),
    )


def test_negative_zero_base():
    tree = parse("(-0.0)^x")
    assert parse(unparse(tree)) == tree


@settings(max_examples=200, deadline=None)
@given(st.recursive(_atoms, _combine, max_leaves=8))
def test_unparse_round_trip(src):
    tree = parse(src)
    again = parse(unparse(tree))
    assert again == tree
    assert unparse(again) == unparse(tree)


def test_canonical_source():
    assert Expression("2*(x+1)").source == "2 * (x + 1)"
    assert Expression("x - (u_1 - 1)").source == "x - (u_1 - 1)"
    assert Expression("(x - u_1) - 1").source == "x - u_1 - 1"
    assert evaluate(parse("2*pi"), {}) == 2 * math.pi
