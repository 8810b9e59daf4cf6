import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from delaymm.expr import (
    ExprDomainError,
    ExprError,
    ExprSyntaxError,
    eval_expr,
    parse_rate_expression,
    to_source,
)


def test_literal():
    e = parse_rate_expression("1")
    assert e.is_constant
    assert eval_expr(e) == 1.0


def test_composite_value():
    e = parse_rate_expression("2*exp(-a)*(1+0.5*cos(pi*x))")
    assert eval_expr(e, 0.0, 0.0, 123.0) == 3.0
    assert e.variables == {"a", "x"}
    # binary tree: 2, exp, neg, a, 1, 0.5, cos, pi, x and six operators
    assert e.node_count() == 14


def test_unbalanced_paren_offset():
    with pytest.raises(ExprSyntaxError) as info:
        parse_rate_expression("cos(pi*x")
    assert info.value.offset == 9


@pytest.mark.parametrize("src", ["foo+1", "x+y", "cosh(x)"])
def test_unknown_identifier(src):
    with pytest.raises(ExprError):
        parse_rate_expression(src)


@pytest.mark.parametrize("src", ["sin(x, a)", "min(1)", "exp()"])
def test_arity(src):
    with pytest.raises(ExprError):
        parse_rate_expression(src)


@pytest.mark.parametrize("src", ["", "1+", "(1", "1 2", "*x", "2..3"])
def test_syntax_errors(src):
    with pytest.raises(ExprError):
        parse_rate_expression(src)


@pytest.mark.parametrize(
    "src,point,value",
    [
        ("x+a*t", (0.5, 2.0, 3.0), 6.5),
        ("exp(-a)", (0.7, 0.0, 9.0), 1.0),
        ("min(1, 2+t)", (0.3, 0.4, -3.0), -1.0),
        ("2^3^2", (0, 0, 0), 512.0),
        ("-2^2", (0, 0, 0), -4.0),
        ("2^-1", (0, 0, 0), 0.5),
        ("max(x, a, t)", (1.0, 5.0, 2.0), 5.0),
        ("abs(-x)/sqrt(4)", (3.0, 0, 0), 1.5),
        ("1e-1*10", (0, 0, 0), 1.0),
    ],
)
def test_values(src, point, value):
    assert eval_expr(parse_rate_expression(src), *point) == pytest.approx(value, rel=1e-15)


def test_domain_error_names_point():
    e = parse_rate_expression("sqrt(x-0.5)")
    with pytest.raises(ExprDomainError, match="x=0.25"):
        eval_expr(e, np.array([0.75, 0.25]))
    with pytest.raises(ExprDomainError):
        eval_expr(parse_rate_expression("1/(x-1)"), 1.0)


def test_broadcasting_uses_only_present_variables():
    e = parse_rate_expression("cos(pi*x)")
    x = np.linspace(0, 1, 5)
    v = eval_expr(e, x[None, :], np.zeros((3, 1)), 0.0)
    assert np.shape(v) == (5,) or np.shape(v) == (1, 5)
    assert np.allclose(np.ravel(v), np.cos(math.pi * x))


_atoms = st.sampled_from(["x", "a", "t", "pi", "1", "2.5", "0.5"])


def _exprs():
    return st.recursive(
        _atoms,
        lambda sub: st.one_of(
            st.tuples(sub, st.sampled_from(["+", "-", "*"]), sub).map(lambda p: f"({p[0]}{p[1]}{p[2]})"),
            sub.map(lambda s: f"-{s}"),
            sub.map(lambda s: f"sin({s})"),
            sub.map(lambda s: f"exp(-abs({s}))"),
            st.tuples(sub, sub).map(lambda p: f"max({p[0]}, {p[1]})"),
        ),
        max_leaves=12,
    )


@given(_exprs(), st.floats(0, 1), st.floats(0, 5), st.floats(-1, 1))
def test_print_parse_idempotent(src, x, a, t):
    e1 = parse_rate_expression(src)
    e2 = parse_rate_expression(to_source(e1))
    assert e1.tree == e2.tree
    v1, v2 = eval_expr(e1, x, a, t), eval_expr(e2, x, a, t)
    assert v1 == v2


@given(_exprs(), st.floats(0, 1), st.floats(0, 5), st.floats(-1, 1))
def test_deterministic(src, x, a, t):
    e = parse_rate_expression(src)
    assert eval_expr(e, x, a, t) == eval_expr(e, x, a, t)
