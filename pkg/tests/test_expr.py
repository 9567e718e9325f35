import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskescape.expr import (BinOp, Call, ExprDomainError, ExprSyntaxError, Neg, Num, Var,
                             affine_form, compile_expr, eval_expr, parse_expr, to_text, variables)

names = st.sampled_from(["t", "x1_1", "x1_2", "x2_1", "u2_1"])
leaves = st.one_of(
    st.floats(min_value=0, max_value=1e6, allow_nan=False, allow_infinity=False).map(Num),
    names.map(Var),
)


def _tree(children):
    return st.one_of(
        children.map(Neg),
        st.builds(BinOp, st.sampled_from("+-*/^"), children, children),
        st.builds(lambda a: Call("tanh", (a,)), children),
        st.builds(lambda a, b: Call("max", (a, b)), children, children),
    )


exprs = st.recursive(leaves, _tree, max_leaves=12)


@settings(max_examples=300)
@given(exprs)
def test_print_parse_round_trip(e):
    assert parse_expr(to_text(e)) == e


def test_precedence_and_associativity():
    assert eval_expr(parse_expr("2 - 3 - 4"), {}) == -5
    assert eval_expr(parse_expr("2 ^ 3 ^ 2"), {}) == 512
    assert eval_expr(parse_expr("-2 ^ 2"), {}) == -4
    assert eval_expr(parse_expr("1 + 2 * 3"), {}) == 7


def test_functions_and_variables():
    e = parse_expr("sin(x1_1) + max(u2_1, t) * exp(0)")
    assert variables(e) == {"x1_1", "u2_1", "t"}
    assert eval_expr(e, {"x1_1": 0.5, "u2_1": -1.0, "t": 2.0}) == pytest.approx(math.sin(0.5) + 2.0)


@pytest.mark.parametrize("text", ["1 +", "foo(1)", "x0_1", "(1", "1 2", "sin(1, 2)", "y3"])
def test_syntax_errors(text):
    with pytest.raises(ExprSyntaxError):
        parse_expr(text)


def test_domain_error_names_subexpression():
    with pytest.raises(ExprDomainError) as info:
        eval_expr(parse_expr("1 + sqrt(x1_1)"), {"x1_1": -1.0})
    assert "sqrt" in str(info.value)


def test_compile_vectorizes():
    import numpy as np
    f = compile_expr(parse_expr("2*x1_1 + 1"))
    assert np.allclose(f({"x1_1": np.array([0.0, 1.0])}), [1.0, 3.0])


def test_affine_form():
    coeffs, const = affine_form(parse_expr("1 + 0.3*x1_1 - 2*u2_1"))
    assert const == pytest.approx(1.0)
    assert coeffs == pytest.approx({"x1_1": 0.3, "u2_1": -2.0})
    assert affine_form(parse_expr("x1_1 * x1_1")) is None
