import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contacthj.expr import (EvaluationError, Expression, ExpressionSyntaxError, UnknownIdentifierError,
                            parse_function_of_x)


def ev(text, x=0.0, p=0.0, u=0.0):
    e = Expression(text, 1)
    return float(e.value(np.array([x]), np.array([p]), u))


def test_precedence_and_unary_minus():
    assert ev("1 + 2*3") == 7
    assert ev("(1 + 2)*3") == 9
    assert ev("-2^2") == -4
    assert ev("2^-1") == 0.5
    assert ev("8/4/2") == 1
    assert ev("1 - 2 - 3") == -4
    assert ev("-(-u)", u=3.0) == 3.0


def test_functions_and_constants():
    assert ev("cos(2*pi*x1)", x=0.5) == pytest.approx(-1.0)
    assert ev("exp(u)", u=1.0) == pytest.approx(np.e)
    assert ev("0.5*p1^2 + 0.2*u + cos(2*3.141592653589793*x1)") == pytest.approx(1.0)


def test_syntax_error_offset_and_expected_set():
    with pytest.raises(ExpressionSyntaxError) as exc:
        Expression("u + * p1")
    assert exc.value.offset == 4
    assert "number" in exc.value.expected


def test_unclosed_paren():
    with pytest.raises(ExpressionSyntaxError) as exc:
        Expression("(u + 1")
    assert exc.value.offset == 6


def test_non_integer_power_rejected():
    with pytest.raises(ExpressionSyntaxError):
        Expression("p1^0.5")


def test_unknown_identifier():
    with pytest.raises(UnknownIdentifierError) as exc:
        Expression("u + q1")
    assert exc.value.name == "q1"
    with pytest.raises(UnknownIdentifierError):
        parse_function_of_x("x1 + u", 1)
    with pytest.raises(UnknownIdentifierError):
        Expression("x2 + p1", dim=1)


def test_dimension_inferred():
    assert Expression("p1^2 + p2^2").dim == 2
    assert Expression("u").dim == 1


def test_overflow_names_subexpression():
    e = Expression("exp(exp(u))", 1)
    with pytest.raises(EvaluationError) as exc:
        e.value(np.zeros(1), np.zeros(1), 10.0)
    assert "exp" in exc.value.subexpression


def test_jet_of_contact_example():
    e = Expression("u + 0.5*p1^2", 1)
    val, grad = e.jet(np.array([0.0]), np.array([1.0]), 0.0)
    assert float(val) == 0.5
    assert np.allclose(grad.reshape(-1), [0.0, 1.0, 1.0])


_EXPRS = [
    "u + 0.5*p1^2",
    "0.5*p1^2 + 0.2*u + cos(2*pi*x1)",
    "exp(0.1*u)*p1^2 + sin(x1)*p1 - u^3/7",
    "p1^2/(2 + cos(2*pi*x1)) + sin(u)",
    "(p1 - x1)^4 + exp(-p1*x1) * cos(u)",
]


@pytest.mark.parametrize("text", _EXPRS)
def test_jets_match_finite_differences(text):
    e = Expression(text, 1)
    rng = np.random.default_rng(11)
    z = rng.uniform(-1, 1, (100, 3))
    _, grad = e.jet(z[:, :1], z[:, 1:2], z[:, 2])
    step = 1e-5
    for k in range(3):
        zp, zm = z.copy(), z.copy()
        zp[:, k] += step
        zm[:, k] -= step
        fd = (e.value(zp[:, :1], zp[:, 1:2], zp[:, 2]) - e.value(zm[:, :1], zm[:, 1:2], zm[:, 2])) / (2 * step)
        assert np.allclose(grad[k], fd, rtol=1e-6, atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_agrees_with_python_arithmetic(x, p, u):
    text = "x1*p1 - u/3 + 2*p1^3 - sin(x1)*exp(u/4)"
    expected = x * p - u / 3 + 2 * p ** 3 - np.sin(x) * np.exp(u / 4)
    assert ev(text, x, p, u) == pytest.approx(expected, rel=1e-12, abs=1e-12)
