import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdelab import expr as ex
from sdelab.expr import (
    Const,
    Coord,
    DomainError,
    ExprSyntaxError,
    Max,
    NonDifferentiableError,
    differentiate,
    eval_expr,
    evaluate,
    parse_expr,
    to_source,
)


def test_parse_atomic_coordinate():
    t = parse_expr("x1", 2)
    assert t == Coord(0)


def test_parse_remark_drift():
    # drift of the conservative-but-dual-non-conservative 1-D example
    t = parse_expr("0.5 + 0.5*exp(-x1)", 1)
    assert eval_expr(t, [0.0]) == pytest.approx(1.0)
    assert eval_expr(t, [math.log(2.0)]) == pytest.approx(0.75)


def test_parse_recurrence_candidate():
    t = parse_expr("ln(max(norm2(x), 9)) + 2", 2)
    assert eval_expr(t, [1.0, 0.0]) == pytest.approx(math.log(9) + 2)
    assert eval_expr(t, [4.0, 3.0]) == pytest.approx(math.log(25) + 2)


def test_parse_errors_carry_offset():
    with pytest.raises(ExprSyntaxError) as err:
        parse_expr("x1 + @", 2)
    assert err.value.offset == 5
    with pytest.raises(ExprSyntaxError):
        parse_expr("x3", 2)  # out-of-range coordinate
    with pytest.raises(ExprSyntaxError):
        parse_expr("sinh(x1)", 1)  # unknown function


def test_whitespace_insensitive():
    assert parse_expr(" x1+2* x2 ", 2) == parse_expr("x1 + 2 * x2", 2)


def test_norm2_eval():
    t = parse_expr("norm2(x)", 2)
    assert eval_expr(t, [3.0, 4.0]) == 25.0
    assert eval_expr(parse_expr("exp(-norm2(x))", 2), [0.0, 0.0]) == 1.0


def test_piecewise_bound_function_branches_agree():
    # bounded witness for the dual-non-conservativeness certificate:
    # both branch expressions take the value 27 at the junction y = 3
    lo = parse_expr("x1^2 * (6 - x1)", 1)
    hi = parse_expr("54 - 81/x1", 1)
    assert eval_expr(lo, [3.0]) == pytest.approx(27.0)
    assert eval_expr(hi, [3.0]) == pytest.approx(27.0)
    psi = parse_expr("max(x1^2 * (6 - x1), 54 - 81/x1)", 1)
    assert eval_expr(psi, [3.0]) == pytest.approx(27.0)
    assert eval_expr(psi, [1.0]) == pytest.approx(5.0)
    assert eval_expr(psi, [6.0]) == pytest.approx(54 - 81 / 6)


def test_derivative_polynomial():
    t = parse_expr("x1^2", 2)
    d = differentiate(t, 0)
    assert d == parse_expr("2*x1", 2) or eval_expr(d, [3.0, 0.0]) == 6.0


def test_derivative_exp():
    t = parse_expr("exp(2*x1)", 1)
    d = differentiate(t, 0)
    for x in (-1.0, 0.0, 0.7):
        assert eval_expr(d, [x]) == pytest.approx(2 * math.exp(2 * x), rel=1e-12)


def test_gradient_of_log_candidate_fd():
    # gradient of ln(max(norm2(x), 9)) + 2 matches 2x/|x|^2 outside radius 3
    t = parse_expr("ln(max(norm2(x), 9)) + 2", 2)
    g = [differentiate(t, k, piecewise=True) for k in range(2)]
    h = 1e-4
    rng = np.random.default_rng(7)
    for _ in range(25):
        x = rng.uniform(3.5, 8.0, size=2) * rng.choice([-1.0, 1.0], size=2)
        r2 = float(x @ x)
        for k in range(2):
            sym = eval_expr(g[k], x)
            assert sym == pytest.approx(2 * x[k] / r2, abs=1e-10)
            xp = x.copy()
            xm = x.copy()
            xp[k] += h
            xm[k] -= h
            fd = (eval_expr(t, xp) - eval_expr(t, xm)) / (2 * h)
            assert sym == pytest.approx(fd, abs=1e-7)


def test_max_requires_piecewise_flag():
    t = parse_expr("max(x1, 0)", 1)
    with pytest.raises(NonDifferentiableError):
        differentiate(t, 0)
    d = differentiate(t, 0, piecewise=True)
    assert eval_expr(d, [2.0]) == 1.0
    assert eval_expr(d, [-2.0]) == 0.0
    # tie-break: first argument wins at the kink
    assert eval_expr(d, [0.0]) == 1.0


def test_min_tie_break_first_argument():
    t = parse_expr("min(x1, 2*x1)", 1)
    d = differentiate(t, 0, piecewise=True)
    assert eval_expr(d, [0.0]) == 1.0  # tie at 0, first branch
    assert eval_expr(d, [1.0]) == 1.0  # min is x1 for x>0
    assert eval_expr(d, [-1.0]) == 2.0


def test_domain_errors_report_node():
    t = parse_expr("ln(x1)", 1)
    with pytest.raises(DomainError) as err:
        eval_expr(t, [-1.0])
    assert "ln" in str(err.value)
    with pytest.raises(DomainError):
        eval_expr(parse_expr("1/x1", 1), [0.0])


def test_vectorized_matches_scalar():
    t = parse_expr("exp(-norm2(x)) + x1*x2 - sqrt(1 + x2^2)", 2)
    pts = np.random.default_rng(3).normal(size=(64, 2))
    vec = evaluate(t, pts)
    for i in range(len(pts)):
        assert vec[i] == pytest.approx(eval_expr(t, pts[i]), rel=1e-14)


# --- random smooth expression corpus ---------------------------------------

_SMOOTH_LEAVES = ["x1", "x2", "1.5", "0.25", "-2.0"]
_SMOOTH_WRAP = [
    "exp({a}/(1 + norm2(x)))",
    "ln(2 + ({a})^2)",
    "sqrt(1 + ({a})^2)",
    "({a}) * ({b})",
    "({a}) + ({b})",
    "({a}) - ({b})",
    "({a}) / (2 + ({b})^2)",
    "({a})^3",
    "({a})^2",
]


def _random_smooth_source(rng, depth=3):
    if depth == 0 or rng.random() < 0.3:
        return str(rng.choice(_SMOOTH_LEAVES))
    tpl = rng.choice(_SMOOTH_WRAP)
    return tpl.format(
        a=_random_smooth_source(rng, depth - 1), b=_random_smooth_source(rng, depth - 1)
    )


def test_randomized_derivative_vs_central_difference():
    # property from the module contract: |symbolic - central difference|
    # <= 1e-6 * (1 + |value|) at h = 1e-5 over a randomized smooth corpus
    rng = np.random.default_rng(2024)
    h = 1e-5
    checked = 0
    while checked < 300:
        src = _random_smooth_source(rng)
        t = parse_expr(src, 2)
        x = rng.uniform(-2, 2, size=2)
        try:
            v = eval_expr(t, x)
        except DomainError:
            continue
        if abs(v) > 1e6:
            continue
        for k in range(2):
            d = differentiate(t, k)
            sym = eval_expr(d, x)
            xp = x.copy()
            xm = x.copy()
            xp[k] += h
            xm[k] -= h
            fd = (eval_expr(t, xp) - eval_expr(t, xm)) / (2 * h)
            assert abs(sym - fd) <= 1e-6 * (1 + abs(v)), (src, k, sym, fd)
        checked += 1


# --- hypothesis: printer round trip -----------------------------------------


def _exprs(dim=2):
    leaves = st.one_of(
        st.floats(
            min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False
        ).map(lambda v: Const(float(v))),
        st.integers(min_value=0, max_value=dim - 1).map(Coord),
        st.just(ex.Norm2()),
    )

    def extend(inner):
        return st.one_of(
            st.tuples(inner, inner).map(lambda ab: ex.Add(*ab)),
            st.tuples(inner, inner).map(lambda ab: ex.Sub(*ab)),
            st.tuples(inner, inner).map(lambda ab: ex.Mul(*ab)),
            st.tuples(inner, inner).map(lambda ab: ex.Div(*ab)),
            st.tuples(inner, inner).map(lambda ab: ex.Max(*ab)),
            st.tuples(inner, inner).map(lambda ab: ex.Min(*ab)),
            inner.map(ex.Exp),
            inner.map(ex.Ln),
            inner.map(ex.Sqrt),
            st.tuples(inner, st.sampled_from([2.0, 3.0, 0.5, -1.0, 1.5])).map(
                lambda be: ex.Pow(*be)
            ),
        )

    return st.recursive(leaves, extend, max_leaves=12)


@settings(max_examples=200, deadline=None)
@given(_exprs())
def test_printer_round_trip(tree):
    assert parse_expr(to_source(tree), 2) == tree


@settings(max_examples=100, deadline=None)
@given(_exprs())
def test_reprint_is_stable(tree):
    once = to_source(tree)
    assert to_source(parse_expr(once, 2)) == once
