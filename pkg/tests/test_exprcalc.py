import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fiotrace import exprcalc as ec
from fiotrace.exprcalc import (
    BlockLayout,
    ExprSyntaxError,
    IndexRangeError,
    SingularLocusError,
    UnknownIdentifierError,
    evaluate,
    parse_expression,
)

LAY = ec.layout(("x", 1), ("y", 1), ("xp", 1), ("yp", 1), ("th", 2))
LAY_X = ec.layout(("x", 1), ("xp", 1), ("th", 2))


def fd_gradient(expr, pt, h=1e-5):
    g = np.zeros(len(pt))
    for i in range(len(pt)):
        up, dn = pt.copy(), pt.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (evaluate(expr, up) - evaluate(expr, dn)) / (2 * h)
    return g


class TestParse:
    def test_six_slot_phase(self):
        e = parse_expression("(x[1]-xp[1])*th[1] + (y[1]-yp[1])*th[2]", LAY)
        assert e.layout.total_dim == 6
        pt = np.array([2.0, 5.0, 1.0, 3.0, 3.0, 0.5])
        assert evaluate(e, pt) == pytest.approx((2 - 1) * 3 + (5 - 3) * 0.5)

    def test_unclosed_call_position(self):
        with pytest.raises(ExprSyntaxError) as exc:
            parse_expression("sin(", LAY)
        assert exc.value.position == 5

    def test_index_out_of_range(self):
        with pytest.raises(IndexRangeError):
            parse_expression("th[3]", LAY)

    def test_unknown_identifier(self):
        with pytest.raises(UnknownIdentifierError):
            parse_expression("zz[1]", LAY)

    def test_scientific_notation_and_pi(self):
        e = parse_expression("1.5e-3 + pi", LAY)
        assert evaluate(e, np.zeros(6)) == pytest.approx(1.5e-3 + math.pi)

    def test_rational_exponent(self):
        e = parse_expression("th[1]^(1/2)", LAY)
        assert evaluate(e, np.array([0, 0, 0, 0, 4.0, 0])) == pytest.approx(2.0)

    def test_empty_layout_rejected(self):
        with pytest.raises(ec.ExprError):
            parse_expression("1", BlockLayout(()))


class TestEvaluate:
    def test_product(self):
        e = parse_expression("(x[1]-xp[1])*th[1]", LAY_X)
        assert evaluate(e, np.array([2.0, 1.0, 3.0, 0.0])) == 3.0

    def test_norm(self):
        e = parse_expression("norm(th)", LAY_X)
        assert evaluate(e, np.array([0, 0, 3.0, 4.0])) == 5.0

    def test_sgn_at_zero_is_singular(self):
        e = parse_expression("sgn(th[1])", LAY_X)
        with pytest.raises(SingularLocusError):
            evaluate(e, np.array([0, 0, 0.0, 1.0]))

    def test_division_by_zero(self):
        e = parse_expression("x[1]/th[1]", LAY_X)
        with pytest.raises(SingularLocusError):
            evaluate(e, np.array([1.0, 0, 0.0, 1.0]))

    def test_vectorized(self):
        e = parse_expression("x[1]*th[1]", LAY_X)
        pts = np.array([[1.0, 0, 2.0, 0], [3.0, 0, 4.0, 0]])
        assert np.allclose(evaluate(e, pts), [2.0, 12.0])

    def test_unbound_parameter(self):
        e = parse_expression("$a*x[1]", LAY_X)
        with pytest.raises(ec.ExprError):
            evaluate(e, np.ones(4))
        assert evaluate(e, np.ones(4), {"a": 2.0}) == 2.0


class TestDifferentiate:
    def test_norm_gradient(self):
        e = parse_expression("norm(th)", LAY_X)
        d = e.diff(LAY_X.slot("th", 1))
        assert d.text() == "th[1]/norm(th[1..2])"

    def test_linear_phase(self):
        e = parse_expression("(x[1]-xp[1])*th[1]", LAY_X)
        d = e.diff(LAY_X.slot("x", 1))
        assert d.text() == "th[1]"

    def test_second_derivative_of_norm(self):
        # independent central-difference oracle; the 5-point stencil keeps the
        # roundoff floor below the 1e-8 tolerance
        e = parse_expression("norm(th)", LAY_X)
        s = LAY_X.slot("th", 1)
        dd = e.diff(s).diff(s)
        pt = np.array([0, 0, 0.0, 1.0])
        val = evaluate(dd, pt)
        h = 1e-3
        f = lambda t: math.hypot(t, 1.0)
        fd = (-f(2 * h) + 16 * f(h) - 30 * f(0.0) + 16 * f(-h) - f(-2 * h)) / (12 * h**2)
        assert val == pytest.approx(1.0)
        assert abs(val - fd) < 1e-8

    def test_abs_and_sgn_rules(self):
        e = parse_expression("abs(th[1])", LAY_X)
        d = e.diff(LAY_X.slot("th", 1))
        assert evaluate(d, np.array([0, 0, -2.0, 0])) == -1.0
        dd = d.diff(LAY_X.slot("th", 1))
        assert evaluate(dd, np.array([0, 0, -2.0, 0])) == 0.0


class TestHomogeneity:
    def samples(self, rng, n=40):
        pts = rng.uniform(-2, 2, size=(n, 4))
        pts[:, 2:] /= np.linalg.norm(pts[:, 2:], axis=1, keepdims=True)
        pts[:, 2:] *= rng.uniform(0.5, 2.0, size=(n, 1))
        return pts

    def test_linear_passes(self, rng):
        e = parse_expression("(x[1]-xp[1])*th[1]", LAY_X)
        rep = ec.check_homogeneity(e, "th", 1.0, self.samples(rng))
        assert rep.passed and rep.worst_euler == 0.0

    def test_norm_passes(self, rng):
        e = parse_expression("norm(th)", LAY_X)
        assert ec.check_homogeneity(e, "th", 1.0, self.samples(rng)).passed

    def test_quadratic_fails(self, rng):
        e = parse_expression("th[1]^2", LAY_X)
        rep = ec.check_homogeneity(e, "th", 1.0, self.samples(rng))
        assert not rep.passed
        # Euler residual of t^2 against degree 1 is exactly |t^2|
        t1 = rep.worst_sample[2]
        assert rep.worst_euler == pytest.approx(t1**2)


SCENARIO_EXPRS = [
    ("(x[1] - xp[1]*cos($alpha))*th[1] - xp[1]*sin($alpha)*th[2]", {"alpha": math.pi / 4}),
    ("(x[1]-xp[1])*th[1] + $t*norm(th)", {"t": 1.0}),
    ("x[1]*th[1] - xp[1]*th[2]", {}),
    ("(1 - (th[2]^2)/($c^2*th[1]^2))^2", {"c": 0.8}),
]


class TestInvariants:
    @pytest.mark.parametrize("text,params", SCENARIO_EXPRS)
    def test_gradient_and_hessian_match_finite_differences(self, text, params, rng):
        e = parse_expression(text, LAY_X, params)
        slots = list(range(4))
        grads = [e.diff(s) for s in slots]
        hess = ec.hessian_exprs(e, slots)
        checked = 0
        while checked < 100:
            pt = rng.uniform(-2, 2, size=4)
            pt[2:] += np.sign(pt[2:]) * 0.5  # keep theta away from 0
            if not ec.guards_ok(e, pt, tol=2e-1):
                continue
            checked += 1
            g_fd = fd_gradient(e, pt)
            g_sym = np.array([evaluate(g, pt) for g in grads])
            assert np.allclose(g_sym, g_fd, rtol=1e-6, atol=1e-6)
            i, j = rng.integers(0, 4, size=2)
            h = 1e-5
            up, dn = pt.copy(), pt.copy()
            up[j] += h
            dn[j] -= h
            h_fd = (evaluate(grads[i], up) - evaluate(grads[i], dn)) / (2 * h)
            assert evaluate(hess[i][j], pt) == pytest.approx(h_fd, rel=1e-6, abs=1e-6)

    @pytest.mark.parametrize("text,params", SCENARIO_EXPRS)
    def test_print_parse_roundtrip(self, text, params):
        e = parse_expression(text, LAY_X, params)
        again = parse_expression(e.text(), LAY_X, params)
        assert again.ast == e.ast

    def test_euler_residual_on_cone_samples(self, rng):
        e = parse_expression("(x[1]-xp[1])*th[1] + $t*norm(th)", LAY_X, {"t": 1.0})
        pts = rng.uniform(-2, 2, size=(100, 4))
        pts[:, 2:] /= np.linalg.norm(pts[:, 2:], axis=1, keepdims=True)
        rep = ec.check_homogeneity(e, "th", 1.0, pts, tol=1e-9)
        assert rep.passed and rep.worst_euler < 1e-9 * 4


# -- hypothesis: structural round-trip over generated expression trees --------

_leaf = st.sampled_from(["x[1]", "xp[1]", "th[1]", "th[2]", "norm(th)",
                         "1.5", "2.0", "$a", "pi"])


@st.composite
def expr_text(draw, depth=0):
    if depth >= 3 or draw(st.booleans()):
        return draw(_leaf)
    op = draw(st.sampled_from(["+", "-", "*", "/"]))
    a = draw(expr_text(depth + 1))
    b = draw(expr_text(depth + 1))
    if op == "/":
        b = "(1 + (" + b + ")^2)"  # keep denominators away from zero
    body = f"({a}) {op} ({b})"
    if draw(st.booleans()):
        fn = draw(st.sampled_from(["sin", "cos", "exp"]))
        body = f"{fn}({body})"
    return body


@given(expr_text())
@settings(max_examples=60, deadline=None)
def test_roundtrip_property(text):
    e = parse_expression(text, LAY_X, {"a": 0.7})
    again = parse_expression(e.text(), LAY_X, {"a": 0.7})
    assert again.ast == e.ast


@given(expr_text(), st.integers(0, 3))
@settings(max_examples=40, deadline=None)
def test_derivative_matches_fd_property(text, slot):
    e = parse_expression(text, LAY_X, {"a": 0.7})
    pt = np.array([0.3, -0.4, 0.8, 0.6])
    d = e.diff(slot)
    h = 1e-6
    up, dn = pt.copy(), pt.copy()
    up[slot] += h
    dn[slot] -= h
    try:
        fd = (evaluate(e, up) - evaluate(e, dn)) / (2 * h)
        sym = evaluate(d, pt)
    except SingularLocusError:
        return
    if abs(fd) < 1e6:  # exp chains can explode; compare where sane
        assert sym == pytest.approx(fd, rel=2e-4, abs=2e-4)
