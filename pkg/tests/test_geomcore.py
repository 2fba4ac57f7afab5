import math
from fractions import Fraction

import numpy as np
import pytest

from fiotrace import exprcalc as ec
from fiotrace import geomcore as gc


def sub2(texts, expected_dim, conic=(), domain=(), lay=None):
    lay = lay or ec.layout(("x", 1), ("y", 1))
    return gc.ConstraintSubmanifold(
        layout=lay,
        constraints=[ec.parse_expression(t, lay) for t in texts],
        expected_dim=expected_dim,
        conic_blocks=tuple(conic),
        domain=[ec.parse_expression(t, lay) for t in domain],
    )


class TestNumericRank:
    def test_identity(self):
        assert gc.numeric_rank(np.eye(2)) == 2

    def test_rank_one(self):
        assert gc.numeric_rank([[1, 1], [1, 1]]) == 1

    def test_below_tolerance(self):
        assert gc.numeric_rank([[1, 0], [0, 1e-12]]) == 1

    def test_nonfinite_rejected(self):
        with pytest.raises(gc.GeomError):
            gc.numeric_rank([[np.nan, 0], [0, 1]])

    def test_invariance_under_permutation_and_orthogonal(self, rng):
        for _ in range(20):
            m, n = rng.integers(2, 6, size=2)
            r = int(rng.integers(1, min(m, n) + 1))
            A = (rng.normal(size=(m, r)) @ rng.normal(size=(r, n)))
            base = gc.numeric_rank(A)
            perm = rng.permutation(m)
            assert gc.numeric_rank(A[perm]) == base
            Q, _ = np.linalg.qr(rng.normal(size=(m, m)))
            assert gc.numeric_rank(Q @ A) == base
            Q2, _ = np.linalg.qr(rng.normal(size=(n, n)))
            assert gc.numeric_rank(A @ Q2) == base


def exact_rank(mat):
    """Fraction-arithmetic Gaussian elimination: the independent rank oracle."""
    rows = [[Fraction(int(v)) for v in row] for row in mat]
    rank, col = 0, 0
    n_rows, n_cols = len(rows), len(rows[0])
    while rank < n_rows and col < n_cols:
        pivot = next((r for r in range(rank, n_rows) if rows[r][col] != 0), None)
        if pivot is None:
            col += 1
            continue
        rows[rank], rows[pivot] = rows[pivot], rows[rank]
        for r in range(rank + 1, n_rows):
            f = rows[r][col] / rows[rank][col]
            rows[r] = [a - f * b for a, b in zip(rows[r], rows[rank])]
        rank += 1
        col += 1
    return rank


class TestRationalRankOracle:
    def test_numeric_matches_exact_on_integer_matrices(self, rng):
        for _ in range(40):
            m, n = rng.integers(1, 6, size=2)
            A = rng.integers(-3, 4, size=(m, n))
            if rng.random() < 0.5 and min(m, n) > 1:
                A[-1] = A[0]  # force dependence sometimes
            assert gc.numeric_rank(A.astype(float)) == exact_rank(A)


class TestTangentBasis:
    def test_circle(self):
        s = sub2(["x[1]^2 + y[1]^2 - 1"], expected_dim=1)
        B = gc.tangent_basis(s, np.array([1.0, 0.0]))
        assert B.shape == (2, 1)
        assert abs(abs(B[1, 0]) - 1.0) < 1e-12 and abs(B[0, 0]) < 1e-12

    def test_plane_in_r3(self):
        lay = ec.layout(("x", 1), ("y", 1), ("z", 1))
        s = gc.ConstraintSubmanifold(lay, [ec.parse_expression("y[1]", lay)], 2)
        B = gc.tangent_basis(s, np.array([0.3, 0.0, -0.7]))
        assert B.shape == (3, 2)
        assert np.max(np.abs(B[1, :])) < 1e-12

    def test_cone_point_is_singular(self):
        lay = ec.layout(("x", 1), ("y", 1), ("z", 1))
        s = gc.ConstraintSubmanifold(
            lay, [ec.parse_expression("x[1]^2 + y[1]^2 - z[1]^2", lay)], 2)
        with pytest.raises(gc.RankDeficiencyError):
            gc.tangent_basis(s, np.zeros(3))


class TestCleanIntersection:
    def test_transversal_lines(self):
        # two base lines through the origin meeting at angle alpha = pi/4
        a = sub2(["y[1]"], 1)
        b = sub2(["y[1] - x[1]*1.0"], 1)  # tan(pi/4) = 1
        rep = gc.clean_intersection_check(a, b, samples=np.zeros((1, 2)))
        assert rep.clean and rep.intersection_dim == 0
        assert rep.excess_over_transversal == 0 and rep.worst_gap == 0

    def test_parabola_tangency_not_clean(self):
        a = sub2(["y[1]"], 1)
        b = sub2(["y[1] - x[1]^2"], 1)
        rep = gc.clean_intersection_check(a, b, samples=np.zeros((1, 2)))
        assert not rep.clean
        assert not rep.tangent_equality
        # dim(T1 cap T2) = 1 while the set is the single contact point
        assert rep.worst_gap == 1 and rep.intersection_dim == 0

    def test_self_intersection_excess_is_codim(self):
        a = sub2(["y[1]"], 1)
        rep = gc.clean_intersection_check(a, a, samples=np.array([[0.5, 0.0]]))
        assert rep.clean
        assert rep.excess_over_transversal == 1  # codim of A

    def test_empty_intersection_reported(self, rng):
        a = sub2(["y[1]"], 1)
        b = sub2(["y[1] - 1"], 1)
        rep = gc.clean_intersection_check(a, b, rng=rng)
        assert rep.empty and rep.clean

    def test_exact_dim_for_constant_constraints(self, rng):
        # random integer linear subspaces: intersection dim must equal the
        # exact linear-algebra value from rational elimination
        lay = ec.layout(("x", 1), ("y", 1), ("z", 1), ("w", 1))
        for _ in range(10):
            A = rng.integers(-2, 3, size=(2, 4))
            B = rng.integers(-2, 3, size=(1, 4))
            if exact_rank(A) < 2 or exact_rank(B) < 1:
                continue

            def lin(mat):
                texts = []
                names = ["x[1]", "y[1]", "z[1]", "w[1]"]
                for row in mat:
                    terms = [f"{int(c)}*{n}" for c, n in zip(row, names) if c]
                    texts.append(" + ".join(terms) if terms else "0*x[1]")
                return texts

            a = gc.ConstraintSubmanifold(
                lay, [ec.parse_expression(t, lay) for t in lin(A)], 4 - exact_rank(A))
            b = gc.ConstraintSubmanifold(
                lay, [ec.parse_expression(t, lay) for t in lin(B)], 4 - exact_rank(B))
            rep = gc.clean_intersection_check(a, b, samples=np.zeros((1, 4)))
            assert rep.intersection_dim == 4 - exact_rank(np.vstack([A, B]))
            assert rep.clean  # linear subspaces always intersect cleanly


class TestSymplecticForm:
    def test_dx_wedge_dp(self):
        space = gc.CotangentDoubleChart(1, 1)
        u = np.zeros(8); u[0] = 1.0   # dx
        v = np.zeros(8); v[2] = 1.0   # dp
        assert gc.symplectic_form_value(space, u, v) == 1.0

    def test_primed_block_negative(self):
        space = gc.CotangentDoubleChart(1, 1)
        u = np.zeros(8); u[4] = 1.0   # dx'
        v = np.zeros(8); v[6] = 1.0   # dp'
        assert gc.symplectic_form_value(space, u, v) == -1.0

    def test_antisymmetry_diagonal(self, rng):
        space = gc.CotangentDoubleChart(1, 1)
        for _ in range(5):
            u = rng.normal(size=8)
            assert abs(gc.symplectic_form_value(space, u, u)) < 1e-14 * (u @ u)

    def test_pair_chart_signs(self):
        space = gc.CotangentPairChart(1)
        u = np.zeros(4); u[0] = 1.0
        v = np.zeros(4); v[1] = 1.0
        assert gc.symplectic_form_value(space, u, v) == 1.0
        u2 = np.zeros(4); u2[2] = 1.0
        v2 = np.zeros(4); v2[3] = 1.0
        assert gc.symplectic_form_value(space, u2, v2) == -1.0


class TestSampleCone:
    def test_sphere_slice(self, rng):
        lay = ec.layout(("p", 1), ("q", 1))
        s = gc.ConstraintSubmanifold(lay, [], 2, conic_blocks=("p", "q"))
        pts = gc.sample_cone(s, 50, radii=(1.0, 1.0), rng=rng)
        assert len(pts) == 50
        assert np.allclose(np.linalg.norm(pts, axis=1), 1.0)

    def test_starvation_on_empty_set(self, rng):
        lay = ec.layout(("p", 1), ("q", 1))
        s = gc.ConstraintSubmanifold(
            lay, [ec.parse_expression("0*p[1] + 1", lay)], 1,
            conic_blocks=("p", "q"))
        with pytest.raises(gc.SamplerStarvationError):
            gc.sample_cone(s, 10, rng=rng, budget_factor=20)

    def test_half_space_cone(self, rng):
        lay = ec.layout(("p", 1), ("q", 1))
        s = gc.ConstraintSubmanifold(
            lay, [ec.parse_expression("q[1]", lay)], 1,
            conic_blocks=("p", "q"),
            domain=[ec.parse_expression("abs(p[1])", lay)])
        pts = gc.sample_cone(s, 30, radii=(1.0, 2.0), rng=rng)
        assert np.max(np.abs(pts[:, 1])) < 1e-8
        r = np.abs(pts[:, 0])
        assert np.all((r > 1 - 1e-9) & (r < 2 + 1e-9))


class TestGaussNewton:
    def test_degenerate_root_polished(self):
        # x^2 = 0 converges linearly; iteration must continue past tol so the
        # coordinate error reaches the step-stall floor
        f = lambda x: np.array([x[0] ** 2])
        J = lambda x: np.array([[2 * x[0]]])
        x, ok, rn = gc.gauss_newton(f, J, np.array([1e-3]), tol=1e-12)
        assert ok and abs(x[0]) < 1e-13

    def test_underdetermined_projects(self):
        f = lambda x: np.array([x[0] + x[1] - 1.0])
        J = lambda x: np.array([[1.0, 1.0]])
        x, ok, _ = gc.gauss_newton(f, J, np.array([3.0, 3.0]))
        assert ok and abs(x[0] - x[1]) < 1e-12  # minimum-norm step
