"""Homogeneous canonical transformations of T*_0 M, cotangent lifts of base
diffeomorphisms, their graphs as conic Lagrangians in T*(M x M), and the
graph-level trace conditions (clean intersection of T*_0 M|_X with its image,
emptiness of the conormal self-intersection).

Maps live on the T*M chart (x, y, th) with th = (p_1..p_k, q_1..q_nu).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import exprcalc, geomcore
from .exprcalc import (
    Add, Call, Div, Expression, Mul, Neg, Node, Norm, Num, Pow, Sub, Var,
    BlockLayout,
)
from .geomcore import (
    CleanReport,
    ConstraintSubmanifold,
    CotangentDoubleChart,
    gauss_newton,
    clean_intersection_check,
    nullspace,
)
from .tracemod import EmbeddingChart

__all__ = [
    "CanonicalMap",
    "CanonicalValidationReport",
    "CanonError",
    "lift_point_transformation",
    "validate_canonical",
    "graph_lagrangian",
    "CorollaryReport",
    "check_corollary_conditions",
    "check_order_bound",
]


class CanonError(ValueError):
    pass


def tstar_layout(chart: EmbeddingChart) -> BlockLayout:
    return BlockLayout((("x", chart.dim_x), ("y", chart.nu), ("th", chart.dim_m)))


@dataclass
class CanonicalMap:
    """g(x, y, p, q) given by 2 dim M component Expressions in the chart order
    (x, y, p, q); the covector is the block th = (p, q).  The inverse is
    supplied as expressions rather than inverted numerically."""

    chart: EmbeddingChart
    forward: list
    inverse: list
    params: dict = field(default_factory=dict)
    symplectic_residual: float = math.nan
    fiber_homogeneity_residual: float = math.nan

    def __post_init__(self):
        m = self.chart.dim_m
        if len(self.forward) != 2 * m or len(self.inverse) != 2 * m:
            raise CanonError(f"need {2*m} forward and inverse components")

    @property
    def layout(self) -> BlockLayout:
        return self.forward[0].layout

    def apply(self, z, inverse: bool = False) -> np.ndarray:
        comps = self.inverse if inverse else self.forward
        z = np.asarray(z, dtype=float)
        vals = [exprcalc.evaluate(c, z, self.params) for c in comps]
        return np.stack([np.asarray(v, dtype=float) for v in vals], axis=-1) \
            if z.ndim > 1 else np.array(vals, dtype=float)

    def jacobian(self, z, inverse: bool = False) -> np.ndarray:
        comps = self.inverse if inverse else self.forward
        z = np.asarray(z, dtype=float)
        n = self.layout.total_dim
        return np.array([
            [exprcalc.evaluate(c.diff(s), z, self.params) for s in range(n)]
            for c in comps
        ])

    def covector_slots(self) -> list:
        return list(self.layout.slots("th"))

    def sample_points(self, count: int = 40, rng=None, base_box: float = 2.0,
                      radii=(0.5, 2.0)) -> np.ndarray:
        rng = rng or np.random.default_rng(3)
        m = self.chart.dim_m
        out = []
        guard_exprs = self.forward + self.inverse
        budget = 50 * count
        tried = 0
        while len(out) < count and tried < budget:
            tried += 1
            z = np.zeros(2 * m)
            z[: m] = rng.uniform(-base_box, base_box, size=m)
            u = rng.normal(size=m)
            u /= np.linalg.norm(u)
            z[m:] = u * rng.uniform(*radii)
            if all(exprcalc.guards_ok(g, z, self.params) for g in guard_exprs):
                out.append(z)
        if len(out) < count:
            raise CanonError("could not sample the map domain")
        return np.array(out)


# ---------------------------------------------------------------------------
# cotangent lift of a base diffeomorphism

def _adjugate_transpose(J, det_node: Node):
    """(dpsi)^{-T} entries as AST nodes, via the adjugate, for dims <= 3."""
    n = len(J)
    if n == 1:
        return [[Div(Num(1.0), det_node)]]
    if n == 2:
        a, b = J[0]
        c, d = J[1]
        # A^{-T} = [[d, -c], [-b, a]] / det
        return [
            [Div(d, det_node), Div(Neg(c), det_node)],
            [Div(Neg(b), det_node), Div(a, det_node)],
        ]
    if n == 3:
        def cof(i, j):
            rows = [r for r in range(3) if r != i]
            cols = [c for c in range(3) if c != j]
            m = Sub(Mul(J[rows[0]][cols[0]], J[rows[1]][cols[1]]),
                    Mul(J[rows[0]][cols[1]], J[rows[1]][cols[0]]))
            return m if (i + j) % 2 == 0 else Neg(m)
        # A^{-T}_{ij} = cofactor_{ij} / det
        return [[Div(cof(i, j), det_node) for j in range(3)] for i in range(3)]
    raise CanonError("adjugate lift implemented for base dimension <= 3")


def _det_node(J) -> Node:
    n = len(J)
    if n == 1:
        return J[0][0]
    if n == 2:
        return Sub(Mul(J[0][0], J[1][1]), Mul(J[0][1], J[1][0]))
    if n == 3:
        terms = []
        for j in range(3):
            rows = [1, 2]
            cols = [c for c in range(3) if c != j]
            minor = Sub(Mul(J[rows[0]][cols[0]], J[rows[1]][cols[1]]),
                        Mul(J[rows[0]][cols[1]], J[rows[1]][cols[0]]))
            t = Mul(J[0][j], minor)
            terms.append(t if j % 2 == 0 else Neg(t))
        return Add(Add(terms[0], terms[1]), terms[2])
    raise CanonError("determinant node implemented for base dimension <= 3")


def lift_point_transformation(
    chart: EmbeddingChart,
    psi: Sequence[Expression],
    psi_inverse: Sequence[Expression],
    params=None,
    check_points: int = 25,
    rng=None,
) -> CanonicalMap:
    """Cotangent lift g(m, rho) = (psi(m), (dpsi(m))^{-T} rho), assembled
    symbolically.  psi components are Expressions over blocks (x, y) in the
    base order; the lift layout appends th."""
    params = dict(params or {})
    m = chart.dim_m
    lay = tstar_layout(chart)
    base_slots = list(range(m))  # x then y in both layouts

    def lift_of(components):
        comps = [Expression(c.ast, lay, params) for c in components]
        J = [[comps[i].diff(s).ast for s in base_slots] for i in range(m)]
        det = _det_node(J)
        inv_t = _adjugate_transpose(J, det)
        out = list(comps)
        for i in range(m):
            acc = None
            for j in range(m):
                term = Mul(inv_t[i][j], Var("th", j + 1))
                acc = term if acc is None else Add(acc, term)
            out.append(Expression(exprcalc._simplify(acc), lay, params))
        return out, Expression(exprcalc._simplify(det), lay, params)

    fwd, det_fwd = lift_of(psi)
    inv, _ = lift_of(psi_inverse)
    g = CanonicalMap(chart, fwd, inv, params)

    rng = rng or np.random.default_rng(5)
    pts = g.sample_points(check_points, rng)
    for z in pts:
        dv = exprcalc.evaluate(det_fwd, z, params)
        if abs(dv) < 1e-10:
            raise CanonError(f"non-invertible differential (det {dv:.3g}) at {z[:m]}")
        zi = g.apply(g.apply(z), inverse=True)
        if np.linalg.norm(zi - z) > 1e-9 * (1 + np.linalg.norm(z)):
            raise CanonError("psi_inverse does not invert psi on samples")
    return g


# ---------------------------------------------------------------------------
# validation

@dataclass
class CanonicalValidationReport:
    symplectic_residual: float
    fiber_homogeneity_residual: float
    inverse_residual: float
    min_image_covector: float
    worst_sample: Optional[np.ndarray]
    canonical: bool

    def __bool__(self):
        return self.canonical


def validate_canonical(
    g: CanonicalMap,
    samples=None,
    tol_symplectic: float = 1e-8,
    tol_homogeneity: float = 1e-9,
) -> CanonicalValidationReport:
    """Pullback residual g* omega - omega via pushforward frames, fiber
    1-homogeneity under lambda-scaling, inverse consistency, and preservation
    of T*_0 M on samples."""
    if samples is None:
        samples = g.sample_points()
    m = g.chart.dim_m
    Om = np.zeros((2 * m, 2 * m))
    for i in range(m):
        Om[i, m + i] = 1.0
        Om[m + i, i] = -1.0
    worst_symp, worst_hom, worst_inv = 0.0, 0.0, 0.0
    min_cov = math.inf
    worst_sample = None
    cov = g.covector_slots()
    for z in np.atleast_2d(samples):
        J = g.jacobian(z)
        r = float(np.max(np.abs(J.T @ Om @ J - Om)))
        if r > worst_symp:
            worst_symp, worst_sample = r, z.copy()
        gz = g.apply(z)
        min_cov = min(min_cov, float(np.linalg.norm(gz[cov])))
        for lam in (0.5, 2.0):
            zs = z.copy()
            zs[cov] *= lam
            gzs = g.apply(zs)
            expect = gz.copy()
            expect[cov] *= lam
            worst_hom = max(worst_hom, float(np.max(np.abs(gzs - expect))))
        zi = g.apply(gz, inverse=True)
        worst_inv = max(worst_inv, float(np.linalg.norm(zi - z)))
    ok = (worst_symp < tol_symplectic and worst_hom < tol_homogeneity
          and min_cov > 1e-10)
    rep = CanonicalValidationReport(worst_symp, worst_hom, worst_inv, min_cov,
                                    worst_sample, ok)
    g.symplectic_residual = worst_symp
    g.fiber_homogeneity_residual = worst_hom
    return rep


# ---------------------------------------------------------------------------
# graphs as Lagrangians

def _remap_to_primed(node: Node, chart: EmbeddingChart) -> Node:
    """Rewrite an AST over (x, y, th) to the primed half (xp, yp, pp, qp) of
    the T*(M x M) chart; norms over th are expanded into sqrt of squares."""
    k, nu = chart.dim_x, chart.nu

    def th_var(i: int) -> Node:
        return Var("pp", i) if i <= k else Var("qp", i - k)

    if isinstance(node, Var):
        if node.block == "x":
            return Var("xp", node.index)
        if node.block == "y":
            return Var("yp", node.index)
        if node.block == "th":
            return th_var(node.index)
        return node
    if isinstance(node, Norm):
        if node.block != "th":
            return Norm({"x": "xp", "y": "yp"}[node.block], node.lo, node.hi)
        acc = None
        for i in range(node.lo, node.hi + 1):
            sq = Pow(th_var(i), Fraction(2))
            acc = sq if acc is None else Add(acc, sq)
        return Call("sqrt", acc)
    if isinstance(node, (Num, exprcalc.Param)):
        return node
    if isinstance(node, Add):
        return Add(_remap_to_primed(node.a, chart), _remap_to_primed(node.b, chart))
    if isinstance(node, Sub):
        return Sub(_remap_to_primed(node.a, chart), _remap_to_primed(node.b, chart))
    if isinstance(node, Mul):
        return Mul(_remap_to_primed(node.a, chart), _remap_to_primed(node.b, chart))
    if isinstance(node, Div):
        return Div(_remap_to_primed(node.a, chart), _remap_to_primed(node.b, chart))
    if isinstance(node, Neg):
        return Neg(_remap_to_primed(node.a, chart))
    if isinstance(node, Pow):
        return Pow(_remap_to_primed(node.base, chart), node.expo)
    if isinstance(node, Call):
        return Call(node.fn, _remap_to_primed(node.arg, chart))
    raise CanonError(f"cannot remap {node!r}")


def graph_lagrangian(g: CanonicalMap, isotropy_tol: float = 1e-7,
                     check_points: int = 12, rng=None) -> ConstraintSubmanifold:
    """The set {(g(z'), z')} as a constraint submanifold of T*_0(M x M):
    constraints z - g(z') = 0 in the double chart; isotropy of tangent frames
    under omega_{MxM} is asserted on samples."""
    chart = g.chart
    dc = CotangentDoubleChart(chart.dim_x, chart.nu)
    lay = dc.layout()
    k, nu, m = chart.dim_x, chart.nu, chart.dim_m
    out_blocks = ([("x", i) for i in range(1, k + 1)]
                  + [("y", i) for i in range(1, nu + 1)]
                  + [("p", i) for i in range(1, k + 1)]
                  + [("q", i) for i in range(1, nu + 1)])
    cons = []
    for (blk, i), comp in zip(out_blocks, g.forward):
        node = Sub(Var(blk, i), _remap_to_primed(comp.ast, chart))
        cons.append(Expression(exprcalc._simplify(node), lay, g.params))
    sub = ConstraintSubmanifold(
        layout=lay,
        constraints=cons,
        expected_dim=2 * m,
        conic_blocks=("p", "q", "pp", "qp"),
        params=dict(g.params),
    )
    rng = rng or np.random.default_rng(11)
    zs = g.sample_points(check_points, rng)
    worst = 0.0
    for z in zs:
        gz = g.apply(z)
        pt = np.concatenate([gz, z])
        fr = geomcore.tangent_basis(sub, pt)
        worst = max(worst, geomcore.max_isotropy_defect(dc, fr))
    if worst > isotropy_tol:
        raise CanonError(
            f"graph is not isotropic (residual {worst:.3g}); "
            "inconsistent sign convention between omega and the graph chart"
        )
    return sub


# ---------------------------------------------------------------------------
# the Corollary conditions

@dataclass
class CorollaryReport:
    condition1: CleanReport
    condition2_passed: bool
    condition2_margin: float      # min residual of N*_0 X ∩ g(N*_0 X) over the slice
    theorem_style_gap: float      # conormal gap |(p_g, p')|/|cov| over {y'=0, y_g=0}
    witness: Optional[np.ndarray]
    order_bound_passed: Optional[bool] = None

    @property
    def passed(self) -> bool:
        return self.condition1.clean and self.condition2_passed


def _minimize_on_slice(f, dim_base: int, dim_cov: int, rng, n_starts: int = 400,
                       iters: int = 120, base_box: float = 2.0, top: int = 8):
    """Multi-start minimization of f(x, u) over a base box times the unit
    covector sphere; coordinate descent with shrinking steps."""
    best_v, best_z = math.inf, None
    seeds = []
    for _ in range(n_starts):
        x = rng.uniform(-base_box, base_box, size=dim_base)
        u = rng.normal(size=dim_cov)
        u /= np.linalg.norm(u)
        seeds.append((x, u))
    vals = []
    for x, u in seeds:
        try:
            vals.append(f(x, u))
        except exprcalc.SingularLocusError:
            vals.append(math.inf)
    order = np.argsort(vals)
    for idx in order[:top]:
        x, u = seeds[idx]
        v = vals[idx]
        step = 0.3
        for _ in range(iters):
            improved = False
            for j in range(dim_base):
                for s in (+step, -step):
                    xn = x.copy(); xn[j] += s
                    try:
                        vn = f(xn, u)
                    except exprcalc.SingularLocusError:
                        continue
                    if vn < v:
                        x, v, improved = xn, vn, True
            for j in range(dim_cov):
                for s in (+step, -step):
                    un = u.copy(); un[j] += s
                    nrm = np.linalg.norm(un)
                    if nrm < 1e-12:
                        continue
                    un /= nrm
                    try:
                        vn = f(x, un)
                    except exprcalc.SingularLocusError:
                        continue
                    if vn < v:
                        u, v, improved = un, vn, True
            if not improved:
                step *= 0.5
                if step < 1e-9:
                    break
        if v < best_v:
            best_v, best_z = v, (x.copy(), u.copy())
    return best_v, best_z


def check_corollary_conditions(
    g: CanonicalMap,
    chart: EmbeddingChart,
    delta: float = 1e-3,
    rng=None,
) -> CorollaryReport:
    """Condition 1: cleanness of T*_0 M|_X ∩ g(T*_0 M|_X), via constraint sets
    {y = 0} and {y(g^{-1} z) = 0}.  Condition 2: emptiness of
    N*_0 X ∩ g(N*_0 X), decided by minimizing the membership residual over the
    compact slice of N*_0 X.  Also computes the conormal gap in the theorem's
    normalization over {y' = 0, y(g(z')) = 0} for the graph-lemma cross-check.
    """
    rng = rng or np.random.default_rng(17)
    lay = g.layout
    k, nu, m = chart.dim_x, chart.nu, chart.dim_m

    y_exprs = [Expression(Var("y", i), lay, g.params) for i in range(1, nu + 1)]
    z_sub = ConstraintSubmanifold(
        layout=lay, constraints=y_exprs, expected_dim=2 * m - nu,
        conic_blocks=("th",), params=dict(g.params),
    )
    # g(Z) = {z : y-components of g^{-1}(z) vanish}
    gz_exprs = [g.inverse[k + i] for i in range(nu)]
    gz_sub = ConstraintSubmanifold(
        layout=lay, constraints=gz_exprs, expected_dim=2 * m - nu,
        conic_blocks=("th",), params=dict(g.params),
    )
    cond1 = clean_intersection_check(z_sub, gz_sub, rng=rng)

    # condition 2: z = (x, 0; 0, q) in N*_0 X, residual = normalized distance
    # of g(z) from N*X
    def conormal_residual(x, qu):
        z = np.zeros(2 * m)
        z[:k] = x
        z[m + k:] = qu
        gz = g.apply(z)
        num = np.concatenate([gz[k:m], gz[m:m + k]])  # (y(gz), p(gz))
        den = np.linalg.norm(gz[m:])
        return float(np.linalg.norm(num) / den) if den > 0 else math.inf

    margin2, zbest = _minimize_on_slice(conormal_residual, k, nu, rng)
    cond2 = margin2 >= delta
    witness = None
    if not cond2 and zbest is not None:
        z = np.zeros(2 * m)
        z[:k] = zbest[0]
        z[m + k:] = zbest[1]
        witness = z

    # theorem-style conormal gap over {y' = 0, y(g(z')) = 0}: project
    # (x', rho') jointly onto the constraint, normalize rho' afterwards
    # (exact, since base(g) is 0-homogeneous in the covector)
    y_g_exprs = [g.forward[k + i] for i in range(nu)]
    free = list(range(k)) + list(range(m, 2 * m))  # x' and rho' slots
    y_g_grads = [[e.diff(s) for s in free] for e in y_g_exprs]

    def thm_gap(xp, rho_u):
        def assemble(u):
            z = np.zeros(2 * m)
            z[:k] = u[:k]
            z[m:] = u[k:]
            return z

        def resid(u):
            return np.array([exprcalc.evaluate(e, assemble(u), g.params)
                             for e in y_g_exprs])

        def jac(u):
            z = assemble(u)
            return np.array([[exprcalc.evaluate(e, z, g.params) for e in row]
                             for row in y_g_grads])

        u0 = np.concatenate([xp, rho_u])
        u, ok, _ = gauss_newton(resid, jac, u0, tol=1e-12, max_iter=40)
        nrm = np.linalg.norm(u[k:])
        if not ok or nrm < 1e-10:
            return math.inf
        zz = assemble(u)
        zz[m:] /= nrm
        gz = g.apply(zz)
        pp = np.concatenate([gz[m:m + k], zz[m:m + k]])
        cov = np.concatenate([gz[m:], zz[m:]])
        return float(np.linalg.norm(pp) / np.linalg.norm(cov))

    thm_margin, _ = _minimize_on_slice(thm_gap, k, m, rng, n_starts=60,
                                       iters=50, top=3)
    return CorollaryReport(cond1, cond2, float(margin2), float(thm_margin), witness)


def check_order_bound(order_phi: float, chart: EmbeddingChart) -> bool:
    """Sobolev-scale boundedness of the trace needs ord Phi < -codim X
    (strict); informational only."""
    return order_phi < -chart.nu
