"""Symplectic and linear-algebra primitives: numerical rank, tangent spaces,
cone sampling, Gauss-Newton projection onto constraint sets, and
clean-intersection certification on finite samples.

Chart orderings are fixed once:
  T*(M x M):  (x_1..x_k, y_1..y_nu, p_1..p_k, q_1..q_nu,
               x'_1..x'_k, y'_1..y'_nu, p'_1..p'_k, q'_1..q'_nu)
  T*(X x X):  (x, p, x', p')
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import exprcalc
from .exprcalc import BlockLayout, Expression, SingularLocusError

__all__ = [
    "numeric_rank",
    "rank_with_gap",
    "nullspace",
    "GeomError",
    "RankDeficiencyError",
    "SamplerStarvationError",
    "ConstraintSubmanifold",
    "CleanReport",
    "clean_intersection_check",
    "intersection_samples",
    "CotangentDoubleChart",
    "CotangentPairChart",
    "symplectic_form_value",
    "symplectic_matrix",
    "gauss_newton",
    "tangent_basis",
    "sample_cone",
    "subspace_intersection_dim",
]

RANK_TOL_REL = 1e-8
MARGINAL_GAP = 1e3


class GeomError(ValueError):
    pass


class RankDeficiencyError(GeomError):
    pass


class SamplerStarvationError(GeomError):
    def __init__(self, message, acceptance_rate):
        self.acceptance_rate = acceptance_rate
        super().__init__(f"{message} (acceptance rate {acceptance_rate:.3g})")


# ---------------------------------------------------------------------------
# rank decisions

def numeric_rank(matrix, tol_rel: float = RANK_TOL_REL) -> int:
    """Number of singular values above tol_rel times the largest one."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    if m.size == 0:
        return 0
    if not np.all(np.isfinite(m)):
        raise GeomError("matrix has non-finite entries")
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > tol_rel * s[0]))


@dataclass
class RankDecision:
    rank: int
    gap: float      # sigma_r / sigma_{r+1}; inf when full or zero rank
    marginal: bool  # gap below MARGINAL_GAP

    def __int__(self):
        return self.rank


def rank_with_gap(matrix, tol_rel: float = RANK_TOL_REL) -> RankDecision:
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    r = numeric_rank(m, tol_rel)
    s = np.linalg.svd(m, compute_uv=False) if m.size else np.array([])
    if r == 0 or r >= len(s) or s[r] == 0.0:
        return RankDecision(r, float("inf"), False)
    gap = float(s[r - 1] / s[r]) if r >= 1 else float("inf")
    return RankDecision(r, gap, gap < MARGINAL_GAP)


def nullspace(matrix, tol_rel: float = RANK_TOL_REL) -> np.ndarray:
    """Orthonormal basis (columns) of the kernel."""
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    u, s, vt = np.linalg.svd(m)
    r = int(np.sum(s > tol_rel * s[0])) if s.size and s[0] > 0 else 0
    return vt[r:].T


def orthonormal_range(vectors, tol_rel: float = RANK_TOL_REL) -> np.ndarray:
    """Orthonormal basis (columns) of the span of the given column vectors."""
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    u, s, _ = np.linalg.svd(v, full_matrices=False)
    r = int(np.sum(s > tol_rel * s[0])) if s.size and s[0] > 0 else 0
    return u[:, :r]


def subspace_intersection_dim(basis_a, basis_b, tol_rel=RANK_TOL_REL) -> int:
    """dim(span A  ∩  span B) = dim A + dim B - rank [A | B]."""
    a = np.atleast_2d(np.asarray(basis_a, dtype=float))
    b = np.atleast_2d(np.asarray(basis_b, dtype=float))
    da, db = a.shape[1], b.shape[1]
    if da == 0 or db == 0:
        return 0
    return da + db - numeric_rank(np.hstack([a, b]), tol_rel)


# ---------------------------------------------------------------------------
# symplectic charts

@dataclass(frozen=True)
class CotangentDoubleChart:
    """T*(M x M) with the sign split: unprimed block +, primed block -."""

    dim_x: int
    nu: int

    @property
    def dim_m(self) -> int:
        return self.dim_x + self.nu

    @property
    def total_dim(self) -> int:
        return 4 * self.dim_m

    def layout(self) -> BlockLayout:
        k, nu = self.dim_x, self.nu
        return BlockLayout((
            ("x", k), ("y", nu), ("p", k), ("q", nu),
            ("xp", k), ("yp", nu), ("pp", k), ("qp", nu),
        ))


@dataclass(frozen=True)
class CotangentPairChart:
    """T*(X x X) in the ordering (x, p, x', p')."""

    dim_x: int

    @property
    def total_dim(self) -> int:
        return 4 * self.dim_x

    def layout(self) -> BlockLayout:
        k = self.dim_x
        return BlockLayout((("x", k), ("p", k), ("xp", k), ("pp", k)))


def symplectic_matrix(space) -> np.ndarray:
    """Matrix J with omega(u, v) = u . J v in the chart ordering."""
    if isinstance(space, CotangentDoubleChart):
        m = space.dim_m
        J = np.zeros((4 * m, 4 * m))
        # dx ^ dp + dy ^ dq on the unprimed half
        for i in range(m):
            J[i, m + i] = 1.0
            J[m + i, i] = -1.0
        # minus the same on the primed half
        for i in range(m):
            J[2 * m + i, 3 * m + i] = -1.0
            J[3 * m + i, 2 * m + i] = 1.0
        return J
    if isinstance(space, CotangentPairChart):
        k = space.dim_x
        J = np.zeros((4 * k, 4 * k))
        for i in range(k):
            J[i, k + i] = 1.0
            J[k + i, i] = -1.0
        for i in range(k):
            J[2 * k + i, 3 * k + i] = -1.0
            J[3 * k + i, 2 * k + i] = 1.0
        return J
    raise GeomError(f"unknown symplectic space descriptor {space!r}")


def symplectic_form_value(space, u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    J = symplectic_matrix(space)
    if u.shape[-1] != J.shape[0] or v.shape[-1] != J.shape[0]:
        raise GeomError(
            f"tangent vectors of length {u.shape[-1]}/{v.shape[-1]} do not fit chart dim {J.shape[0]}"
        )
    return float(u @ J @ v) if u.ndim == 1 else np.einsum("...i,ij,...j->...", u, J, v)


def max_isotropy_defect(space, frame: np.ndarray) -> float:
    """max |omega(u_i, u_j)| over all pairs of frame columns."""
    J = symplectic_matrix(space)
    G = frame.T @ J @ frame
    return float(np.max(np.abs(G))) if G.size else 0.0


# ---------------------------------------------------------------------------
# Gauss-Newton on residual maps

def gauss_newton(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    x0,
    tol: float = 1e-12,
    max_iter: int = 150,
    step_shrink: float = 0.5,
    max_step: float = 1e3,
):
    """Damped Gauss-Newton for (possibly underdetermined) residual = 0.

    Returns (x, converged, resnorm) with converged = resnorm < tol.
    Underdetermined systems take the minimum-norm step (lstsq), so iterates
    project roughly orthogonally onto the solution manifold.  Iteration
    continues past tol until the step stalls: degenerate directions (residual
    vanishing to second order) converge only linearly, and stopping at tol
    would leave sqrt(tol)-size coordinate errors that corrupt downstream rank
    decisions.
    """
    x = np.asarray(x0, dtype=float).copy()
    try:
        r = np.atleast_1d(residual(x))
    except SingularLocusError:
        return x, False, np.inf
    fnorm = float(np.linalg.norm(r))
    for _ in range(max_iter):
        if fnorm == 0.0:
            return x, True, fnorm
        try:
            J = np.atleast_2d(jacobian(x))
        except SingularLocusError:
            return x, False, fnorm
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        snorm = float(np.linalg.norm(step))
        if not np.isfinite(snorm):
            return x, fnorm < tol, fnorm
        if snorm > max_step:
            return x, False, fnorm
        t = 1.0
        while t > 1e-8:
            try:
                r_new = np.atleast_1d(residual(x + t * step))
            except SingularLocusError:
                t *= step_shrink
                continue
            fn = float(np.linalg.norm(r_new))
            if fn < fnorm:
                x = x + t * step
                r, fnorm = r_new, fn
                break
            t *= step_shrink
        else:
            return x, fnorm < tol, fnorm
        if snorm * t < 1e-15 * (1.0 + np.linalg.norm(x)):
            break
    return x, fnorm < tol, fnorm


# ---------------------------------------------------------------------------
# constraint submanifolds

@dataclass
class ConstraintSubmanifold:
    """Zero set of a list of constraint Expressions inside a flat ambient chart.

    `conic_blocks` names the blocks under whose joint positive scaling the set
    is invariant (the fiber variables).  `domain` lists strict-positivity
    expressions cutting out the open cone the set lives in.
    """

    layout: BlockLayout
    constraints: list
    expected_dim: int
    conic_blocks: tuple = ()
    domain: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    tol_residual: float = 1e-9

    @property
    def ambient_dim(self) -> int:
        return self.layout.total_dim

    def fiber_slots(self) -> list:
        out = []
        for b in self.conic_blocks:
            out.extend(self.layout.slots(b))
        return out

    def residual(self, point) -> np.ndarray:
        pt = np.asarray(point, dtype=float)
        vals = [exprcalc.evaluate(c, pt, self.params) for c in self.constraints]
        return np.stack([np.asarray(v, dtype=float) for v in vals], axis=-1) if pt.ndim > 1 \
            else np.array(vals, dtype=float)

    def jacobian(self, point) -> np.ndarray:
        pt = np.asarray(point, dtype=float)
        rows = []
        for c in self.constraints:
            rows.append([exprcalc.evaluate(c.diff(s), pt, self.params)
                         for s in range(self.ambient_dim)])
        return np.asarray(rows, dtype=float)

    def in_domain(self, point, margin: float = 1e-9) -> bool:
        pt = np.asarray(point, dtype=float)
        for d in self.domain:
            try:
                if exprcalc.evaluate(d, pt, self.params) <= margin:
                    return False
            except SingularLocusError:
                return False
        for c in self.constraints:
            if not exprcalc.guards_ok(c, pt, self.params):
                return False
        return True

    def contains(self, point, tol: Optional[float] = None) -> bool:
        tol = self.tol_residual if tol is None else tol
        try:
            r = self.residual(point)
        except SingularLocusError:
            return False
        return bool(np.linalg.norm(r) < tol) and self.in_domain(point)

    def project(self, seed, tol: float = 1e-12):
        """Gauss-Newton projection of a seed onto the zero set."""
        x, ok, rn = gauss_newton(self.residual, self.jacobian, seed, tol=tol)
        return x, ok and self.in_domain(x), rn


def tangent_basis(sub: ConstraintSubmanifold, point, tol_rel=RANK_TOL_REL) -> np.ndarray:
    """Orthonormal columns spanning the tangent space at a regular point."""
    pt = np.asarray(point, dtype=float)
    r = sub.residual(pt)
    if np.linalg.norm(r) > max(sub.tol_residual, 1e-7):
        raise GeomError(f"point violates constraints (residual {np.linalg.norm(r):.3g})")
    J = sub.jacobian(pt)
    rk = numeric_rank(J, tol_rel)
    if rk != sub.ambient_dim - sub.expected_dim:
        raise RankDeficiencyError(
            f"not a regular point: constraint rank {rk}, expected "
            f"{sub.ambient_dim - sub.expected_dim}"
        )
    return nullspace(J, tol_rel)


def sample_cone(
    sub: ConstraintSubmanifold,
    count: int,
    radii=(1.0, 1.0),
    rng: Optional[np.random.Generator] = None,
    base_box: float = 2.0,
    budget_factor: int = 200,
) -> np.ndarray:
    """Draw points on a conic constraint set with fiber norm inside [r_min, r_max].

    Random seeds are Gauss-Newton-projected onto the set; fiber scaling then
    places the fiber norm (valid precisely because the set is conic).  Points
    violating domain predicates or singular-locus guards are rejected.
    """
    if not sub.conic_blocks:
        raise GeomError("sample_cone requires a conic submanifold")
    rng = rng or np.random.default_rng(0)
    r_min, r_max = radii
    fiber = sub.fiber_slots()
    others = [i for i in range(sub.ambient_dim) if i not in fiber]
    out = []
    tried = 0
    budget = budget_factor * count
    while len(out) < count and tried < budget:
        tried += 1
        seed = np.zeros(sub.ambient_dim)
        if others:
            seed[others] = rng.uniform(-base_box, base_box, size=len(others))
        u = rng.normal(size=len(fiber))
        u /= np.linalg.norm(u)
        seed[fiber] = u * rng.uniform(max(r_min, 0.2), max(r_max, 0.4))
        x, ok, _ = sub.project(seed)
        if not ok:
            continue
        fn = np.linalg.norm(x[fiber])
        if fn < 1e-12:
            continue
        target = rng.uniform(r_min, r_max)
        x = x.copy()
        x[fiber] *= target / fn
        if not sub.contains(x, tol=1e-8):
            continue
        if any(np.linalg.norm(x - y) < 1e-10 for y in out):
            continue
        out.append(x)
    if len(out) < count:
        raise SamplerStarvationError(
            f"cone sampler starved: {len(out)}/{count} accepted", len(out) / max(tried, 1)
        )
    return np.array(out)


# ---------------------------------------------------------------------------
# clean intersections

@dataclass
class CleanReport:
    is_manifold: bool
    intersection_dim: int
    rank_constant: bool
    tangent_equality: bool
    excess_over_transversal: int
    samples_used: int
    worst_gap: float
    empty: bool = False
    inconclusive: bool = False
    note: str = ""

    @property
    def clean(self) -> bool:
        return self.empty or (self.is_manifold and self.rank_constant and self.tangent_equality)


def intersection_samples(
    a: ConstraintSubmanifold,
    b: ConstraintSubmanifold,
    count: int = 30,
    rng: Optional[np.random.Generator] = None,
    base_box: float = 2.0,
    budget_factor: int = 120,
):
    """Points on the intersection of two constraint sets sharing an ambient chart.

    Returns (samples, status) with status in {"ok", "empty", "inconclusive"}.
    Emptiness is concluded when every seed stalls at a distinctly positive
    residual; mixed failures are inconclusive.
    """
    if a.layout != b.layout:
        raise GeomError("intersection requires a common ambient layout")
    rng = rng or np.random.default_rng(0)
    stacked = ConstraintSubmanifold(
        layout=a.layout,
        constraints=list(a.constraints) + list(b.constraints),
        expected_dim=0,  # unknown; not used for projection
        conic_blocks=a.conic_blocks or b.conic_blocks,
        domain=list(a.domain) + list(b.domain),
        params={**a.params, **b.params},
    )
    fiber = stacked.fiber_slots()
    others = [i for i in range(stacked.ambient_dim) if i not in fiber]
    samples, stall_residuals, failures = [], [], 0
    tried = 0
    budget = budget_factor * count
    while len(samples) < count and tried < budget:
        tried += 1
        seed = np.zeros(stacked.ambient_dim)
        if others:
            seed[others] = rng.uniform(-base_box, base_box, size=len(others))
        if fiber:
            u = rng.normal(size=len(fiber))
            u /= np.linalg.norm(u)
            seed[fiber] = u
        x, ok, rn = gauss_newton(stacked.residual, stacked.jacobian, seed, tol=1e-12)
        if ok and stacked.in_domain(x):
            if fiber:
                fn = np.linalg.norm(x[fiber])
                if fn < 1e-10:
                    failures += 1
                    continue
                x = x.copy()
                x[fiber] /= fn
            if any(np.linalg.norm(x - y) < 1e-8 for y in samples):
                continue
            samples.append(x)
        elif np.isfinite(rn) and rn > 1e-6:
            stall_residuals.append(rn)
        else:
            failures += 1
    if samples:
        return np.array(samples), "ok"
    if stall_residuals and len(stall_residuals) >= 0.8 * tried:
        return np.zeros((0, stacked.ambient_dim)), "empty"
    return np.zeros((0, stacked.ambient_dim)), "inconclusive"


def _cap_basis(Ja, Jb, angle_tol: float = 1e-7) -> np.ndarray:
    """Orthonormal basis of T_A ∩ T_B from the tangent bases.

    Ta columns are unit vectors, so the off-subspace residual is thresholded
    absolutely (a relative SVD cut misjudges the rank when the whole residual
    matrix is at roundoff scale)."""
    Ta, Tb = nullspace(Ja), nullspace(Jb)
    if Ta.shape[1] == 0 or Tb.shape[1] == 0:
        return np.zeros((Ja.shape[1], 0))
    Pb = Tb @ Tb.T
    resid = Ta - Pb @ Ta
    _, svals, vt = np.linalg.svd(resid)
    r = int(np.sum(svals > angle_tol))
    ker = vt[r:].T
    return orthonormal_range(Ta @ ker) if ker.shape[1] else np.zeros((Ja.shape[1], 0))


def _movable_dim(stacked: ConstraintSubmanifold, pt, cap, delta_rel: float = 1e-3) -> int:
    """Dimension of the intersection as a SET at a sample: count tangent-cap
    directions along which a perturbed point projects back near the displaced
    position.  At degenerate points the pointwise stacked-Jacobian rank
    overestimates the set dimension; probing does not."""
    delta = delta_rel * (1.0 + float(np.linalg.norm(pt)))
    cnt = 0
    for v in cap.T:
        probe = pt + delta * v
        q, ok, _ = stacked.project(probe)
        if not ok:
            continue
        move = q - pt
        along = float(move @ v)
        if along >= 0.5 * delta and np.linalg.norm(move) <= 3.0 * delta:
            cnt += 1
    return cnt


def clean_intersection_check(
    a: ConstraintSubmanifold,
    b: ConstraintSubmanifold,
    samples=None,
    tol_rel: float = RANK_TOL_REL,
    count: int = 30,
    rng: Optional[np.random.Generator] = None,
    probe_samples: int = 12,
) -> CleanReport:
    """Certify cleanness of the intersection on finite samples.

    Per sample, dim(T_A ∩ T_B) comes from the stacked tangent bases; the
    manifold dimension of A ∩ B is measured set-theoretically by probing
    (perturb along each tangent-cap direction and reproject), since the
    stacked-Jacobian rank is only valid at regular points.  The verdict is a
    statement about the samples used, never a universal claim.
    """
    if samples is None:
        samples, status = intersection_samples(a, b, count=count, rng=rng)
        if status == "empty":
            return CleanReport(True, -1, True, True, 0, 0, 0.0, empty=True,
                               note="empty intersection")
        if status == "inconclusive":
            return CleanReport(False, -1, False, False, 0, 0, float("nan"),
                               inconclusive=True, note="intersection search inconclusive")
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if len(samples) == 0:
        return CleanReport(True, -1, True, True, 0, 0, 0.0, empty=True)

    stacked = ConstraintSubmanifold(
        layout=a.layout,
        constraints=list(a.constraints) + list(b.constraints),
        expected_dim=0,
        conic_blocks=a.conic_blocks or b.conic_blocks,
        domain=list(a.domain) + list(b.domain),
        params={**a.params, **b.params},
    )
    stacked_ranks, set_dims = [], []
    tangent_ok = True
    worst_gap = 0
    stride = max(1, len(samples) // probe_samples)
    for i, pt in enumerate(samples):
        Ja, Jb = a.jacobian(pt), b.jacobian(pt)
        cap = _cap_basis(Ja, Jb, tol_rel)
        stacked_ranks.append(numeric_rank(np.vstack([Ja, Jb]), tol_rel))
        if i % stride != 0:
            continue
        dim_set = _movable_dim(stacked, pt, cap)
        set_dims.append(dim_set)
        gap = cap.shape[1] - dim_set
        if gap != 0:
            tangent_ok = False
        worst_gap = max(worst_gap, abs(gap))
    rank_constant = len(set(stacked_ranks)) == 1
    dims_constant = len(set(set_dims)) == 1
    dim_int = set_dims[0] if dims_constant else max(set_dims)
    transversal_dim = a.expected_dim + b.expected_dim - a.ambient_dim
    return CleanReport(
        is_manifold=rank_constant and dims_constant,
        intersection_dim=dim_int,
        rank_constant=rank_constant,
        tangent_equality=tangent_ok,
        excess_over_transversal=dim_int - transversal_dim,
        samples_used=len(samples),
        worst_gap=float(worst_gap),
    )
