"""Stationary-phase engine for the traced kernel: canonical coordinates
w = (x_I, p_Ibar; x'_I', p'_Ibar') on the traced Lagrangian, generating
functions, elimination of excess via an orthogonal theta-splitting, stationary
points with their Hessians, and the leading canonical amplitude b0(w).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import exprcalc, geomcore
from .exprcalc import Expression
from .geomcore import gauss_newton, numeric_rank, nullspace, orthonormal_range
from .phasefn import CriticalManifold, PhaseFunction
from .tracemod import EmbeddingChart, RestrictedPhase, TracedLagrangianSamples

__all__ = [
    "CanonicalChart",
    "ThetaSplitting",
    "StationaryPointData",
    "FiberTrace",
    "StatPhaseError",
    "ChartRankError",
    "DegenerateHessianError",
    "UnboundedFiberError",
    "fit_canonical_chart",
    "generating_function_value",
    "compute_theta_splitting",
    "find_stationary_point",
    "fiber_trace",
    "leading_amplitude",
    "AmplitudeResult",
]


class StatPhaseError(ValueError):
    pass


class ChartRankError(StatPhaseError):
    pass


class DegenerateHessianError(StatPhaseError):
    pass


class UnboundedFiberError(StatPhaseError):
    pass


HESSIAN_DET_MIN = 1e-8
EIG_GUARD_REL = 1e-8


# ---------------------------------------------------------------------------
# canonical charts on the traced Lagrangian

@dataclass
class CanonicalChart:
    """Index sets I, I' ⊆ {1..n} fixing w = (x_I, p_Ibar; x'_I', p'_Ibar').

    `generating` is a user-supplied S(w) Expression over the block ('w', 2n),
    or None for critical-value mode (S recovered from the stationary value).
    """

    embedding: EmbeddingChart
    I: tuple
    Ip: tuple
    generating: Optional[Expression] = None

    def __post_init__(self):
        n = self.embedding.dim_x
        self.I = tuple(sorted(self.I))
        self.Ip = tuple(sorted(self.Ip))
        for i in self.I + self.Ip:
            if not 1 <= i <= n:
                raise StatPhaseError(f"index {i} outside 1..{n}")

    @property
    def n(self) -> int:
        return self.embedding.dim_x

    @property
    def Ibar(self) -> tuple:
        return tuple(i for i in range(1, self.n + 1) if i not in self.I)

    @property
    def Ipbar(self) -> tuple:
        return tuple(i for i in range(1, self.n + 1) if i not in self.Ip)

    def w_dim(self) -> int:
        return 2 * self.n

    def w_layout(self):
        return exprcalc.layout(("w", 2 * self.n))

    def w_slots_in_pair_chart(self) -> list:
        """Flat slots of the w-functions inside the (x, p, x', p') chart."""
        n = self.n
        slots = []
        for i in self.I:
            slots.append(i - 1)            # x_i
        for i in self.Ibar:
            slots.append(n + i - 1)        # p_i
        for i in self.Ip:
            slots.append(2 * n + i - 1)    # x'_i
        for i in self.Ipbar:
            slots.append(3 * n + i - 1)    # p'_i
        return slots

    def fiber_w_positions(self) -> list:
        """Positions inside w of the momentum-type coordinates (conic scaling)."""
        pos = []
        k = len(self.I)
        pos.extend(range(k, k + len(self.Ibar)))
        k2 = k + len(self.Ibar) + len(self.Ip)
        pos.extend(range(k2, k2 + len(self.Ipbar)))
        return pos

    def w_of_pair_point(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z[self.w_slots_in_pair_chart()]


def fit_canonical_chart(
    traced: TracedLagrangianSamples,
    index_sets,
    generating: Optional[Expression] = None,
    tol_canonical: float = 1e-8,
) -> CanonicalChart:
    """Verify that the w-functions restrict to a chart on the traced Lagrangian
    (full-rank differential on the tangent frames at every sample)."""
    I, Ip = index_sets
    chart = CanonicalChart(traced.chart, tuple(I), tuple(Ip), generating)
    slots = chart.w_slots_in_pair_chart()
    for z, fr in zip(traced.points, traced.frames):
        W = fr[slots, :]
        r = numeric_rank(W)
        if r != chart.w_dim():
            raise ChartRankError(
                f"not a chart; choose different index sets (w-differential rank {r} "
                f"of {chart.w_dim()} on the sample frames)"
            )
    if generating is not None:
        _validate_generating(chart, traced, tol_canonical)
    return chart


def _validate_generating(chart: CanonicalChart, traced, tol: float):
    """The four defining equations of the canonical form, plus 1-homogeneity of
    S in the momentum-type w coordinates."""
    S = chart.generating
    n = chart.n
    lay = S.layout
    grads = [S.diff(s) for s in range(2 * n)]
    worst = 0.0
    for z in traced.points:
        w = chart.w_of_pair_point(z)
        g = np.array([exprcalc.evaluate(gr, w) for gr in grads])
        # w ordering: (x_I, p_Ibar, x'_I', p'_Ibar')
        k = 0
        resid = []
        for i in chart.I:       # p_i = +dS/dx_i
            resid.append(z[n + i - 1] - g[k]); k += 1
        for i in chart.Ibar:    # x_i = -dS/dp_i
            resid.append(z[i - 1] + g[k]); k += 1
        for i in chart.Ip:      # p'_i = -dS/dx'_i
            resid.append(z[3 * n + i - 1] + g[k]); k += 1
        for i in chart.Ipbar:   # x'_i = +dS/dp'_i
            resid.append(z[2 * n + i - 1] - g[k]); k += 1
        worst = max(worst, float(np.max(np.abs(resid))))
    if worst > tol:
        raise StatPhaseError(
            f"user generating function violates the canonical equations "
            f"(worst residual {worst:.3g})"
        )
    fiber_pos = chart.fiber_w_positions()
    ws = np.array([chart.w_of_pair_point(z) for z in traced.points])
    rep = _euler_on_slots(S, ws, fiber_pos, degree=1.0, tol=1e-9)
    if not rep:
        raise StatPhaseError("generating function is not 1-homogeneous in the fiber coordinates")


def _euler_on_slots(expr: Expression, samples, slots, degree: float, tol: float) -> bool:
    grads = [expr.diff(s) for s in slots]
    for p in np.atleast_2d(samples):
        f = exprcalc.evaluate(expr, p)
        euler = sum(p[s] * exprcalc.evaluate(g, p) for s, g in zip(slots, grads))
        if abs(euler - degree * f) > tol * (1.0 + abs(f)):
            return False
    return True


# ---------------------------------------------------------------------------
# theta splitting (elimination of excess)

@dataclass
class ThetaSplitting:
    rotation: np.ndarray   # orthogonal N x N; columns [theta' dirs | theta'' dirs]
    e: int
    base_point: np.ndarray
    min_theta_prime: float  # min |theta'| / |theta| over the critical samples

    @property
    def n_theta(self) -> int:
        return self.rotation.shape[0]

    def q_prime(self) -> np.ndarray:
        return self.rotation[:, : self.n_theta - self.e]

    def q_dprime(self) -> np.ndarray:
        return self.rotation[:, self.n_theta - self.e:]

    def split(self, theta) -> tuple:
        th = np.asarray(theta, dtype=float)
        return self.q_prime().T @ th, self.q_dprime().T @ th

    def assemble(self, theta_p, theta_dd) -> np.ndarray:
        out = self.q_prime() @ np.asarray(theta_p, dtype=float)
        if self.e:
            out = out + self.q_dprime() @ np.asarray(theta_dd, dtype=float)
        return out


def compute_theta_splitting(
    restricted: RestrictedPhase,
    crit: CriticalManifold,
    base_point=None,
    span_tol: float = 1e-6,
    min_theta_prime_tol: float = 1e-6,
) -> ThetaSplitting:
    """Single orthogonal transform whose last e columns span the theta-part of
    the fiber tangent ker d(gamma) ∩ T C at the base point; asserts theta'
    stays away from zero on every critical sample after rotation."""
    phase = restricted.phase
    N = phase.n_theta
    e = crit.excess
    if base_point is None:
        if crit.empty:
            raise StatPhaseError("cannot split theta for an empty critical set")
        base_point = crit.points[0]
    if e == 0:
        return ThetaSplitting(np.eye(N), 0, np.asarray(base_point), 1.0)
    idx = int(np.argmin(np.linalg.norm(crit.points - np.asarray(base_point), axis=1)))
    frame = crit.fibration_frames[idx]
    th_slots = phase.theta_slots()
    base_part = np.delete(frame, th_slots, axis=0)
    if base_part.size and np.max(np.abs(base_part)) > span_tol:
        raise StatPhaseError(
            "fiber tangent has base-variable components; not a gamma fibration frame"
        )
    F = orthonormal_range(frame[th_slots, :])
    if F.shape[1] != e:
        raise StatPhaseError(
            f"fiber tangent theta-projection has rank {F.shape[1]}, expected e = {e}"
        )
    # complete to an orthogonal matrix with the fiber span as the LAST e columns
    u = np.linalg.svd(F)[0]
    comp = u[:, e:]  # orthogonal complement of span(F)
    Q = np.hstack([comp, F])
    worst = math.inf
    for p in crit.points:
        th = p[th_slots]
        tp = Q[:, : N - e].T @ th
        worst = min(worst, float(np.linalg.norm(tp) / np.linalg.norm(th)))
    if worst < min_theta_prime_tol:
        raise StatPhaseError(
            f"theta' vanishes on a critical sample (min ratio {worst:.3g}); "
            "neighbourhood too large, shrink the chart"
        )
    return ThetaSplitting(Q, e, np.asarray(base_point), worst)


# ---------------------------------------------------------------------------
# the big phase and its stationary points

@dataclass
class StationaryPointData:
    point: np.ndarray          # reduced variables (x_Ibar, x'_Ipbar, theta')
    full_point: np.ndarray     # assembled (x, x', theta) in the restricted layout
    hessian: np.ndarray
    det: float
    signature: int
    critical_value: float
    w: np.ndarray
    theta_dd: np.ndarray
    grad_norm: float


class _BigPhase:
    """phi_XX(x, x', theta) - p_Ibar . x_Ibar + p'_Ipbar . x'_Ipbar in the
    reduced variables u = (x_Ibar, x'_Ipbar, theta'), with w and theta'' fixed."""

    def __init__(self, chart: CanonicalChart, restricted: RestrictedPhase,
                 splitting: ThetaSplitting):
        self.chart = chart
        self.phase = restricted.phase
        self.split = splitting
        lay = self.phase.layout
        n = chart.n
        self.n = n
        self.N = self.phase.n_theta
        self.e = splitting.e
        self.x_slots = list(lay.slots("x"))
        self.xp_slots = list(lay.slots("xp"))
        self.th_slots = list(lay.slots("th"))
        self.u_base_slots = ([self.x_slots[i - 1] for i in chart.Ibar]
                             + [self.xp_slots[i - 1] for i in chart.Ipbar])
        self.n_u = len(self.u_base_slots) + (self.N - self.e)
        # w decomposition: (x_I, p_Ibar, x'_I', p'_Ipbar)
        k = len(chart.I)
        self.w_x_I = slice(0, k)
        self.w_p_Ibar = slice(k, k + len(chart.Ibar))
        k2 = k + len(chart.Ibar)
        self.w_xp_Ip = slice(k2, k2 + len(chart.Ip))
        k3 = k2 + len(chart.Ip)
        self.w_pp_Ipbar = slice(k3, k3 + len(chart.Ipbar))
        # symbolic first and second derivatives of phi_XX over all slots
        slots = list(range(lay.total_dim))
        self.grad_exprs = [self.phase.phi.diff(s) for s in slots]
        self.hess_exprs = {}
        rel = self.u_base_slots + self.th_slots
        for i in rel:
            gi = self.grad_exprs[i]
            for j in rel:
                if (j, i) in self.hess_exprs:
                    self.hess_exprs[(i, j)] = self.hess_exprs[(j, i)]
                else:
                    self.hess_exprs[(i, j)] = gi.diff(j)

    def assemble(self, u, w, theta_dd) -> np.ndarray:
        pt = np.zeros(self.phase.ambient_dim)
        for pos, i in enumerate(self.chart.I):
            pt[self.x_slots[i - 1]] = w[self.w_x_I][pos]
        for pos, i in enumerate(self.chart.Ip):
            pt[self.xp_slots[i - 1]] = w[self.w_xp_Ip][pos]
        nb = len(self.u_base_slots)
        for s, val in zip(self.u_base_slots, u[:nb]):
            pt[s] = val
        theta = self.split.assemble(u[nb:], theta_dd)
        pt[self.th_slots] = theta
        return pt

    def reduce(self, full_point) -> np.ndarray:
        pt = np.asarray(full_point, dtype=float)
        u = [pt[s] for s in self.u_base_slots]
        tp, _ = self.split.split(pt[self.th_slots])
        return np.array(list(u) + list(tp))

    def value(self, u, w, theta_dd) -> float:
        pt = self.assemble(u, w, theta_dd)
        v = exprcalc.evaluate(self.phase.phi, pt)
        for pos, i in enumerate(self.chart.Ibar):
            v -= w[self.w_p_Ibar][pos] * pt[self.x_slots[i - 1]]
        for pos, i in enumerate(self.chart.Ipbar):
            v += w[self.w_pp_Ipbar][pos] * pt[self.xp_slots[i - 1]]
        return float(v)

    def gradient(self, u, w, theta_dd) -> np.ndarray:
        pt = self.assemble(u, w, theta_dd)
        g = []
        for pos, i in enumerate(self.chart.Ibar):
            g.append(exprcalc.evaluate(self.grad_exprs[self.x_slots[i - 1]], pt)
                     - w[self.w_p_Ibar][pos])
        for pos, i in enumerate(self.chart.Ipbar):
            g.append(exprcalc.evaluate(self.grad_exprs[self.xp_slots[i - 1]], pt)
                     + w[self.w_pp_Ipbar][pos])
        dth = np.array([exprcalc.evaluate(self.grad_exprs[s], pt) for s in self.th_slots])
        g.extend(self.split.q_prime().T @ dth)
        return np.array(g)

    def hessian(self, u, w, theta_dd) -> np.ndarray:
        pt = self.assemble(u, w, theta_dd)
        nb = len(self.u_base_slots)
        N_p = self.N - self.e
        m = nb + N_p
        Hfull = np.zeros((nb + self.N, nb + self.N))
        rel = self.u_base_slots + self.th_slots
        for a, i in enumerate(rel):
            for b, j in enumerate(rel):
                if b < a:
                    Hfull[a, b] = Hfull[b, a]
                else:
                    Hfull[a, b] = exprcalc.evaluate(self.hess_exprs[(i, j)], pt)
        Qp = self.split.q_prime()
        H = np.zeros((m, m))
        H[:nb, :nb] = Hfull[:nb, :nb]
        H[:nb, nb:] = Hfull[:nb, nb:] @ Qp
        H[nb:, :nb] = H[:nb, nb:].T
        H[nb:, nb:] = Qp.T @ Hfull[nb:, nb:] @ Qp
        return H

    def full_theta_residual(self, u, w, theta_dd) -> float:
        pt = self.assemble(u, w, theta_dd)
        return float(np.linalg.norm(self.phase.theta_residual(pt)))

    def gamma_w(self, u, w, theta_dd) -> np.ndarray:
        """w-coordinates of gamma_phiXX at the assembled point."""
        pt = self.assemble(u, w, theta_dd)
        n = self.n
        lay = self.phase.layout
        z = np.zeros(4 * n)
        z[0:n] = pt[self.x_slots]
        z[2 * n:3 * n] = pt[self.xp_slots]
        for i in range(n):
            z[n + i] = exprcalc.evaluate(self.grad_exprs[self.x_slots[i]], pt)
            z[3 * n + i] = -exprcalc.evaluate(self.grad_exprs[self.xp_slots[i]], pt)
        return self.chart.w_of_pair_point(z)


def _signature_guarded(H: np.ndarray) -> tuple:
    """(signature, det) via symmetric eigendecomposition with a guard band; a
    near-zero eigenvalue aborts rather than guessing a sign."""
    vals = np.linalg.eigvalsh(0.5 * (H + H.T))
    amax = float(np.max(np.abs(vals))) if vals.size else 0.0
    if amax == 0.0 or np.any(np.abs(vals) < EIG_GUARD_REL * amax):
        raise DegenerateHessianError(
            f"Hessian eigenvalue inside the guard band (|eig|min "
            f"{np.min(np.abs(vals)):.3g}, max {amax:.3g})"
        )
    sig = int(np.sum(vals > 0) - np.sum(vals < 0))
    det = float(np.prod(vals))
    return sig, det


def _seed_from_crit(big: _BigPhase, crit: CriticalManifold, w, theta_dd):
    """Reduced coordinates of the C_phiXX sample nearest to (w, theta'')."""
    best, best_d = None, math.inf
    for c in crit.points:
        try:
            u = big.reduce(c)
            wc = big.gamma_w(u, w, theta_dd)
        except exprcalc.SingularLocusError:
            continue
        _, tdd = big.split.split(c[big.th_slots])
        d = np.linalg.norm(wc - w) + np.linalg.norm(np.atleast_1d(tdd) - np.atleast_1d(theta_dd))
        if d < best_d:
            best, best_d = u, d
    if best is None:
        raise StatPhaseError("no usable critical sample to seed the stationary solve")
    return best


def find_stationary_point(
    chart: CanonicalChart,
    w,
    theta_dd,
    restricted: RestrictedPhase,
    splitting: ThetaSplitting,
    crit: CriticalManifold,
    seed_u=None,
    tol: float = 1e-12,
    max_iter: int = 60,
) -> StationaryPointData:
    """Newton on the gradient of the big phase in (x_Ibar, x'_Ipbar, theta').

    Verifies F_w membership (full theta-criticality and gamma mapping back to
    w), fills the Hessian with determinant, guarded signature and the critical
    value of the phase (with the generating-function constant removed).
    """
    w = np.asarray(w, dtype=float)
    theta_dd = np.atleast_1d(np.asarray(theta_dd, dtype=float)) if splitting.e else np.zeros(0)
    big = _BigPhase(chart, restricted, splitting)
    u = np.asarray(seed_u, dtype=float) if seed_u is not None else _seed_from_crit(big, crit, w, theta_dd)
    for _ in range(max_iter):
        g = big.gradient(u, w, theta_dd)
        gn = float(np.linalg.norm(g))
        if gn < tol:
            break
        H = big.hessian(u, w, theta_dd)
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            raise DegenerateHessianError("singular Hessian during Newton iteration")
        if not np.all(np.isfinite(step)) or np.linalg.norm(step) > 1e6:
            raise StatPhaseError("stationary-point Newton diverged")
        u = u + step
    g = big.gradient(u, w, theta_dd)
    gn = float(np.linalg.norm(g))
    if gn > 1e-10:
        raise StatPhaseError(f"stationary-point Newton stalled (|grad| = {gn:.3g})")
    full_res = big.full_theta_residual(u, w, theta_dd)
    w_back = big.gamma_w(u, w, theta_dd)
    if full_res > 1e-8 or np.linalg.norm(w_back - w) > 1e-8:
        raise StatPhaseError(
            f"stationary point is not on F_w (theta-residual {full_res:.3g}, "
            f"w-mismatch {np.linalg.norm(w_back - w):.3g})"
        )
    H = big.hessian(u, w, theta_dd)
    sig, det = _signature_guarded(H)
    if abs(det) < HESSIAN_DET_MIN:
        raise DegenerateHessianError(f"|det H| = {abs(det):.3g} below 1e-8")
    value = big.value(u, w, theta_dd)
    if chart.generating is not None:
        value -= float(exprcalc.evaluate(chart.generating, w))
    return StationaryPointData(
        point=u,
        full_point=big.assemble(u, w, theta_dd),
        hessian=H,
        det=det,
        signature=sig,
        critical_value=value,
        w=w,
        theta_dd=theta_dd,
        grad_norm=gn,
    )


def generating_function_value(chart: CanonicalChart, w, stationary: StationaryPointData,
                              tol_user: float = 1e-8) -> float:
    """S(w) as the critical value of phi_XX - p_Ibar.x_Ibar + p'_Ipbar.x'_Ipbar.

    With a user-supplied S the two values must agree to tol_user.
    """
    w = np.asarray(w, dtype=float)
    if chart.generating is None:
        return float(stationary.critical_value)
    s_user = float(exprcalc.evaluate(chart.generating, w))
    s_crit = float(stationary.critical_value) + s_user  # undo the subtraction
    if abs(s_crit - s_user) > tol_user * (1 + abs(s_user)):
        raise StatPhaseError(
            f"generating-function mismatch: critical value {s_crit!r} vs user {s_user!r}"
        )
    return s_user


# ---------------------------------------------------------------------------
# fiber tracing (predictor-corrector over theta'')

@dataclass
class FiberTrace:
    kind: str                  # "point" | "interval" | "star"
    center: StationaryPointData
    samples: list              # ordered list of StationaryPointData
    bounds: object             # None | (lo, hi) | (directions, radii)
    max_theta_dd: float

    @property
    def diameter(self) -> float:
        if self.kind == "point":
            return 0.0
        if self.kind == "interval":
            lo, hi = self.bounds
            return hi - lo
        dirs, radii = self.bounds
        return float(max(radii[i] + radii[(i + len(radii) // 2) % len(radii)]
                         for i in range(len(radii))))


def _solve_at(big_args, theta_dd, seed_u):
    chart, w, restricted, splitting, crit = big_args
    return find_stationary_point(chart, w, theta_dd, restricted, splitting, crit,
                                 seed_u=seed_u)


def _march_boundary(big_args, center: StationaryPointData, direction, cap: float,
                    step0: float, in_cone, bisect_tol: float = 1e-9):
    """Continuation from the center along a theta'' ray; returns (radius,
    samples).  Raises UnboundedFiberError past the cap."""
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    samples = []
    r_good = 0.0
    u_good = center.point
    step = step0
    while True:
        r_try = r_good + step
        if r_try > cap:
            raise UnboundedFiberError(
                f"fiber extends past the cap {cap:.3g} along direction {direction}"
            )
        tdd = center.theta_dd + r_try * direction
        try:
            sp = _solve_at(big_args, tdd, u_good)
            inside = in_cone(sp.full_point)
        except (StatPhaseError, exprcalc.SingularLocusError):
            inside = False
            sp = None
        if sp is not None and inside:
            samples.append(sp)
            r_good, u_good = r_try, sp.point
            step = min(step * 1.6, step0 * 8)
        else:
            if step < bisect_tol:
                break
            step *= 0.5
    return r_good, samples


def fiber_trace(
    chart: CanonicalChart,
    w,
    splitting: ThetaSplitting,
    restricted: RestrictedPhase,
    crit: CriticalManifold,
    n_rays: int = 32,
    cap_ratio: float = 50.0,
    step0: float = 0.05,
) -> FiberTrace:
    """Trace the excess fiber F_w by warm-started continuation of the
    stationary point along theta''; detects the boundary (cone exit or solver
    failure) and asserts boundedness against a growth cap."""
    w = np.asarray(w, dtype=float)
    e = splitting.e
    big_args = (chart, w, restricted, splitting, crit)
    center = _solve_at(big_args, np.zeros(e), None)
    if e == 0:
        return FiberTrace("point", center, [center], None, 0.0)

    phase = restricted.phase

    def in_cone(pt):
        return phase.in_cone(pt, margin=0.0)

    scale = float(np.linalg.norm(center.full_point[phase.theta_slots()]))
    cap = cap_ratio * max(1.0, scale)
    if e == 1:
        r_plus, s_plus = _march_boundary(big_args, center, np.array([1.0]), cap,
                                         step0 * max(1.0, scale), in_cone)
        r_minus, s_minus = _march_boundary(big_args, center, np.array([-1.0]), cap,
                                           step0 * max(1.0, scale), in_cone)
        samples = list(reversed(s_minus)) + [center] + s_plus
        lo = float(center.theta_dd[0] - r_minus) if center.theta_dd.size else -r_minus
        hi = float(center.theta_dd[0] + r_plus) if center.theta_dd.size else r_plus
        return FiberTrace("interval", center, samples, (lo, hi), max(abs(lo), abs(hi)))
    if e == 2:
        angles = np.arange(n_rays) * (2 * np.pi / n_rays)
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        radii = []
        samples = [center]
        for d in dirs:
            r, s = _march_boundary(big_args, center, d, cap, step0 * max(1.0, scale), in_cone)
            radii.append(r)
            samples.extend(s)
        return FiberTrace("star", center, samples, (dirs, np.array(radii)),
                          float(np.max(radii)))
    raise StatPhaseError(f"fiber tracing implemented for e <= 2, got e = {e}")


# ---------------------------------------------------------------------------
# the leading amplitude

@dataclass
class AmplitudeResult:
    value: complex
    w: np.ndarray
    prefactor_mode: str
    det_center: float
    signature: int
    fiber_diameter: float
    n_stationary_solves: int
    generating_value: float


def _prefactor(mode: str, dim_m: int, N: int, e: int) -> float:
    if mode == "derived":
        return (2 * math.pi) ** (-(dim_m + e) / 2)
    if mode == "paper":
        return (2 * math.pi) ** (-(dim_m + N - e) / 2)
    raise StatPhaseError(f"unknown prefactor mode '{mode}'")


def _node_value(sp: StationaryPointData, amp: Expression, sig_ref: int) -> complex:
    if sp.signature != sig_ref:
        raise StatPhaseError(
            f"signature changed along the fiber ({sig_ref} -> {sp.signature})"
        )
    if abs(sp.critical_value) > 1e-9:
        raise StatPhaseError(
            f"nonzero critical value {sp.critical_value:.3g} on the fiber"
        )
    a = complex(exprcalc.evaluate(amp, sp.full_point))
    return a * np.exp(1j * np.pi / 4 * sp.signature) / math.sqrt(abs(sp.det))


def leading_amplitude(
    chart: CanonicalChart,
    w,
    splitting: ThetaSplitting,
    restricted: RestrictedPhase,
    a0_restricted: Expression,
    crit: CriticalManifold,
    prefactor_mode: str = "derived",
    n_rays: int = 32,
    n_radial: int = 24,
    quad_tol: float = 1e-9,
) -> AmplitudeResult:
    """b0(w) = prefactor * ∫_{F_w} e^{i pi/4 sgn H} |det H|^{-1/2} a0|_XX dtheta''.

    For e = 0 the fiber integral is the single-point evaluation.  prefactor
    mode "derived" uses (2 pi)^{-(dim M + e)/2}; mode "paper" uses
    (2 pi)^{-(dim M + N - e)/2}.
    """
    w = np.asarray(w, dtype=float)
    trace = fiber_trace(chart, w, splitting, restricted, crit, n_rays=n_rays)
    center = trace.center
    # resolve the generating-function constant once (critical-value mode)
    s_value = generating_function_value(chart, w, center)
    sig = center.signature
    pref = _prefactor(prefactor_mode, chart.embedding.dim_m,
                      restricted.phase.n_theta, splitting.e)
    solves = len(trace.samples)
    big_args = (chart, w, restricted, splitting, crit)

    if splitting.e == 0:
        val = pref * _node_value(_strip_s(center, s_value, chart), a0_restricted, sig)
        return AmplitudeResult(complex(val), w, prefactor_mode, center.det, sig,
                               0.0, solves, s_value)

    def g(theta_dd, seed_u):
        sp = _solve_at(big_args, theta_dd, seed_u)
        sp = _strip_s(sp, s_value, chart)
        return _node_value(sp, a0_restricted, sig), sp.point

    if splitting.e == 1:
        lo, hi = trace.bounds
        val, n = _gl_interval(g, trace, lo, hi, n_radial, quad_tol)
        solves += n
    else:
        val, n = _polar_integral(g, trace, n_radial, quad_tol)
        solves += n
    return AmplitudeResult(complex(pref * val), w, prefactor_mode, center.det, sig,
                           trace.diameter, solves, s_value)


def _strip_s(sp: StationaryPointData, s_value: float, chart: CanonicalChart) -> StationaryPointData:
    """In critical-value mode the phase constant S(w) is fixed after the first
    solve; re-express critical values relative to it."""
    if chart.generating is not None:
        return sp
    return StationaryPointData(
        sp.point, sp.full_point, sp.hessian, sp.det, sp.signature,
        sp.critical_value - s_value, sp.w, sp.theta_dd, sp.grad_norm,
    )


def _nearest_seed(trace: FiberTrace, theta_dd) -> np.ndarray:
    best, best_d = trace.center.point, math.inf
    for sp in trace.samples:
        d = float(np.linalg.norm(sp.theta_dd - theta_dd))
        if d < best_d:
            best, best_d = sp.point, d
    return best


def _gl_interval(g, trace: FiberTrace, lo: float, hi: float, n_nodes: int, tol: float):
    prev = None
    total_solves = 0
    n = n_nodes
    for _ in range(5):
        x, wq = np.polynomial.legendre.leggauss(n)
        x = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        wq = 0.5 * (hi - lo) * wq
        acc = 0j
        for xi, wi in zip(x, wq):
            tdd = np.array([xi])
            val, _ = g(tdd, _nearest_seed(trace, tdd))
            acc += wi * val
            total_solves += 1
        if prev is not None and abs(acc - prev) <= tol * (1 + abs(acc)):
            return acc, total_solves
        prev = acc
        n *= 2
    raise StatPhaseError("fiber quadrature non-convergence (interval)")


def _polar_integral(g, trace: FiberTrace, n_radial: int, tol: float):
    dirs, radii = trace.bounds
    center_tdd = trace.center.theta_dd
    prev = None
    total_solves = 0
    n_ang = len(dirs)
    for _ in range(4):
        xg, wg = np.polynomial.legendre.leggauss(n_radial)
        acc = 0j
        dphi = 2 * np.pi / n_ang
        for d, R in zip(dirs, radii):
            r_nodes = 0.5 * R * (xg + 1.0)
            r_w = 0.5 * R * wg
            for r, rw in zip(r_nodes, r_w):
                tdd = center_tdd + r * d
                val, _ = g(tdd, _nearest_seed(trace, tdd))
                acc += dphi * rw * r * val
                total_solves += 1
        if prev is not None and abs(acc - prev) <= max(tol * (1 + abs(acc)), 5e-7 * abs(acc)):
            return acc, total_solves
        prev = acc
        # refine the angular grid; recompute boundary radii by interpolation
        n_ang *= 2
        angles = np.arange(n_ang) * (2 * np.pi / n_ang)
        new_dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        old_angles = np.arctan2(dirs[:, 1], dirs[:, 0]) % (2 * np.pi)
        order = np.argsort(old_angles)
        oa = old_angles[order]
        orad = np.asarray(radii)[order]
        new_r = np.interp(angles, np.concatenate([oa, oa[:1] + 2 * np.pi]),
                          np.concatenate([orad, orad[:1]]), period=2 * np.pi)
        dirs, radii = new_dirs, new_r
    raise StatPhaseError("fiber quadrature non-convergence (polar)")
