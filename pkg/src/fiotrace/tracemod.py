"""Restriction of phases and amplitudes to the submanifold X = {y = 0}, the
two trace conditions (clean intersection and empty conormal intersection),
and the excess / order / Sobolev-window bookkeeping of the traced operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import exprcalc, geomcore, phasefn
from .exprcalc import Expression
from .geomcore import (
    CleanReport,
    ConstraintSubmanifold,
    CotangentDoubleChart,
    CotangentPairChart,
    gauss_newton,
    nullspace,
    numeric_rank,
    orthonormal_range,
    subspace_intersection_dim,
)
from .phasefn import CriticalManifold, PhaseFunction, parametrize

__all__ = [
    "EmbeddingChart",
    "RestrictedPhase",
    "TraceReport",
    "TraceError",
    "restrict_phase_and_amplitude",
    "LambdaXXSamples",
    "lambda_xx_samples",
    "check_condition_clean",
    "check_condition_conormal",
    "ConormalVerdict",
    "trace_lagrangian",
    "TracedLagrangianSamples",
    "trace_order",
    "check_sobolev_window",
    "verify_parameter_space_cleanness",
]


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingChart:
    """X = {y = 0} inside M, with base variables split as (x; y)."""

    dim_m: int
    dim_x: int

    def __post_init__(self):
        if self.dim_x < 1 or self.nu < 1:
            raise TraceError("need dim_x >= 1 and codimension nu >= 1")

    @property
    def nu(self) -> int:
        return self.dim_m - self.dim_x

    def double_chart(self) -> CotangentDoubleChart:
        return CotangentDoubleChart(self.dim_x, self.nu)

    def pair_chart(self) -> CotangentPairChart:
        return CotangentPairChart(self.dim_x)


@dataclass
class RestrictedPhase:
    """phi_XX(x, x', theta) = phi(x, 0, x', 0, theta), substituted at the AST
    level; wrapped as a PhaseFunction on X x X."""

    phase: PhaseFunction
    parent: PhaseFunction


def restrict_phase_and_amplitude(
    phase: PhaseFunction, amplitude: Expression, chart: EmbeddingChart
):
    """Substitute y = y' = 0 into phase and amplitude; the restricted amplitude
    keeps the parent's symbol order."""
    for b in ("y", "yp"):
        if not phase.layout.has_block(b):
            raise TraceError(f"phase has no '{b}' block to restrict")
    phi_xx = exprcalc.substitute_blocks_zero(phase.phi, ("y", "yp"))
    cone_xx = [exprcalc.substitute_blocks_zero(c, ("y", "yp")) for c in phase.domain_cone]
    restricted = PhaseFunction(
        phi_xx, left_blocks=("x",), right_blocks=("xp",), domain_cone=cone_xx
    )
    a_xx = exprcalc.substitute_blocks_zero(amplitude, ("y", "yp"))
    return RestrictedPhase(restricted, phase), a_xx


# ---------------------------------------------------------------------------
# Lambda_XX sampling (via the critical set of the restricted phase)

@dataclass
class LambdaXXSamples:
    """Points of Lambda ∩ T*(MxM)|_{XxX} with tangent frames, carried in the
    T*(MxM) chart; `crit_xx` holds the parameter-space preimages."""

    chart: EmbeddingChart
    points: np.ndarray        # (m, 4 dim_m)
    frames: list              # per point (4 dim_m, dim_lambda_xx)
    crit_xx: CriticalManifold # critical set of phi_XX
    parent: PhaseFunction
    status: str               # "ok" | "empty" | "inconclusive"

    @property
    def empty(self) -> bool:
        return self.status == "empty"

    @property
    def dim(self) -> int:
        return self.frames[0].shape[1] if self.frames else -1


def embed_restricted_point(chart: EmbeddingChart, parent: PhaseFunction, pt_xx) -> np.ndarray:
    """(x, x', theta) -> (x, 0, x', 0, theta) in the parent phase layout."""
    lay = parent.layout
    out = np.zeros(lay.total_dim)
    k, nu, N = chart.dim_x, chart.nu, parent.n_theta
    pt_xx = np.asarray(pt_xx, dtype=float)
    out[list(lay.slots("x"))] = pt_xx[0:k]
    out[list(lay.slots("xp"))] = pt_xx[k : 2 * k]
    out[list(lay.slots("th"))] = pt_xx[2 * k :]
    return out


def cphi_xx_as_submanifold(parent: PhaseFunction, chart: EmbeddingChart,
                           expected_dim: int) -> ConstraintSubmanifold:
    """C_phiXX = C_phi ∩ {y = y' = 0} as a constraint set in the parent's
    parameter space (M x M x R^N)."""
    lay = parent.layout
    cons = list(parent.theta_gradient())
    for b in ("y", "yp"):
        for i in range(1, lay.dim(b) + 1):
            cons.append(Expression(exprcalc.var(b, i), lay, parent.phi.parameters))
    return ConstraintSubmanifold(
        layout=lay,
        constraints=cons,
        expected_dim=expected_dim,
        conic_blocks=("th",),
        domain=list(parent.domain_cone),
        params=dict(parent.phi.parameters),
    )


def lambda_xx_samples(
    restricted: RestrictedPhase,
    chart: EmbeddingChart,
    rng=None,
    n_theta_seeds: int = 48,
    n_base_seeds: int = 6,
) -> LambdaXXSamples:
    """Sample Lambda_XX = gamma_phi(C_phiXX) with pushforward tangent frames.

    An empty result (no critical points, with Gauss-Newton stalling at
    distinctly positive residuals) is legal and means the trace is smoothing.
    """
    rng = rng or np.random.default_rng(0)
    parent = restricted.parent
    crit = phasefn.solve_critical_set(
        restricted.phase, rng=rng, n_theta_seeds=n_theta_seeds, n_base_seeds=n_base_seeds
    )
    if crit.empty:
        status = _classify_empty(restricted.phase, rng)
        return LambdaXXSamples(chart, np.zeros((0, 4 * chart.dim_m)), [], crit,
                               parent, status)
    pts, frames = [], []
    sub = cphi_xx_as_submanifold(parent, chart, expected_dim=crit.dim)
    for c in crit.points:
        big = embed_restricted_point(chart, parent, c)
        z = parametrize(parent, big)
        T = nullspace(sub.jacobian(big))
        push = phasefn._gamma_jacobian(parent, big) @ T
        fr = orthonormal_range(push)
        pts.append(z)
        frames.append(fr)
    dims = {f.shape[1] for f in frames}
    if len(dims) != 1:
        raise TraceError(f"Lambda_XX frame rank varies across samples: {sorted(dims)}")
    return LambdaXXSamples(chart, np.array(pts), frames, crit, parent, "ok")


def _classify_empty(phase_xx: PhaseFunction, rng, n_probes: int = 24) -> str:
    """Distinguish a confirmed-empty critical set from inconclusive search."""
    stalls = 0
    total = 0
    b_slots = phase_xx.base_slots()
    th_slots = phase_xx.theta_slots()
    dirs = phasefn.sphere_grid(phase_xx.n_theta, n_probes, rng)
    for d in dirs:
        seed = np.zeros(phase_xx.ambient_dim)
        seed[b_slots] = rng.uniform(-2, 2, size=len(b_slots))
        seed[th_slots] = d
        if not phase_xx.in_cone(seed, margin=0.0):
            continue
        total += 1
        _, ok, rn = gauss_newton(
            phase_xx.theta_residual, phase_xx.full_jacobian_of_theta_gradient, seed
        )
        if not ok and np.isfinite(rn) and rn > 1e-6:
            stalls += 1
    if total and stalls >= 0.8 * total:
        return "empty"
    return "inconclusive"


# ---------------------------------------------------------------------------
# condition 1: clean intersection (decided in parameter space)

def check_condition_clean(
    parent: PhaseFunction,
    chart: EmbeddingChart,
    lam_xx: LambdaXXSamples,
    rng=None,
) -> CleanReport:
    """Cleanness of Lambda ∩ T*(MxM)|_{XxX}, decided through the equivalent
    clean intersection of C_phi with (X x X x R^N_0) in parameter space.

    For a nondegenerate parent phase gamma_phi maps that intersection
    diffeomorphically onto Lambda_XX, so the reported dimension is
    dim Lambda_XX and the tangent-gap verdict transfers exactly.
    """
    rng = rng or np.random.default_rng(0)
    lay = parent.layout
    a = ConstraintSubmanifold(
        layout=lay,
        constraints=list(parent.theta_gradient()),
        expected_dim=lay.total_dim - parent.n_theta,  # nondegenerate parent
        conic_blocks=("th",),
        domain=list(parent.domain_cone),
        params=dict(parent.phi.parameters),
    )
    y_cons = []
    for b in ("y", "yp"):
        for i in range(1, lay.dim(b) + 1):
            y_cons.append(Expression(exprcalc.var(b, i), lay, parent.phi.parameters))
    b_sub = ConstraintSubmanifold(
        layout=lay,
        constraints=y_cons,
        expected_dim=lay.total_dim - 2 * chart.nu,
        conic_blocks=("th",),
        params=dict(parent.phi.parameters),
    )
    if lam_xx.status == "empty":
        return CleanReport(True, -1, True, True, 0, 0, 0.0, empty=True,
                           note="empty intersection; trace smoothing")
    if lam_xx.status == "inconclusive":
        return CleanReport(False, -1, False, False, 0, 0, float("nan"),
                           inconclusive=True, note="intersection search inconclusive")
    samples = np.array([
        embed_restricted_point(chart, parent, c) for c in lam_xx.crit_xx.points
    ])
    return geomcore.clean_intersection_check(a, b_sub, samples=samples)


# ---------------------------------------------------------------------------
# condition 2: conormal gap

@dataclass
class ConormalVerdict:
    passed: bool
    gap: float                 # min |(p,p')| / |(p,q,p',q')|
    witness: Optional[np.ndarray]
    vacuous: bool = False

    def __bool__(self):
        return self.passed


def _conormal_ratio(chart: EmbeddingChart, z) -> float:
    lay = chart.double_chart().layout()
    z = np.asarray(z, dtype=float)
    pp = np.concatenate([z[list(lay.slots("p"))], z[list(lay.slots("pp"))]])
    cov = np.concatenate([pp, z[list(lay.slots("q"))], z[list(lay.slots("qp"))]])
    return float(np.linalg.norm(pp) / np.linalg.norm(cov))


def check_condition_conormal(
    lam_xx: LambdaXXSamples,
    chart: EmbeddingChart,
    delta: float = 1e-3,
    descent_iters: int = 300,
) -> ConormalVerdict:
    """Strict positivity of the normalized conormal gap on Lambda_XX.

    Minimizes |(p,p')|/|full covector| over the samples and then runs a
    projected-gradient refinement from the worst sample (in parameter space,
    staying on C_phiXX) to defeat sampling luck.
    """
    if lam_xx.empty:
        return ConormalVerdict(True, math.inf, None, vacuous=True)
    parent = lam_xx.parent
    sub = cphi_xx_as_submanifold(parent, chart, expected_dim=lam_xx.crit_xx.dim)

    def ratio_of_param(c):
        return _conormal_ratio(chart, parametrize(parent, c))

    embedded = [embed_restricted_point(chart, parent, c) for c in lam_xx.crit_xx.points]
    ratios = [ratio_of_param(c) for c in embedded]
    i0 = int(np.argmin(ratios))
    c = embedded[i0].copy()
    best = ratios[i0]
    h = 1e-6
    for _ in range(descent_iters):
        f0 = ratio_of_param(c) ** 2
        if f0 < 1e-16:
            break
        g = np.zeros_like(c)
        for j in range(len(c)):
            cp = c.copy(); cp[j] += h
            cm = c.copy(); cm[j] -= h
            try:
                g[j] = (ratio_of_param(cp) ** 2 - ratio_of_param(cm) ** 2) / (2 * h)
            except (exprcalc.SingularLocusError, phasefn.ZeroSectionError):
                g[j] = 0.0
        T = nullspace(sub.jacobian(c))
        g_proj = T @ (T.T @ g)
        gn = np.linalg.norm(g_proj)
        if gn < 1e-14:
            break
        step = min(1.0, 0.5 * math.sqrt(f0) / gn) if gn > 0 else 0.0
        improved = False
        while step > 1e-12:
            cand = c - step * g_proj
            cand, ok, _ = gauss_newton(sub.residual, sub.jacobian, cand)
            # stay strictly inside the declared cone: the gap is only
            # meaningful on the phase's domain
            if ok and sub.in_domain(cand):
                try:
                    f1 = ratio_of_param(cand) ** 2
                except (exprcalc.SingularLocusError, phasefn.ZeroSectionError):
                    f1 = math.inf
                if f1 < f0:
                    c = cand
                    improved = True
                    break
            step *= 0.5
        if not improved:
            break
    gap = min(best, ratio_of_param(c))
    witness = parametrize(parent, c)
    return ConormalVerdict(gap >= delta, gap, witness if gap < delta else witness)


# ---------------------------------------------------------------------------
# traced Lagrangian i!(Lambda)

@dataclass
class TracedLagrangianSamples:
    chart: EmbeddingChart
    points: np.ndarray   # (m, 4 dim_x) in the (x, p, x', p') chart
    frames: list         # per point (4 dim_x, 2 dim_x) orthonormal
    source: LambdaXXSamples

    @property
    def empty(self) -> bool:
        return len(self.points) == 0

    def max_isotropy_defect(self) -> float:
        pair = self.chart.pair_chart()
        worst = 0.0
        for fr in self.frames:
            worst = max(worst, geomcore.max_isotropy_defect(pair, fr))
        return worst


def _projection_slots(chart: EmbeddingChart):
    lay = chart.double_chart().layout()
    return (list(lay.slots("x")) + list(lay.slots("p"))
            + list(lay.slots("xp")) + list(lay.slots("pp")))


def trace_lagrangian(lam_xx: LambdaXXSamples, chart: EmbeddingChart) -> TracedLagrangianSamples:
    """Drop (y, q) coordinates on both factors; the projected tangent frames
    must have constant rank 2 dim X (immersed conic Lagrangian)."""
    if lam_xx.empty:
        return TracedLagrangianSamples(chart, np.zeros((0, 4 * chart.dim_x)), [], lam_xx)
    sl = _projection_slots(chart)
    pts, frames = [], []
    expected = 2 * chart.dim_x
    for z, fr in zip(lam_xx.points, lam_xx.frames):
        w = z[sl]
        pfr = orthonormal_range(fr[sl, :])
        if pfr.shape[1] != expected:
            raise TraceError(
                f"projection not immersive: projected frame rank {pfr.shape[1]} != {expected}"
            )
        pts.append(w)
        frames.append(pfr)
    return TracedLagrangianSamples(chart, np.array(pts), frames, lam_xx)


# ---------------------------------------------------------------------------
# order and admissibility bookkeeping

def trace_order(order_phi: float, chart: EmbeddingChart, dim_lambda_xx: int) -> float:
    """ord i!(Phi) = ord Phi - dim X + codim X / 2 + dim Lambda_XX / 2."""
    return order_phi - chart.dim_x + 0.5 * chart.nu + 0.5 * dim_lambda_xx


def check_sobolev_window(order_phi: float, chart: EmbeddingChart):
    """Admissible s: s < -nu/2 and s - d - nu/2 > 0, i.e. the open interval
    (d + nu/2, -nu/2); empty unless d < -nu (strict)."""
    lo = order_phi + 0.5 * chart.nu
    hi = -0.5 * chart.nu
    if lo < hi:
        return (lo, hi)
    return None


# ---------------------------------------------------------------------------
# parameter-space cleanness (the lemma behind condition 1)

@dataclass
class ParameterSpaceCleanness:
    passed: bool
    worst_residual: float
    worst_gap: int
    samples_used: int


def verify_parameter_space_cleanness(
    parent: PhaseFunction,
    restricted: RestrictedPhase,
    chart: EmbeddingChart,
    crit_xx: CriticalManifold,
    probe_samples: int = 12,
) -> ParameterSpaceCleanness:
    """At each C_phiXX sample: the embedded point satisfies the parent critical
    equations (residual substitution), and T C_phiXX = T C_phi ∩ T({y=y'=0} x R^N)
    as a dimension identity.

    The dimension of C_phiXX is measured set-theoretically (perturb along each
    candidate tangent direction and reproject); the pointwise constraint rank
    is blind at degenerate points like a base tangency.
    """
    if crit_xx.empty:
        return ParameterSpaceCleanness(True, 0.0, 0, 0)
    lay = parent.layout
    coord_sub_slots = (list(lay.slots("x")) + list(lay.slots("xp"))
                       + list(lay.slots("th")))
    E = np.zeros((lay.total_dim, len(coord_sub_slots)))
    for j, s in enumerate(coord_sub_slots):
        E[s, j] = 1.0
    phase_xx = restricted.phase
    sub_xx = ConstraintSubmanifold(
        layout=phase_xx.layout,
        constraints=list(phase_xx.theta_gradient()),
        expected_dim=crit_xx.dim,
        conic_blocks=("th",),
        domain=list(phase_xx.domain_cone),
        params=dict(phase_xx.phi.parameters),
    )
    worst_res = 0.0
    worst_gap = 0
    ok = True
    stride = max(1, len(crit_xx.points) // probe_samples)
    for c in crit_xx.points[::stride]:
        big = embed_restricted_point(chart, parent, c)
        worst_res = max(worst_res, float(np.linalg.norm(parent.theta_residual(big))))
        T_big = nullspace(parent.full_jacobian_of_theta_gradient(big))
        dim_cap = subspace_intersection_dim(T_big, E)
        cap_xx = nullspace(phase_xx.full_jacobian_of_theta_gradient(c))
        dim_xx = geomcore._movable_dim(sub_xx, c, cap_xx)
        gap = dim_cap - dim_xx
        worst_gap = max(worst_gap, abs(gap))
        if gap != 0 or worst_res > 1e-8:
            ok = False
    return ParameterSpaceCleanness(ok, worst_res, worst_gap, len(crit_xx.points))


# ---------------------------------------------------------------------------
# report container

@dataclass
class TraceReport:
    scenario: str
    condition1: CleanReport
    condition2: ConormalVerdict
    excess_e: Optional[int]
    dim_lambda_xx: int
    traced_order: Optional[float]
    sobolev_window: Optional[tuple]
    parameter_space_cleanness: Optional[ParameterSpaceCleanness]
    order_phi: float
    chart: EmbeddingChart
    seed: int = 0
    forced: bool = False
    notes: list = field(default_factory=list)

    @property
    def smoothing(self) -> bool:
        return self.condition1.empty

    @property
    def passed(self) -> bool:
        if self.condition1.inconclusive:
            return False
        if self.smoothing:
            return True
        cond2 = self.condition2.passed
        psc = self.parameter_space_cleanness.passed if self.parameter_space_cleanness else True
        return self.condition1.clean and cond2 and psc

    @property
    def inconclusive(self) -> bool:
        return self.condition1.inconclusive

    def excess_consistent(self) -> bool:
        if self.excess_e is None or self.smoothing:
            return True
        return self.excess_e == self.dim_lambda_xx - 2 * self.chart.dim_x
