"""Phase-function analysis: critical sets of d_theta(phi) = 0, the constant
rank / excess certificates, and the map gamma_phi whose image of the critical
set samples the associated conic Lagrangian submanifold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import exprcalc, geomcore
from .exprcalc import BlockLayout, Expression, SingularLocusError
from .geomcore import (
    ConstraintSubmanifold,
    GeomError,
    gauss_newton,
    nullspace,
    numeric_rank,
    orthonormal_range,
    rank_with_gap,
)

__all__ = [
    "PhaseFunction",
    "CriticalManifold",
    "LagrangianSampleSet",
    "PhaseError",
    "NonCleanPhaseError",
    "ZeroSectionError",
    "solve_critical_set",
    "excess_of",
    "ExcessCertificate",
    "parametrize",
    "lagrangian_samples",
    "sphere_grid",
]


class PhaseError(ValueError):
    pass


class NonCleanPhaseError(PhaseError):
    def __init__(self, message, witnesses=None):
        self.witnesses = witnesses
        super().__init__(message)


class ZeroSectionError(PhaseError):
    pass


# ---------------------------------------------------------------------------

@dataclass
class PhaseFunction:
    """A real phase phi(base, primed base, theta), 1-homogeneous in theta on an
    open cone; left/right base blocks fix the signs of gamma_phi."""

    phi: Expression
    left_blocks: tuple   # e.g. ("x", "y") or ("x",)
    right_blocks: tuple  # e.g. ("xp", "yp") or ("xp",)
    domain_cone: list = field(default_factory=list)  # strict > 0 Expressions
    homogeneity_checked: bool = False

    def __post_init__(self):
        lay = self.phi.layout
        for b in self.left_blocks + self.right_blocks + ("th",):
            if not lay.has_block(b):
                raise PhaseError(f"phase layout lacks block '{b}'")

    @property
    def layout(self) -> BlockLayout:
        return self.phi.layout

    @property
    def n_theta(self) -> int:
        return self.layout.dim("th")

    @property
    def base_dim(self) -> int:
        return sum(self.layout.dim(b) for b in self.left_blocks)

    @property
    def ambient_dim(self) -> int:
        return self.layout.total_dim

    def theta_slots(self) -> list:
        return list(self.layout.slots("th"))

    def base_slots(self) -> list:
        out = []
        for b in self.left_blocks + self.right_blocks:
            out.extend(self.layout.slots(b))
        return out

    # cached derivative expressions
    def theta_gradient(self) -> list:
        if not hasattr(self, "_dth"):
            self._dth = [self.phi.diff(s) for s in self.theta_slots()]
        return self._dth

    def clean_matrix_exprs(self):
        """Second-derivative Expressions for the N x (2n+N) matrix
        (d2_{theta x} phi  d2_{theta x'} phi  d2_{theta theta} phi)."""
        if not hasattr(self, "_cm"):
            cols = self.base_slots() + self.theta_slots()
            self._cm = [[g.diff(s) for s in cols] for g in self.theta_gradient()]
            self._cm_cols = cols
        return self._cm

    def theta_residual(self, point) -> np.ndarray:
        pt = np.asarray(point, dtype=float)
        return np.array([exprcalc.evaluate(g, pt) for g in self.theta_gradient()])

    def clean_matrix(self, point) -> np.ndarray:
        """Numerical N x (2n+N) matrix nabla(d_theta phi) at a point, columns
        ordered (base left, base right, theta)."""
        self.clean_matrix_exprs()
        pt = np.asarray(point, dtype=float)
        return np.array(
            [[exprcalc.evaluate(e, pt) for e in row] for row in self._cm], dtype=float
        )

    def full_jacobian_of_theta_gradient(self, point) -> np.ndarray:
        """Jacobian of d_theta phi with respect to all ambient slots (same
        matrix as clean_matrix, columns in ambient order)."""
        self.clean_matrix_exprs()
        pt = np.asarray(point, dtype=float)
        J = np.zeros((self.n_theta, self.ambient_dim))
        for i, row in enumerate(self._cm):
            for e, s in zip(row, self._cm_cols):
                J[i, s] = exprcalc.evaluate(e, pt)
        return J

    def in_cone(self, point, margin: float = 1e-9) -> bool:
        pt = np.asarray(point, dtype=float)
        th = pt[self.theta_slots()]
        if np.linalg.norm(th) < 1e-12:
            return False
        for c in self.domain_cone:
            try:
                if exprcalc.evaluate(c, pt) <= margin:
                    return False
            except SingularLocusError:
                return False
        return exprcalc.guards_ok(self.phi, pt)

    def validate(self, rng=None, n_samples: int = 100, tol_euler: float = 1e-9):
        """Homogeneity (Euler identity) and nonvanishing full gradient on cone
        samples; returns (homogeneity_report, gradient_margin)."""
        rng = rng or np.random.default_rng(0)
        pts = self._cone_samples(rng, n_samples)
        rep = exprcalc.check_homogeneity(self.phi, "th", 1.0, pts, tol=tol_euler)
        if not rep.passed:
            raise PhaseError(
                f"phase is not 1-homogeneous in theta: Euler residual {rep.worst_euler:.3g}"
            )
        grad_slots = self.base_slots() + self.theta_slots()
        grads = [self.phi.diff(s) for s in grad_slots]
        margin = math.inf
        for p in pts:
            g = np.array([exprcalc.evaluate(gg, p) for gg in grads])
            margin = min(margin, float(np.linalg.norm(g)))
        if margin <= 0.0:
            raise PhaseError("full gradient of phase vanishes on a cone sample")
        self.homogeneity_checked = True
        return rep, margin

    def _cone_samples(self, rng, count, base_box: float = 2.0):
        out = []
        budget = 200 * count
        tried = 0
        nb = len(self.base_slots())
        while len(out) < count and tried < budget:
            tried += 1
            pt = np.zeros(self.ambient_dim)
            pt[self.base_slots()] = rng.uniform(-base_box, base_box, size=nb)
            u = rng.normal(size=self.n_theta)
            u /= np.linalg.norm(u)
            pt[self.theta_slots()] = u * rng.uniform(0.5, 2.0)
            if self.in_cone(pt, margin=1e-6):
                out.append(pt)
        if len(out) < count:
            raise PhaseError("could not sample the declared cone; is it empty?")
        return np.array(out)


# ---------------------------------------------------------------------------

@dataclass
class CriticalManifold:
    phase: PhaseFunction
    points: np.ndarray          # (m, ambient) with |theta| = 1
    dim: int
    excess: int
    rank_of_matrix: int
    rank_gap: float
    fibration_frames: list      # per point: (ambient, e) basis of ker d(gamma)|_T
    exited_cone: int = 0        # seeds whose solution left the declared cone

    @property
    def empty(self) -> bool:
        return len(self.points) == 0


def sphere_grid(n_dim: int, count: int, rng=None) -> np.ndarray:
    """Deterministic spread of directions on S^{n_dim - 1}.

    Equal angles for a circle, Fibonacci spiral on S^2; higher spheres fall
    back to a seeded normal cloud, which at these counts is spread enough.
    """
    if n_dim == 1:
        return np.array([[1.0], [-1.0]])
    if n_dim == 2:
        t = np.arange(count) * (2 * np.pi / count)
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    if n_dim == 3:
        k = np.arange(count) + 0.5
        phi = np.arccos(1 - 2 * k / count)
        golden = np.pi * (1 + 5**0.5)
        theta = golden * k
        return np.stack(
            [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)],
            axis=1,
        )
    rng = rng or np.random.default_rng(12345)
    v = rng.normal(size=(count, n_dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def solve_critical_set(
    phase: PhaseFunction,
    base_box: float = 2.0,
    n_theta_seeds: int = 48,
    n_base_seeds: int = 6,
    tol_newton: float = 1e-12,
    rng=None,
    dedupe_tol: float = 1e-6,
) -> CriticalManifold:
    """Gauss-Newton on d_theta phi = 0 from a base box x theta-sphere seed grid.

    Converged points are deduplicated after normalizing |theta| = 1; the
    manifold dimension comes from the rank of the constraint Jacobian, whose
    constancy across points is asserted.
    """
    rng = rng or np.random.default_rng(0)
    n = phase.ambient_dim
    th_slots = phase.theta_slots()
    b_slots = phase.base_slots()
    dirs = sphere_grid(phase.n_theta, n_theta_seeds, rng)
    bases = rng.uniform(-base_box, base_box, size=(n_base_seeds, len(b_slots)))

    def residual(x):
        return phase.theta_residual(x)

    def jac(x):
        return phase.full_jacobian_of_theta_gradient(x)

    accepted = []
    exited = 0
    for b in bases:
        for d in dirs:
            seed = np.zeros(n)
            seed[b_slots] = b
            seed[th_slots] = d
            if not phase.in_cone(seed, margin=0.0):
                continue
            x, ok, _ = gauss_newton(residual, jac, seed, tol=tol_newton)
            if not ok:
                continue
            tn = np.linalg.norm(x[th_slots])
            if tn < 1e-10:
                continue
            x = x.copy()
            x[th_slots] /= tn  # conic set: normalize to the unit-theta slice
            if np.linalg.norm(phase.theta_residual(x)) > 1e-9:
                # renormalization is only exact for conic sets; repolish
                x, ok, _ = gauss_newton(residual, jac, x, tol=tol_newton)
                if not ok:
                    continue
            if not phase.in_cone(x, margin=1e-9):
                exited += 1
                continue
            if any(np.linalg.norm(x - y) < dedupe_tol for y in accepted):
                continue
            accepted.append(x)
    if not accepted:
        return CriticalManifold(phase, np.zeros((0, n)), -1, 0, 0, math.inf, [],
                                exited_cone=exited)
    pts = np.array(sorted(accepted, key=lambda v: tuple(np.round(v, 9))))

    ranks, gaps = [], []
    for p in pts:
        dec = rank_with_gap(phase.clean_matrix(p))
        ranks.append(dec.rank)
        gaps.append(dec.gap)
    if len(set(ranks)) != 1:
        i, j = ranks.index(min(ranks)), ranks.index(max(ranks))
        raise NonCleanPhaseError(
            f"not a clean phase: rank of nabla(d_theta phi) varies "
            f"({min(ranks)} vs {max(ranks)})",
            witnesses=(pts[i], pts[j]),
        )
    rank = ranks[0]
    e = phase.n_theta - rank
    dim = phase.ambient_dim - rank
    frames = [_fiber_frame(phase, p, e) for p in pts]
    return CriticalManifold(
        phase, pts, dim, e, rank, float(min(gaps)), frames, exited_cone=exited
    )


def _gamma_jacobian(phase: PhaseFunction, point) -> np.ndarray:
    """Differential of gamma_phi in the cotangent chart ordering
    (left base, d_left phi, right base, -d_right phi)."""
    lay = phase.layout
    pt = np.asarray(point, dtype=float)
    rows = []
    for b in phase.left_blocks:
        for s in lay.slots(b):
            r = np.zeros(phase.ambient_dim)
            r[s] = 1.0
            rows.append(r)
    for b in phase.left_blocks:
        for s in lay.slots(b):
            g = phase.phi.diff(s)
            rows.append(np.array([exprcalc.evaluate(g.diff(t), pt)
                                  for t in range(phase.ambient_dim)]))
    for b in phase.right_blocks:
        for s in lay.slots(b):
            r = np.zeros(phase.ambient_dim)
            r[s] = 1.0
            rows.append(r)
    for b in phase.right_blocks:
        for s in lay.slots(b):
            g = phase.phi.diff(s)
            rows.append(-np.array([exprcalc.evaluate(g.diff(t), pt)
                                   for t in range(phase.ambient_dim)]))
    return np.array(rows)


def _fiber_frame(phase: PhaseFunction, point, e: int) -> np.ndarray:
    """Basis of ker(d gamma_phi) ∩ T C_phi; must have dimension e."""
    if e == 0:
        return np.zeros((phase.ambient_dim, 0))
    K = np.vstack([
        phase.full_jacobian_of_theta_gradient(point),
        _gamma_jacobian(phase, point),
    ])
    ker = nullspace(K)
    if ker.shape[1] != e:
        raise NonCleanPhaseError(
            f"fiber frame dimension {ker.shape[1]} != excess {e} at a critical point"
        )
    return ker


@dataclass
class ExcessCertificate:
    excess: int
    rank_based: int
    dim_based: int
    rank: int
    dim_critical: int
    rank_gap: float

    @property
    def consistent(self) -> bool:
        return self.rank_based == self.dim_based


def excess_of(phase: PhaseFunction, crit: CriticalManifold, fd_step: float = 1e-6) -> ExcessCertificate:
    """Excess by two routes: N - rank(nabla d_theta phi) with symbolic second
    derivatives, and dim C_phi - 2 dim X with dim C_phi estimated from the
    finite-difference Jacobian rank of the residual map.  Both must agree.
    """
    if crit.empty:
        raise PhaseError("excess of an empty critical set")
    n_theta = phase.n_theta
    two_dim_x = len(phase.base_slots())
    e_rank = n_theta - crit.rank_of_matrix
    fd_ranks = set()
    for p in crit.points:
        J = _fd_jacobian(phase.theta_residual, p, fd_step)
        fd_ranks.add(numeric_rank(J, 1e-6))
    if len(fd_ranks) != 1:
        raise NonCleanPhaseError(
            f"finite-difference constraint rank varies across samples: {sorted(fd_ranks)}"
        )
    dim_fd = phase.ambient_dim - fd_ranks.pop()
    e_dim = dim_fd - two_dim_x
    cert = ExcessCertificate(
        excess=e_rank,
        rank_based=e_rank,
        dim_based=e_dim,
        rank=crit.rank_of_matrix,
        dim_critical=dim_fd,
        rank_gap=crit.rank_gap,
    )
    if not cert.consistent:
        raise NonCleanPhaseError(
            f"inconsistent excess: rank-based {e_rank} vs dimension-based {e_dim}"
        )
    return cert


def _fd_jacobian(f, x, h):
    x = np.asarray(x, dtype=float)
    f0 = f(x)
    J = np.zeros((len(f0), len(x)))
    for j in range(len(x)):
        xp = x.copy(); xp[j] += h
        xm = x.copy(); xm[j] -= h
        J[:, j] = (f(xp) - f(xm)) / (2 * h)
    return J


# ---------------------------------------------------------------------------
# the parametrization gamma_phi and Lagrangian sampling

def cotangent_chart_for(phase: PhaseFunction):
    lay = phase.layout
    if len(phase.left_blocks) == 2:
        return geomcore.CotangentDoubleChart(lay.dim(phase.left_blocks[0]),
                                             lay.dim(phase.left_blocks[1]))
    return geomcore.CotangentPairChart(lay.dim(phase.left_blocks[0]))


def parametrize(phase: PhaseFunction, crit_point, zero_tol: float = 1e-10) -> np.ndarray:
    """gamma_phi: (base, theta) -> (base_left, d_left phi; base_right, -d_right phi).

    Raises ZeroSectionError when the full covector vanishes.
    """
    pt = np.asarray(crit_point, dtype=float)
    lay = phase.layout
    out = []
    cov = []
    for b in phase.left_blocks:
        out.extend(pt[list(lay.slots(b))])
    left_cov = [exprcalc.evaluate(phase.phi.diff(s), pt)
                for b in phase.left_blocks for s in lay.slots(b)]
    out.extend(left_cov)
    for b in phase.right_blocks:
        out.extend(pt[list(lay.slots(b))])
    right_cov = [-exprcalc.evaluate(phase.phi.diff(s), pt)
                 for b in phase.right_blocks for s in lay.slots(b)]
    out.extend(right_cov)
    cov = np.array(left_cov + right_cov)
    if np.linalg.norm(cov) < zero_tol:
        raise ZeroSectionError(
            "zero-section hit: gamma_phi image has vanishing full covector"
        )
    return np.array(out)


@dataclass
class LagrangianSampleSet:
    phase: PhaseFunction
    chart: object               # CotangentDoubleChart or CotangentPairChart
    points: np.ndarray          # (m, chart_dim)
    tangent_frames: list        # per point: (chart_dim, dim_lambda) orthonormal
    crit_points: np.ndarray     # the preimages used
    dim: int

    @property
    def empty(self) -> bool:
        return len(self.points) == 0

    def max_isotropy_defect(self) -> float:
        worst = 0.0
        for fr in self.tangent_frames:
            worst = max(worst, geomcore.max_isotropy_defect(self.chart, fr))
        return worst


def lagrangian_samples(phase: PhaseFunction, crit: CriticalManifold) -> LagrangianSampleSet:
    """Image points gamma_phi(C_phi) with pushforward tangent frames.

    The pushforward rank must equal dim C_phi - e at every point (gamma is a
    fibration with e-dimensional fibers).
    """
    chart = cotangent_chart_for(phase)
    if crit.empty:
        return LagrangianSampleSet(phase, chart, np.zeros((0, chart.total_dim)),
                                   [], crit.points, -1)
    dim_lambda = crit.dim - crit.excess
    pts, frames = [], []
    for c in crit.points:
        z = parametrize(phase, c)
        J = phase.full_jacobian_of_theta_gradient(c)
        T = nullspace(J)
        push = _gamma_jacobian(phase, c) @ T
        fr = orthonormal_range(push)
        if fr.shape[1] != dim_lambda:
            raise NonCleanPhaseError(
                f"gamma pushforward rank {fr.shape[1]} != dim C - e = {dim_lambda}"
            )
        pts.append(z)
        frames.append(fr)
    return LagrangianSampleSet(phase, chart, np.array(pts), frames, crit.points, dim_lambda)
