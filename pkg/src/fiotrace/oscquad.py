"""Brute-force oracle: Gaussian-mollified tensor quadrature with Richardson
extrapolation in the damping parameter, for FIO kernels, trace kernels, the
big amplitude integral, and wave-packet operator checks.

The mollifier exp(-eps * sum_d s_d (u_d - c_d)^2) tends to 1 pointwise as
eps -> 0 for any fixed per-dimension scales s_d and centers c_d, so the
extrapolated limit is the distributional value; centers and scales only steer
the finite-eps grids to where the integrand lives.  One tensor grid
(truncated for the smallest eps) serves the whole eps-sequence, so the
integrand is evaluated once and reweighted per eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import exprcalc, tracemod
from .exprcalc import Expression
from .phasefn import PhaseFunction, sphere_grid
from .statphase import CanonicalChart
from .tracemod import EmbeddingChart, RestrictedPhase

__all__ = [
    "MollifiedIntegralSpec",
    "OracleResult",
    "OscQuadError",
    "oscillatory_integral",
    "trace_kernel_value",
    "amplitude_oracle",
    "wavepacket_operator_check",
    "WavePacket",
    "WavepacketComparison",
]


class OscQuadError(ValueError):
    pass


@dataclass
class MollifiedIntegralSpec:
    """Damping sequence and tensor-grid geometry.

    `nodes`, `radius`, `center`, `damp` may be scalars or per-dimension
    sequences; `radius` defaults to 6/sqrt(eps_min) on damped dimensions (the
    boundary weight is then below 1e-8 for every eps in the sequence).
    Dimensions with damp = 0 are not mollified and require an explicit radius.
    """

    epsilons: tuple = (0.4, 0.2, 0.1, 0.05)
    nodes: object = 96
    radius: object = None
    center: object = 0.0
    damp: object = 1.0
    extrapolation_order: int = 2

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if any(e <= 0 for e in eps):
            raise OscQuadError("epsilon sequence must be positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise OscQuadError("epsilon sequence must be strictly decreasing")
        self.epsilons = eps

    def _per_dim(self, value, n_dims, default=None):
        if value is None:
            value = default
        if value is None or np.isscalar(value):
            return [value] * n_dims
        out = list(value)
        if len(out) != n_dims:
            raise OscQuadError(f"per-dimension spec of length {len(out)} for {n_dims} dims")
        return out

    def resolve(self, n_dims: int):
        eps_min = self.epsilons[-1]
        nodes = [int(n) for n in self._per_dim(self.nodes, n_dims)]
        damp = [float(d) for d in self._per_dim(self.damp, n_dims)]
        center = [float(c) for c in self._per_dim(self.center, n_dims)]
        default_r = 6.0 / math.sqrt(eps_min)
        radius = self._per_dim(self.radius, n_dims, default=None)
        out_r = []
        for d, r in zip(damp, radius):
            if r is None:
                if d == 0.0:
                    raise OscQuadError("undamped dimension requires an explicit radius")
                r = default_r / math.sqrt(d)
            r = float(r)
            if d > 0.0 and r * math.sqrt(d) < default_r - 1e-9:
                raise OscQuadError(
                    f"truncation radius {r} too small for eps_min {eps_min}; "
                    f"need >= {default_r / math.sqrt(d):.3g}"
                )
            out_r.append(r)
        return nodes, out_r, center, damp


@dataclass
class OracleResult:
    value: complex
    error_estimate: float
    epsilon_trace: list          # [(eps, complex I(eps)), ...]
    inconclusive: bool = False
    note: str = ""

    def __complex__(self):
        return complex(self.value)


# ---------------------------------------------------------------------------
# extrapolation

def _neville_to_zero(xs, ys, order: int):
    """Polynomial extrapolation of (xs, ys) to x = 0; returns
    (value, last_correction, column_history)."""
    m = len(xs)
    T = list(ys)
    last = T[-1]
    prev_tail = T[-1]
    jmax = min(order, m - 1)
    for j in range(1, jmax + 1):
        newT = list(T)
        for i in range(j, m):
            xi, xij = xs[i], xs[i - j]
            newT[i] = (xij * T[i] - xi * T[i - 1]) / (xij - xi)
        T = newT
        prev_tail, last = last, T[-1]
    return last, abs(last - prev_tail), T


def _fresnel_to_zero(eps, values, n_dims: int):
    """Stationary-phase extrapolation: for a damped Fresnel-type integral over
    m variables, 1/I(eps)^2 = c * prod_k (2 eps - i lambda_k) is a degree-m
    polynomial in eps, so extrapolating the inverse square polynomially from a
    RESOLVED eps-ladder is exact for quadratic phases and O(corrections)
    otherwise.  The square-root branch follows continuity along the ladder.

    The error estimate compares the fit against one refit with the largest
    eps dropped (both exact-degree when the ladder has n_dims + 2 members).
    """
    ys = [1.0 / (v * v) for v in values]
    deg = min(n_dims, len(eps) - 1)
    p_full, _, _ = _neville_to_zero(eps, ys, deg)

    def branch(p, tail):
        if p == 0:
            return complex("inf")
        root = 1.0 / np.sqrt(p)
        # sqrt has two branches; pick the one continuing the ladder tail
        return root if abs(root - tail) <= abs(-root - tail) else -root

    val = branch(p_full, values[-1])
    if len(eps) >= deg + 2:
        p_alt, _, _ = _neville_to_zero(eps[:-1], ys[:-1], min(deg, len(eps) - 2))
    else:
        p_alt, _, _ = _neville_to_zero(eps, ys, max(deg - 1, 0))
    err = abs(val - branch(p_alt, values[-1]))
    return val, err


# ---------------------------------------------------------------------------
# the tensor engine

def _integrand_factory(phase: Expression, amplitude, domain, params):
    amp_re, amp_im = None, None
    if amplitude is None:
        amp_re = None
    elif isinstance(amplitude, Expression):
        amp_re = amplitude
    else:
        amp_re, amp_im = amplitude

    def f(points):
        ph = exprcalc.evaluate(phase, points, params)
        out = np.exp(1j * np.asarray(ph))
        if amp_re is not None:
            a = np.asarray(exprcalc.evaluate(amp_re, points, params), dtype=float)
            if amp_im is not None:
                a = a + 1j * np.asarray(exprcalc.evaluate(amp_im, points, params))
            out = out * a
        if domain:
            mask = np.ones(points.shape[:-1], dtype=bool)
            for d in domain:
                mask &= np.asarray(exprcalc.evaluate(d, points, params)) > 0.0
            out = np.where(mask, out, 0.0)
        return out

    return f


def _tensor_reduce(slab: np.ndarray, vecs) -> complex:
    """Contract the trailing axes of `slab` against per-dimension weight
    vectors, in index order (deterministic pairwise reduction inside numpy)."""
    out = slab
    for v in reversed(vecs):
        out = out @ v
    return complex(out)


def fresnel_spec(n_dims: int, nodes: Optional[int] = None, n_eps: Optional[int] = None,
                 center=0.0) -> MollifiedIntegralSpec:
    """An eps-ladder kept inside the grid's resolved regime for Fresnel-type
    (stationary-phase) integrands.

    The bilinear worst case needs frequency x radius <= ~0.9 nodes, and the
    damping window radius is 6/sqrt(eps); eps_min = 40/nodes keeps every
    ladder member resolved.  Extrapolation then runs on 1/I^2 (mode
    "fresnel"), which is polynomial in eps of degree n_dims.
    """
    if nodes is None:
        nodes = 120 if n_dims >= 4 else 160
    if n_eps is None:
        n_eps = n_dims + 2
    eps_min = 40.0 / nodes
    ladder = tuple(eps_min * 2 ** ((n_eps - 1 - j) / 2.0) for j in range(n_eps))
    return MollifiedIntegralSpec(epsilons=ladder, nodes=nodes, center=center)


def mollified_tensor_integral(
    phase: Expression,
    amplitude,
    int_slots: Sequence[int],
    fixed_point,
    spec: MollifiedIntegralSpec,
    domain=(),
    params=None,
    mode: str = "direct",
) -> OracleResult:
    """I(eps) = ∫ exp(i phase) amp exp(-eps sum s_d (u_d - c_d)^2) du on a
    Gauss-Legendre tensor grid, extrapolated to eps = 0.

    mode "direct" runs Neville on I(eps) itself (delta-type limits); mode
    "fresnel" extrapolates 1/I^2, exact for quadratic stationary phases."""
    lay = phase.layout
    d = len(int_slots)
    if d == 0:
        raise OscQuadError("no integration dimensions")
    if d > 4:
        raise OscQuadError(f"{d} integration dimensions exceeds the desk-scale cap of 4")
    nodes, radius, center, damp = spec.resolve(d)
    axes, base_w = [], []
    for n, r, c in zip(nodes, radius, center):
        x, w = np.polynomial.legendre.leggauss(n)
        axes.append(c + r * x)
        base_w.append(r * w)
    f = _integrand_factory(phase, amplitude, domain, params)

    fixed_point = np.asarray(fixed_point, dtype=float)
    rest_shape = tuple(nodes[1:])
    n0 = nodes[0]
    # per-eps per-dim weight vectors (GL weights folded in)
    eps_vecs = []
    for e in spec.epsilons:
        vecs = [bw * np.exp(-e * s * (ax - c) ** 2)
                for ax, bw, s, c in zip(axes, base_w, damp, center)]
        eps_vecs.append(vecs)
    acc = [0j for _ in spec.epsilons]

    # slab over the first integration dimension
    mesh_rest = np.meshgrid(*axes[1:], indexing="ij") if d > 1 else []
    pts = np.broadcast_to(fixed_point, rest_shape + (lay.total_dim,)).copy()
    for j, s in enumerate(int_slots[1:], start=0):
        pts[..., s] = mesh_rest[j]
    for i0 in range(n0):
        pts[..., int_slots[0]] = axes[0][i0]
        slab = f(pts)
        for k, vecs in enumerate(eps_vecs):
            red = _tensor_reduce(slab, vecs[1:]) if d > 1 else complex(slab)
            acc[k] += vecs[0][i0] * red

    trace = list(zip(spec.epsilons, acc))
    if mode == "fresnel":
        value, err = _fresnel_to_zero(list(spec.epsilons), acc, d)
    else:
        value, err, _ = _neville_to_zero(list(spec.epsilons), acc,
                                         spec.extrapolation_order)
    inconclusive = False
    note = ""
    # corrections should shrink as the table deepens; a growing last correction
    # relative to the value and to the raw eps-variation flags non-convergence
    spread = max(abs(a - acc[-1]) for a in acc)
    if err > max(abs(value), 1e-12) and err > 0.5 * spread and spread > 1e-12:
        inconclusive = True
        note = "extrapolation corrections not decreasing"
    return OracleResult(value, float(err), trace, inconclusive, note)


def oscillatory_integral(
    phase: Expression,
    amplitude,
    integration_blocks: Sequence[str],
    fixed: dict,
    spec: MollifiedIntegralSpec,
    domain=(),
    params=None,
) -> OracleResult:
    """Mollified integral over whole named blocks; `fixed` binds the others."""
    lay = phase.layout
    int_slots = []
    for b in integration_blocks:
        int_slots.extend(lay.slots(b))
    fixed_point = np.zeros(lay.total_dim)
    for b, vals in (fixed or {}).items():
        sl = list(lay.slots(b))
        fixed_point[sl] = np.asarray(vals, dtype=float)
    return mollified_tensor_integral(phase, amplitude, int_slots, fixed_point,
                                     spec, domain, params)


# ---------------------------------------------------------------------------
# trace kernel oracle

def trace_kernel_value(
    phase: PhaseFunction,
    amplitude: Expression,
    chart: EmbeddingChart,
    x,
    xp,
    spec: MollifiedIntegralSpec,
) -> OracleResult:
    """(2 pi)^{-(dim M + N)/2} ∫ exp(i phi_XX) a_XX exp(-eps |theta|^2) dtheta
    at a fixed base pair, extrapolated in eps."""
    restricted, a_xx = tracemod.restrict_phase_and_amplitude(phase, amplitude, chart)
    lay = restricted.phase.layout
    fixed = {"x": np.atleast_1d(x), "xp": np.atleast_1d(xp)}
    res = oscillatory_integral(
        restricted.phase.phi, a_xx, ["th"], fixed, spec,
        domain=restricted.phase.domain_cone,
    )
    norm = (2 * math.pi) ** (-(chart.dim_m + phase.n_theta) / 2)
    return OracleResult(norm * res.value, norm * res.error_estimate,
                        [(e, norm * v) for e, v in res.epsilon_trace],
                        res.inconclusive, res.note)


# ---------------------------------------------------------------------------
# big amplitude integral oracle

def _big_phase_expression(chart: CanonicalChart, restricted: RestrictedPhase, w):
    """phi_XX - p_Ibar.x_Ibar + p'_Ipbar.x'_Ipbar with the w-values bound as
    numeric constants; returns (expression, fixed_assignments, int_blocks)."""
    from .exprcalc import Add, Mul, Neg, Num, Sub, Var  # AST nodes

    w = np.asarray(w, dtype=float)
    lay = restricted.phase.layout
    node = restricted.phase.phi.ast
    k = 0
    fixed_x = {}
    for i in chart.I:
        fixed_x[("x", i)] = w[k]; k += 1
    w_p = {}
    for i in chart.Ibar:
        w_p[i] = w[k]; k += 1
    fixed_xp = {}
    for i in chart.Ip:
        fixed_xp[("xp", i)] = w[k]; k += 1
    w_pp = {}
    for i in chart.Ipbar:
        w_pp[i] = w[k]; k += 1
    for i, val in w_p.items():
        node = Sub(node, Mul(Num(float(val)), Var("x", i)))
    for i, val in w_pp.items():
        node = Add(node, Mul(Num(float(val)), Var("xp", i)))
    expr = Expression(node, lay, restricted.phase.phi.parameters)
    int_slots = ([lay.slot("x", i) for i in chart.Ibar]
                 + [lay.slot("xp", i) for i in chart.Ipbar]
                 + list(lay.slots("th")))
    fixed_point = np.zeros(lay.total_dim)
    for (b, i), val in {**fixed_x, **fixed_xp}.items():
        fixed_point[lay.slot(b, i)] = val
    return expr, fixed_point, int_slots


def _stationary_center(expr: Expression, int_slots, fixed_point, theta_slots,
                       w_scale: float, rng=None):
    """Independent stationary-point search for the big phase: Gauss-Newton on
    the gradient system from multi-start seeds at the w-scale."""
    from .geomcore import gauss_newton

    rng = rng or np.random.default_rng(2)
    grads = [expr.diff(s) for s in int_slots]
    hess = [[g.diff(s) for s in int_slots] for g in grads]

    def resid(u):
        pt = fixed_point.copy()
        pt[int_slots] = u
        return np.array([exprcalc.evaluate(g, pt) for g in grads])

    def jac(u):
        pt = fixed_point.copy()
        pt[int_slots] = u
        return np.array([[exprcalc.evaluate(h, pt) for h in row] for row in hess])

    th_pos = [int_slots.index(s) for s in theta_slots if s in int_slots]
    other_pos = [i for i in range(len(int_slots)) if i not in th_pos]
    best, best_rn = None, math.inf
    dirs = sphere_grid(len(th_pos), 12, rng) if th_pos else [np.zeros(0)]
    for d in dirs:
        for box in (0.5, 2.0):
            u0 = np.zeros(len(int_slots))
            if other_pos:
                u0[other_pos] = rng.uniform(-box, box, size=len(other_pos))
            if th_pos:
                u0[th_pos] = w_scale * np.asarray(d)
            u, ok, rn = gauss_newton(resid, jac, u0, tol=1e-10)
            if rn < best_rn and np.all(np.isfinite(u)):
                best, best_rn = u, rn
            if ok:
                break
        if best_rn < 1e-10:
            break
    if best is None or best_rn > 1e-6:
        raise OscQuadError(
            f"oracle could not locate a stationary point (best residual {best_rn:.3g})"
        )
    return best


def amplitude_oracle(
    chart: CanonicalChart,
    w,
    restricted: RestrictedPhase,
    a_xx: Expression,
    s_value: float,
    spec: Optional[MollifiedIntegralSpec] = None,
) -> OracleResult:
    """Direct mollified evaluation of the big amplitude integral
    (2 pi)^{-(dim M + N)/2 - (|Ibar| + |Ipbar'|)/2}
        ∫ e^{i [phi_XX - S - p.x terms]} a_XX d(x_Ibar) d(x'_Ipbar) dtheta,
    with the damping centered at an internally-located stationary point and
    the stationary-phase ("fresnel") extrapolation.  With spec omitted, a
    resolution-safe eps-ladder is chosen for the dimension count.
    """
    w = np.asarray(w, dtype=float)
    expr, fixed_point, int_slots = _big_phase_expression(chart, restricted, w)
    if spec is None:
        spec = fresnel_spec(len(int_slots))
    lay = restricted.phase.layout
    theta_slots = list(lay.slots("th"))
    w_scale = max(1.0, float(np.linalg.norm(w)))
    center = _stationary_center(expr, int_slots, fixed_point, theta_slots, w_scale)
    local = MollifiedIntegralSpec(
        epsilons=spec.epsilons,
        nodes=spec.nodes,
        radius=spec.radius,
        center=tuple(center),
        damp=spec.damp,
        extrapolation_order=spec.extrapolation_order,
    )
    res = mollified_tensor_integral(
        expr, a_xx, int_slots, fixed_point, local,
        domain=restricted.phase.domain_cone, mode="fresnel",
    )
    dim_m = chart.embedding.dim_m
    N = restricted.phase.n_theta
    norm = (2 * math.pi) ** (-(dim_m + N) / 2 - (len(chart.Ibar) + len(chart.Ipbar)) / 2)
    factor = norm * np.exp(-1j * s_value)
    return OracleResult(factor * res.value, abs(norm) * res.error_estimate,
                        [(e, factor * v) for e, v in res.epsilon_trace],
                        res.inconclusive, res.note)


# ---------------------------------------------------------------------------
# canonical-form kernel prediction

def canonical_kernel_value(
    cchart: CanonicalChart,
    b0_fn,
    s_fn,
    x: float,
    xp: float,
    spec: MollifiedIntegralSpec,
) -> OracleResult:
    """K(x,x') predicted by the canonical form
    (2 pi)^{-(|Ibar|+|Ipbar|)/2} ∫ e^{i[S(w) + p_Ibar x_Ibar - p'_Ipbar x'_Ipbar]} b0(w) dp,
    mollified and extrapolated like the direct kernel oracle.  Implemented for
    the dim X = 1 charts w = (p, x') and w = (p, p')."""
    if cchart.n != 1:
        raise OscQuadError("canonical kernel prediction implemented for dim X = 1")
    n_p = spec._per_dim(spec.nodes, 1)[0]
    eps_min = spec.epsilons[-1]
    r_p = 6.0 / math.sqrt(eps_min)
    xg, wg = np.polynomial.legendre.leggauss(n_p)
    p_nodes = r_p * xg
    p_w = r_p * wg

    def tab(w_points):
        b = np.zeros(len(w_points), dtype=complex)
        s = np.zeros(len(w_points))
        for i, wv in enumerate(w_points):
            try:
                b[i] = b0_fn(wv)
                s[i] = s_fn(wv)
            except Exception:
                b[i] = 0.0
                s[i] = 0.0
        return b, s

    vals = []
    if cchart.Ibar == (1,) and not cchart.Ipbar:
        W = np.array([[pv, xp] for pv in p_nodes])
        b_tab, s_tab = tab(W)
        core = b_tab * np.exp(1j * (s_tab + p_nodes * x))
        pref = (2 * math.pi) ** (-0.5)
        for e in spec.epsilons:
            vals.append(pref * np.sum(core * p_w * np.exp(-e * p_nodes**2)))
    elif cchart.Ibar == (1,) and cchart.Ipbar == (1,):
        W = np.array([[pv, ppv] for pv in p_nodes for ppv in p_nodes])
        b_tab, s_tab = tab(W)
        core = (b_tab * np.exp(1j * s_tab)).reshape(n_p, n_p)
        pref = (2 * math.pi) ** (-1.0)
        exp_p = np.exp(1j * p_nodes * x)
        exp_pp = np.exp(-1j * p_nodes * xp)
        for e in spec.epsilons:
            dw = p_w * np.exp(-e * p_nodes**2)
            vals.append(pref * (dw * exp_p) @ core @ (dw * exp_pp))
    else:
        raise OscQuadError(
            f"canonical kernel prediction not implemented for chart I={cchart.I}, I'={cchart.Ip}"
        )
    value, err, _ = _neville_to_zero(list(spec.epsilons), vals, spec.extrapolation_order)
    return OracleResult(value, float(err), list(zip(spec.epsilons, vals)))


# ---------------------------------------------------------------------------
# wave-packet operator check

@dataclass
class WavePacket:
    x0: float
    p0: float
    sigma: float

    def values(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(-((x - self.x0) ** 2) / (2 * self.sigma**2) + 1j * self.p0 * x)


@dataclass
class WavepacketComparison:
    x_grid: np.ndarray
    out_kernel: np.ndarray       # extrapolated kernel-route profile
    out_predicted: np.ndarray    # canonical-form (statphase) profile
    kernel_result: OracleResult  # aggregate (L2 mass as value)
    predicted_result: OracleResult
    center_kernel: float
    center_predicted: float
    mass_kernel: float
    mass_predicted: float
    mass_input: float


def _profile_center(x, out):
    w = np.abs(out) ** 2
    tot = float(np.sum(w))
    if tot <= 0:
        return math.nan
    return float(np.sum(x * w) / tot)


def _profile_mass(x, out):
    return float(np.trapz(np.abs(out) ** 2, x))


def wavepacket_operator_check(
    phase: PhaseFunction,
    amplitude: Expression,
    chart: EmbeddingChart,
    canonical_chart: CanonicalChart,
    packet: WavePacket,
    spec: MollifiedIntegralSpec,
    b0_fn=None,
    s_fn=None,
    x_grid=None,
    xp_halfwidth: float = 6.0,
    n_xp: int = 96,
):
    """Apply the traced operator to a Gaussian packet two ways.

    Kernel route: quadrature in x' of the packet against mollified trace-kernel
    values (coboundary realized as y' = 0 insertion, boundary as y = 0
    restriction).  Prediction route: the canonical-form kernel built from the
    statphase leading amplitude `b0_fn(w)` and generating value `s_fn(w)`.
    Returns a WavepacketComparison with both output profiles.
    """
    restricted, a_xx = tracemod.restrict_phase_and_amplitude(phase, amplitude, chart)
    lay = restricted.phase.layout
    N = restricted.phase.n_theta
    if x_grid is None:
        halfw = abs(packet.x0) + 3.0
        x_grid = np.linspace(-halfw, halfw, 61)
    x_grid = np.asarray(x_grid, dtype=float)

    # x'-quadrature nodes against the packet support
    xq, xw = np.polynomial.legendre.leggauss(n_xp)
    xp_nodes = packet.x0 + xp_halfwidth * packet.sigma * xq
    xp_w = xp_halfwidth * packet.sigma * xw
    v_vals = packet.values(xp_nodes)

    nodes, radius, center, damp = spec.resolve(N)
    th_axes, th_w = [], []
    for n, r, c in zip(nodes, radius, center):
        xg, wg = np.polynomial.legendre.leggauss(n)
        th_axes.append(c + r * xg)
        th_w.append(r * wg)
    mesh = np.meshgrid(*th_axes, indexing="ij")
    th_shape = tuple(nodes)
    norm = (2 * math.pi) ** (-(chart.dim_m + N) / 2)

    pts = np.zeros(th_shape + (lay.total_dim,))
    for j, s in enumerate(lay.slots("th")):
        pts[..., s] = mesh[j]
    kern_profiles = []
    for e in spec.epsilons:
        wts = np.ones(th_shape)
        for j in range(N):
            shape = [1] * N
            shape[j] = nodes[j]
            wts = wts * (th_w[j] * np.exp(-e * damp[j] * (th_axes[j] - center[j]) ** 2)).reshape(shape)
        out_e = np.zeros(len(x_grid), dtype=complex)
        for ix, xval in enumerate(x_grid):
            acc = 0j
            pts[..., lay.slot("x", 1)] = xval
            for xpv, xww, vv in zip(xp_nodes, xp_w, v_vals):
                pts[..., lay.slot("xp", 1)] = xpv
                ph = exprcalc.evaluate(restricted.phase.phi, pts)
                integrand = np.exp(1j * ph)
                if a_xx is not None:
                    integrand = integrand * exprcalc.evaluate(a_xx, pts)
                acc += xww * vv * np.sum(integrand * wts)
            out_e[ix] = norm * acc
        kern_profiles.append(out_e)
    out_kernel = np.zeros(len(x_grid), dtype=complex)
    errs = []
    for ix in range(len(x_grid)):
        ys = [prof[ix] for prof in kern_profiles]
        val, err, _ = _neville_to_zero(list(spec.epsilons), ys, spec.extrapolation_order)
        out_kernel[ix] = val
        errs.append(err)
    kernel_result = OracleResult(
        complex(_profile_mass(x_grid, out_kernel)), float(np.max(errs)),
        [(e, complex(np.max(np.abs(p)))) for e, p in zip(spec.epsilons, kern_profiles)],
    )

    out_predicted, pred_err = _wavepacket_prediction(
        canonical_chart, packet, spec, b0_fn, s_fn, x_grid, xp_nodes, xp_w, v_vals
    )
    predicted_result = OracleResult(
        complex(_profile_mass(x_grid, out_predicted)), pred_err, []
    )
    return WavepacketComparison(
        x_grid=x_grid,
        out_kernel=out_kernel,
        out_predicted=out_predicted,
        kernel_result=kernel_result,
        predicted_result=predicted_result,
        center_kernel=_profile_center(x_grid, out_kernel),
        center_predicted=_profile_center(x_grid, out_predicted),
        mass_kernel=_profile_mass(x_grid, out_kernel),
        mass_predicted=_profile_mass(x_grid, out_predicted),
        mass_input=_profile_mass(
            np.linspace(packet.x0 - 8 * packet.sigma, packet.x0 + 8 * packet.sigma, 401),
            packet.values(np.linspace(packet.x0 - 8 * packet.sigma,
                                      packet.x0 + 8 * packet.sigma, 401)),
        ),
    )


def _wavepacket_prediction(cchart: CanonicalChart, packet: WavePacket,
                           spec: MollifiedIntegralSpec, b0_fn, s_fn,
                           x_grid, xp_nodes, xp_w, v_vals):
    """Canonical-form kernel applied to the packet, for the two dim-X = 1
    charts used by the built-in scenarios: w = (p, x') and w = (p, p')."""
    if b0_fn is None or s_fn is None:
        raise OscQuadError("wavepacket prediction needs b0(w) and S(w) callables")
    if cchart.n != 1:
        raise OscQuadError("wavepacket prediction implemented for dim X = 1")
    n_p = 96
    r_p = 6.0 / math.sqrt(spec.epsilons[-1])
    xg, wg = np.polynomial.legendre.leggauss(n_p)
    p_nodes = packet.p0 + r_p * xg
    p_w = r_p * wg

    def tab(w_points):
        b = np.zeros(len(w_points), dtype=complex)
        s = np.zeros(len(w_points))
        for i, wv in enumerate(w_points):
            try:
                b[i] = b0_fn(wv)
                s[i] = s_fn(wv)
            except Exception:
                b[i] = 0.0
                s[i] = 0.0
        return b, s

    profiles = []
    if cchart.Ibar == (1,) and not cchart.Ipbar:
        # w = (p, x'): out(x) = (2 pi)^{-1/2} ∬ e^{i[S(p,x') + p x]} b0 v(x') dp dx'
        W = np.array([[pv, xpv] for xpv in xp_nodes for pv in p_nodes])
        b_tab, s_tab = tab(W)
        b_tab = b_tab.reshape(len(xp_nodes), n_p)
        s_tab = s_tab.reshape(len(xp_nodes), n_p)
        pref = (2 * math.pi) ** (-0.5)
        for e in spec.epsilons:
            pw_e = p_w * np.exp(-e * (p_nodes - packet.p0) ** 2)
            inner = np.einsum(
                "ap,p,a->ap", b_tab * np.exp(1j * s_tab), pw_e, xp_w * v_vals
            )
            out_e = pref * np.einsum(
                "ap,xp->x", inner, np.exp(1j * np.outer(x_grid, p_nodes))
            )
            profiles.append(out_e)
    elif not cchart.Ibar and not cchart.Ipbar:
        raise OscQuadError("chart (x, x') carries no momentum integration; unsupported")
    elif cchart.Ibar == (1,) and cchart.Ipbar == (1,):
        # w = (p, p'): out(x) = (2 pi)^{-1} ∭ e^{i[S + p x - p' x']} b0 v dp dp' dx'
        pp_nodes, pp_w = p_nodes, p_w
        W = np.array([[pv, ppv] for pv in p_nodes for ppv in pp_nodes])
        b_tab, s_tab = tab(W)
        b_tab = b_tab.reshape(n_p, n_p)
        s_tab = s_tab.reshape(n_p, n_p)
        pref = (2 * math.pi) ** (-1.0)
        phase_pp = np.exp(-1j * np.outer(xp_nodes, pp_nodes))  # e^{-i p' x'}
        for e in spec.epsilons:
            pw_e = p_w * np.exp(-e * (p_nodes - packet.p0) ** 2)
            ppw_e = pp_w * np.exp(-e * (pp_nodes - packet.p0) ** 2)
            core = b_tab * np.exp(1j * s_tab)
            # integrate x' against v, then p', then p
            g_pp = np.einsum("a,ab->b", xp_w * v_vals, phase_pp)
            h_p = core @ (ppw_e * g_pp)
            out_e = pref * np.einsum(
                "xp,p->x", np.exp(1j * np.outer(x_grid, p_nodes)), pw_e * h_p
            )
            profiles.append(out_e)
    else:
        raise OscQuadError(
            f"wavepacket prediction not implemented for chart I={cchart.I}, I'={cchart.Ip}"
        )
    out = np.zeros(len(x_grid), dtype=complex)
    errs = []
    for ix in range(len(x_grid)):
        ys = [prof[ix] for prof in profiles]
        val, err, _ = _neville_to_zero(list(spec.epsilons), ys, spec.extrapolation_order)
        out[ix] = val
        errs.append(err)
    return out, float(np.max(errs))
