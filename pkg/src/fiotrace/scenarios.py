"""Built-in scenarios and the end-to-end trace-check pipeline.

Each scenario fixes the ambient space, the Lagrangian source (a phase function
on M x M, or a canonical transformation whose lift generates one), an
amplitude, and a canonical chart on the traced Lagrangian.  The six built-ins
cover both positive cases (all trace conditions hold) and the documented
failure modes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import canonmod, exprcalc, geomcore, phasefn, statphase, tracemod
from .canonmod import CanonicalMap, lift_point_transformation, tstar_layout
from .exprcalc import (
    Add, Expression, Mul, Norm, Num, Sub, Var, BlockLayout, parse_expression,
)
from .phasefn import PhaseFunction
from .statphase import CanonicalChart
from .tracemod import EmbeddingChart, TraceReport

__all__ = [
    "ScenarioConfig",
    "Scenario",
    "SolverOptions",
    "QuadratureOptions",
    "ScenarioError",
    "BUILTIN_NAMES",
    "builtin_config",
    "materialize",
    "run_trace_check",
    "TraceArtifacts",
]


class ScenarioError(ValueError):
    pass


@dataclass
class SolverOptions:
    n_theta_seeds: int = 48
    n_base_seeds: int = 6
    base_box: float = 2.0
    newton_tol: float = 1e-12
    delta_conormal: float = 1e-3
    seed: int = 0


@dataclass
class QuadratureOptions:
    epsilons: tuple = (0.4, 0.2, 0.1, 0.05)
    nodes: int = 96
    nodes_4d: int = 72
    radius: Optional[float] = None
    extrapolation_order: int = 2


@dataclass
class ScenarioConfig:
    name: str
    dim_m: int = 2
    dim_x: int = 1
    source: str = "phase"                 # "phase" | "canonical"
    phase_text: Optional[str] = None
    n_theta: Optional[int] = None
    cone_texts: tuple = ()
    amplitude_re: str = "1"
    amplitude_im: Optional[str] = None
    amplitude_order: float = 0.0
    chart_I: tuple = ()
    chart_Ip: tuple = ()
    s_text: Optional[str] = None
    psi_texts: Optional[tuple] = None      # base point transformation (lift)
    psi_inverse_texts: Optional[tuple] = None
    canonical_twin: Optional[tuple] = None # (forward texts, inverse texts)
    params: dict = field(default_factory=dict)
    solver: SolverOptions = field(default_factory=SolverOptions)
    quadrature: QuadratureOptions = field(default_factory=QuadratureOptions)

    def validate(self):
        has_phase = self.phase_text is not None
        has_canonical = self.psi_texts is not None
        if has_phase and has_canonical:
            raise ScenarioError(
                "ambiguous Lagrangian source: both [phase] and [canonical] given"
            )
        if not has_phase and not has_canonical:
            raise ScenarioError("no Lagrangian source: need [phase] or [canonical]")
        if has_phase and (self.n_theta is None or self.n_theta < 1):
            raise ScenarioError("[phase] needs n_theta >= 1")
        if self.dim_x < 1 or self.dim_m <= self.dim_x:
            raise ScenarioError("[space] needs dim_x >= 1 and dim_m > dim_x")
        return self


# ---------------------------------------------------------------------------
# built-in definitions

BUILTIN_NAMES = (
    "rotation", "halfwave", "fiberpair",
    "shift_along_x", "parabola_tangency", "pdo_conormal",
)


def builtin_config(name: str, overrides: Optional[dict] = None) -> ScenarioConfig:
    """Materialize a named built-in scenario; `overrides` updates parameters
    (e.g. alpha, t, a, b, c)."""
    if name == "rotation":
        cfg = ScenarioConfig(
            name=name,
            source="canonical",
            psi_texts=("x[1]*cos($alpha) - y[1]*sin($alpha)",
                       "x[1]*sin($alpha) + y[1]*cos($alpha)"),
            psi_inverse_texts=("x[1]*cos($alpha) + y[1]*sin($alpha)",
                               "-x[1]*sin($alpha) + y[1]*cos($alpha)"),
            chart_I=(), chart_Ip=(),
            params={"alpha": math.pi / 4},
        )
    elif name == "halfwave":
        cfg = ScenarioConfig(
            name=name,
            source="phase",
            phase_text="(x[1]-xp[1])*th[1] + (y[1]-yp[1])*th[2] + $t*norm(th)",
            n_theta=2,
            chart_I=(), chart_Ip=(1,),
            s_text="-w[2]*w[1] + $t*abs(w[1])",
            canonical_twin=(
                ("x[1] - $t*th[1]/norm(th)", "y[1] - $t*th[2]/norm(th)",
                 "th[1]", "th[2]"),
                ("x[1] + $t*th[1]/norm(th)", "y[1] + $t*th[2]/norm(th)",
                 "th[1]", "th[2]"),
            ),
            params={"t": 1.0},
        )
    elif name == "fiberpair":
        cfg = ScenarioConfig(
            name=name,
            source="phase",
            phase_text="x[1]*th[1] + y[1]*th[2] - xp[1]*th[3] - yp[1]*th[4]",
            n_theta=4,
            cone_texts=("$c^2*(th[1]^2+th[3]^2) - (th[2]^2+th[4]^2)",),
            amplitude_re="(1 - (th[2]^2+th[4]^2)/($c^2*(th[1]^2+th[3]^2)))^2",
            amplitude_order=0.0,
            chart_I=(), chart_Ip=(),
            params={"c": 0.8},
        )
    elif name == "shift_along_x":
        cfg = ScenarioConfig(
            name=name,
            source="canonical",
            psi_texts=("x[1] + $a", "y[1] + $b"),
            psi_inverse_texts=("x[1] - $a", "y[1] - $b"),
            chart_I=(), chart_Ip=(),
            params={"a": 1.0, "b": 0.0},
        )
    elif name == "parabola_tangency":
        cfg = ScenarioConfig(
            name=name,
            source="canonical",
            psi_texts=("x[1]", "y[1] + x[1]^2"),
            psi_inverse_texts=("x[1]", "y[1] - x[1]^2"),
            chart_I=(), chart_Ip=(),
        )
    elif name == "pdo_conormal":
        cfg = ScenarioConfig(
            name=name,
            source="canonical",
            psi_texts=("x[1]", "y[1]"),
            psi_inverse_texts=("x[1]", "y[1]"),
            chart_I=(), chart_Ip=(),
        )
    else:
        raise ScenarioError(
            f"unknown scenario '{name}'; built-ins: {', '.join(BUILTIN_NAMES)}"
        )
    if overrides:
        cfg.params.update(overrides)
    return cfg.validate()


# ---------------------------------------------------------------------------
# materialization

def _base_layout(chart: EmbeddingChart) -> BlockLayout:
    return BlockLayout((("x", chart.dim_x), ("y", chart.nu)))


def _phase_layout(chart: EmbeddingChart, n_theta: int) -> BlockLayout:
    k, nu = chart.dim_x, chart.nu
    return BlockLayout((("x", k), ("y", nu), ("xp", k), ("yp", nu), ("th", n_theta)))


def _to_primed(node):
    if isinstance(node, Var):
        if node.block == "x":
            return Var("xp", node.index)
        if node.block == "y":
            return Var("yp", node.index)
        return node
    if isinstance(node, Norm):
        return Norm({"x": "xp", "y": "yp"}.get(node.block, node.block),
                    node.lo, node.hi)
    kids = {}
    for name in ("a", "b", "arg", "base"):
        child = getattr(node, name, None)
        if isinstance(child, exprcalc.Node):
            kids[name] = _to_primed(child)
    return replace(node, **kids) if kids else node


def lift_phase_from_psi(chart: EmbeddingChart, psi: tuple, params) -> PhaseFunction:
    """phi = (m - psi(m')) . theta: the standard phase of a lifted point
    transformation, with theta paired to the (x, y) base order."""
    m = chart.dim_m
    lay = _phase_layout(chart, m)
    base_lay = _base_layout(chart)
    acc = None
    blocks = [("x", i) for i in range(1, chart.dim_x + 1)] + \
             [("y", i) for i in range(1, chart.nu + 1)]
    for t_idx, ((blk, i), text) in enumerate(zip(blocks, psi), start=1):
        psi_i = parse_expression(text, base_lay, params)
        term = Mul(Sub(Var(blk, i), _to_primed(psi_i.ast)), Var("th", t_idx))
        acc = term if acc is None else Add(acc, term)
    expr = Expression(exprcalc._simplify(acc), lay, dict(params))
    return PhaseFunction(expr, left_blocks=("x", "y"), right_blocks=("xp", "yp"))


@dataclass
class Scenario:
    config: ScenarioConfig
    chart: EmbeddingChart
    parent: PhaseFunction
    amplitude: Expression
    amplitude_im: Optional[Expression]
    order_phi: float
    canonical: Optional[CanonicalMap]
    generating: Optional[Expression]

    @property
    def name(self) -> str:
        return self.config.name

    def restricted(self):
        return tracemod.restrict_phase_and_amplitude(self.parent, self.amplitude,
                                                     self.chart)

    def canonical_chart(self) -> CanonicalChart:
        return CanonicalChart(self.chart, self.config.chart_I, self.config.chart_Ip,
                              self.generating)


def materialize(cfg: ScenarioConfig) -> Scenario:
    """Parse every expression eagerly and assemble the runtime objects."""
    cfg.validate()
    chart = EmbeddingChart(cfg.dim_m, cfg.dim_x)
    params = dict(cfg.params)
    canonical = None
    if cfg.source == "canonical":
        base_lay = _base_layout(chart)
        psi = [parse_expression(t, base_lay, params) for t in cfg.psi_texts]
        psi_inv = [parse_expression(t, base_lay, params) for t in cfg.psi_inverse_texts]
        canonical = lift_point_transformation(chart, psi, psi_inv, params)
        parent = lift_phase_from_psi(chart, cfg.psi_texts, params)
        n_theta = chart.dim_m
    else:
        n_theta = cfg.n_theta
        lay = _phase_layout(chart, n_theta)
        phi = parse_expression(cfg.phase_text, lay, params)
        cone = [parse_expression(t, lay, params) for t in cfg.cone_texts]
        parent = PhaseFunction(phi, left_blocks=("x", "y"),
                               right_blocks=("xp", "yp"), domain_cone=cone)
        if cfg.canonical_twin is not None:
            tlay = tstar_layout(chart)
            fwd = [parse_expression(t, tlay, params) for t in cfg.canonical_twin[0]]
            inv = [parse_expression(t, tlay, params) for t in cfg.canonical_twin[1]]
            canonical = CanonicalMap(chart, fwd, inv, params)
    lay = parent.layout
    amp = parse_expression(cfg.amplitude_re, lay, params)
    amp_im = (parse_expression(cfg.amplitude_im, lay, params)
              if cfg.amplitude_im else None)
    generating = None
    if cfg.s_text:
        w_lay = BlockLayout((("w", 2 * cfg.dim_x),))
        generating = parse_expression(cfg.s_text, w_lay, params)
    # amplitude in S^{order_amp} corresponds to ord Phi = order_amp - (dim M - N)/2
    order_phi = cfg.amplitude_order - (chart.dim_m - n_theta) / 2
    return Scenario(cfg, chart, parent, amp, amp_im, order_phi, canonical, generating)


# ---------------------------------------------------------------------------
# the check pipeline

@dataclass
class TraceArtifacts:
    restricted: tracemod.RestrictedPhase
    a_xx: Expression
    lam_xx: tracemod.LambdaXXSamples
    traced: Optional[tracemod.TracedLagrangianSamples]
    excess_cert: Optional[phasefn.ExcessCertificate]
    report: TraceReport


def run_trace_check(scenario: Scenario, seed: Optional[int] = None,
                    force: bool = False) -> TraceArtifacts:
    """Phase validation -> critical sets -> Lambda_XX -> conditions 1-2 ->
    excess, order and admissibility window, assembled into a TraceReport."""
    cfg = scenario.config
    seed = cfg.solver.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    chart = scenario.chart
    parent = scenario.parent
    parent.validate(rng=rng)

    restricted, a_xx = scenario.restricted()
    lam_xx = tracemod.lambda_xx_samples(
        restricted, chart, rng=np.random.default_rng(seed + 1),
        n_theta_seeds=cfg.solver.n_theta_seeds, n_base_seeds=cfg.solver.n_base_seeds,
    )
    cond1 = tracemod.check_condition_clean(parent, chart, lam_xx,
                                           rng=np.random.default_rng(seed + 2))
    cond2 = tracemod.check_condition_conormal(lam_xx, chart,
                                              delta=cfg.solver.delta_conormal)
    excess_cert = None
    psc = None
    traced = None
    notes = []
    if not lam_xx.empty and lam_xx.status == "ok":
        try:
            excess_cert = phasefn.excess_of(restricted.phase, lam_xx.crit_xx)
        except phasefn.NonCleanPhaseError as exc:
            notes.append(f"excess certificate failed: {exc}")
        psc = tracemod.verify_parameter_space_cleanness(parent, restricted, chart,
                                                        lam_xx.crit_xx)
        conditions_ok = cond1.clean and cond2.passed and psc.passed
        if conditions_ok or force:
            traced = tracemod.trace_lagrangian(lam_xx, chart)
            if not conditions_ok:
                notes.append("non-certified: conditions failed, forced")
    dim_lambda_xx = cond1.intersection_dim
    order = (tracemod.trace_order(scenario.order_phi, chart, dim_lambda_xx)
             if dim_lambda_xx >= 0 else None)
    window = tracemod.check_sobolev_window(scenario.order_phi, chart)
    if window is None:
        notes.append("Sobolev window empty; kernel computed formally")
    if lam_xx.empty:
        notes.append("trace smoothing (empty Lambda_XX)")
    report = TraceReport(
        scenario=scenario.name,
        condition1=cond1,
        condition2=cond2,
        excess_e=excess_cert.excess if excess_cert else None,
        dim_lambda_xx=dim_lambda_xx,
        traced_order=order,
        sobolev_window=window,
        parameter_space_cleanness=psc,
        order_phi=scenario.order_phi,
        chart=chart,
        seed=seed,
        forced=force,
        notes=notes,
    )
    return TraceArtifacts(restricted, a_xx, lam_xx, traced, excess_cert, report)


def exit_code_for(report: TraceReport) -> int:
    if report.inconclusive:
        return 3
    return 0 if report.passed else 2


# ---------------------------------------------------------------------------
# amplitude and oracle stages

@dataclass
class StatPhaseSetup:
    chart: statphase.CanonicalChart
    splitting: statphase.ThetaSplitting
    artifacts: TraceArtifacts

    def b0(self, w, prefactor_mode="derived"):
        return statphase.leading_amplitude(
            self.chart, w, self.splitting, self.artifacts.restricted,
            self.artifacts.a_xx, self.artifacts.lam_xx.crit_xx,
            prefactor_mode=prefactor_mode,
        )

    def b0_fn(self, prefactor_mode="derived"):
        return lambda w: self.b0(w, prefactor_mode).value

    def s_fn(self):
        return lambda w: self.b0(w).generating_value


def prepare_statphase(scenario: Scenario, artifacts: TraceArtifacts) -> StatPhaseSetup:
    if artifacts.traced is None or artifacts.traced.empty:
        raise ScenarioError(
            "no traced Lagrangian samples; run the check first (use force for "
            "failed scenarios)"
        )
    cchart = statphase.fit_canonical_chart(
        artifacts.traced, (scenario.config.chart_I, scenario.config.chart_Ip),
        scenario.generating,
    )
    splitting = statphase.compute_theta_splitting(
        artifacts.restricted, artifacts.lam_xx.crit_xx
    )
    return StatPhaseSetup(cchart, splitting, artifacts)


def default_w0(scenario: Scenario, artifacts: TraceArtifacts) -> np.ndarray:
    """A reference point on the traced Lagrangian chart for ray sweeps."""
    cchart = statphase.CanonicalChart(scenario.chart, scenario.config.chart_I,
                                      scenario.config.chart_Ip)
    z = artifacts.traced.points[0]
    w = cchart.w_of_pair_point(z)
    fiber = cchart.fiber_w_positions()
    nrm = np.linalg.norm(w[fiber]) if fiber else 1.0
    if nrm > 0:
        w = w.copy()
        w[fiber] /= nrm
    return w


def run_amplitude(scenario: Scenario, w_list, prefactor_mode: str = "derived",
                  setup: Optional[StatPhaseSetup] = None,
                  artifacts: Optional[TraceArtifacts] = None,
                  force: bool = False, seed: Optional[int] = None):
    """b0 over a w-grid; per-point failures are recorded in-row and the run
    continues.  Returns (rows, setup); row layout matches reports.B0_CSV_HEADER."""
    if setup is None:
        if artifacts is None:
            artifacts = run_trace_check(scenario, seed=seed, force=force)
            if not artifacts.report.passed and not force:
                raise ScenarioError(
                    f"conditions failed for '{scenario.name}'; use force to proceed"
                )
        setup = prepare_statphase(scenario, artifacts)
    certified = setup.artifacts.report.passed
    rows = []
    for w in w_list:
        w = np.asarray(w, dtype=float)
        try:
            res = setup.b0(w, prefactor_mode)
            status = "ok" if certified else "non-certified"
            rows.append(tuple(w) + (res.value.real, res.value.imag, res.det_center,
                                    res.signature, res.fiber_diameter,
                                    prefactor_mode, status))
        except (statphase.StatPhaseError, exprcalc.ExprError) as exc:
            status = f"error: {exc}" if certified else f"non-certified error: {exc}"
            rows.append(tuple(w) + ("", "", "", "", "", prefactor_mode, status))
    return rows, setup


def run_oracle(scenario: Scenario, quantity: str, sweep, prefactor_mode="derived",
               setup: Optional[StatPhaseSetup] = None, force: bool = False,
               seed: Optional[int] = None, quad=None):
    """Oracle-vs-prediction comparison rows for one quantity.

    quantity "amplitude": sweep is a list of w points (oracle = mollified big
    integral, prediction = statphase b0).  quantity "trace_kernel": sweep is a
    list of (x, xp) pairs (prediction = mollified canonical-form kernel from
    b0).  quantity "wavepacket": sweep is a list of (x0, p0, sigma) packets.
    """
    from . import oscquad

    if setup is None:
        artifacts = run_trace_check(scenario, seed=seed, force=force)
        if not artifacts.report.passed and not force:
            raise ScenarioError(
                f"conditions failed for '{scenario.name}'; use force to proceed"
            )
        setup = prepare_statphase(scenario, artifacts)
    art = setup.artifacts
    rows = []
    if quantity == "amplitude":
        for w in sweep:
            w = np.asarray(w, dtype=float)
            try:
                pred = setup.b0(w, prefactor_mode)
                res = oscquad.amplitude_oracle(setup.chart, w, art.restricted,
                                               art.a_xx, pred.generating_value)
                ratio = abs(res.value / pred.value) if pred.value != 0 else math.nan
                verdict = "pass" if (res.value == pred.value == 0 or
                                     abs(res.value - pred.value)
                                     <= 0.05 * abs(pred.value) + 2 * res.error_estimate + 1e-12) \
                    else "fail"
                if res.inconclusive:
                    verdict = "inconclusive"
                rows.append((scenario.name, quantity, _sweep_tag(w),
                             res.value.real, res.value.imag,
                             pred.value.real, pred.value.imag, ratio,
                             res.error_estimate, verdict))
            except (statphase.StatPhaseError, oscquad.OscQuadError) as exc:
                rows.append((scenario.name, quantity, _sweep_tag(w),
                             "", "", "", "", "", "", f"error: {exc}"))
    elif quantity == "trace_kernel":
        spec = quad or oscquad.MollifiedIntegralSpec(
            epsilons=tuple(scenario.config.quadrature.epsilons),
            nodes=scenario.config.quadrature.nodes,
        )
        for x, xp in sweep:
            res = oscquad.trace_kernel_value(scenario.parent, scenario.amplitude,
                                             scenario.chart, x, xp, spec)
            pred = oscquad.canonical_kernel_value(
                setup.chart, setup.b0_fn(prefactor_mode), setup.s_fn(),
                x, xp, spec)
            scale = max(abs(res.value), abs(pred.value))
            ok = abs(res.value - pred.value) <= max(
                0.1 * scale, 3 * (res.error_estimate + pred.error_estimate), 1e-8)
            ratio = abs(res.value / pred.value) if abs(pred.value) > 1e-14 else math.nan
            rows.append((scenario.name, quantity, _sweep_tag((x, xp)),
                         res.value.real, res.value.imag,
                         pred.value.real, pred.value.imag, ratio,
                         res.error_estimate,
                         "pass" if ok else ("inconclusive" if res.inconclusive else "fail")))
    elif quantity == "wavepacket":
        for x0, p0, sigma in sweep:
            packet = oscquad.WavePacket(x0, p0, sigma)
            spec = quad or oscquad.MollifiedIntegralSpec(
                epsilons=(0.3, 0.15, 0.075, 0.0375),
                nodes=96, damp=4.0, center=(p0, 0.0),
            )
            comp = oscquad.wavepacket_operator_check(
                scenario.parent, scenario.amplitude, scenario.chart, setup.chart,
                packet, spec, b0_fn=setup.b0_fn(prefactor_mode), s_fn=setup.s_fn(),
            )
            rows.append((scenario.name, "wavepacket_center", _sweep_tag((x0, p0, sigma)),
                         comp.center_kernel, 0.0, comp.center_predicted, 0.0,
                         (comp.center_kernel / comp.center_predicted
                          if comp.center_predicted else math.nan),
                         comp.kernel_result.error_estimate,
                         "pass" if abs(comp.center_kernel - comp.center_predicted) < 0.1
                         else "fail"))
            rows.append((scenario.name, "wavepacket_mass", _sweep_tag((x0, p0, sigma)),
                         comp.mass_kernel, 0.0, comp.mass_predicted, 0.0,
                         (comp.mass_kernel / comp.mass_predicted
                          if comp.mass_predicted else math.nan),
                         comp.predicted_result.error_estimate, "info"))
    else:
        raise ScenarioError(f"unknown oracle quantity '{quantity}'")
    return rows, setup


def _sweep_tag(v) -> str:
    arr = np.atleast_1d(np.asarray(v, dtype=float))
    return ";".join(repr(float(x)) for x in arr)
