"""Command-line workflow: check / trace / amplitude / oracle / list-scenarios.

Exit codes: 0 all checks pass (or trace smoothing), 2 a condition fails,
3 inconclusive sampling.  All randomness flows from a single --seed recorded
in every report; outputs are deterministically ordered.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import reports, scenarios
from .scenarios import BUILTIN_NAMES, ScenarioError

SCENARIO_SUMMARIES = {
    "rotation": "plane rotation lift; both conditions hold, e = 0",
    "halfwave": "free half-wave propagator phase; both conditions hold, e = 0",
    "fiberpair": "fiber-over-origin pair with bounded excess fiber, e = 2",
    "shift_along_x": "base shift along X; fails the conormal condition",
    "parabola_tangency": "parabola-tangent base map; fails the clean-intersection condition",
    "pdo_conormal": "identity (PDO diagonal); fails the conormal condition",
}


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="fiotrace",
        description="Trace of a Fourier integral operator on a submanifold: "
                    "condition checks, traced-order bookkeeping, leading "
                    "amplitudes, and brute-force quadrature oracles.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p):
        src = p.add_argument_group("scenario source")
        src.add_argument("--scenario", choices=BUILTIN_NAMES, help="built-in scenario")
        src.add_argument("--config", type=Path, help="scenario TOML file")
        p.add_argument("--param", action="append", default=[], metavar="K=V",
                       help="override a scenario parameter (repeatable)")
        p.add_argument("--seed", type=int, default=0, help="single 64-bit run seed")
        p.add_argument("--force", action="store_true",
                       help="run later stages after failed checks (outputs "
                            "labeled non-certified)")
        p.add_argument("--out", type=Path, default=None, metavar="DIR",
                       help="directory for report/CSV outputs")
        p.add_argument("--prefactor", choices=("derived", "paper"),
                       default="derived", help="2 pi exponent convention for b0")

    p_check = sub.add_parser("check", help="run the trace-condition pipeline")
    add_common(p_check)

    p_trace = sub.add_parser("trace",
                             help="check, then emit traced-Lagrangian samples")
    add_common(p_trace)

    p_amp = sub.add_parser("amplitude", help="compute the leading amplitude b0 on a w-grid")
    add_common(p_amp)
    p_amp.add_argument("--w-grid", required=True, metavar="SPEC",
                       help="'p1,p2[:p1,p2...]' explicit points, or "
                            "'ray:p1,p2;lams:1,2,4' for a ray sweep")

    p_or = sub.add_parser("oracle", help="brute-force oracle vs closed-form prediction")
    add_common(p_or)
    p_or.add_argument("--quantity", required=True,
                      choices=("trace_kernel", "amplitude", "wavepacket"))
    p_or.add_argument("--sweep", required=True, metavar="SPEC",
                      help="amplitude: 'ray:p1,p2;lams:10,20,40' or points; "
                           "trace_kernel: 'x,xp[:x,xp...]'; "
                           "wavepacket: 'x0,p0,sigma'")

    sub.add_parser("list-scenarios", help="list built-in scenarios")
    return ap


def _parse_params(pairs):
    out = {}
    for kv in pairs:
        if "=" not in kv:
            raise ScenarioError(f"--param needs K=V, got '{kv}'")
        k, v = kv.split("=", 1)
        out[k.strip()] = float(v)
    return out


def _load_scenario(args):
    overrides = _parse_params(args.param)
    if args.config is not None and args.scenario is not None:
        raise ScenarioError("give either --scenario or --config, not both")
    if args.config is not None:
        cfg = config_mod.load_config(args.config)
        cfg.params.update(overrides)
    elif args.scenario is not None:
        cfg = scenarios.builtin_config(args.scenario, overrides)
    else:
        raise ScenarioError("need --scenario NAME or --config FILE")
    cfg.solver.seed = args.seed
    return scenarios.materialize(cfg)


def _emit(args, name: str, text: str):
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / name).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _parse_w_grid(spec: str, w0):
    spec = spec.strip()
    if spec.startswith("ray:"):
        body = spec[4:]
        parts = dict(s.split(":", 1) if ":" in s else ("ray", s)
                     for s in body.split(";"))
        base = np.array([float(v) for v in parts["ray"].split(",")])
        lams = [float(v) for v in parts.get("lams", "1").split(",")]
        return [lam * base for lam in lams]
    if spec.startswith("lams:"):
        lams = [float(v) for v in spec[5:].split(",")]
        return [lam * np.asarray(w0) for lam in lams]
    return [np.array([float(v) for v in pt.split(",")])
            for pt in spec.split(":")]


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "list-scenarios":
        for name in BUILTIN_NAMES:
            print(f"{name:20s} {SCENARIO_SUMMARIES[name]}")
        return 0

    try:
        scenario = _load_scenario(args)
    except (ScenarioError, config_mod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command in ("check", "trace"):
        art = scenarios.run_trace_check(scenario, seed=args.seed, force=args.force)
        rep = art.report
        _emit(args, f"{scenario.name}_report.txt", reports.trace_report_text(rep))
        _emit(args, f"{scenario.name}_report.csv",
              reports.csv_text(reports.TRACE_CSV_HEADER, reports.trace_report_rows(rep)))
        if args.command == "trace" and art.traced is not None and not art.traced.empty:
            k = scenario.chart.dim_x
            header = ([f"x{i}" for i in range(1, k + 1)]
                      + [f"p{i}" for i in range(1, k + 1)]
                      + [f"xp{i}" for i in range(1, k + 1)]
                      + [f"pp{i}" for i in range(1, k + 1)])
            rows = [tuple(z) for z in art.traced.points]
            _emit(args, f"{scenario.name}_traced_lagrangian.csv",
                  reports.csv_text(header, rows))
        return scenarios.exit_code_for(rep)

    # amplitude / oracle need the traced Lagrangian
    art = scenarios.run_trace_check(scenario, seed=args.seed, force=args.force)
    code = scenarios.exit_code_for(art.report)
    if code != 0 and not args.force:
        _emit(args, f"{scenario.name}_report.txt", reports.trace_report_text(art.report))
        print(f"error: conditions failed for '{scenario.name}' "
              f"(exit {code}); use --force to proceed", file=sys.stderr)
        return code
    try:
        setup = scenarios.prepare_statphase(scenario, art)
    except (ScenarioError, Exception) as exc:  # noqa: BLE001 - surfaced to user
        print(f"error: {exc}", file=sys.stderr)
        return 2 if code == 0 else code

    if args.command == "amplitude":
        w_list = _parse_w_grid(args.w_grid, scenarios.default_w0(scenario, art))
        rows, _ = scenarios.run_amplitude(scenario, w_list,
                                          prefactor_mode=args.prefactor,
                                          setup=setup)
        header = reports.B0_CSV_HEADER(setup.chart.w_dim())
        _emit(args, f"{scenario.name}_b0.csv", reports.csv_text(header, rows))
        return code

    if args.command == "oracle":
        if args.quantity == "amplitude":
            sweep = _parse_w_grid(args.sweep, scenarios.default_w0(scenario, art))
        elif args.quantity == "trace_kernel":
            sweep = [tuple(float(v) for v in pt.split(","))
                     for pt in args.sweep.split(":")]
        else:
            sweep = [tuple(float(v) for v in pt.split(","))
                     for pt in args.sweep.split(":")]
        rows, _ = scenarios.run_oracle(scenario, args.quantity, sweep,
                                       prefactor_mode=args.prefactor, setup=setup)
        _emit(args, f"{scenario.name}_oracle_{args.quantity}.csv",
              reports.csv_text(reports.ORACLE_CSV_HEADER, rows))
        return code

    return 0


if __name__ == "__main__":
    sys.exit(main())
