"""Scenario configuration files: TOML sections with quoted expression strings,
one scenario per file, validated eagerly (every expression parsed at load)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

try:
    import tomllib as tomli
except ModuleNotFoundError:
    import tomli

from . import scenarios
from .scenarios import QuadratureOptions, ScenarioConfig, ScenarioError, SolverOptions

__all__ = ["load_config", "ConfigError", "config_to_text"]


class ConfigError(ValueError):
    def __init__(self, section: str, message: str):
        self.section = section
        super().__init__(f"[{section}] {message}")


def _take(d: dict, section: str, key: str, typ, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(section, f"missing key '{key}'")
        return default
    v = d[key]
    if typ is float and isinstance(v, int):
        v = float(v)
    if not isinstance(v, typ):
        raise ConfigError(section, f"key '{key}' must be {typ.__name__}, got {type(v).__name__}")
    return v


def load_config(path) -> ScenarioConfig:
    """Read and fully validate a scenario file; all expressions parse eagerly
    inside scenarios.materialize, which this calls once to fail fast."""
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("file", f"{path}: {exc}") from exc

    name = raw.get("name", path.stem)
    space = raw.get("space", {})
    dim_m = _take(space, "space", "dim_m", int, 2)
    dim_x = _take(space, "space", "dim_x", int, 1)

    phase = raw.get("phase")
    canonical = raw.get("canonical")
    if phase is not None and canonical is not None:
        raise ConfigError("phase", "both [phase] and [canonical] given; "
                          "exactly one Lagrangian source is allowed")
    if phase is None and canonical is None:
        raise ConfigError("phase", "need a Lagrangian source: [phase] or [canonical]")

    cfg_kwargs = dict(name=name, dim_m=dim_m, dim_x=dim_x)
    if phase is not None:
        n_theta = _take(phase, "phase", "n_theta", int, required=True)
        if n_theta < 1:
            raise ConfigError("phase", f"n_theta must be >= 1, got {n_theta}")
        cfg_kwargs.update(
            source="phase",
            phase_text=_take(phase, "phase", "text", str, required=True),
            n_theta=n_theta,
            cone_texts=tuple(_take(phase, "phase", "cone", list, [])),
        )
    else:
        psi = _take(canonical, "canonical", "psi", list, required=True)
        psi_inv = _take(canonical, "canonical", "psi_inverse", list, required=True)
        if len(psi) != dim_m or len(psi_inv) != dim_m:
            raise ConfigError("canonical", f"psi and psi_inverse need {dim_m} components")
        cfg_kwargs.update(source="canonical", psi_texts=tuple(psi),
                          psi_inverse_texts=tuple(psi_inv))

    amp = raw.get("amplitude", {})
    cfg_kwargs.update(
        amplitude_re=_take(amp, "amplitude", "re", str, "1"),
        amplitude_im=_take(amp, "amplitude", "im", str, None),
        amplitude_order=_take(amp, "amplitude", "order", float, 0.0),
    )

    chart = raw.get("chart", {})
    cfg_kwargs.update(
        chart_I=tuple(_take(chart, "chart", "I", list, [])),
        chart_Ip=tuple(_take(chart, "chart", "Ip", list, [])),
        s_text=_take(chart, "chart", "S", str, None) or None,
    )

    params = raw.get("params", {})
    for key, val in params.items():
        if not isinstance(val, (int, float)):
            raise ConfigError("params", f"parameter '{key}' must be a number")
    cfg_kwargs["params"] = {k: float(v) for k, v in params.items()}

    solver = raw.get("solver", {})
    cfg_kwargs["solver"] = SolverOptions(
        n_theta_seeds=_take(solver, "solver", "n_theta_seeds", int, 48),
        n_base_seeds=_take(solver, "solver", "n_base_seeds", int, 6),
        base_box=_take(solver, "solver", "base_box", float, 2.0),
        newton_tol=_take(solver, "solver", "newton_tol", float, 1e-12),
        delta_conormal=_take(solver, "solver", "delta_conormal", float, 1e-3),
        seed=_take(solver, "solver", "seed", int, 0),
    )

    quad = raw.get("quadrature", {})
    cfg_kwargs["quadrature"] = QuadratureOptions(
        epsilons=tuple(_take(quad, "quadrature", "epsilons", list,
                             [0.4, 0.2, 0.1, 0.05])),
        nodes=_take(quad, "quadrature", "nodes", int, 96),
        nodes_4d=_take(quad, "quadrature", "nodes_4d", int, 72),
        extrapolation_order=_take(quad, "quadrature", "extrapolation_order", int, 2),
    )

    cfg = ScenarioConfig(**cfg_kwargs)
    try:
        cfg.validate()
        scenarios.materialize(cfg)  # parse every expression now
    except (ScenarioError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(name, str(exc)) from exc
    return cfg


def config_to_text(cfg: ScenarioConfig) -> str:
    """Round-trippable TOML rendering of a scenario config (used by the CLI to
    materialize built-ins into editable files)."""
    lines = [f'name = "{cfg.name}"', "", "[space]",
             f"dim_m = {cfg.dim_m}", f"dim_x = {cfg.dim_x}", ""]
    if cfg.source == "phase":
        lines += ["[phase]", f'text = "{cfg.phase_text}"', f"n_theta = {cfg.n_theta}"]
        if cfg.cone_texts:
            cone = ", ".join(f'"{t}"' for t in cfg.cone_texts)
            lines.append(f"cone = [{cone}]")
    else:
        psi = ", ".join(f'"{t}"' for t in cfg.psi_texts)
        psi_inv = ", ".join(f'"{t}"' for t in cfg.psi_inverse_texts)
        lines += ["[canonical]", f"psi = [{psi}]", f"psi_inverse = [{psi_inv}]"]
    lines += ["", "[amplitude]", f're = "{cfg.amplitude_re}"',
              f"order = {cfg.amplitude_order}"]
    if cfg.amplitude_im:
        lines.append(f'im = "{cfg.amplitude_im}"')
    lines += ["", "[chart]", f"I = {list(cfg.chart_I)}", f"Ip = {list(cfg.chart_Ip)}"]
    if cfg.s_text:
        lines.append(f'S = "{cfg.s_text}"')
    if cfg.params:
        lines += ["", "[params]"]
        lines += [f"{k} = {v!r}" for k, v in cfg.params.items()]
    return "\n".join(lines) + "\n"
