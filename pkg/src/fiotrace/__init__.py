"""fiotrace: does the trace of a Fourier integral operator on an embedded
submanifold stay a Fourier integral operator?

The package checks the two trace conditions numerically (clean intersection
with the restricted cotangent bundle, empty conormal intersection), computes
the traced Lagrangian with its order and Sobolev admissibility window, builds
the leading canonical amplitude by stationary phase, and validates every
closed-form step against a brute-force mollified oscillatory-quadrature
oracle.
"""

from . import (
    canonmod,
    exprcalc,
    geomcore,
    oscquad,
    phasefn,
    reports,
    scenarios,
    statphase,
    tracemod,
)

__all__ = [
    "exprcalc",
    "geomcore",
    "phasefn",
    "tracemod",
    "statphase",
    "oscquad",
    "canonmod",
    "scenarios",
    "reports",
]

__version__ = "0.1.0"
