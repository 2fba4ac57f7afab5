import numpy as np
import pytest

from fiotrace import scenarios as sc


@pytest.fixture(scope="session")
def runs():
    """Materialized scenarios with their trace-check artifacts, keyed by name;
    computed once per session."""
    cache = {}

    def get(name, **overrides):
        key = (name, tuple(sorted(overrides.items())))
        if key not in cache:
            scenario = sc.materialize(sc.builtin_config(name, overrides or None))
            artifacts = sc.run_trace_check(scenario)
            cache[key] = (scenario, artifacts)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def setups(runs):
    """Statphase setups (canonical chart + theta splitting) for scenarios whose
    conditions pass."""
    cache = {}

    def get(name, **overrides):
        key = (name, tuple(sorted(overrides.items())))
        if key not in cache:
            scenario, artifacts = runs(name, **overrides)
            cache[key] = (scenario, artifacts, sc.prepare_statphase(scenario, artifacts))
        return cache[key]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
