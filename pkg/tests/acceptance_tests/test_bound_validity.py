from __future__ import annotations

from dataclasses import replace

import pytest
from aircomp_fl.bounds import measure_gradient_bounds
from aircomp_fl.core import default_config
from aircomp_fl.experiments import build_scenario, run_experiment

pytestmark = pytest.mark.slow


@pytest.mark.parametrize("seed", range(20))
def test_cumulative_bound_holds(seed: int) -> None:
    base = replace(
        default_config("linear_regression", "desk"), num_iterations=500, rng_seed=seed
    )
    scenario = build_scenario(base)
    cert = scenario.certificate
    assert cert is not None
    # certified constants, alpha = 1/L and an eta large enough that no cap clamps
    cfg = replace(
        base,
        lipschitz=cert.lipschitz,
        strong_convexity=cert.strong_convexity,
        learning_rate=1.0 / cert.lipschitz,
        eta=5.0,
        policy="inflota",
    ).validated()
    result = run_experiment(cfg, scenario=replace(scenario, cfg=cfg), keep_models=True)
    assert sum(r.clamped for r in result.trace.records) == 0
    assert result.trajectory is not None

    # both constants come from the very models the bound is stated for
    rho1, rho2 = measure_gradient_bounds(
        result.trajectory, scenario.task, scenario.datasets, inflation=1.1
    )
    assert rho1 > 0.0
    constants = result.scenario.bound_constants._replace(rho1=rho1, rho2=rho2)
    bounds = result.bound_trace(constants)

    assert not any(bounds.unbounded)
    for t, (gap, bound) in enumerate(zip(bounds.empirical_gap, bounds.cumulative), start=1):
        assert gap is not None and bound is not None
        assert gap <= bound + 1e-12, f"t={t}: gap {gap} above bound {bound}"
