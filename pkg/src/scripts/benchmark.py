from __future__ import annotations

import gc
from dataclasses import replace
from time import perf_counter

from aircomp_fl.core import ScenarioConfig, TaskKind, default_config, derive_stream
from aircomp_fl.experiments import (
    POLICIES,
    SimulationState,
    build_scenario,
    create_policy,
    run_iteration,
)


def time_iterations(cfg: ScenarioConfig, iterations: int) -> tuple[float, float]:
    """Seconds to build the scenario, and mean seconds per iteration."""
    start = perf_counter()
    scenario = build_scenario(cfg)
    setup = perf_counter() - start
    policy = create_policy(cfg.policy)

    w0 = scenario.task.init_params(derive_stream(scenario.streams, "data", 2))
    state = SimulationState(t=1, global_model=w0)
    gc.disable()
    start = perf_counter()
    for _ in range(iterations):
        state, _ = run_iteration(scenario, state, policy)
    per_iteration = (perf_counter() - start) / iterations
    gc.enable()
    gc.collect()
    return setup, per_iteration


if __name__ == "__main__":
    bench: list[tuple[TaskKind, int]] = [
        ("linear_regression", 2000),
        ("mlp_classifier", 20),
    ]
    with open("results.md", "w") as f:
        print("Task | ", " | ".join(POLICIES), sep="", file=f)
        print("--------|", "|".join(["--------" for _ in POLICIES]), sep="", file=f)
        for task, iterations in bench:
            base = default_config(task, "desk")
            formatted = []
            for policy in POLICIES:
                cfg = replace(base, policy=policy, num_iterations=iterations)
                setup, per_iteration = time_iterations(cfg, iterations)
                formatted.append(f"{setup:6.3f}s / {per_iteration * 1e3:8.3f}ms")
            print(f"{task} | {' | '.join(formatted)}", file=f)
