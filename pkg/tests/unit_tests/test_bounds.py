from __future__ import annotations

import math

import numpy as np
import pytest
from aircomp_fl.bounds import (
    BOUND_TRACE_COLUMNS,
    BoundConstants,
    IterationBoundInputs,
    build_bound_trace,
    certify_quadratic_constants,
    check_convex_convergence,
    check_nonconvex_condition,
    coeff_A,
    coeff_B,
    cumulative_gap,
    inverse_power_sum,
    measure_gradient_bounds,
    nonconvex_gap_step,
)
from aircomp_fl.channel import SchedulingDecision
from aircomp_fl.core import ScenarioConfig
from aircomp_fl.data import SyntheticRegressionSpec, gen_synthetic
from aircomp_fl.errors import ConfigError, UnboundedGapError
from aircomp_fl.learning import Dataset, LinearRegressionTask

CONSTANTS = BoundConstants(
    lipschitz=2.0,
    strong_convexity=0.5,
    noise_variance=1e-2,
    rho1=1.0,
    rho2=0.5,
    grad_norm_scale=1.0,
)


def _inputs(
    selection: np.ndarray,
    scaling: np.ndarray,
    counts: np.ndarray,
    constants: BoundConstants = CONSTANTS,
) -> IterationBoundInputs:
    return IterationBoundInputs.from_decision(
        SchedulingDecision(scaling, selection), counts, constants
    )


def test_from_decision() -> None:
    selection = np.array([[True, False], [True, True]])
    inp = _inputs(selection, np.array([1.0, 2.0]), np.array([2, 3]))
    np.testing.assert_array_equal(inp.deselected, [1, 0])
    assert inp.inverse_power_sum == pytest.approx(1 / 25 + 1 / 36)
    assert inp.total_samples == 5


def test_coefficients() -> None:
    selection = np.array([[True, False], [True, True]])
    inp = _inputs(selection, np.array([1.0, 2.0]), np.array([2, 3]))
    # (L - mu)/L + mu rho2 sum_i K_i |1 - beta_i|^2 / (L K)
    assert coeff_A(inp) == pytest.approx(0.75 + 0.5 * 0.5 * 2 / (2.0 * 5))
    assert coeff_B(inp) == pytest.approx(
        2.0 * 1e-2 / 2 * (1 / 25 + 1 / 36) + 1.0 * 2 / (2 * 2.0 * 5)
    )


def test_full_selection_without_noise() -> None:
    constants = CONSTANTS._replace(noise_variance=0.0)
    inp = _inputs(np.ones((3, 4), dtype=bool), np.full(4, 0.1), np.array([5, 6, 7]), constants)
    assert coeff_A(inp) == pytest.approx(1 - 0.5 / 2.0)
    assert coeff_B(inp) == 0.0


def test_noiseless_aggregation() -> None:
    inp = IterationBoundInputs.from_decision(None, [3, 4], CONSTANTS)
    assert inp.noiseless
    assert coeff_A(inp) == pytest.approx(0.75)
    assert coeff_B(inp) == 0.0


def test_unbounded_entry() -> None:
    selection = np.array([[True, False], [False, False]])
    assert math.isinf(inverse_power_sum(selection, np.ones(2), [1, 1]))
    inp = IterationBoundInputs(
        np.array([1, 2]), math.inf, np.array([1, 1]), CONSTANTS
    )
    with pytest.raises(UnboundedGapError):
        coeff_B(inp)


def test_bound_trace_marks_unbounded_iterations() -> None:
    counts = np.array([1, 1])
    good = IterationBoundInputs(np.array([0, 0]), 1.0, counts, CONSTANTS)
    bad = IterationBoundInputs(np.array([1, 2]), math.inf, counts, CONSTANTS)
    trace = build_bound_trace([good, bad, good], initial_gap=1.0)
    assert trace.unbounded == [False, True, True]
    assert trace.cumulative[0] is not None
    assert trace.cumulative[1:] == [None, None]
    assert trace.b[1] is None
    table = trace.to_table()
    assert tuple(table.column_names) == BOUND_TRACE_COLUMNS
    assert table["cumulative_bound"].null_count == 2


def test_reduces_to_geometric_decay() -> None:
    constants = CONSTANTS._replace(noise_variance=0.0)
    inp = _inputs(np.ones((4, 3), dtype=bool), np.full(3, 0.3), np.array([1, 2, 3, 4]), constants)
    gap0 = 3.7
    gaps = cumulative_gap([(coeff_A(inp), coeff_B(inp))] * 100, gap0)
    ratio = 1 - constants.strong_convexity / constants.lipschitz
    for t, gap in enumerate(gaps, start=1):
        expected = ratio**t * gap0
        assert abs(gap - expected) <= 1e-10 * expected


def test_cumulative_gap_matches_direct_sum(rng: np.random.Generator) -> None:
    coefficients = [
        (float(a), float(b))
        for a, b in zip(rng.uniform(0.5, 1.0, 30), rng.uniform(0.0, 0.1, 30))
    ]
    gap0 = 2.0
    gaps = cumulative_gap(coefficients, gap0)
    a = np.array([c[0] for c in coefficients])
    b = np.array([c[1] for c in coefficients])
    for t in range(1, 31):
        direct = sum(b[j] * np.prod(a[j + 1 : t]) for j in range(t)) + np.prod(a[:t]) * gap0
        assert gaps[t - 1] == pytest.approx(direct, rel=1e-12)


def test_cumulative_gap_rejects_negative_initial_gap() -> None:
    with pytest.raises(ValueError):
        cumulative_gap([(0.5, 0.1)], -1.0)


def test_check_convex_convergence() -> None:
    assert check_convex_convergence(ScenarioConfig(rho2=0.5)).converges
    result = check_convex_convergence(ScenarioConfig(rho2=0.6, certify=False))
    assert not result.converges
    assert result.margin == pytest.approx(-0.1)


def test_nonconvex_recursion() -> None:
    assert check_nonconvex_condition(0.9, mu=0.5, grad_norm_scale=1.0)
    assert not check_nonconvex_condition(3.0, mu=0.5, grad_norm_scale=1.0)
    assert nonconvex_gap_step(1.0, 0.9, 0.01, 2.0, 0.5) == pytest.approx(
        0.01 + (0.9 - 1.0) * 2.0 / 1.0 + 1.0
    )

    counts = np.array([1, 1])
    inp = IterationBoundInputs(np.array([0, 0]), 0.0, counts, CONSTANTS)
    trace = build_bound_trace([inp, inp], initial_gap=1.0, grad_norms_sq=[2.0, 1.0])
    first = nonconvex_gap_step(1.0, 0.75, 0.0, 2.0, 0.5)
    assert trace.nonconvex == pytest.approx([first, nonconvex_gap_step(first, 0.75, 0.0, 1.0, 0.5)])
    assert trace.convex_flag == [True, True]


def test_certify_quadratic_constants(rng: np.random.Generator) -> None:
    datasets = gen_synthetic(SyntheticRegressionSpec(), 10, rng)
    cert = certify_quadratic_constants(datasets)
    assert 0 < cert.strong_convexity <= cert.lipschitz
    task = LinearRegressionTask()
    pooled = Dataset.concat(datasets)
    np.testing.assert_allclose(task.gradient(cert.optimum, pooled), 0.0, atol=1e-10)
    assert cert.optimal_loss == pytest.approx(task.loss(cert.optimum, pooled))
    # x ~ U[0, 1] puts the Hessian near [[2/3, 1], [1, 2]]
    assert cert.lipschitz == pytest.approx(2.535, rel=0.1)


def _gradient_norms(
    trajectory: list[np.ndarray], datasets: list[Dataset]
) -> tuple[np.ndarray, np.ndarray]:
    task = LinearRegressionTask()
    counts = np.array([d.size for d in datasets], dtype=np.float64)
    full_sq: list[float] = []
    worst_sq: list[float] = []
    for w in trajectory:
        full = counts @ np.stack([task.gradient(w, d) for d in datasets]) / counts.sum()
        full_sq.append(float(full @ full))
        rows = [task.per_sample_gradients(w, d) for d in datasets]
        worst_sq.append(max(float(np.sum(g**2, axis=1).max()) for g in rows))
    return np.array(full_sq), np.array(worst_sq)


def test_measure_gradient_bounds(rng: np.random.Generator) -> None:
    datasets = gen_synthetic(SyntheticRegressionSpec(), 5, rng)
    task = LinearRegressionTask()
    trajectory = [rng.normal(0.0, 2.0, size=2) for _ in range(30)]
    full_sq, worst_sq = _gradient_norms(trajectory, datasets)

    rho1, rho2 = measure_gradient_bounds(trajectory, task, datasets, inflation=1.0)
    assert rho1 >= 0.0 and rho2 >= 0.0
    slack = rho1 + rho2 * full_sq - worst_sq
    assert np.all(slack >= -1e-9 * worst_sq.max())
    if rho1 > 0.0:
        # an unclamped line touches the point set
        assert slack.min() == pytest.approx(0.0, abs=1e-9 * worst_sq.max())
    # the line sits no higher on average than the flat bound rho2 = 0
    assert np.mean(rho1 + rho2 * full_sq) <= worst_sq.max() + 1e-9

    inflated = measure_gradient_bounds(trajectory, task, datasets)
    assert inflated == pytest.approx((1.1 * rho1, 1.1 * rho2))


def test_measure_gradient_bounds_on_one_model(rng: np.random.Generator) -> None:
    datasets = gen_synthetic(SyntheticRegressionSpec(), 3, rng)
    w = np.array([0.5, 0.5])
    full_sq, worst_sq = _gradient_norms([w], datasets)
    rho1, rho2 = measure_gradient_bounds([w, w], LinearRegressionTask(), datasets, 1.0)
    assert rho2 == 0.0
    assert rho1 == pytest.approx(worst_sq[0])
    with pytest.raises(ConfigError):
        measure_gradient_bounds([], LinearRegressionTask(), datasets)
    with pytest.raises(ConfigError):
        measure_gradient_bounds([w], LinearRegressionTask(), datasets, inflation=0.5)
