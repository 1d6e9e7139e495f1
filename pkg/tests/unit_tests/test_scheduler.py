from __future__ import annotations

import numpy as np
import pytest
from aircomp_fl.errors import DegenerateEntryError, SchedulerError
from aircomp_fl.scheduler import (
    ObjectiveConstants,
    SchedulerInput,
    brute_force_oracle,
    compute_eta,
    induced_selection,
    max_scaling,
    max_scalings,
    objective_R,
    oracle_check,
    random_instance,
    random_schedule,
    schedule_entries,
    solve_p4,
)


def _instance(**overrides: object) -> SchedulerInput:
    counts = np.array([10, 20, 30], dtype=np.int64)
    fields: dict[str, object] = {
        "prev_entry": 0.4,
        "eta": 0.1,
        "gains": np.array([1.0, 0.5, 2.0]),
        "sample_counts": counts,
        "max_powers": np.array([10.0, 10.0, 10.0]),
        "constants": ObjectiveConstants(1.0, 1e-4, 1.0, int(counts.sum())),
    }
    fields.update(overrides)
    return SchedulerInput(**fields)  # type: ignore[arg-type]


def test_max_scaling() -> None:
    inp = _instance()
    assert max_scaling(0, inp) == pytest.approx(np.sqrt(10.0) * 1.0 / (10 * 0.5))
    np.testing.assert_allclose(
        max_scalings(inp), [max_scaling(k, inp) for k in range(3)]
    )


def test_objective_R() -> None:
    inp = _instance()
    everyone = np.ones(3, dtype=bool)
    assert objective_R(0.1, everyone, inp) == pytest.approx(1e-4 / (2 * (60 * 0.1) ** 2))
    first = np.array([True, False, False])
    assert objective_R(0.1, first, inp) == pytest.approx(
        1e-4 / (2 * (10 * 0.1) ** 2) + 50 / (2 * 60)
    )
    with pytest.raises(SchedulerError):
        objective_R(0.1, np.zeros(3, dtype=bool), inp)


def test_solve_p4_selection_is_induced() -> None:
    inp = _instance()
    point = solve_p4(inp)
    np.testing.assert_array_equal(point.selection, induced_selection(point.b, inp))
    assert point.b in set(max_scalings(inp).tolist())
    assert point.objective == objective_R(point.b, point.selection, inp)


def test_noise_free_selects_everyone() -> None:
    inp = _instance(constants=ObjectiveConstants(1.0, 0.0, 1.0, 60))
    point = solve_p4(inp)
    assert point.selection.all()
    assert point.b == pytest.approx(max_scalings(inp).min())


def test_heavy_noise_prefers_strong_workers() -> None:
    inp = _instance(
        gains=np.array([1e-3, 1.0, 1.0]),
        constants=ObjectiveConstants(1.0, 1.0, 1e-3, 60),
    )
    point = solve_p4(inp)
    assert not point.selection[0]
    assert point.selection[1:].all()


def test_equal_caps_break_ties_towards_larger_b() -> None:
    counts = np.array([10, 10], dtype=np.int64)
    inp = _instance(
        gains=np.array([1.0, 1.0]),
        sample_counts=counts,
        max_powers=np.array([4.0, 4.0]),
        constants=ObjectiveConstants(1.0, 1e-4, 1.0, 20),
    )
    point = solve_p4(inp)
    assert point.selection.all()
    assert point.objective == brute_force_oracle(inp).objective


def test_degenerate_entry() -> None:
    inp = _instance(prev_entry=0.0, eta=0.0, b_ceiling=123.0)
    with pytest.raises(DegenerateEntryError):
        max_scaling(0, inp)
    point = solve_p4(inp)
    assert point.b == 123.0
    assert point.selection.all()
    assert brute_force_oracle(inp).b == 123.0


def test_oracle_refuses_large_instances(rng: np.random.Generator) -> None:
    with pytest.raises(SchedulerError, match="Refusing"):
        brute_force_oracle(random_instance(21, rng))


def test_oracle_agreement(rng: np.random.Generator) -> None:
    result = oracle_check(1000, (2, 12), rng)
    assert result.failed == 0, result.mismatches[:5]
    assert result.passed == 1000


def test_oracle_agreement_without_noise(rng: np.random.Generator) -> None:
    for _ in range(50):
        inp = random_instance(int(rng.integers(2, 9)), rng, noise_variance=0.0)
        assert solve_p4(inp).objective == brute_force_oracle(inp).objective


def test_schedule_entries_matches_solve_p4(rng: np.random.Generator) -> None:
    u, d = 7, 40
    prev = rng.normal(size=d)
    prev[:3] = 0.0
    eta = np.full(d, 0.1)
    eta[:2] = 0.0
    gains = np.sqrt(rng.standard_exponential((u, d)))
    counts = rng.integers(1, 100, size=u).astype(np.int64)
    powers = rng.uniform(1.0, 20.0, size=u)
    constants = ObjectiveConstants(1.0, 1e-2, 0.5, int(counts.sum()))
    schedule = schedule_entries(prev, eta, gains, counts, powers, constants, 1e6)

    np.testing.assert_array_equal(schedule.degenerate, np.arange(d) < 2)
    for e in range(d):
        inp = SchedulerInput(
            float(prev[e]), float(eta[e]), gains[:, e], counts, powers, constants, 1e6
        )
        point = solve_p4(inp)
        assert schedule.decision.scaling[e] == point.b
        np.testing.assert_array_equal(schedule.decision.selection[:, e], point.selection)


def test_random_schedule(rng: np.random.Generator) -> None:
    u, d = 5, 20_000
    caps = rng.uniform(0.1, 2.0, size=(u, d))
    decision = random_schedule(caps, rng, b_ceiling=1e6)
    assert decision.selection.any(axis=0).all()
    limit = np.where(decision.selection, caps, np.inf).min(axis=0)
    assert np.all(decision.scaling > 0)
    assert np.all(decision.scaling <= limit)
    # a uniform nonempty subset has U 2^(U-1) / (2^U - 1) members on average
    expected = u * 2 ** (u - 1) / (2**u - 1)
    assert decision.selected_counts.mean() == pytest.approx(expected, rel=0.02)
    # so b / limit is uniform on (0, 1]
    assert np.mean(decision.scaling / limit) == pytest.approx(0.5, abs=0.01)


def test_random_schedule_floor(rng: np.random.Generator) -> None:
    caps = rng.uniform(0.1, 2.0, size=(5, 20_000))
    decision = random_schedule(caps, rng, b_ceiling=1e6, floor=0.2)
    ratio = decision.scaling / np.where(decision.selection, caps, np.inf).min(axis=0)
    assert ratio.min() > 0.2
    assert ratio.max() <= 1.0
    assert np.mean(ratio) == pytest.approx(0.6, abs=0.01)
    # 1/b^2 stays bounded by the floor
    assert np.max(1.0 / ratio**2) < 25.0
    with pytest.raises(SchedulerError):
        random_schedule(caps, rng, b_ceiling=1e6, floor=1.0)


def test_random_schedule_respects_ceiling(rng: np.random.Generator) -> None:
    caps = np.full((3, 4), np.inf)
    decision = random_schedule(caps, rng, b_ceiling=2.0)
    assert np.all(decision.scaling <= 2.0)


def test_compute_eta() -> None:
    prev = np.array([1.0, -2.0])
    np.testing.assert_array_equal(compute_eta(prev, None, "adaptive_diff", 0.1), [0.1, 0.1])
    np.testing.assert_array_equal(
        compute_eta(prev, np.array([0.5, -1.0]), "adaptive_diff", 0.1), [0.5, 1.0]
    )
    np.testing.assert_array_equal(
        compute_eta(prev, np.array([0.5, -1.0]), "fixed", 0.3), [0.3, 0.3]
    )
    with pytest.raises(SchedulerError):
        compute_eta(prev, prev, "magic", 0.1)  # type: ignore[arg-type]


def test_scheduler_input_validation() -> None:
    with pytest.raises(SchedulerError):
        _instance(eta=-1.0)
    with pytest.raises(SchedulerError):
        _instance(gains=np.array([1.0, 0.0, 1.0]))
