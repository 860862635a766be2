import itertools

import numpy as np
import pytest

from conftest import fixture_grid
from dnnsopf.acpf import Dispatch, LoadVector, PowerFlowDivergence, constraint_values, generation_cost, solve_pf
from dnnsopf.baseline import TOL_FEAS, evaluate_baseline, solve_opf
from dnnsopf.ccsopf import sample_loads

METHODS = ["sqp", "auglag"]


@pytest.fixture(scope="module")
def nominal14():
    grid = fixture_grid("case14_ieee_pglib")
    return grid, solve_opf(grid, grid.nominal_loads())


def test_nominal_14_bus_cost(nominal14):
    _, sol = nominal14
    assert sol.converged, sol.message
    assert sol.cost == pytest.approx(2180.16, rel=0.01)


@pytest.mark.parametrize("method", METHODS)
def test_converged_solution_is_feasible(method):
    grid = fixture_grid("case14_ieee_pglib")
    for loads in sample_loads(grid, 0.1, 3, seed=4):
        sol = solve_opf(grid, loads, method=method)
        assert sol.converged, sol.message
        x = sol.x.as_array()
        assert np.all(x >= grid.index.x_lower) and np.all(x <= grid.index.x_upper)
        cv = constraint_values(solve_pf(grid, x, loads), grid, x, loads)
        assert np.all(cv.values <= cv.limits + TOL_FEAS)


def _grid_search(grid, loads, levels=8, n=11):
    """Zooming brute-force search over the full dispatch box."""
    lo, hi = grid.index.x_lower.copy(), grid.index.x_upper.copy()
    box_lo, box_hi = lo.copy(), hi.copy()
    best, best_x = np.inf, None
    for _ in range(levels):
        axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
        for x in itertools.product(*axes):
            x = np.array(x)
            try:
                state = solve_pf(grid, x, loads, tol=1e-12, max_iter=50)
            except PowerFlowDivergence:
                continue
            cv = constraint_values(state, grid, x, loads)
            if np.any(cv.slack > 0):
                continue
            c = generation_cost(state, grid, x, loads)[0]
            if c < best:
                best, best_x = c, x
        step = (hi - lo) / (n - 1)
        lo = np.maximum(best_x - 2 * step, box_lo)
        hi = np.minimum(best_x + 2 * step, box_hi)
    return best_x, best


@pytest.mark.parametrize("method", METHODS)
def test_unconstrained_dispatch_matches_grid_search(method):
    grid = fixture_grid("case2_ed")
    loads = grid.nominal_loads()
    x_ref, c_ref = _grid_search(grid, loads)
    sol = solve_opf(grid, loads, method=method)
    assert sol.converged, sol.message
    # nothing binds except the voltage box, so every multiplier vanishes
    assert np.all(sol.multipliers == 0)
    np.testing.assert_allclose(sol.x.as_array(), x_ref, atol=1e-3)
    assert sol.cost <= c_ref + 1e-6


@pytest.mark.parametrize("method", METHODS)
def test_warm_start_fixed_point(nominal14, method):
    grid, _ = nominal14
    loads = grid.nominal_loads()
    first = solve_opf(grid, loads, method=method)
    again = solve_opf(grid, loads, start=first, method=method)
    assert again.converged
    assert again.outer_rounds <= 2
    assert again.cost == pytest.approx(first.cost, rel=1e-7)


def test_warm_start_from_dispatch(nominal14):
    grid, sol = nominal14
    again = solve_opf(grid, grid.nominal_loads(), start=sol.x)
    assert again.converged and again.cost == pytest.approx(sol.cost, rel=1e-7)


def test_deterministic(nominal14):
    grid, sol = nominal14
    again = solve_opf(grid, grid.nominal_loads())
    assert np.array_equal(again.x.as_array(), sol.x.as_array()) and again.cost == sol.cost


def test_unknown_method():
    grid = fixture_grid("case2")
    with pytest.raises(ValueError):
        solve_opf(grid, grid.nominal_loads(), method="ipm")


def test_iteration_cap_reports_unconverged():
    grid = fixture_grid("case14_ieee_pglib")
    sol = solve_opf(grid, grid.nominal_loads(), max_inner=1)
    assert not sol.converged and sol.message


def test_infeasible_load_reports_unconverged():
    grid = fixture_grid("case2")
    sol = solve_opf(grid, LoadVector(np.array([0.0, 2.5]), np.zeros(2)))  # beyond the 200 MW generator
    assert not sol.converged
    assert sol.max_residual > TOL_FEAS


def test_evaluate_baseline_schema():
    grid = fixture_grid("case6ww")
    samples = sample_loads(grid, 0.05, 4, seed=0)
    metrics, sols = evaluate_baseline(grid, samples)
    assert metrics.policy == "opf" and metrics.n_samples == 4 and len(sols) == 4
    assert all(s.converged for s in sols)
    np.testing.assert_allclose(metrics.costs, [s.cost for s in sols], rtol=1e-9)
    assert metrics.max_violation_pct == 0.0


def test_dispatch_start_is_clipped_into_box():
    grid = fixture_grid("case6ww")
    far = Dispatch.from_array(grid.index.x_upper + 1.0, grid.index)
    sol = solve_opf(grid, grid.nominal_loads(), start=far)
    assert sol.converged


def test_benchmark_dominance_on_policy_feasible_samples():
    # where the policy's own dispatch is feasible it is a candidate of the OPF,
    # so the per-sample optimum cannot cost more (up to local-solver slack)
    from dnnsopf.ccsopf import TrainConfig, make_split, train
    from dnnsopf.policy import forward_array

    grid = fixture_grid("case6ww")
    cfg = TrainConfig(alpha=0.05, eps=0.005, nu0=4e-2, radius=0.05, epochs=2, n_samples=260, k_train=200, k_test=60)
    tr, te = make_split(grid, cfg)
    params, _ = train(grid, cfg, tr)
    _, sols = evaluate_baseline(grid, te)
    compared = 0
    for loads, sol in zip(te, sols):
        x = forward_array(params, loads)
        state = solve_pf(grid, x, loads)
        if np.any(constraint_values(state, grid, x, loads).slack > 0) or not sol.converged:
            continue
        compared += 1
        assert sol.cost <= generation_cost(state, grid, x, loads)[0] * 1.005
    assert compared >= 10
