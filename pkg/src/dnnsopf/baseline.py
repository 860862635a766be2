"""Deterministic per-sample OPF over the dispatch vector.

The problem is posed in the reduced space of ``x``: every function value
requires a power-flow solve, and gradients come from the same
implicit-function machinery the trainer uses. Two local solvers are
available:

``sqp``
    SLSQP on cost subject to all constraint rows, with analytic constraint
    Jacobians ``dy/du @ du/dx``. Default.
``auglag``
    Augmented-Lagrangian outer loop with ``max(0, s + mu/rho)**2`` penalties
    and box-constrained L-BFGS-B inner solves.

Both declare convergence from the same first-order test: residual below
``tol_feas`` and projected Lagrangian gradient below ``tol_grad`` (cost
measured relative to :func:`cost_reference`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize, nnls

from .acpf import (
    Dispatch,
    Grid,
    LoadVector,
    Linearization,
    PowerFlowDivergence,
    VoltageState,
    constraint_jacobian,
    constraint_values,
    cost_gradient,
    generation_cost,
)
from .ccsopf import Metrics, cost_reference, evaluate_dispatches, solve_with_fallback

TOL_FEAS = 1e-4
TOL_GRAD = 1e-5
# line searches need function values far below the training PF tolerance
PF_TOL = 1e-11
# rows within this margin of their limit count as active for multiplier recovery
ACTIVE_MARGIN = 1e-6


@dataclass
class OpfSolution:
    x: Dispatch
    state: VoltageState | None
    cost: float
    max_residual: float
    iterations: int
    converged: bool
    multipliers: np.ndarray = field(repr=False, default=None)
    rho: float = 0.0
    outer_rounds: int = 0
    message: str = ""
    kkt_residual: float = np.inf


class _Problem:
    """Cached reduced-space evaluations at one load vector."""

    def __init__(self, grid: Grid, loads: LoadVector, warm: VoltageState | None):
        self.grid = grid
        self.loads = loads
        self.warm = warm
        self.scale = 1.0 / cost_reference(grid)
        self.evals = 0
        self._key = None
        self._val = None
        self._sens = None

    def point(self, x):
        """(state, constraints, cost, scaled d cost/dx, linearization) at ``x``."""
        key = x.tobytes()
        if key != self._key:
            grid, loads = self.grid, self.loads
            self.evals += 1
            state = solve_with_fallback(grid, x, loads, self.warm, tol=PF_TOL)
            self.warm = state
            lin = Linearization(state, grid)
            cv = constraint_values(state, grid, x, loads)
            cost, _ = generation_cost(state, grid, x, loads)
            d_x, d_u = cost_gradient(state, grid, x, loads)
            grad = self.scale * (d_x + lin.pullback(d_u))
            self._key, self._val, self._sens = key, (state, cv, cost, grad, lin), None
        return self._val

    def constraint_sensitivity(self, x) -> np.ndarray:
        state, _, _, _, lin = self.point(x)
        if self._sens is None:
            self._sens = constraint_jacobian(state, self.grid) @ lin.sensitivity()
        return self._sens


def _projected_gradient(x, grad, lo, hi):
    return np.max(np.abs(x - np.clip(x - grad, lo, hi))) if x.size else 0.0


def _kkt(prob: _Problem, x, lo, hi) -> tuple[np.ndarray, float]:
    """Nonnegative multipliers of near-active rows and the projected Lagrangian gradient."""
    _, cv, _, grad, _ = prob.point(x)
    mult = np.zeros(cv.slack.size)
    active = np.flatnonzero(cv.slack > -ACTIVE_MARGIN)
    if active.size:
        Ja = prob.constraint_sensitivity(x)[active]
        # variables sitting on a box bound carry their own multipliers
        free = (x > lo + 1e-9) & (x < hi - 1e-9)
        if np.any(free):
            mult[active], _ = nnls(-Ja[:, free].T, grad[free])
        grad = grad + Ja.T @ mult[active]
    return mult, _projected_gradient(x, grad, lo, hi)


def _finish(prob, x, lo, hi, tol_feas, tol_grad, rounds, rho, note=""):
    state, cv, cost, _, _ = prob.point(x)
    viol = float(np.max(cv.slack, initial=0.0))
    mult, kkt = _kkt(prob, x, lo, hi)
    ok = viol < tol_feas and kkt < tol_grad
    if ok:
        msg = ""
    else:
        msg = f"{note + ': ' if note else ''}violation {viol:.2e}, projected gradient {kkt:.2e}"
    return OpfSolution(Dispatch.from_array(x, prob.grid.index), state, cost, viol, prob.evals, ok,
                       mult, rho, rounds, msg, kkt)


class _FirstOrderPoint(Exception):
    def __init__(self, x):
        self.x = x


def _solve_sqp(prob: _Problem, x, lo, hi, tol_feas, tol_grad, max_iter):
    nit = [0]

    def check(z):
        # SLSQP keeps shaving the last digits long after the first-order test
        # passes, so stop as soon as it does
        nit[0] += 1
        z = np.clip(z, lo, hi)
        viol = float(np.max(prob.point(z)[1].slack, initial=0.0))
        if viol < tol_feas and _kkt(prob, z, lo, hi)[1] < tol_grad:
            raise _FirstOrderPoint(z)

    try:
        if x.size:
            check(x)
            nit[0] = 0
        res = minimize(
            lambda z: prob.scale * prob.point(z)[2],
            x,
            jac=lambda z: prob.point(z)[3],
            method="SLSQP",
            bounds=list(zip(lo, hi)),
            constraints=[{
                "type": "ineq",
                "fun": lambda z: -prob.point(z)[1].slack,
                "jac": lambda z: -prob.constraint_sensitivity(z),
            }],
            callback=check,
            options={"maxiter": max_iter, "ftol": 1e-12},
        )
    except _FirstOrderPoint as stop:
        return _finish(prob, stop.x, lo, hi, tol_feas, tol_grad, nit[0], 0.0)
    x = np.clip(res.x, lo, hi)
    return _finish(prob, x, lo, hi, tol_feas, tol_grad, res.nit, 0.0, "" if res.success else res.message)


def _solve_auglag(prob: _Problem, x, mult, rho, lo, hi, tol_feas, tol_grad, max_outer, max_inner):
    def fun(z, mult, rho):
        try:
            state, cv, cost, grad, lin = prob.point(z)
        except PowerFlowDivergence:
            return 1e10, np.zeros_like(z)
        shifted = np.maximum(cv.slack + mult / rho, 0.0)
        f = prob.scale * cost + 0.5 * rho * shifted @ shifted - 0.5 * mult @ mult / rho
        active = shifted > 0
        if np.any(active):
            w_u = constraint_jacobian(state, prob.grid)[active].T @ (rho * shifted[active])
            grad = grad + lin.pullback(w_u)
        return f, grad

    bounds = list(zip(lo, hi))
    prev_viol, prev_cost, prev_x = np.inf, np.inf, None
    for outer in range(1, max_outer + 1):
        res = minimize(fun, x, args=(mult, rho), jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": max_inner, "ftol": 1e-15, "gtol": 0.1 * tol_grad})
        x = np.clip(res.x, lo, hi)
        _, cv, cost, _, _ = prob.point(x)
        viol = float(np.max(cv.slack, initial=0.0))
        _, grad = fun(x, mult, rho)
        if viol < tol_feas and _projected_gradient(x, grad, lo, hi) < tol_grad:
            sol = _finish(prob, x, lo, hi, tol_feas, np.inf, outer, rho)
            sol.multipliers = mult
            return sol
        if viol < tol_feas and prev_x is not None and abs(cost - prev_cost) <= 1e-10 * abs(cost) \
                and np.max(np.abs(x - prev_x), initial=0.0) < 1e-9:
            # feasible and no longer moving: the line search is limited by round-off
            return _finish(prob, x, lo, hi, tol_feas, tol_grad, outer, rho, "stalled")
        mult = np.maximum(mult + rho * cv.slack, 0.0)
        if viol > 0.25 * prev_viol:
            rho = min(rho * 10.0, 1e8)
        prev_viol, prev_cost, prev_x = viol, cost, x.copy()
    return _finish(prob, x, lo, hi, tol_feas, tol_grad, max_outer, rho, "outer iteration cap reached")


def solve_opf(grid: Grid, loads: LoadVector, start: Dispatch | OpfSolution | None = None,
              tol_feas: float = TOL_FEAS, tol_grad: float = TOL_GRAD, method: str = "sqp",
              max_outer: int = 40, max_inner: int = 400) -> OpfSolution:
    """Locally minimise generation cost over ``x`` subject to all constraint rows.

    Parameters
    ----------
    start
        Initial dispatch, or a previous solution whose dispatch, voltages and
        (for ``auglag``) multipliers seed the solve. Defaults to the box midpoint.
    method
        ``"sqp"`` or ``"auglag"``.
    max_outer, max_inner
        Outer rounds and inner iterations for ``auglag``; ``max_inner`` is
        also the SLSQP iteration cap.

    Returns
    -------
    OpfSolution
        ``converged`` is False, with a diagnostic ``message``, when the
        first-order test fails or an iteration cap is hit.
    """
    if method not in ("sqp", "auglag"):
        raise ValueError(f"unknown OPF method {method!r}")
    idx = grid.index
    lo, hi = idx.x_lower, idx.x_upper
    warm, mult, rho = None, np.zeros(grid.layout.size), 10.0
    if isinstance(start, OpfSolution):
        x = start.x.as_array().copy()
        warm = start.state
        if start.multipliers is not None and start.rho > 0:
            mult, rho = start.multipliers.copy(), start.rho
    else:
        x = start.as_array().copy() if isinstance(start, Dispatch) else 0.5 * (lo + hi)
    x = np.clip(x, lo, hi)
    prob = _Problem(grid, loads, warm)
    try:
        if method == "sqp":
            return _solve_sqp(prob, x, lo, hi, tol_feas, tol_grad, max_inner)
        return _solve_auglag(prob, x, mult, rho, lo, hi, tol_feas, tol_grad, max_outer, max_inner)
    except PowerFlowDivergence as exc:
        return OpfSolution(Dispatch.from_array(x, idx), None, np.nan, np.inf, prob.evals, False,
                           mult, rho, 0, f"power flow failed: {exc}")


def evaluate_baseline(grid: Grid, samples: list[LoadVector], method: str = "sqp"
                      ) -> tuple[Metrics, list[OpfSolution]]:
    """Solve the OPF per sample, warm-starting from the previous solution."""
    solutions = []
    prev = [None]

    def dispatch(loads):
        sol = solve_opf(grid, loads, start=prev[0], method=method)
        solutions.append(sol)
        if sol.state is None:
            raise PowerFlowDivergence(sol.message)
        prev[0] = sol
        return sol.x.as_array(), sol.state

    # an optimum sits on its active limits, so score it at the solver's own feasibility tolerance
    metrics = evaluate_dispatches(grid, samples, dispatch, policy="opf", tol=TOL_FEAS)
    return metrics, solutions
