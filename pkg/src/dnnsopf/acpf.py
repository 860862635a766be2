"""AC power flow, constraint functions and their sensitivities.

The power-flow state is ``u = [v_1..v_N, theta_k (k != slack)]``. The
dispatch ``x = [v_set at generator buses, p_g at non-slack generators]``
together with the loads fixes ``u`` through the power-flow equations

    [x; z] = [g(u); l(u)]

and every Jacobian in this module is taken with respect to ``u``. The
dispatch sensitivity follows from differentiating the identity above.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from .caseio import (
    AdmittanceMatrix,
    BranchAdmittances,
    NetworkCase,
    VariableIndex,
    branch_admittances,
    build_admittance,
    partition_variables,
)

TOL_PF = 1e-8
MAX_ITER = 20


class PowerFlowDivergence(RuntimeError):
    def __init__(self, message, residual=np.inf, iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class SingularJacobianError(PowerFlowDivergence):
    """The power-flow Jacobian is singular (voltage-collapse proximity)."""


@dataclass(frozen=True)
class VoltageState:
    v: np.ndarray
    theta: np.ndarray

    @classmethod
    def flat(cls, n: int) -> "VoltageState":
        return cls(np.ones(n), np.zeros(n))

    @classmethod
    def from_u(cls, u: np.ndarray, index: VariableIndex) -> "VoltageState":
        n = index.n_bus
        theta = np.zeros(n)
        theta[index.angle_buses] = u[n:]
        return cls(np.array(u[:n], dtype=float), theta)

    def to_u(self, index: VariableIndex) -> np.ndarray:
        return np.concatenate([self.v, self.theta[index.angle_buses]])

    @property
    def phasor(self) -> np.ndarray:
        return self.v * np.exp(1j * self.theta)

    def to_json(self) -> str:
        return json.dumps({"v": self.v.tolist(), "theta": self.theta.tolist()})


@dataclass(frozen=True)
class LoadVector:
    p_d: np.ndarray
    q_d: np.ndarray

    @classmethod
    def from_array(cls, phi: np.ndarray) -> "LoadVector":
        n = len(phi) // 2
        return cls(np.asarray(phi[:n], dtype=float), np.asarray(phi[n:], dtype=float))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.p_d, self.q_d])


@dataclass(frozen=True)
class Dispatch:
    v_set: np.ndarray
    p_g: np.ndarray

    @classmethod
    def from_array(cls, x: np.ndarray, index: VariableIndex) -> "Dispatch":
        x = np.asarray(x, dtype=float)
        return cls(x[: index.n_gen], x[index.n_gen :])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.v_set, self.p_g])


@dataclass(frozen=True)
class ConstraintLayout:
    """Row bookkeeping for y(x, phi) <= y_max.

    Every row is ``sign * base[k] <= limit`` where ``base`` stacks, in order:
    q_g at non-slack generators, slack p_g, slack q_g, load-bus voltages,
    squared from-end flows, squared to-end flows. Two-sided quantities
    produce an upper row and a lower (sign -1) row; infinite limits produce
    no row.
    """

    base_index: np.ndarray
    sign: np.ndarray
    limit: np.ndarray
    labels: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.sign)


@dataclass(frozen=True)
class ConstraintVector:
    values: np.ndarray
    limits: np.ndarray
    labels: tuple[str, ...] = field(repr=False)

    @property
    def slack(self) -> np.ndarray:
        """values - limits; non-positive entries are satisfied."""
        return self.values - self.limits

    def to_json(self) -> str:
        return json.dumps(
            [{"row": lab, "value": float(v), "limit": float(l)} for lab, v, l in zip(self.labels, self.values, self.limits)]
        )


@dataclass(frozen=True)
class LineFlows:
    P_ft: np.ndarray
    Q_ft: np.ndarray
    P_tf: np.ndarray
    Q_tf: np.ndarray

    @property
    def f_ft(self) -> np.ndarray:
        return np.hypot(self.P_ft, self.Q_ft)

    @property
    def f_tf(self) -> np.ndarray:
        return np.hypot(self.P_tf, self.Q_tf)


class Grid:
    """A parsed case with its admittance data and variable index, built once."""

    def __init__(self, case: NetworkCase):
        self.case = case
        self.Y = build_admittance(case)
        self.Ycplx = self.Y.Y
        self.branch = branch_admittances(case)
        self.index = partition_variables(case)

    @cached_property
    def layout(self) -> ConstraintLayout:
        return _build_layout(self.case, self.index)

    @cached_property
    def gen_records(self):
        return [self.case.generators[k] for k in self.index.gen_order]

    def nominal_loads(self) -> LoadVector:
        return LoadVector(*self.case.nominal_loads())

    def x_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.index.x_lower, self.index.x_upper


def _build_layout(case: NetworkCase, index: VariableIndex) -> ConstraintLayout:
    gens = [case.generators[k] for k in index.gen_order]
    ids = [b.id for b in case.buses]
    blocks = []  # (name, base offset, uppers, lowers, tags)
    off = 0
    ng = index.n_gen
    blocks.append(("qg", off, [g.q_max for g in gens[1:]], [g.q_min for g in gens[1:]], [ids[b] for b in index.gen_buses[1:]]))
    off += ng - 1
    blocks.append(("pg_slack", off, [gens[0].p_max], [gens[0].p_min], [ids[index.slack]]))
    off += 1
    blocks.append(("qg_slack", off, [gens[0].q_max], [gens[0].q_min], [ids[index.slack]]))
    off += 1
    blocks.append(("v", off, [case.buses[b].v_max for b in index.load_buses], [case.buses[b].v_min for b in index.load_buses],
                   [ids[b] for b in index.load_buses]))
    off += len(index.load_buses)
    rates2 = [br.rate**2 for br in case.branches]
    tags = [f"{br.from_bus}-{br.to_bus}" for br in case.branches]
    blocks.append(("flow_ft", off, rates2, None, tags))
    off += len(case.branches)
    blocks.append(("flow_tf", off, rates2, None, tags))

    base_index, sign, limit, labels = [], [], [], []
    for name, start, upper, lower, tag in blocks:
        for k, (lim, t) in enumerate(zip(upper, tag)):
            if np.isfinite(lim):
                base_index.append(start + k)
                sign.append(1.0)
                limit.append(lim)
                labels.append(f"{name}_max@{t}")
        if lower is None:
            continue
        for k, (lim, t) in enumerate(zip(lower, tag)):
            if np.isfinite(lim):
                base_index.append(start + k)
                sign.append(-1.0)
                limit.append(-lim)
                labels.append(f"{name}_min@{t}")
    return ConstraintLayout(np.array(base_index, dtype=int), np.array(sign), np.array(limit), tuple(labels))


# --------------------------------------------------------------------------
# power flow equations

def injections(state: VoltageState, Y: AdmittanceMatrix | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Net active and reactive injections at every bus."""
    Yc = Y.Y if isinstance(Y, AdmittanceMatrix) else Y
    V = state.phasor
    S = V * np.conj(Yc @ V)
    return S.real, S.imag


def _flows_complex(V: np.ndarray, br: BranchAdmittances):
    Vf, Vt = V[br.f], V[br.t]
    If = br.yff * Vf + br.yft * Vt
    It = br.ytf * Vf + br.ytt * Vt
    return Vf * np.conj(If), Vt * np.conj(It), If, It


def line_flows(state: VoltageState, grid: Grid | NetworkCase) -> LineFlows:
    br = grid.branch if isinstance(grid, Grid) else branch_admittances(grid)
    Sf, St, _, _ = _flows_complex(state.phasor, br)
    return LineFlows(Sf.real, Sf.imag, St.real, St.imag)


def _dS_dV(V: np.ndarray, Y: np.ndarray):
    """Complex bus-injection derivatives w.r.t. magnitudes and angles."""
    Ibus = Y @ V
    Vnorm = V / np.abs(V)
    dS_dVm = V[:, None] * np.conj(Y * Vnorm[None, :]) + np.diag(np.conj(Ibus) * Vnorm)
    dS_dVa = 1j * V[:, None] * np.conj(np.diag(Ibus) - Y * V[None, :])
    return dS_dVm, dS_dVa


def _mismatch(u: np.ndarray, grid: Grid, x: np.ndarray, loads: LoadVector) -> np.ndarray:
    idx = grid.index
    state = VoltageState.from_u(u, idx)
    p, q = injections(state, grid.Ycplx)
    gb, lb = idx.gen_buses, idx.load_buses
    return np.concatenate([
        state.v[gb] - x[: idx.n_gen],
        p[gb[1:]] - (x[idx.n_gen :] - loads.p_d[gb[1:]]),
        p[lb] + loads.p_d[lb],
        q[lb] + loads.q_d[lb],
    ])


def pf_jacobian(state: VoltageState, grid: Grid) -> np.ndarray:
    """Jacobian of ``[g(u); l(u)]`` w.r.t. u, rows ``[v_gen; p_gen(non-slack); p_load; q_load]``."""
    idx = grid.index
    n = idx.n_bus
    dS_dVm, dS_dVa = _dS_dV(state.phasor, grid.Ycplx)
    dS_du = np.hstack([dS_dVm, dS_dVa[:, idx.angle_buses]])
    gb, lb = idx.gen_buses, idx.load_buses
    v_rows = np.zeros((idx.n_gen, idx.dim_u))
    v_rows[np.arange(idx.n_gen), gb] = 1.0
    return np.vstack([v_rows, dS_du[gb[1:]].real, dS_du[lb].real, dS_du[lb].imag])


def solve_pf(grid: Grid, x, loads: LoadVector, warm: VoltageState | None = None,
             tol: float = TOL_PF, max_iter: int = MAX_ITER) -> VoltageState:
    """Newton-Raphson power flow for dispatch ``x`` and demand ``loads``."""
    idx = grid.index
    x = x.as_array() if isinstance(x, Dispatch) else np.asarray(x, dtype=float)
    start = warm if warm is not None else VoltageState.flat(idx.n_bus)
    u = start.to_u(idx)
    F = _mismatch(u, grid, x, loads)
    res = np.max(np.abs(F))
    for it in range(max_iter + 1):
        if not np.isfinite(res):
            break
        if res < tol:
            return VoltageState.from_u(u, idx)
        if it == max_iter:
            break
        J = pf_jacobian(VoltageState.from_u(u, idx), grid)
        try:
            du = np.linalg.solve(J, F)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError("singular power-flow Jacobian", res, it) from exc
        u = u - du
        if np.any(u[: idx.n_bus] <= 0):
            res = np.inf
            break
        F = _mismatch(u, grid, x, loads)
        res = np.max(np.abs(F))
    raise PowerFlowDivergence(f"power flow did not converge (residual {res:.3e})", res, max_iter)


def pf_residual(state: VoltageState, grid: Grid, x, loads: LoadVector) -> float:
    x = x.as_array() if isinstance(x, Dispatch) else np.asarray(x, dtype=float)
    return float(np.max(np.abs(_mismatch(state.to_u(grid.index), grid, x, loads))))


# --------------------------------------------------------------------------
# constraints

def _base_quantities(state: VoltageState, grid: Grid, loads: LoadVector) -> np.ndarray:
    idx = grid.index
    p, q = injections(state, grid.Ycplx)
    gb, s = idx.gen_buses, idx.slack
    Sf, St, _, _ = _flows_complex(state.phasor, grid.branch)
    return np.concatenate([
        q[gb[1:]] + loads.q_d[gb[1:]],
        [p[s] + loads.p_d[s], q[s] + loads.q_d[s]],
        state.v[idx.load_buses],
        np.abs(Sf) ** 2,
        np.abs(St) ** 2,
    ])


def _base_jacobian(state: VoltageState, grid: Grid) -> np.ndarray:
    idx = grid.index
    n, E = idx.n_bus, len(grid.branch.f)
    V = state.phasor
    ang = idx.angle_buses
    dS_dVm, dS_dVa = _dS_dV(V, grid.Ycplx)
    dS_du = np.hstack([dS_dVm, dS_dVa[:, ang]])
    gb, s = idx.gen_buses, idx.slack

    v_rows = np.zeros((len(idx.load_buses), idx.dim_u))
    v_rows[np.arange(len(idx.load_buses)), idx.load_buses] = 1.0

    br = grid.branch
    Sf, St, If, It = _flows_complex(V, br)
    Vn = V / np.abs(V)
    rows = np.arange(E)
    flow_blocks = []
    for S_end, I_end, near, far, y_near, y_far in (
        (Sf, If, br.f, br.t, br.yff, br.yft),
        (St, It, br.t, br.f, br.ytt, br.ytf),
    ):
        Vnear, Vfar = V[near], V[far]
        dVm = np.zeros((E, n), dtype=complex)
        dVa = np.zeros((E, n), dtype=complex)
        np.add.at(dVm, (rows, near), Vn[near] * np.conj(I_end) + Vnear * np.conj(y_near * Vn[near]))
        np.add.at(dVm, (rows, far), Vnear * np.conj(y_far * Vn[far]))
        np.add.at(dVa, (rows, near), 1j * Vnear * np.conj(I_end) + Vnear * np.conj(1j * y_near * Vnear))
        np.add.at(dVa, (rows, far), Vnear * np.conj(1j * y_far * Vfar))
        dSu = np.hstack([dVm, dVa[:, ang]])
        flow_blocks.append(2.0 * (S_end.real[:, None] * dSu.real + S_end.imag[:, None] * dSu.imag))

    return np.vstack([
        dS_du[gb[1:]].imag,
        dS_du[[s]].real,
        dS_du[[s]].imag,
        v_rows,
        *flow_blocks,
    ])


def constraint_values(state: VoltageState, grid: Grid, x, loads: LoadVector) -> ConstraintVector:
    """Constraint functions ``y`` and limits in canonical row order.

    ``x`` is accepted for interface symmetry; the rows depend on it only
    through ``state``.
    """
    lay = grid.layout
    base = _base_quantities(state, grid, loads)
    return ConstraintVector(lay.sign * base[lay.base_index], lay.limit.copy(), lay.labels)


def constraint_jacobian(state: VoltageState, grid: Grid) -> np.ndarray:
    lay = grid.layout
    return lay.sign[:, None] * _base_jacobian(state, grid)[lay.base_index]


def slack_pg_gradient(state: VoltageState, grid: Grid) -> np.ndarray:
    """Gradient of the slack active generation w.r.t. u."""
    idx = grid.index
    dS_dVm, dS_dVa = _dS_dV(state.phasor, grid.Ycplx)
    s = idx.slack
    return np.concatenate([dS_dVm[s].real, dS_dVa[s, idx.angle_buses].real])


# --------------------------------------------------------------------------
# sensitivities

class Linearization:
    """LU factorisation of the power-flow Jacobian at one operating point."""

    def __init__(self, state: VoltageState, grid: Grid):
        self.state = state
        self.grid = grid
        J = pf_jacobian(state, grid)
        lu, piv = scipy.linalg.lu_factor(J, check_finite=False)
        diag = np.abs(np.diag(lu))
        if not np.all(np.isfinite(lu)) or diag.min() <= 1e-13 * max(diag.max(), 1.0):
            raise SingularJacobianError("singular power-flow Jacobian")
        self._lu = (lu, piv)

    def sensitivity(self) -> np.ndarray:
        """du/dx, shape (2N-1, dim x)."""
        idx = self.grid.index
        rhs = np.zeros((idx.dim_u, idx.dim_x))
        rhs[np.arange(idx.dim_x), np.arange(idx.dim_x)] = 1.0
        return scipy.linalg.lu_solve(self._lu, rhs, check_finite=False)

    def pullback(self, grad_u: np.ndarray) -> np.ndarray:
        """``(du/dx)^T grad_u`` via one transposed solve."""
        a = scipy.linalg.lu_solve(self._lu, grad_u, trans=1, check_finite=False)
        return a[: self.grid.index.dim_x]


def sensitivity(state: VoltageState, grid: Grid) -> np.ndarray:
    return Linearization(state, grid).sensitivity()


def generation_cost(state: VoltageState, grid: Grid, x, loads: LoadVector) -> tuple[float, np.ndarray]:
    """Total cost in $/h and per-generator costs (dispatch order, slack first)."""
    idx = grid.index
    x = x.as_array() if isinstance(x, Dispatch) else np.asarray(x, dtype=float)
    p, _ = injections(state, grid.Ycplx)
    p_slack = p[idx.slack] + loads.p_d[idx.slack]
    pg = np.concatenate([[p_slack], x[idx.n_gen :]])
    base = grid.case.base_mva
    per_gen = np.array([g.cost(pk, base) for g, pk in zip(grid.gen_records, pg)], dtype=float)
    return float(per_gen.sum()), per_gen


def cost_gradient(state: VoltageState, grid: Grid, x, loads: LoadVector):
    """Split cost gradient: direct term in x and slack term in u.

    Returns ``(d_x, d_u)`` with total derivative ``d_x + (du/dx)^T d_u``.
    """
    idx = grid.index
    x = x.as_array() if isinstance(x, Dispatch) else np.asarray(x, dtype=float)
    p, _ = injections(state, grid.Ycplx)
    base = grid.case.base_mva
    gens = grid.gen_records
    d_x = np.zeros(idx.dim_x)
    d_x[idx.n_gen :] = [g.marginal_cost(pk, base) for g, pk in zip(gens[1:], x[idx.n_gen :])]
    p_slack = p[idx.slack] + loads.p_d[idx.slack]
    d_u = gens[0].marginal_cost(p_slack, base) * slack_pg_gradient(state, grid)
    return d_x, d_u
