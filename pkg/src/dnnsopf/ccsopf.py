"""Chance-constrained stochastic OPF by stochastic primal-dual training.

Each chance constraint ``Pr[y_i <= y_max_i] >= 1 - alpha`` is relaxed with a
logistic surrogate of the satisfaction indicator and dualised. One load
sample per iteration drives an Adam step on the policy weights and a
projected ascent step on the multipliers.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .acpf import (
    ConstraintVector,
    Grid,
    Linearization,
    LoadVector,
    PowerFlowDivergence,
    VoltageState,
    constraint_jacobian,
    constraint_values,
    cost_gradient,
    generation_cost,
    solve_pf,
)
from .policy import FULL, AGC, PolicyParams, forward_array, init_policy, policy_vjp, raw_features

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1
INPUT_MODES = ("raw", "center", "standardize")


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.05
    eps: float = 0.01
    epochs: int = 5
    mu0: float = 1e-3
    nu0: float = 3e-4
    radius: float = 0.1
    n_samples: int = 1000
    k_train: int = 800
    k_test: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8
    pf_tol: float = 1e-8
    pf_max_iter: int = 20
    mode: str = FULL
    inputs: str = "raw"  # raw | center | standardize
    cost_scale: float | None = None  # Lagrangian cost multiplier; None -> 1/cost_reference
    abort_fraction: float = 0.2

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 <= self.radius < 1:
            raise ValueError("radius must lie in [0, 1)")
        if self.eps <= 0 or self.mu0 < 0 or self.nu0 < 0 or self.epochs < 0:
            raise ValueError("eps must be positive; epochs and step sizes non-negative")
        if self.k_train + self.k_test > self.n_samples:
            raise ValueError("k_train + k_test exceeds n_samples")
        if self.mode not in (FULL, AGC):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.inputs not in INPUT_MODES:
            raise ValueError(f"inputs must be one of {INPUT_MODES}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainState:
    params: PolicyParams
    lam: np.ndarray
    m: np.ndarray
    v: np.ndarray
    k: int = 0
    epoch: int = 0
    skipped: int = 0
    warm: VoltageState | None = None

    @classmethod
    def initial(cls, params: PolicyParams, n_constraints: int) -> "TrainState":
        return cls(params, np.zeros(n_constraints), np.zeros(params.n_weights), np.zeros(params.n_weights))


@dataclass
class StepRecord:
    iteration: int
    epoch: int
    cost: float
    satisfaction: np.ndarray
    violated: np.ndarray
    lam: np.ndarray
    skipped: bool = False


@dataclass
class Metrics:
    policy: str
    labels: list[str]
    violation_freq: np.ndarray
    costs: np.ndarray
    eval_time: float
    pf_failures: int
    n_samples: int

    @property
    def max_violation_pct(self) -> float:
        return 100.0 * float(self.violation_freq.max()) if self.violation_freq.size else 0.0

    @property
    def avg_cost(self) -> float:
        ok = self.costs[np.isfinite(self.costs)]
        return float(ok.mean()) if ok.size else float("nan")

    def to_dict(self) -> dict:
        return {
            "schema_version": METRICS_SCHEMA,
            "policy": self.policy,
            "n_samples": self.n_samples,
            "max_violation_pct": self.max_violation_pct,
            "avg_cost": self.avg_cost,
            "eval_time": self.eval_time,
            "pf_failures": self.pf_failures,
            "worst_constraint": self.labels[int(np.argmax(self.violation_freq))] if self.labels else None,
            "violation_freq": dict(zip(self.labels, self.violation_freq.tolist())),
            "costs": [c if np.isfinite(c) else None for c in self.costs.tolist()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        if d.get("schema_version") != METRICS_SCHEMA:
            raise ValueError(f"metrics schema {d.get('schema_version')!r} != {METRICS_SCHEMA}")
        labels = list(d["violation_freq"])
        return cls(
            policy=d["policy"],
            labels=labels,
            violation_freq=np.array([d["violation_freq"][k] for k in labels]),
            costs=np.array([np.nan if c is None else c for c in d["costs"]], dtype=float),
            eval_time=d["eval_time"],
            pf_failures=d["pf_failures"],
            n_samples=d["n_samples"],
        )


# --------------------------------------------------------------------------
# surrogate

def logistic(x, eps: float):
    """Smooth satisfaction indicator ``exp(-x/eps) / (1 + exp(-x/eps))``."""
    z = np.asarray(x, dtype=float) / eps
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
    return out if out.ndim else float(out)


def logistic_grad(x, eps: float):
    s = logistic(x, eps)
    return -s * (1.0 - s) / eps


# --------------------------------------------------------------------------
# sampling

def sample_loads(case_or_grid, radius: float, k: int, seed: int) -> list[LoadVector]:
    """Scale each bus demand by an independent U[1-R, 1+R] factor (fixed power factor)."""
    grid = case_or_grid if isinstance(case_or_grid, Grid) else None
    p0, q0 = (grid.case if grid else case_or_grid).nominal_loads()
    rng = np.random.default_rng(seed)
    mult = rng.uniform(1.0 - radius, 1.0 + radius, size=(k, p0.size))
    return [LoadVector(m * p0, m * q0) for m in mult]


def split_samples(samples: list, k_train: int, k_test: int, seed: int):
    """Shuffle indices once and cut into train/test lists."""
    order = np.random.default_rng([seed, 1]).permutation(len(samples))
    train = [samples[i] for i in order[:k_train]]
    test = [samples[i] for i in order[k_train : k_train + k_test]]
    return train, test


def make_split(grid: Grid, cfg: TrainConfig):
    samples = sample_loads(grid, cfg.radius, cfg.n_samples, cfg.seed)
    return split_samples(samples, cfg.k_train, cfg.k_test, cfg.seed)


# --------------------------------------------------------------------------
# gradients

def solve_with_fallback(grid: Grid, x, loads: LoadVector, warm: VoltageState | None, tol=1e-8, max_iter=20):
    if warm is not None:
        try:
            return solve_pf(grid, x, loads, warm=warm, tol=tol, max_iter=max_iter)
        except PowerFlowDivergence:
            pass
    return solve_pf(grid, x, loads, tol=tol, max_iter=max_iter)


@dataclass
class LagrangianTerms:
    cost: float
    satisfaction: np.ndarray
    grad_w: np.ndarray
    state: VoltageState = field(repr=False)
    constraints: ConstraintVector = field(repr=False)


def lagrangian_terms(grid: Grid, params: PolicyParams, lam: np.ndarray, loads: LoadVector,
                     eps: float, warm: VoltageState | None = None, pf_tol: float = 1e-8,
                     pf_max_iter: int = 20, cost_scale: float = 1.0) -> LagrangianTerms:
    """Sample cost, smoothed satisfaction and the gradient of

        cost_scale * cost(w) - lam . satisfaction(w)

    with respect to the policy weights, chained through the power flow.
    ``cost`` itself is reported unscaled in $/h.
    """
    x = forward_array(params, loads)
    state = solve_with_fallback(grid, x, loads, warm, pf_tol, pf_max_iter)
    cv = constraint_values(state, grid, x, loads)
    gap = cv.slack
    sat = logistic(gap, eps)
    cost, _ = generation_cost(state, grid, x, loads)

    d_x, d_u = cost_gradient(state, grid, x, loads)
    d_x, d_u = cost_scale * d_x, cost_scale * d_u
    weight = lam * logistic_grad(gap, eps)
    active = np.abs(weight) > 0
    if np.any(active):
        d_u = d_u - constraint_jacobian(state, grid)[active].T @ weight[active]
    lin = Linearization(state, grid)
    d_x = d_x + lin.pullback(d_u)
    grad_w = policy_vjp(params, loads, d_x)
    return LagrangianTerms(cost, sat, grad_w, state, cv)


# --------------------------------------------------------------------------
# primal-dual iterations

def cost_reference(grid: Grid) -> float:
    """Rough nominal generation cost, ``total demand * mean marginal cost``."""
    p0 = grid.nominal_loads().p_d.sum() * grid.case.base_mva
    mc = np.mean([abs(g.c1) + abs(g.c2) * p0 for g in grid.gen_records])
    return max(1.0, p0 * mc)


def lagrangian_cost_scale(grid: Grid, cfg: TrainConfig) -> float:
    """Cost multiplier in the Lagrangian.

    The default divides by :func:`cost_reference`, which makes the cost term
    dimensionless like the surrogate terms so the dual step sizes do not
    depend on the currency scale of a case.
    """
    return 1.0 / cost_reference(grid) if cfg.cost_scale is None else cfg.cost_scale


def primal_step_size(cfg: TrainConfig, epoch: int) -> float:
    return cfg.mu0 * 0.5**epoch


def dual_step_size(cfg: TrainConfig, k: int) -> float:
    return cfg.nu0 / np.sqrt(k)


def spd_step(state: TrainState, grid: Grid, loads: LoadVector, cfg: TrainConfig) -> tuple[TrainState, StepRecord]:
    """One stochastic primal-dual update on sample ``loads``."""
    try:
        terms = lagrangian_terms(grid, state.params, state.lam, loads, cfg.eps, state.warm,
                                 cfg.pf_tol, cfg.pf_max_iter, lagrangian_cost_scale(grid, cfg))
    except PowerFlowDivergence:
        new = dataclasses.replace(state, skipped=state.skipped + 1)
        rec = StepRecord(state.k, state.epoch, float("nan"), np.full(state.lam.size, np.nan),
                         np.ones(state.lam.size, dtype=bool), state.lam, skipped=True)
        return new, rec

    k = state.k + 1
    g = terms.grad_w
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1**k)
    v_hat = v / (1.0 - cfg.beta2**k)
    mu = primal_step_size(cfg, state.epoch)
    theta = state.params.theta - mu * m_hat / (np.sqrt(v_hat) + cfg.delta)
    theta[state.params.frozen] = 0.0

    nu = dual_step_size(cfg, k)
    lam = np.maximum(state.lam + nu * ((1.0 - cfg.alpha) - terms.satisfaction), 0.0)

    new = dataclasses.replace(state, params=state.params.with_theta(theta), lam=lam, m=m, v=v, k=k,
                              warm=terms.state)
    rec = StepRecord(k, state.epoch, terms.cost, terms.satisfaction, terms.constraints.slack > 0, lam)
    return new, rec


@dataclass
class History:
    iteration: list = field(default_factory=list)
    epoch: list = field(default_factory=list)
    cost: list = field(default_factory=list)
    lambda_norm: list = field(default_factory=list)
    lambda_min: list = field(default_factory=list)
    epoch_summary: list = field(default_factory=list)
    lam_trace: list | None = None
    sat_trace: list | None = None

    def __len__(self):
        return len(self.iteration)

    def to_csv(self) -> str:
        viol = {s["epoch"]: s["max_violation_pct"] for s in self.epoch_summary}
        lines = ["iteration,epoch,cost,lambda_norm,lambda_min,epoch_max_violation_pct"]
        for i, e, c, ln, lm in zip(self.iteration, self.epoch, self.cost, self.lambda_norm, self.lambda_min):
            lines.append(f"{i},{e},{c!r},{ln!r},{lm!r},{viol.get(e, float('nan'))!r}")
        return "\n".join(lines) + "\n"


def policy_for(grid: Grid, cfg: TrainConfig) -> PolicyParams:
    """Initialised policy with the configured input preprocessing.

    ``raw`` feeds the load vector as is. ``center`` subtracts the nominal
    loads, so the untrained network starts near the middle of the box
    instead of with saturated outputs. ``standardize`` also divides by the
    sampling half-width.
    """
    offset = scale = None
    if cfg.inputs != "raw":
        offset = raw_features(cfg.mode, grid.nominal_loads().as_array())
    if cfg.inputs == "standardize":
        if cfg.mode == AGC:
            # total demand of independent uniform factors has std R*|p|/sqrt(3)
            p0 = grid.nominal_loads().p_d
            scale = np.array([max(cfg.radius, 1e-3) * np.sqrt(np.sum(p0**2) / 3.0)])
        else:
            scale = max(cfg.radius, 1e-3) * np.abs(offset)
    return init_policy(grid.index, cfg.mode, cfg.seed, offset, scale)


def train(grid: Grid, cfg: TrainConfig, train_samples: list[LoadVector] | None = None,
          params: PolicyParams | None = None, trace: bool = False) -> tuple[PolicyParams, History]:
    """Run ``cfg.epochs`` passes of single-sample SPD over the training set."""
    if train_samples is None:
        train_samples, _ = make_split(grid, cfg)
    if params is None:
        params = policy_for(grid, cfg)
    state = TrainState.initial(params, grid.layout.size)
    hist = History(lam_trace=[] if trace else None, sat_trace=[] if trace else None)
    rng = np.random.default_rng([cfg.seed, 2])
    n = len(train_samples)
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        skipped_before = state.skipped
        violated = np.zeros(grid.layout.size)
        costs = []
        for i in rng.permutation(n):
            state, rec = spd_step(state, grid, train_samples[i], cfg)
            violated += rec.violated
            if rec.skipped:
                continue
            costs.append(rec.cost)
            hist.iteration.append(rec.iteration)
            hist.epoch.append(epoch)
            hist.cost.append(rec.cost)
            hist.lambda_norm.append(float(np.linalg.norm(rec.lam)))
            hist.lambda_min.append(float(rec.lam.min()) if rec.lam.size else 0.0)
            if trace:
                hist.lam_trace.append(rec.lam.copy())
                hist.sat_trace.append(rec.satisfaction.copy())
        failed = state.skipped - skipped_before
        summary = {
            "epoch": epoch,
            "avg_cost": float(np.mean(costs)) if costs else float("nan"),
            "lambda_norm": float(np.linalg.norm(state.lam)),
            "max_violation_pct": 100.0 * float(violated.max() / n) if violated.size else 0.0,
            "pf_failures": failed,
            "primal_step": primal_step_size(cfg, epoch),
        }
        hist.epoch_summary.append(summary)
        log.info("epoch %d: cost %.2f  max-viol %.1f%%  |lam| %.3g  pf-fail %d", epoch, summary["avg_cost"],
                 summary["max_violation_pct"], summary["lambda_norm"], failed)
        if failed > cfg.abort_fraction * n:
            raise TrainingAborted(f"{failed}/{n} power-flow failures in epoch {epoch}")
    return state.params, hist


# --------------------------------------------------------------------------
# evaluation

def evaluate_dispatches(grid: Grid, samples: list[LoadVector], dispatch_fn, policy: str = "dnn",
                        tol: float = 0.0) -> Metrics:
    """Hard-indicator violation frequencies and costs of ``dispatch_fn`` over ``samples``.

    ``dispatch_fn(loads)`` returns a dispatch vector, or ``(x, state)`` when
    it already solved the power flow. A row counts as violated when
    ``y > y_max + tol``.
    """
    M = grid.layout.size
    violated = np.zeros(M)
    costs = np.full(len(samples), np.nan)
    failures = 0
    warm = None
    t0 = time.perf_counter()
    for j, loads in enumerate(samples):
        try:
            out = dispatch_fn(loads)
            if isinstance(out, tuple):
                x, state = out
            else:
                x = out
                state = solve_with_fallback(grid, x, loads, warm)
        except PowerFlowDivergence:
            failures += 1
            violated += 1
            continue
        warm = state
        cv = constraint_values(state, grid, x, loads)
        violated += cv.values > cv.limits + tol
        costs[j] = generation_cost(state, grid, x, loads)[0]
    elapsed = time.perf_counter() - t0
    n = max(len(samples), 1)
    return Metrics(policy, list(grid.layout.labels), violated / n, costs, elapsed, failures, len(samples))


def evaluate(params: PolicyParams, grid: Grid, samples: list[LoadVector]) -> Metrics:
    return evaluate_dispatches(grid, samples, lambda loads: forward_array(params, loads),
                               policy=params.mode)


def save_metrics(metrics: Metrics, path) -> None:
    with open(path, "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=1)


def load_metrics(path) -> Metrics:
    with open(path) as fh:
        return Metrics.from_dict(json.load(fh))
