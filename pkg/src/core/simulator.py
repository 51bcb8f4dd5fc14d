#!/usr/bin/env python3
"""
src/core/simulator.py - Finite-N population, worst-case costs and experiments

- simulate_population: Euler-Maruyama of the coupled N-agent system
- evaluate_cost:       realized cost of one agent along a run
- worst_case_f:        exact sup over piecewise-constant disturbances of the
                       expected cost of one agent (mean by RK4, fluctuation
                       by a Lyapunov ODE, quadratic in f by linearity)
- convergence_experiment / nash_gap_experiment / random_initial_mode
- fit_loglog:          log-log rate fit with a t-based confidence interval

Agents apply their ControlLaw either on their reference state (default) or
on their realized state. Noise streams are keyed by (seed, replication,
agent) so results do not depend on thread scheduling.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property, lru_cache
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.stats

from .model import InitMode, InitSpec, ModelParams
from .numkit import (
    ESCAPE_THRESHOLD, TimeGrid, Trajectory, WhiteNoisePath, counter_stream, euler_maruyama,
    ode_rk4, symmetrize, trapezoid, zoh_discretize,
)
from .strategy import (
    ControlLaw, FeedbackStrategy, GridMismatch, StrategyFamily, solve_offset,
)
from ..utils.log_manager import get_logger
from ..utils.performance_monitor import performance_monitor

logger = get_logger("simulator")

# stream keys beyond any agent index
INIT_STREAM = 2 ** 32
AFFINE_STREAM = 2 ** 32 + 1

STATIONARITY_TOLERANCE = 1e-8

# cosine modes per control input, and the finite-difference step on each
OFFSET_MODES = 6
OFFSET_STEP = 0.5


class SimulationError(Exception):
    """Base error for population simulation and experiments"""


class DegenerateFit(SimulationError):
    """Too few usable points for a log-log rate fit"""


class Realization(str, Enum):
    REFERENCE = "reference"
    STATE = "state"


# ========== Population of control laws ==========

@dataclass(frozen=True, eq=False)
class PopulationLaws:
    """Control law of every agent; agents with the same initial mean share one law"""
    laws: Tuple[ControlLaw, ...]
    strategies: Tuple[FeedbackStrategy, ...]
    which: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    override: Optional[Tuple[int, ControlLaw]] = None

    @property
    def N(self) -> int:
        return len(self.which)

    @property
    def grid(self) -> TimeGrid:
        return self.laws[0].grid

    def strategy_of(self, i: int) -> FeedbackStrategy:
        return self.strategies[self.which[i]]

    def law_of(self, i: int) -> ControlLaw:
        if self.override is not None and self.override[0] == i:
            return self.override[1]
        return self.laws[self.which[i]]

    def with_override(self, agent: int, law: ControlLaw) -> "PopulationLaws":
        if not 0 <= agent < self.N:
            raise SimulationError(f"agent {agent} outside population of {self.N}")
        if law.grid != self.grid:
            raise GridMismatch("deviation law lives on a different grid")
        return replace(self, override=(agent, law))

    def stacked(self):
        """Per-agent law arrays: gain, offset, reference mean, closed loop, scale"""
        laws = list(self.laws)
        which = np.array(self.which)
        if self.override is not None:
            laws.append(self.override[1])
            which[self.override[0]] = len(laws) - 1
        gain = np.stack([law.gain for law in laws])[which]
        offset = np.stack([law.offset for law in laws])[which]
        ref = np.stack([law.reference_mean.values for law in laws])[which]
        closed = np.stack([law.closed_loop for law in laws])[which]
        scale = np.array([law.scale for law in laws])[which]
        return gain, offset, ref, closed, scale


StrategyLike = Union[FeedbackStrategy, StrategyFamily, PopulationLaws]


def build_population(p: ModelParams, strategy: StrategyLike, init: InitSpec, N: int) -> PopulationLaws:
    """Assign every agent the equilibrium law for its initial mean"""
    if N < 1:
        raise SimulationError(f"population needs N >= 1, got {N}")
    if isinstance(strategy, PopulationLaws):
        if strategy.N != N:
            raise SimulationError(f"population has {strategy.N} agents, N={N} requested")
        return strategy
    means = init.means_for(N, p.m0)
    covs = init.covariances_for(N, p.n)
    if isinstance(strategy, FeedbackStrategy):
        return PopulationLaws(laws=(strategy.control_law(p),), strategies=(strategy,),
                              which=np.zeros(N, dtype=int), means=means, covariances=covs)

    laws: List[ControlLaw] = []
    strategies: List[FeedbackStrategy] = []
    index: Dict[Tuple[float, ...], int] = {}
    which = np.empty(N, dtype=int)
    for j, mu in enumerate(means):
        key = tuple(mu.tolist())
        if key not in index:
            index[key] = len(laws)
            fs = strategy.for_initial_mean(mu)
            strategies.append(fs)
            laws.append(fs.control_law(p))
        which[j] = index[key]
    return PopulationLaws(laws=tuple(laws), strategies=tuple(strategies), which=which,
                          means=means, covariances=covs)


def _base_strategy(strategy: StrategyLike) -> FeedbackStrategy:
    if isinstance(strategy, StrategyFamily):
        return strategy.base
    if isinstance(strategy, PopulationLaws):
        return strategy.strategies[0]
    return strategy


# ========== Population run ==========

@dataclass(frozen=True, eq=False)
class PopulationRun:
    N: int
    seed: int
    replication: int
    paths: Trajectory
    controls: Trajectory
    reference: Trajectory
    f_used: Trajectory
    x_avg: Trajectory
    u_avg: Trajectory
    realization: str = Realization.REFERENCE.value

    @property
    def grid(self) -> TimeGrid:
        return self.paths.grid

    def agent_path(self, i: int) -> np.ndarray:
        return self.paths.values[:, i]

    def agent_controls(self, i: int) -> np.ndarray:
        return self.controls.values[:, i]

    def columns(self, agents: Optional[Sequence[int]] = None) -> Dict[str, np.ndarray]:
        cols = {"t": self.grid.knots}
        cols.update(self.x_avg.columns("x_avg"))
        cols.update(self.u_avg.columns("u_avg"))
        cols.update(self.f_used.columns("f"))
        shown = range(min(self.N, 8)) if agents is None else agents
        for i in shown:
            cols.update(Trajectory(self.grid, self.agent_path(i)).columns(f"x{i}"))
            cols.update(Trajectory(self.grid, self.agent_controls(i)).columns(f"u{i}"))
        return cols


def _noise(p: ModelParams, grid: TimeGrid, N: int, seed: int, replication: int) -> WhiteNoisePath:
    """One independent stream per agent, stacked to (K, N, n2)"""
    draws = [counter_stream(seed, replication, i).standard_normal((grid.n_steps, p.n2))
             for i in range(N)]
    return WhiteNoisePath(grid, np.stack(draws, axis=1) * np.sqrt(grid.dt))


def simulate_population(p: ModelParams, strategy: StrategyLike, init: InitSpec, f: Trajectory,
                        N: int, seed: int, grid: TimeGrid, replication: int = 0,
                        realization: str = Realization.REFERENCE.value,
                        escape_threshold: float = ESCAPE_THRESHOLD) -> PopulationRun:
    """Euler-Maruyama of dx_i = (A x_i + B u_i + G x^(N) + f) dt + D dW_i"""
    realization = Realization(realization)
    pop = build_population(p, strategy, init, N)
    if f.grid != grid or pop.grid != grid:
        raise GridMismatch("strategy, disturbance and simulation grid must agree")
    n = p.n
    gain, offset, ref, closed, scale = pop.stacked()

    x0 = init.sample(N, p.m0, counter_stream(seed, replication, INIT_STREAM))
    xi0 = x0 - ref[:, 0]
    A, B, G = p.A, p.B, p.G
    f_vals = f.values

    def controls(k: int, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        arg = ref[:, k] + xi if realization == Realization.REFERENCE else x
        return scale[:, None] * (offset[:, k] - np.einsum("nij,nj->ni", gain[:, k], arg))

    def drift(t: float, X: np.ndarray) -> np.ndarray:
        k = grid.knot_index(t)
        x, xi = X[:, :n], X[:, n:]
        u = controls(k, x, xi)
        dx = x @ A.T + u @ B.T + x.mean(axis=0) @ G.T + f_vals[k]
        dxi = np.einsum("nij,nj->ni", closed[:, k], xi)
        return np.concatenate([dx, dxi], axis=1)

    noise = _noise(p, grid, N, seed, replication)
    states = euler_maruyama(drift, np.vstack([p.D, p.D]), noise, np.concatenate([x0, xi0], axis=1),
                            grid, escape_threshold).values
    x, xi = states[..., :n], states[..., n:]
    u = np.stack([controls(k, x[k], xi[k]) for k in range(grid.n_steps + 1)])

    logger.solver_event("population", "simulated", f"N={N} seed={seed} rep={replication}")
    return PopulationRun(
        N=N, seed=seed, replication=replication,
        paths=Trajectory(grid, x), controls=Trajectory(grid, u), reference=Trajectory(grid, xi),
        f_used=f, x_avg=Trajectory(grid, x.mean(axis=1)), u_avg=Trajectory(grid, u.mean(axis=1)),
        realization=realization.value,
    )


# ========== Realized cost ==========

@dataclass(frozen=True)
class CostBreakdown:
    tracking: float
    effort: float
    disturbance_credit: float
    terminal: float
    total: float

    @classmethod
    def from_parts(cls, tracking: float, effort: float, disturbance_credit: float,
                   terminal: float) -> "CostBreakdown":
        return cls(tracking, effort, disturbance_credit, terminal,
                   tracking + effort + disturbance_credit + terminal)

    def to_dict(self) -> Dict[str, float]:
        return {"tracking": self.tracking, "effort": self.effort,
                "disturbance_credit": self.disturbance_credit,
                "terminal": self.terminal, "total": self.total}


def evaluate_cost(run: PopulationRun, p: ModelParams, agent: int,
                  f: Optional[Trajectory] = None) -> CostBreakdown:
    """Trapezoid quadrature of agent's running cost plus terminal term"""
    if not 0 <= agent < run.N:
        raise SimulationError(f"agent {agent} outside population of {run.N}")
    f = run.f_used if f is None else f
    if f.grid != run.grid:
        raise GridMismatch("disturbance and run live on different grids")
    grid = run.grid
    x = run.agent_path(agent)
    u = run.agent_controls(agent)
    e = x - run.x_avg.values @ p.Gamma.T - p.eta
    return CostBreakdown.from_parts(
        tracking=float(trapezoid(np.einsum("ki,ij,kj->k", e, p.Q, e), grid)),
        effort=float(trapezoid(np.einsum("ki,ij,kj->k", u, p.R, u), grid)),
        disturbance_credit=-float(trapezoid(np.einsum("ki,ki->k", f.values, f.values), grid)) / p.gamma,
        terminal=float(x[-1] @ p.H @ x[-1]),
    )


# ========== Worst-case disturbance ==========

class DisturbanceResponse:
    """Linear map from piecewise-constant f (K cells) to the common state shift z' = Ah z + f

    Under fixed control processes every agent's state and the average move by
    the same z, so the expected cost is c + 2 b.F + F^T Hs F with Hs shared by
    every agent and every deviation on one grid.
    """

    def __init__(self, p: ModelParams, grid: TimeGrid):
        self.p = p
        self.grid = grid
        K, n = grid.n_steps, p.n
        E, F = zoh_discretize(p.A_hat, p.I, grid.dt)
        lam = np.zeros((K + 1, n, K * n))
        for k in range(K):
            lam[k + 1] = E @ lam[k]
            lam[k + 1][:, k * n:(k + 1) * n] += F
        self.operator = lam

        w = grid.trapezoid_weights
        weighted = np.einsum("ij,kjb->kib", p.Qhat, lam) * w[:, None, None]
        hess = lam.reshape(-1, K * n).T @ weighted.reshape(-1, K * n)
        hess += lam[-1].T @ p.H @ lam[-1]
        hess -= (grid.dt / p.gamma) * np.eye(K * n)
        self.hessian = symmetrize(hess)

        try:
            self._factor = scipy.linalg.cho_factor(-self.hessian)
        except np.linalg.LinAlgError:
            self._factor = None

    @property
    def definite(self) -> bool:
        return self._factor is not None

    @cached_property
    def max_eigenvalue(self) -> float:
        d = self.hessian.shape[0]
        return float(scipy.linalg.eigvalsh(self.hessian, subset_by_index=[d - 1, d - 1])[0])

    def linear_term(self, e_mean: np.ndarray, xT_mean: np.ndarray) -> np.ndarray:
        """b with sum_k w_k Lam_k^T (I-Gamma)^T Q e_k + Lam_K^T H x(T)"""
        p = self.p
        v = np.einsum("ij,kj->ki", (p.I - p.Gamma).T @ p.Q, e_mean) * self.grid.trapezoid_weights[:, None]
        return np.einsum("kia,ki->a", self.operator, v) + self.operator[-1].T @ (p.H @ xT_mean)

    def maximize(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._factor, b)

    def response(self, cells: np.ndarray) -> np.ndarray:
        return self.operator @ np.ravel(cells)


@lru_cache(maxsize=8)
def disturbance_response(p: ModelParams, grid: TimeGrid) -> DisturbanceResponse:
    with performance_monitor.track("disturbance response"):
        return DisturbanceResponse(p, grid)


@dataclass(frozen=True, eq=False)
class WorstCase:
    f_star: Trajectory
    f_cells: np.ndarray
    J_wo: float
    hessian_definite: bool
    hessian_max_eigenvalue: float
    gradient_norm: float
    constant: float
    fluctuation: float
    agent: int
    N: int
    label: str = "equilibrium"

    def summary(self) -> Dict[str, Any]:
        return {"label": self.label, "N": self.N, "agent": self.agent, "J_wo": self.J_wo,
                "hessian_definite": self.hessian_definite,
                "hessian_max_eigenvalue": self.hessian_max_eigenvalue,
                "gradient_norm": self.gradient_norm, "constant": self.constant,
                "fluctuation": self.fluctuation}


def _propagate(closed: np.ndarray, x0: np.ndarray, grid: TimeGrid) -> np.ndarray:
    if not np.any(x0):
        return np.zeros((len(grid), x0.shape[0]))
    cl_at = Trajectory(grid, closed).sampler()
    return ode_rk4(lambda t, x: cl_at(t) @ x, x0, grid).values


def _mean_control(law: ControlLaw, count: int, shift: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Summed E u over `count` agents on one law whose reference states start `shift` off in total"""
    drift = np.einsum("kij,kj->ki", law.gain, _propagate(law.closed_loop, shift, grid))
    return count * law.mean_control() - law.scale * drift


def _others(pop: PopulationLaws, agent: int) -> Dict[int, List[int]]:
    groups: Dict[int, List[int]] = {}
    for j in range(pop.N):
        if j != agent:
            groups.setdefault(int(pop.which[j]), []).append(j)
    return groups


def _expected_flow(p: ModelParams, pop: PopulationLaws, agent: int, grid: TimeGrid):
    """E x_i, E x^(N), E u_i at f = 0 with control processes fixed"""
    N = pop.N
    u_sum = np.zeros((len(grid), p.n1))
    for l, members in _others(pop, agent).items():
        law = pop.laws[l]
        shift = (pop.means[members] - law.reference_mean.values[0]).sum(axis=0)
        u_sum = u_sum + _mean_control(law, len(members), shift, grid)
    focal = pop.law_of(agent)
    u_i = _mean_control(focal, 1, pop.means[agent] - focal.reference_mean.values[0], grid)
    u_avg = (u_sum + u_i) / N

    ui_at, ua_at = Trajectory(grid, u_i).sampler(), Trajectory(grid, u_avg).sampler()
    n = p.n

    def field(t, w):
        xi, xa = w[:n], w[n:]
        return np.concatenate([p.A @ xi + p.B @ ui_at(t) + p.G @ xa,
                               p.A_hat @ xa + p.B @ ua_at(t)])

    flow = ode_rk4(field, np.concatenate([pop.means[agent], pop.means.mean(axis=0)]), grid).values
    return flow[:, :n], flow[:, n:], u_i


def _fluctuation_cost(p: ModelParams, pop: PopulationLaws, agent: int, grid: TimeGrid) -> float:
    """E of the agent's cost from centered noise and initial spread (f-independent)"""
    N, n = pop.N, p.n
    focal = pop.law_of(agent)
    gi = focal.scale * focal.gain
    Z = np.zeros((n, n))
    Zk = np.zeros((len(grid), n, n))
    Si = pop.covariances[agent]
    B, D = p.B, p.D

    if N == 1:
        M = np.block([[np.broadcast_to(p.A_hat, Zk.shape), -np.einsum("ij,kjl->kil", B, gi)],
                      [Zk, focal.closed_loop]])
        C = np.vstack([D, D])
        noise = C @ C.T
        S0 = np.block([[Si, Si], [Si, Si]])
        Se = np.hstack([p.I - p.Gamma, Z])
    else:
        groups = _others(pop, agent)
        first = pop.laws[next(iter(groups))]
        for l in groups:
            law = pop.laws[l]
            if law.scale != first.scale or not np.array_equal(law.gain, first.gain):
                raise SimulationError("non-deviating agents must share one feedback gain")
        go = first.scale * first.gain
        Bgi = np.einsum("ij,kjl->kil", B, gi)
        A_k = np.broadcast_to(p.A, Zk.shape)
        G_k = np.broadcast_to(p.G, Zk.shape)
        Ah_k = np.broadcast_to(p.A_hat, Zk.shape)
        M = np.block([
            [A_k, -Bgi, G_k, Zk],
            [Zk, focal.closed_loop, Zk, Zk],
            [Zk, -Bgi / N, Ah_k, -np.einsum("ij,kjl->kil", B, go)],
            [Zk, Zk, Zk, first.closed_loop],
        ])
        Dz = np.zeros_like(D)
        C1 = np.vstack([D, D, D / N, Dz])
        C2 = np.vstack([Dz, Dz, D / N, D / N])
        noise = C1 @ C1.T + (N - 1) * (C2 @ C2.T)
        So = pop.covariances.sum(axis=0) - Si
        S0 = np.block([
            [Si, Si, Si / N, Z],
            [Si, Si, Si / N, Z],
            [Si / N, Si / N, (Si + So) / N ** 2, So / N ** 2],
            [Z, Z, So / N ** 2, So / N ** 2],
        ])
        Se = np.hstack([p.I, Z, -p.Gamma, Z])

    if not np.any(noise) and not np.any(S0):
        return 0.0
    M_at = Trajectory(grid, M).sampler()

    def field(t, S):
        Mt = M_at(t)
        return Mt @ S + S @ Mt.T + noise

    Sigma = ode_rk4(field, S0, grid, project=symmetrize).values
    xi_block = Sigma[:, n:2 * n, n:2 * n]
    running = (np.einsum("ij,kji->k", Se.T @ p.Q @ Se, Sigma)
               + np.einsum("kji,jl,klm,kmi->k", gi, p.R, gi, xi_block))
    terminal = np.trace(p.H @ Sigma[-1][:n, :n])
    return float(trapezoid(running, grid) + terminal)


def worst_case_f(p: ModelParams, strategy: StrategyLike, init: InitSpec, N: int, grid: TimeGrid,
                 agent: int = 0, deviation: Optional[ControlLaw] = None,
                 realization: str = Realization.REFERENCE.value) -> WorstCase:
    """Maximize agent's expected cost over piecewise-constant deterministic f"""
    if Realization(realization) != Realization.REFERENCE:
        raise SimulationError("worst-case evaluation needs control processes fixed in f "
                              "(reference realization)")
    pop = build_population(p, strategy, init, N)
    if pop.grid != grid:
        raise GridMismatch("strategy and worst-case grid differ")
    if not 0 <= agent < N:
        raise SimulationError(f"agent {agent} outside population of {N}")
    if deviation is not None:
        pop = pop.with_override(agent, deviation)
    label = deviation.label if deviation is not None else "equilibrium"

    resp = disturbance_response(p, grid)
    x_i, x_avg, u_i = _expected_flow(p, pop, agent, grid)
    e = x_i - x_avg @ p.Gamma.T - p.eta
    mean_part = float(trapezoid(np.einsum("ki,ij,kj->k", e, p.Q, e), grid)
                      + trapezoid(np.einsum("ki,ij,kj->k", u_i, p.R, u_i), grid)
                      + x_i[-1] @ p.H @ x_i[-1])
    fluct = _fluctuation_cost(p, pop, agent, grid)
    constant = mean_part + fluct
    b = resp.linear_term(e, x_i[-1])
    K, n = grid.n_steps, p.n

    if not resp.definite:
        logger.warning(f"Worst case for {label}: Hessian not negative definite "
                       f"(max eigenvalue {resp.max_eigenvalue:.3e}); supremum not attained")
        zero = np.zeros((K, n))
        return WorstCase(f_star=Trajectory(grid, np.zeros((K + 1, n))), f_cells=zero,
                         J_wo=float("nan"), hessian_definite=False,
                         hessian_max_eigenvalue=resp.max_eigenvalue, gradient_norm=float("nan"),
                         constant=constant, fluctuation=fluct, agent=agent, N=N, label=label)

    F = resp.maximize(b)
    gradient = 2.0 * (b + resp.hessian @ F)
    grad_norm = float(np.linalg.norm(gradient))
    scale = 1.0 + float(np.linalg.norm(b))
    if grad_norm > STATIONARITY_TOLERANCE * scale:
        logger.warning(f"Worst case for {label}: stationarity residual {grad_norm:.3e}")
    cells = F.reshape(K, n)
    J_wo = constant + float(b @ F)
    logger.solver_event("worst case", label, f"N={N} J_wo={J_wo:.10g}")
    return WorstCase(f_star=Trajectory(grid, np.vstack([cells, cells[-1:]])), f_cells=cells,
                     J_wo=J_wo, hessian_definite=True, hessian_max_eigenvalue=resp.max_eigenvalue,
                     gradient_norm=grad_norm, constant=constant, fluctuation=fluct,
                     agent=agent, N=N, label=label)


# ========== Rate fitting ==========

@dataclass(frozen=True)
class LogLogFit:
    slope: float
    intercept: float
    stderr: float
    ci_low: float
    ci_high: float
    r_squared: float
    points: int
    confidence: float = 0.95

    def to_dict(self) -> Dict[str, float]:
        return {"slope": self.slope, "intercept": self.intercept, "stderr": self.stderr,
                "ci_low": self.ci_low, "ci_high": self.ci_high, "r_squared": self.r_squared,
                "points": self.points, "confidence": self.confidence}


def fit_loglog(N_values: Sequence[float], stats: Sequence[float], confidence: float = 0.95) -> LogLogFit:
    """Least-squares slope of log(stat) against log(N)"""
    N_arr = np.asarray(N_values, dtype=float)
    s_arr = np.asarray(stats, dtype=float)
    if N_arr.size != s_arr.size:
        raise SimulationError("N values and statistics differ in length")
    keep = np.isfinite(s_arr) & (s_arr > 0)
    if keep.sum() < 3:
        raise DegenerateFit(f"log-log fit needs 3 positive statistics, got {int(keep.sum())}")
    if not keep.all():
        logger.warning(f"Log-log fit drops {int((~keep).sum())} non-positive statistics")
    res = scipy.stats.linregress(np.log(N_arr[keep]), np.log(s_arr[keep]))
    dof = int(keep.sum()) - 2
    half = float(scipy.stats.t.ppf(0.5 + confidence / 2.0, dof) * res.stderr)
    return LogLogFit(slope=float(res.slope), intercept=float(res.intercept), stderr=float(res.stderr),
                     ci_low=float(res.slope) - half, ci_high=float(res.slope) + half,
                     r_squared=float(res.rvalue ** 2), points=int(keep.sum()), confidence=confidence)


# ========== Experiments ==========

@dataclass
class ExperimentReport:
    name: str
    rows: List[Dict[str, Any]]
    fit: Optional[LogLogFit] = None
    gaps: List[Dict[str, Any]] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def table(self) -> Dict[str, list]:
        """Per-N rows as CSV columns"""
        return _to_columns(self.rows)

    def gap_table(self) -> Dict[str, list]:
        return _to_columns(self.gaps)

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "rows": self.rows, "gaps": self.gaps,
                "fit": None if self.fit is None else self.fit.to_dict(),
                "metadata": self.metadata}


def _to_columns(rows: List[Dict[str, Any]]) -> Dict[str, list]:
    if not rows:
        return {}
    return {key: [row.get(key) for row in rows] for key in rows[0]}


def _standard_error(samples: np.ndarray) -> float:
    """Monte Carlo standard error over the first axis (largest component)"""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 2:
        return float("nan")
    return float(np.max(samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])))


def _run_replications(fn, replications: int, threads: int) -> list:
    """Evaluate fn(r) for every replication; results come back in replication order"""
    if threads <= 1:
        return [fn(r) for r in range(replications)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(replications)))


def _metadata(grid: TimeGrid, seed: int, replications: int, threads: int, realization: str,
              init: InitSpec, **extra) -> Dict[str, Any]:
    meta = {"grid": {"t0": grid.t0, "t1": grid.t1, "n_steps": grid.n_steps},
            "seed": seed, "replications": replications, "threads": threads,
            "realization": realization, "init_mode": init.mode.value}
    meta.update(extra)
    return meta


def convergence_experiment(p: ModelParams, strategy: StrategyLike, init: InitSpec, grid: TimeGrid,
                           N_list: Sequence[int], replications: int, seed: int, threads: int = 1,
                           realization: str = Realization.REFERENCE.value,
                           f: Optional[Trajectory] = None) -> ExperimentReport:
    """sup_t E|u^(N) - u*|^2 per N and its log-log slope"""
    N_list = [int(N) for N in N_list]
    if len(N_list) < 3:
        raise DegenerateFit(f"convergence experiment needs at least 3 N values, got {len(N_list)}")
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise SimulationError(f"N_list must be strictly ascending, got {N_list}")
    if replications < 1:
        raise SimulationError("replications must be >= 1")
    base = _base_strategy(strategy)
    f = base.f_hat if f is None else f
    u_star = base.u_bar_star.values
    m_bar = base.limit.m_bar.values

    rows = []
    for N in N_list:
        pop = build_population(p, strategy, init, N)

        def one(r: int):
            run = simulate_population(p, pop, init, f, N, seed, grid, r, realization)
            return (np.sum((run.u_avg.values - u_star) ** 2, axis=1), run.x_avg.values)

        with performance_monitor.track(f"convergence N={N}"):
            results = _run_replications(one, replications, threads)
        dev = np.stack([r[0] for r in results])
        x_avg = np.stack([r[1] for r in results])

        mean_dev = dev.mean(axis=0)
        k_star = int(np.argmax(mean_dev))
        mf_gap = np.linalg.norm(x_avg.mean(axis=0) - m_bar, axis=1)
        k_mf = int(np.argmax(mf_gap))
        row = {
            "N": N,
            "statistic": float(mean_dev[k_star]),
            "std_error": _standard_error(dev[:, k_star]),
            "t_argmax": float(grid.knots[k_star]),
            "mean_field_gap": float(mf_gap[k_mf]),
            "mean_field_std_error": _standard_error(x_avg[:, k_mf]),
            "initial_offset": float(np.linalg.norm(pop.means.mean(axis=0) - p.m0)),
        }
        rows.append(row)
        logger.experiment_event("convergence", f"N={N} stat={row['statistic']:.4e} "
                                               f"(se {row['std_error']:.2e})")

    try:
        fit = fit_loglog([r["N"] for r in rows], [r["statistic"] for r in rows])
        logger.experiment_event("convergence", f"slope {fit.slope:.3f} "
                                               f"[{fit.ci_low:.3f}, {fit.ci_high:.3f}]")
    except DegenerateFit as e:
        logger.warning(f"Convergence rate not fitted: {e}")
        fit = None
    return ExperimentReport(name="convergence", rows=rows, fit=fit,
                            metadata=_metadata(grid, seed, replications, threads, realization, init,
                                               N_list=N_list))


# ========== Nash-gap deviations ==========

def scaled_deviations(law: ControlLaw, scales: Sequence[float]) -> List[ControlLaw]:
    out = []
    for delta in scales:
        out.append(law.scaled(1.0 + delta))
        out.append(law.scaled(1.0 - delta))
    return out


def random_affine_deviations(p: ModelParams, fs: FeedbackStrategy, count: int, size: float,
                             rng: np.random.Generator) -> List[ControlLaw]:
    """Constant symmetric shifts of P and constant shifts of phi, relative to their sup norms"""
    P_vals = fs.P.P.values
    P_scale = size * max(1.0, float(np.abs(P_vals).max()))
    phi_scale = size * max(1.0, fs.phi.sup_norm())
    out = []
    for k in range(count):
        S = rng.standard_normal((p.n, p.n))
        S = symmetrize(S)
        S /= max(np.linalg.norm(S), 1e-300)
        v = rng.standard_normal(p.n)
        v /= max(np.linalg.norm(v), 1e-300)
        phi = Trajectory(fs.grid, fs.phi.values + phi_scale * v)
        out.append(ControlLaw.from_feedback(
            p, P_vals + P_scale * S, phi, mean_field=fs.limit.m_bar, disturbance=fs.f_hat,
            x0_mean=fs.limit.x0_mean, label=f"random_affine_{k}"))
    return out


def best_response_deviation(p: ModelParams, fs: FeedbackStrategy, pilot: PopulationRun) -> ControlLaw:
    """Limit best response recomputed against the pilot run's empirical mean field"""
    phi = solve_offset(p, fs.P, pilot.x_avg, pilot.f_used)
    return ControlLaw.from_feedback(p, fs.P.P.values, phi, mean_field=pilot.x_avg,
                                    disturbance=pilot.f_used, x0_mean=fs.limit.x0_mean,
                                    label="best_response")


def shifted_law(law: ControlLaw, shift: np.ndarray, label: str) -> ControlLaw:
    """law plus an open-loop control shift (K+1, n1); feedback on the reference state unchanged"""
    return replace(law, offset=law.offset + shift / law.scale, label=label)


def offset_response_deviation(p: ModelParams, pop: PopulationLaws, init: InitSpec, grid: TimeGrid,
                              agent: int, modes: int = OFFSET_MODES) -> Optional[ControlLaw]:
    """Finite-N best open-loop shift of agent's control over `modes` cosines per control input

    J_wo is exactly quadratic in the shift, so its gradient and Hessian on the
    basis follow from finite differences and the minimizer solves one linear system.
    """
    law = pop.law_of(agent)
    t = (grid.knots - grid.t0) / (grid.t1 - grid.t0)
    basis = []
    for j in range(modes):
        wave = np.cos(j * np.pi * t)
        for c in range(p.n1):
            d = np.zeros((len(grid), p.n1))
            d[:, c] = OFFSET_STEP * wave
            basis.append(d)
    dim = len(basis)

    def cost(v: np.ndarray) -> float:
        shift = np.tensordot(v, np.stack(basis), axes=1)
        return worst_case_f(p, pop, init, pop.N, grid, agent,
                            deviation=shifted_law(law, shift, "exact_offset")).J_wo

    J0 = cost(np.zeros(dim))
    if not np.isfinite(J0):
        return None
    eye = np.eye(dim)
    plus = np.array([cost(eye[a]) for a in range(dim)])
    minus = np.array([cost(-eye[a]) for a in range(dim)])
    g = 0.5 * (plus - minus)
    H = np.diag(plus + minus - 2.0 * J0)
    for a in range(dim):
        for b in range(a + 1, dim):
            H[a, b] = H[b, a] = (cost(eye[a] + eye[b]) - J0 - g[a] - g[b]
                                 - 0.5 * (H[a, a] + H[b, b]))
    try:
        factor = scipy.linalg.cho_factor(symmetrize(H))
    except np.linalg.LinAlgError:
        logger.warning(f"Offset response for agent {agent}: J_wo is not convex on the shift basis")
        return None
    v = -scipy.linalg.cho_solve(factor, g)
    logger.debug(f"offset response N={pop.N}: predicted gain {-0.5 * float(g @ v):.4e}")
    return shifted_law(law, np.tensordot(v, np.stack(basis), axes=1), "exact_offset")


DEVIATION_FAMILIES = ("best_response", "exact_offset", "scaled", "random_affine")


def nash_gap_experiment(p: ModelParams, strategy: StrategyLike, init: InitSpec, N_list: Sequence[int],
                        grid: TimeGrid, deviations: Sequence[str] = DEVIATION_FAMILIES,
                        replications: int = 8, seed: int = 0, threads: int = 1,
                        scales: Sequence[float] = (0.05, 0.2), random_affine_count: int = 8,
                        random_affine_size: float = 0.05, agent: int = 0,
                        offset_modes: int = OFFSET_MODES,
                        f: Optional[Trajectory] = None) -> ExperimentReport:
    """Worst-case gain of unilateral deviations by one agent, per N"""
    deviations = list(deviations)
    if not deviations:
        raise SimulationError("deviation family must be nonempty")
    unknown = [d for d in deviations if d not in DEVIATION_FAMILIES]
    if unknown:
        raise SimulationError(f"unknown deviation families: {unknown}")
    base = _base_strategy(strategy)
    f = base.f_hat if f is None else f
    realization = Realization.REFERENCE.value

    rows, gaps = [], []
    for N in [int(N) for N in N_list]:
        pop = build_population(p, strategy, init, N)
        if not 0 <= agent < N:
            raise SimulationError(f"deviating agent {agent} outside population of {N}")
        # shared Hessian is built once, before any worker thread
        disturbance_response(p, grid)
        fs_i = pop.strategy_of(agent)
        law_i = pop.law_of(agent)

        with performance_monitor.track(f"nash gap N={N}"):
            equilibrium = worst_case_f(p, pop, init, N, grid, agent)
            J_base = equilibrium.J_wo

            def gap_of(law: ControlLaw) -> Tuple[float, bool]:
                wc = worst_case_f(p, pop, init, N, grid, agent, deviation=law)
                return J_base - wc.J_wo, wc.hessian_definite

            entries: List[Dict[str, Any]] = []
            gap, ok = gap_of(law_i)
            entries.append({"deviation": "self", "gap": gap, "std_error": 0.0, "concave": ok})

            if "best_response" in deviations:
                def one(r: int):
                    pilot = simulate_population(p, pop, init, f, N, seed, grid, r, realization)
                    return gap_of(best_response_deviation(p, fs_i, pilot))

                results = _run_replications(one, replications, threads)
                br = np.array([g for g, _ in results])
                entries.append({"deviation": "best_response", "gap": float(br.mean()),
                                "std_error": _standard_error(br),
                                "concave": all(c for _, c in results)})
            if "exact_offset" in deviations:
                law = offset_response_deviation(p, pop, init, grid, agent, offset_modes)
                if law is not None:
                    gap, ok = gap_of(law)
                    entries.append({"deviation": law.label, "gap": gap, "std_error": 0.0, "concave": ok})
            if "scaled" in deviations:
                for law in scaled_deviations(law_i, scales):
                    gap, ok = gap_of(law)
                    entries.append({"deviation": law.label, "gap": gap, "std_error": 0.0, "concave": ok})
            if "random_affine" in deviations:
                rng = counter_stream(seed, N, AFFINE_STREAM)
                for law in random_affine_deviations(p, fs_i, random_affine_count, random_affine_size, rng):
                    gap, ok = gap_of(law)
                    entries.append({"deviation": law.label, "gap": gap, "std_error": 0.0, "concave": ok})

        usable = [e for e in entries if e["concave"] and np.isfinite(e["gap"])]
        for e in entries:
            if not e["concave"]:
                logger.warning(f"Deviation {e['deviation']} at N={N} skipped: worst case not concave")
        top = max(usable, key=lambda e: e["gap"], default=None)
        eps = max(0.0, top["gap"]) if top is not None else 0.0
        rows.append({
            "N": N,
            "eps_hat": eps,
            "std_error": top["std_error"] if top is not None and top["gap"] > 0 else 0.0,
            "argmax": top["deviation"] if top is not None else "",
            "J_wo_equilibrium": J_base,
            "initial_offset": float(np.linalg.norm(pop.means.mean(axis=0) - p.m0)),
        })
        gaps.extend({"N": N, **e} for e in entries)
        logger.experiment_event("nash gap", f"N={N} eps_hat={eps:.4e} ({rows[-1]['argmax']})")

    fit = None
    if len(rows) >= 3:
        try:
            fit = fit_loglog([r["N"] for r in rows], [r["eps_hat"] for r in rows])
            logger.experiment_event("nash gap", f"slope {fit.slope:.3f} "
                                                f"[{fit.ci_low:.3f}, {fit.ci_high:.3f}]")
        except DegenerateFit as e:
            logger.warning(f"Nash-gap rate not fitted: {e}")
    return ExperimentReport(name="nash_gap", rows=rows, fit=fit, gaps=gaps,
                            metadata=_metadata(grid, seed, replications, threads, realization, init,
                                               N_list=[r["N"] for r in rows], agent=agent,
                                               deviations=deviations, scales=list(scales),
                                               offset_modes=offset_modes))


def random_initial_mode(p: ModelParams, strategy: StrategyLike, init: InitSpec, grid: TimeGrid,
                        experiment: str = "convergence", **kwargs) -> ExperimentReport:
    """Run an experiment with independently drawn initial states"""
    if init.mode != InitMode.RANDOM:
        raise SimulationError(f"random initial mode needs init.mode=random, got {init.mode.value}")
    errors = init.check(p.n)
    if errors:
        raise SimulationError("; ".join(errors))
    if experiment == "convergence":
        report = convergence_experiment(p, strategy, init, grid, **kwargs)
    elif experiment == "nash_gap":
        report = nash_gap_experiment(p, strategy, init, grid=grid, **kwargs)
    else:
        raise SimulationError(f"unknown experiment {experiment!r}")
    report.metadata["random_initial_states"] = True
    return report
