#!/usr/bin/env python3
"""
src/core/consistency.py - Mean-field consistency system in (m, p, y)

    m' = Ah m + gamma p + B R^-1 B^T y,          m(0) = m0
    p' = -Qhat m - Ah^T p + (I - Gamma)^T Q eta, p(T) = H m(T)
    y' = Q (I - Gamma) m - A^T y - Q eta,        y(T) = -H m(T)

Solved by variation-of-constants shooting (authoritative) or by the
fixed-point iteration on h = B R^-1 B^T y after decoupling p = -K m + phi.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg

from .conditions import consistency_matrix, terminal_selector
from .model import ModelParams
from .numkit import (
    NumkitError, TimeGrid, Trajectory, central_difference_residual, frobenius, mat_exp, ode_rk4,
)
from .riccati import RiccatiSolution, solve_indefinite_K
from ..utils.log_manager import get_logger

logger = get_logger("consistency")

SINGULAR_CONDITION = 1e12
RESIDUAL_TOLERANCE = 1e-6
EQUIVALENCE_TOLERANCE = 1e-7
CROSS_METHOD_TOLERANCE = 1e-6


class ConsistencyError(Exception):
    """Base error for the consistency solvers"""


class BvpUnsolvable(ConsistencyError):
    """Shooting matrix is singular"""


class AccuracyError(ConsistencyError):
    """Solution residual above tolerance"""

    def __init__(self, residual: float, tolerance: float, where: str = ""):
        self.residual = residual
        self.tolerance = tolerance
        super().__init__(f"{where} residual {residual:.3e} exceeds {tolerance:.1e}".strip())


class NonConvergence(ConsistencyError):
    """Fixed-point iteration hit max_iter"""

    def __init__(self, iterations: int, last_increment: float):
        self.iterations = iterations
        self.last_increment = last_increment
        super().__init__(
            f"fixed point not reached after {iterations} iterations (last increment "
            f"{last_increment:.3e}); the contraction condition is sufficient only"
        )


class EquivalenceViolation(ConsistencyError):
    """Equivalent formulations disagree: a solver bug, not a model failure"""


# ========== Generic affine shooting ==========

@dataclass(frozen=True, eq=False)
class ShootingResult:
    states: Trajectory
    initial: np.ndarray
    terminal_residual: float
    condition_number: float


def affine_propagator(M: np.ndarray, c: np.ndarray, t: float):
    """(e^{Mt}, int_0^t e^{M(t-s)} c ds) from one augmented exponential"""
    d = M.shape[0]
    aug = np.zeros((d + 1, d + 1))
    aug[:d, :d] = M
    aug[:d, d] = c
    E = mat_exp(aug, t)
    return E[:d, :d], E[:d, d]


def shoot_affine_bvp(M: np.ndarray, c: np.ndarray, grid: TimeGrid,
                     known_idx: Sequence[int], known_values: np.ndarray,
                     free_idx: Sequence[int], terminal: np.ndarray,
                     terminal_rhs: Optional[np.ndarray] = None) -> ShootingResult:
    """w' = M w + c with w[known](0) given and terminal @ w(T) = terminal_rhs"""
    d = M.shape[0]
    known_idx = np.asarray(known_idx, dtype=int)
    free_idx = np.asarray(free_idx, dtype=int)
    if known_idx.size + free_idx.size != d or terminal.shape != (free_idx.size, d):
        raise ValueError("boundary data do not determine the initial state")
    rhs_T = np.zeros(free_idx.size) if terminal_rhs is None else np.asarray(terminal_rhs, float)

    Theta, Psi = affine_propagator(M, c, grid.t1 - grid.t0)
    w_known = np.zeros(d)
    w_known[known_idx] = known_values
    S = terminal @ Theta[:, free_idx]
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > SINGULAR_CONDITION:
        raise BvpUnsolvable(f"shooting matrix is singular (condition number {cond:.3e})")
    u = scipy.linalg.solve(S, rhs_T - terminal @ (Theta @ w_known) - terminal @ Psi)

    w0 = w_known.copy()
    w0[free_idx] = u
    states = ode_rk4(lambda t, w: M @ w + c, w0, grid)
    residual = frobenius(terminal @ states.final - rhs_T) / (1.0 + states.sup_norm())
    return ShootingResult(states=states, initial=w0, terminal_residual=residual, condition_number=cond)


# ========== Solution carrier ==========

@dataclass(frozen=True, eq=False)
class ConsistencySolution:
    m: Trajectory
    p: Trajectory
    y: Trajectory
    u_bar: Trajectory
    method: str
    residual: float
    iterations: Optional[int] = None
    increments: List[float] = field(default_factory=list)

    @property
    def grid(self) -> TimeGrid:
        return self.m.grid

    def stacked(self) -> Trajectory:
        return Trajectory(self.grid, np.concatenate([self.m.values, self.p.values, self.y.values], axis=1))

    def distance(self, other: "ConsistencySolution") -> float:
        return self.stacked().distance(other.stacked())

    def contraction_ratios(self) -> np.ndarray:
        inc = np.asarray(self.increments)
        if inc.size < 2:
            return np.empty(0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return inc[1:] / inc[:-1]

    def columns(self) -> Dict[str, np.ndarray]:
        cols = {"t": self.grid.knots}
        for name in ("m", "p", "y", "u_bar"):
            cols.update(getattr(self, name).columns(name))
        return cols

    def summary(self) -> Dict[str, object]:
        return {"method": self.method, "residual": self.residual, "iterations": self.iterations,
                "increments": list(self.increments)}


def _split(p: ModelParams, states: Trajectory, method: str, residual: float, **extra) -> ConsistencySolution:
    n = p.n
    w = states.values
    y = Trajectory(states.grid, w[:, 2 * n:])
    u_bar = Trajectory(states.grid, w[:, 2 * n:] @ (p.R_inv @ p.B.T).T)
    return ConsistencySolution(m=Trajectory(states.grid, w[:, :n]), p=Trajectory(states.grid, w[:, n:2 * n]),
                               y=y, u_bar=u_bar, method=method, residual=residual, **extra)


def consistency_residual(p: ModelParams, stacked: Trajectory) -> float:
    M, c = consistency_matrix(p)
    return central_difference_residual(stacked, lambda t, w: M @ w + c) / (1.0 + stacked.sup_norm())


def propagator_identity_error(p: ModelParams) -> float:
    """|Theta(T) Theta(-T) - I|"""
    M, _ = consistency_matrix(p)
    return frobenius(mat_exp(M, p.T) @ mat_exp(M, -p.T) - np.eye(M.shape[0]))


# ========== Shooting ==========

def solve_bvp_shooting(p: ModelParams, grid: TimeGrid,
                       residual_tol: float = RESIDUAL_TOLERANCE) -> ConsistencySolution:
    n = p.n
    M, c = consistency_matrix(p)
    result = shoot_affine_bvp(M, c, grid, known_idx=range(n), known_values=p.m0,
                              free_idx=range(n, 3 * n), terminal=terminal_selector(p))
    residual = max(consistency_residual(p, result.states), result.terminal_residual)
    logger.solver_event("shooting", "solved",
                        f"cond={result.condition_number:.3e} residual={residual:.3e}")
    if residual > residual_tol:
        raise AccuracyError(residual, residual_tol, "shooting")
    return _split(p, result.states, "Shooting", residual)


# ========== Fixed point ==========

def _fixed_point_sweep(p: ModelParams, K: RiccatiSolution, h: Trajectory):
    """One application of the map h -> B R^-1 B^T y[h]; returns (m, phi, y)"""
    grid = K.grid
    Ah, g, IG = p.A_hat, p.gamma, p.I - p.Gamma
    K_at, h_at = K.P.sampler(), h.sampler()
    forcing_phi = IG.T @ p.Q @ p.eta

    def phi_field(t, phi):
        Kt = K_at(t)
        return -(Ah - g * Kt).T @ phi + Kt @ h_at(t) + forcing_phi

    phi = ode_rk4(phi_field, np.zeros(p.n), grid, direction="backward")
    phi_at = phi.sampler()

    def m_field(t, m):
        return (Ah - g * K_at(t)) @ m + h_at(t) + g * phi_at(t)

    m = ode_rk4(m_field, p.m0, grid)
    m_at = m.sampler()
    QIG, Qeta = p.Q @ IG, p.Q @ p.eta

    def y_field(t, y):
        return -p.A.T @ y + QIG @ m_at(t) - Qeta

    y = ode_rk4(y_field, -p.H @ m.final, grid, direction="backward")
    return m, phi, y


def fixed_point_iterate(p: ModelParams, K: RiccatiSolution, grid: TimeGrid,
                        tol: float = 1e-10, max_iter: int = 200) -> ConsistencySolution:
    """Iterate h <- B R^-1 B^T y[h] from h = 0 until the sup-norm change is <= tol"""
    if K.grid != grid:
        raise ConsistencyError("Riccati solution and grid differ")
    BRB = p.BRB
    h = Trajectory.constant(grid, np.zeros(p.n))
    increments: List[float] = []
    for it in range(1, max_iter + 1):
        m, phi, y = _fixed_point_sweep(p, K, h)
        h_new = Trajectory(grid, y.values @ BRB.T)
        inc = h_new.distance(h)
        increments.append(inc)
        logger.solver_event("fixed point", f"iteration {it}", f"increment={inc:.3e}")
        h = h_new
        if inc <= tol:
            break
    else:
        raise NonConvergence(max_iter, increments[-1])

    # p = -K m + phi on the final sweep
    pv = -np.einsum("kij,kj->ki", K.P.values, m.values) + phi.values
    stacked = Trajectory(grid, np.concatenate([m.values, pv, y.values], axis=1))
    residual = consistency_residual(p, stacked)
    logger.info(f"Fixed point converged in {it} iterations, residual {residual:.3e}")
    return _split(p, stacked, "FixedPoint", residual, iterations=it, increments=increments)


def solve_consistency(p: ModelParams, grid: TimeGrid, method: str = "shooting",
                      validate_with_fixed_point: bool = True, tol: float = 1e-10,
                      max_iter: int = 200, K: Optional[RiccatiSolution] = None) -> ConsistencySolution:
    """Shooting is authoritative; the fixed point serves as validator when both run"""
    if method not in ("shooting", "fixed_point"):
        raise ValueError(f"unknown consistency method {method!r}")
    if method == "fixed_point":
        return fixed_point_iterate(p, K or solve_indefinite_K(p, grid), grid, tol, max_iter)

    sol = solve_bvp_shooting(p, grid)
    if validate_with_fixed_point:
        try:
            fp = fixed_point_iterate(p, K or solve_indefinite_K(p, grid), grid, tol, max_iter)
            gap = sol.distance(fp)
            if gap > CROSS_METHOD_TOLERANCE * (1.0 + sol.stacked().sup_norm()):
                logger.warning(f"shooting and fixed-point solutions differ by {gap:.3e}")
            else:
                logger.info(f"shooting and fixed-point solutions agree within {gap:.3e}")
        except (ConsistencyError, NumkitError) as e:
            logger.warning(f"fixed-point validation skipped: {e}")
    return sol


# ========== Equivalences ==========

def four_system(p: ModelParams):
    """Drift, forcing and boundary data of the lifted system in (x, m, p, y)"""
    n = p.n
    A, G, Ah, g, BRB = p.A, p.G, p.A_hat, p.gamma, p.BRB
    IG = p.I - p.Gamma
    Z = np.zeros((n, n))
    M = np.block([
        [A, G, g * p.I, BRB],
        [Z, Ah, g * p.I, BRB],
        [Z, -p.Qhat, -Ah.T, Z],
        [p.Q, -p.Q @ p.Gamma, Z, -A.T],
    ])
    c = np.concatenate([np.zeros(2 * n), IG.T @ p.Q @ p.eta, -p.Q @ p.eta])
    L = np.block([[Z, -p.H, p.I, Z], [p.H, Z, Z, p.I]])
    return M, c, L


@dataclass
class EquivalenceReport:
    x_equals_m: float
    lifted_vs_solution: float
    integrated_x_vs_m: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return max(self.x_equals_m, self.lifted_vs_solution, self.integrated_x_vs_m) <= self.tolerance

    def to_dict(self) -> Dict[str, object]:
        return {"x_equals_m": self.x_equals_m, "lifted_vs_solution": self.lifted_vs_solution,
                "integrated_x_vs_m": self.integrated_x_vs_m, "tolerance": self.tolerance,
                "passed": self.passed}


def validate_equivalences(sol: ConsistencySolution, p: ModelParams, grid: TimeGrid,
                          tolerance: float = EQUIVALENCE_TOLERANCE) -> EquivalenceReport:
    """Lift to (x, m, p, y), solve it independently and compare with sol"""
    if sol.grid != grid:
        raise ConsistencyError("solution and grid differ")
    n = p.n
    M, c, L = four_system(p)
    lifted = shoot_affine_bvp(M, c, grid, known_idx=range(2 * n),
                              known_values=np.concatenate([p.m0, p.m0]),
                              free_idx=range(2 * n, 4 * n), terminal=L).states.values
    x, rest = lifted[:, :n], lifted[:, n:]
    scale = 1.0 + sol.stacked().sup_norm()

    x_gap = float(np.linalg.norm(x - rest[:, :n], axis=1).max())
    sys_gap = float(np.linalg.norm(rest - sol.stacked().values, axis=1).max())

    # x from the solution's own (m, p, y)
    m_at, p_at, y_at = sol.m.sampler(), sol.p.sampler(), sol.y.sampler()

    def x_field(t, xv):
        return p.A @ xv + p.BRB @ y_at(t) + p.G @ m_at(t) + p.gamma * p_at(t)

    x_int = ode_rk4(x_field, p.m0, grid)
    int_gap = x_int.distance(sol.m)

    report = EquivalenceReport(x_equals_m=x_gap / scale, lifted_vs_solution=sys_gap / scale,
                               integrated_x_vs_m=int_gap / scale, tolerance=tolerance)
    if not report.passed:
        raise EquivalenceViolation(f"equivalence checks failed: {report.to_dict()}")
    logger.debug(f"Equivalence checks passed: {report.to_dict()}")
    return report
