#!/usr/bin/env python3
"""
src/core/strategy.py - Decentralized robust strategy of a representative agent

Given the consistency solution (m, p, y) and its mean control u* = R^-1 B^T y:
- solve_agent_limit: mean limit flow (x, m, p, y) of one agent started at x0_mean
- build_feedback:    y = -P x + phi decoupling, u(t, x) = R^-1 B^T (-P x + phi),
                     worst-case disturbance f = gamma p
- ControlLaw:        the control process an agent actually applies
- limit_cost:        mean part by quadrature, fluctuation part by Lyapunov ODE
"""

from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .consistency import ConsistencySolution, shoot_affine_bvp
from .model import ModelParams
from .numkit import TimeGrid, Trajectory, as_vector, frobenius, ode_rk4, symmetrize, trapezoid
from .riccati import RiccatiSolution, solve_standard_P
from ..utils.log_manager import get_logger

logger = get_logger("strategy")

RECONSTRUCTION_TOLERANCE = 1e-5


class StrategyError(Exception):
    """Base error for strategy synthesis"""


class StrategyConsistencyError(StrategyError):
    """The decoupling identity -P x + phi = y does not hold on the limit flow"""


class GridMismatch(StrategyError, ValueError):
    """Inputs live on different time grids"""


def _same_grid(*grids: TimeGrid) -> TimeGrid:
    first = grids[0]
    if any(g != first for g in grids[1:]):
        raise GridMismatch("inputs live on different time grids")
    return first


# ========== Agent limit system ==========

@dataclass(frozen=True, eq=False)
class AgentLimitSystem:
    x_bar: Trajectory
    m_bar: Trajectory
    p_bar: Trajectory
    y_bar: Trajectory
    x0_mean: np.ndarray
    u_bar_star: Trajectory

    @property
    def grid(self) -> TimeGrid:
        return self.x_bar.grid

    def stacked(self) -> Trajectory:
        return Trajectory(self.grid, np.concatenate(
            [self.x_bar.values, self.m_bar.values, self.p_bar.values, self.y_bar.values], axis=1))


def deviation_matrix(p: ModelParams) -> np.ndarray:
    """Homogeneous drift of (x - m, m_bar - m, p_bar - p, y_bar - y) with the mean control fixed"""
    n = p.n
    A, G, Ah, g = p.A, p.G, p.A_hat, p.gamma
    IGQ = (p.I - p.Gamma).T @ p.Q
    Z = np.zeros((n, n))
    return np.block([
        [A, G, g * p.I, p.BRB],
        [Z, Ah, g * p.I, Z],
        [-IGQ, IGQ @ p.Gamma, -Ah.T, Z],
        [p.Q, -p.Q @ p.Gamma, Z, -A.T],
    ])


def agent_limit_field(p: ModelParams, u_bar_star: Trajectory):
    """Vector field of the full agent limit system in (x, m, p, y)"""
    n = p.n
    M = deviation_matrix(p)
    IG = p.I - p.Gamma
    u_at = u_bar_star.sampler()
    c0 = np.concatenate([np.zeros(2 * n), IG.T @ p.Q @ p.eta, -p.Q @ p.eta])

    def field(t, w):
        c = c0.copy()
        c[n:2 * n] += p.B @ u_at(t)
        return M @ w + c

    return field


def solve_agent_limit(p: ModelParams, cs: ConsistencySolution, x0_mean, grid: TimeGrid) -> AgentLimitSystem:
    """Limit flow of an agent whose initial mean is x0_mean while the mean control stays u*"""
    if cs.grid != grid:
        raise GridMismatch("consistency solution and grid differ")
    n = p.n
    x0_mean = as_vector(x0_mean, "x0_mean")
    delta = x0_mean - p.m0
    if not np.any(delta):
        return AgentLimitSystem(x_bar=cs.m, m_bar=cs.m, p_bar=cs.p, y_bar=cs.y,
                                x0_mean=x0_mean, u_bar_star=cs.u_bar)

    Z, I = np.zeros((n, n)), p.I
    L = np.block([[-p.H, Z, I, Z], [p.H, Z, Z, I]])
    dev = shoot_affine_bvp(deviation_matrix(p), np.zeros(4 * n), grid,
                           known_idx=range(2 * n), known_values=np.concatenate([delta, np.zeros(n)]),
                           free_idx=range(2 * n, 4 * n), terminal=L).states.values
    base = np.concatenate([cs.m.values, cs.m.values, cs.p.values, cs.y.values], axis=1)
    w = base + dev
    logger.solver_event("agent limit", "solved", f"|x0 - m0|={frobenius(delta):.3e}")
    return AgentLimitSystem(
        x_bar=Trajectory(grid, w[:, :n]), m_bar=Trajectory(grid, w[:, n:2 * n]),
        p_bar=Trajectory(grid, w[:, 2 * n:3 * n]), y_bar=Trajectory(grid, w[:, 3 * n:]),
        x0_mean=x0_mean, u_bar_star=cs.u_bar,
    )


# ========== Feedback strategy ==========

def solve_offset(p: ModelParams, P: RiccatiSolution, mean_field: Trajectory,
                 disturbance: Trajectory) -> Trajectory:
    """phi' = -(A - B R^-1 B^T P)^T phi + P (G mf + f) - Q (Gamma mf + eta), phi(T) = 0"""
    P_at, mf_at, f_at = P.P.sampler(), mean_field.sampler(), disturbance.sampler()
    A, G, BRB, Q, Gam, eta = p.A, p.G, p.BRB, p.Q, p.Gamma, p.eta

    def field(t, phi):
        Pt, mf = P_at(t), mf_at(t)
        return -(A - BRB @ Pt).T @ phi + Pt @ (G @ mf + f_at(t)) - Q @ (Gam @ mf + eta)

    return ode_rk4(field, np.zeros(p.n), P.grid, direction="backward")


@dataclass(frozen=True, eq=False)
class FeedbackStrategy:
    P: RiccatiSolution
    phi: Trajectory
    u_bar_star: Trajectory
    f_hat: Trajectory
    limit: AgentLimitSystem
    reconstruction_error: float = 0.0

    @property
    def grid(self) -> TimeGrid:
        return self.phi.grid

    def gain(self, p: ModelParams) -> np.ndarray:
        """R^-1 B^T P(t_k), shape (K+1, n1, n)"""
        return np.einsum("ij,kjl->kil", p.R_inv @ p.B.T, self.P.P.values)

    def offset(self, p: ModelParams) -> np.ndarray:
        return self.phi.values @ (p.R_inv @ p.B.T).T

    def control(self, p: ModelParams, k: int, x: np.ndarray) -> np.ndarray:
        """Feedback map R^-1 B^T (-P(t_k) x + phi(t_k)); x may be a batch (..., n)"""
        L = p.R_inv @ p.B.T
        return (self.phi.values[k] - x @ self.P.at(k).T) @ L.T

    def control_law(self, p: ModelParams) -> "ControlLaw":
        gain = self.gain(p)
        return ControlLaw(gain=gain, offset=self.offset(p), reference_mean=self.limit.x_bar,
                          closed_loop=p.A - np.einsum("ij,kjl->kil", p.B, gain), label="equilibrium")

    def columns(self) -> Dict[str, np.ndarray]:
        cols: Dict[str, np.ndarray] = {}
        cols.update(self.P.P.columns("P"))
        cols.update(self.phi.columns("phi"))
        cols.update(self.f_hat.columns("f_hat"))
        cols.update(self.limit.x_bar.columns("x_bar"))
        return cols


def build_feedback(p: ModelParams, als: AgentLimitSystem, grid: TimeGrid,
                   P: Optional[RiccatiSolution] = None) -> FeedbackStrategy:
    _same_grid(als.grid, grid)
    if P is None:
        P = solve_standard_P(p, grid)
    f_hat = Trajectory(grid, p.gamma * als.p_bar.values)
    phi = solve_offset(p, P, als.m_bar, f_hat)

    recon = -np.einsum("kij,kj->ki", P.P.values, als.x_bar.values) + phi.values
    err = float(np.linalg.norm(recon - als.y_bar.values, axis=1).max())
    scale = 1.0 + als.y_bar.sup_norm()
    if err > RECONSTRUCTION_TOLERANCE * scale:
        raise StrategyConsistencyError(f"-P x + phi differs from y by {err:.3e} on the limit flow")
    logger.solver_event("feedback", "built", f"reconstruction error {err:.3e}")
    return FeedbackStrategy(P=P, phi=phi, u_bar_star=als.u_bar_star, f_hat=f_hat, limit=als,
                            reconstruction_error=err)


# ========== Control process ==========

@dataclass(frozen=True, eq=False)
class ControlLaw:
    """u = scale * (offset - gain (xi_mean + xi)) with xi the agent's reference-state fluctuation

    The reference state follows the agent's own limit model,
        dxi = (A - B gain) xi dt + D dW_i,  xi(0) = x_i(0) - E x_i(0),
    so the control process is independent of the realized population and disturbance.
    """
    gain: np.ndarray
    offset: np.ndarray
    reference_mean: Trajectory
    closed_loop: np.ndarray
    scale: float = 1.0
    label: str = "custom"

    @property
    def grid(self) -> TimeGrid:
        return self.reference_mean.grid

    def scaled(self, s: float) -> "ControlLaw":
        return replace(self, scale=self.scale * s, label=f"{self.label}*{s:g}")

    def mean_control(self) -> np.ndarray:
        """E u at every knot, (K+1, n1)"""
        return self.scale * (self.offset - np.einsum("kij,kj->ki", self.gain, self.reference_mean.values))

    def control_from_reference(self, k: int, xi: np.ndarray) -> np.ndarray:
        x_ref = self.reference_mean.values[k] + xi
        return self.scale * (self.offset[k] - x_ref @ self.gain[k].T)

    def control_from_state(self, k: int, x: np.ndarray) -> np.ndarray:
        return self.scale * (self.offset[k] - x @ self.gain[k].T)

    @classmethod
    def from_feedback(cls, p: ModelParams, P_values: np.ndarray, phi: Trajectory,
                      mean_field: Trajectory, disturbance: Trajectory, x0_mean,
                      label: str = "custom") -> "ControlLaw":
        """Law u = R^-1 B^T (-P x + phi) run on a reference model driven by (mean_field, disturbance)"""
        grid = phi.grid
        L = p.R_inv @ p.B.T
        gain = np.einsum("ij,kjl->kil", L, P_values)
        offset = phi.values @ L.T
        closed = p.A - np.einsum("ij,kjl->kil", p.B, gain)
        cl_at = Trajectory(grid, closed).sampler()
        drive = Trajectory(grid, offset @ p.B.T + mean_field.values @ p.G.T + disturbance.values)
        drive_at = drive.sampler()
        mean = ode_rk4(lambda t, x: cl_at(t) @ x + drive_at(t), as_vector(x0_mean), grid)
        return cls(gain=gain, offset=offset, reference_mean=mean, closed_loop=closed, label=label)


# ========== Strategy family over initial means ==========

class StrategyFamily:
    """Equilibrium strategies for any initial mean, by linearity in x0_mean - m0"""

    def __init__(self, p: ModelParams, cs: ConsistencySolution, grid: TimeGrid,
                 P: Optional[RiccatiSolution] = None):
        self.p = p
        self.grid = grid
        self.P = P if P is not None else solve_standard_P(p, grid)
        self.base = build_feedback(p, solve_agent_limit(p, cs, p.m0, grid), grid, self.P)
        self._sens = []
        for j in range(p.n):
            e = np.zeros(p.n)
            e[j] = 1.0
            fs = build_feedback(p, solve_agent_limit(p, cs, p.m0 + e, grid), grid, self.P)
            self._sens.append(tuple(self._parts(fs)[i] - self._parts(self.base)[i] for i in range(5)))
        self._cache: Dict[Tuple[float, ...], FeedbackStrategy] = {}

    @staticmethod
    def _parts(fs: FeedbackStrategy):
        lim = fs.limit
        return (lim.x_bar.values, lim.m_bar.values, lim.p_bar.values, lim.y_bar.values, fs.phi.values)

    def for_initial_mean(self, mu) -> FeedbackStrategy:
        mu = as_vector(mu, "initial mean")
        delta = mu - self.p.m0
        if not np.any(delta):
            return self.base
        key = tuple(mu.tolist())
        if key not in self._cache:
            parts = [v.copy() for v in self._parts(self.base)]
            for j, sens in enumerate(self._sens):
                for i in range(5):
                    parts[i] = parts[i] + delta[j] * sens[i]
            g = self.grid
            lim = AgentLimitSystem(x_bar=Trajectory(g, parts[0]), m_bar=Trajectory(g, parts[1]),
                                   p_bar=Trajectory(g, parts[2]), y_bar=Trajectory(g, parts[3]),
                                   x0_mean=mu, u_bar_star=self.base.u_bar_star)
            self._cache[key] = FeedbackStrategy(
                P=self.P, phi=Trajectory(g, parts[4]), u_bar_star=self.base.u_bar_star,
                f_hat=Trajectory(g, self.p.gamma * parts[2]), limit=lim)
        return self._cache[key]


# ========== Limit cost ==========

def fluctuation_covariance(closed_loop: np.ndarray, D: np.ndarray, grid: TimeGrid,
                           initial: Optional[np.ndarray] = None) -> Trajectory:
    """Sigma' = Acl Sigma + Sigma Acl^T + D D^T"""
    cl_at = Trajectory(grid, closed_loop).sampler()
    DD = D @ D.T
    n = closed_loop.shape[-1]
    S0 = np.zeros((n, n)) if initial is None else np.asarray(initial, float)

    def field(t, S):
        Acl = cl_at(t)
        return Acl @ S + S @ Acl.T + DD

    return ode_rk4(field, S0, grid, project=symmetrize)


def limit_cost_parts(p: ModelParams, als: AgentLimitSystem, fs: FeedbackStrategy, grid: TimeGrid,
                     noise_variance_term: bool = True, f: Optional[Trajectory] = None,
                     initial_covariance: Optional[np.ndarray] = None) -> Dict[str, float]:
    _same_grid(als.grid, fs.grid, grid)
    u_mean = als.y_bar.values @ (p.R_inv @ p.B.T).T
    if f is None:
        f_vals = fs.f_hat.values
        x, m = als.x_bar.values, als.m_bar.values
    else:
        _same_grid(f.grid, grid)
        f_vals = f.values
        # control process held fixed; only the mean flow responds to f
        ub_at, u_at, f_at = als.u_bar_star.sampler(), Trajectory(grid, u_mean).sampler(), f.sampler()

        def field(t, w):
            xv, mv = w[:p.n], w[p.n:]
            return np.concatenate([p.A @ xv + p.B @ u_at(t) + p.G @ mv + f_at(t),
                                   p.A_hat @ mv + p.B @ ub_at(t) + f_at(t)])

        flow = ode_rk4(field, np.concatenate([als.x0_mean, p.m0]), grid).values
        x, m = flow[:, :p.n], flow[:, p.n:]

    e = x - m @ p.Gamma.T - p.eta
    parts = {
        "tracking": float(trapezoid(np.einsum("ki,ij,kj->k", e, p.Q, e), grid)),
        "effort": float(trapezoid(np.einsum("ki,ij,kj->k", u_mean, p.R, u_mean), grid)),
        "disturbance_credit": -float(trapezoid(np.einsum("ki,ki->k", f_vals, f_vals), grid)) / p.gamma,
        "terminal": float(x[-1] @ p.H @ x[-1]),
        "fluctuation": 0.0,
    }
    if noise_variance_term:
        law = fs.control_law(p)
        Sigma = fluctuation_covariance(law.closed_loop, p.D, grid, initial_covariance).values
        weight = p.Q + np.einsum("kji,jl,klm->kim", law.gain, p.R, law.gain)
        running = np.einsum("kij,kji->k", weight, Sigma)
        parts["fluctuation"] = float(trapezoid(running, grid) + np.trace(p.H @ Sigma[-1]))
    parts["total"] = sum(parts.values())
    return parts


def limit_cost(p: ModelParams, als: AgentLimitSystem, fs: FeedbackStrategy, grid: TimeGrid,
               noise_variance_term: bool = True, f: Optional[Trajectory] = None,
               initial_covariance: Optional[np.ndarray] = None) -> float:
    """Limit cost of the strategy against the worst-case disturbance (or against f if given)"""
    parts = limit_cost_parts(p, als, fs, grid, noise_variance_term, f, initial_covariance)
    logger.debug(f"Limit cost parts: {parts}")
    return parts["total"]
