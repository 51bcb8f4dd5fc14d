#!/usr/bin/env python3
"""
src/core/riccati.py - Riccati differential equations on [0, T]

Three flavours share one backward RK4 driver:
- indefinite P:  P' + Ah^T P + P Ah - gamma P^2 - Qhat = 0,  P(T) = -H   (Ah = A + G)
- indefinite K:  same equation, used to decouple the consistency system
- standard P:    P' + A^T P + P A - P B R^-1 B^T P + Q = 0,  P(T) = H
The indefinite flow can blow up in finite time; that is reported, not hidden.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .model import ModelParams
from .numkit import (
    EscapeTime, TimeGrid, Trajectory, central_difference_residual, ode_rk4, symmetrize,
    ESCAPE_THRESHOLD,
)
from ..utils.log_manager import get_logger

logger = get_logger("riccati")

# |h k_i| beyond this multiple of 1 + |P|: the step no longer resolves the blow-up
INDEFINITE_STEP_RATIO = 50.0


class RiccatiKind(str, Enum):
    INDEFINITE_P = "IndefiniteP"
    INDEFINITE_K = "IndefiniteK"
    STANDARD = "Standard"


class RiccatiEscape(EscapeTime):
    """Indefinite Riccati flow escaped before reaching t = 0"""

    def __init__(self, kind: RiccatiKind, cause: EscapeTime):
        self.kind = kind
        super().__init__(cause.knot, cause.time, cause.norm, unresolved=cause.unresolved)
        self.args = (f"(H1) fails by criterion (ii): {kind.value} Riccati solution escapes "
                     f"at knot {cause.knot} (t={cause.time:.6g})",)


class OscillatoryRegime(ValueError):
    """Ah^2 - gamma*Qhat <= 0: the hyperbolic closed form does not apply"""


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    kind: RiccatiKind
    P: Trajectory
    terminal: np.ndarray

    @property
    def grid(self) -> TimeGrid:
        return self.P.grid

    def at(self, k: int) -> np.ndarray:
        return self.P.values[k]


def indefinite_field(p: ModelParams) -> Callable[[float, np.ndarray], np.ndarray]:
    Ah, Qh, g = p.A_hat, p.Qhat, p.gamma

    def field(t: float, P: np.ndarray) -> np.ndarray:
        return -(Ah.T @ P + P @ Ah) + g * (P @ P) + Qh

    return field


def standard_field(p: ModelParams) -> Callable[[float, np.ndarray], np.ndarray]:
    A, S, Q = p.A, p.BRB, p.Q

    def field(t: float, P: np.ndarray) -> np.ndarray:
        return -(A.T @ P + P @ A) + P @ S @ P - Q

    return field


def _solve_backward(kind: RiccatiKind, field, terminal: np.ndarray, grid: TimeGrid,
                    escape_threshold: float) -> RiccatiSolution:
    step_ratio = None if kind == RiccatiKind.STANDARD else INDEFINITE_STEP_RATIO
    try:
        traj = ode_rk4(field, terminal, grid, direction="backward",
                       escape_threshold=escape_threshold, project=symmetrize,
                       max_step_ratio=step_ratio)
    except EscapeTime as e:
        logger.solver_event("riccati", f"{kind.value} escape", f"knot={e.knot} t={e.time:.6g}")
        raise RiccatiEscape(kind, e) from e
    logger.debug(f"{kind.value} Riccati solved on {grid.n_steps} steps, "
                 f"|P(0)|={np.linalg.norm(traj.initial):.6g}")
    return RiccatiSolution(kind=kind, P=traj, terminal=np.array(terminal))


def solve_indefinite_P(p: ModelParams, grid: TimeGrid,
                       escape_threshold: float = ESCAPE_THRESHOLD) -> RiccatiSolution:
    return _solve_backward(RiccatiKind.INDEFINITE_P, indefinite_field(p), -np.array(p.H),
                           grid, escape_threshold)


def solve_indefinite_K(p: ModelParams, grid: TimeGrid,
                       escape_threshold: float = ESCAPE_THRESHOLD) -> RiccatiSolution:
    return _solve_backward(RiccatiKind.INDEFINITE_K, indefinite_field(p), -np.array(p.H),
                           grid, escape_threshold)


def solve_standard_P(p: ModelParams, grid: TimeGrid,
                     escape_threshold: float = ESCAPE_THRESHOLD) -> RiccatiSolution:
    """Always solvable for R > 0, Q, H >= 0; an escape here means a bug"""
    return _solve_backward(RiccatiKind.STANDARD, standard_field(p), np.array(p.H),
                           grid, escape_threshold)


def riccati_residual(sol: RiccatiSolution, p: ModelParams) -> float:
    """Central-difference residual of the defining ODE, relative to 1 + max|P|"""
    field = standard_field(p) if sol.kind == RiccatiKind.STANDARD else indefinite_field(p)
    scale = 1.0 + sol.P.sup_norm()
    return central_difference_residual(sol.P, field) / scale


# ========== Scalar closed form ==========

@dataclass(frozen=True)
class ScalarClosedForm:
    """Hyperbolic solution of the scalar indefinite equation with H = 0"""
    A_hat: float
    Q_hat: float
    gamma: float
    T: float
    alpha: float
    lambda1: float
    lambda2: float
    t_max: float

    def __call__(self, t):
        """P(t) = -Qhat (e^{a s} - e^{-a s}) / (l2 e^{a s} - l1 e^{-a s}),  s = t - T"""
        t = np.asarray(t, dtype=float)
        if self.Q_hat == 0.0:
            return np.zeros_like(t)
        s = t - self.T
        ep, em = np.exp(self.alpha * s), np.exp(-self.alpha * s)
        return -self.Q_hat * (ep - em) / (self.lambda2 * ep - self.lambda1 * em)


def scalar_closed_form(A_hat: float, Q_hat: float, gamma: float, T: float) -> ScalarClosedForm:
    """alpha, lambda1/2, escape horizon and evaluator of the scalar indefinite P"""
    A_hat, Q_hat, gamma, T = float(A_hat), float(Q_hat), float(gamma), float(T)
    if Q_hat == 0.0:
        alpha = abs(A_hat)
        return ScalarClosedForm(A_hat, Q_hat, gamma, T, alpha,
                                -A_hat + alpha, -A_hat - alpha, np.inf)
    disc = A_hat * A_hat - gamma * Q_hat
    if disc <= 0.0:
        raise OscillatoryRegime(f"Ah^2 - gamma*Qhat = {disc:.6g} <= 0")
    alpha = float(np.sqrt(disc))
    lam1 = -A_hat + alpha
    lam2 = -A_hat - alpha
    ratio = lam2 / lam1 if lam1 != 0.0 else np.inf
    # escape needs e^{2 alpha s} = lam1/lam2 for some s < 0
    t_max = float(np.log(ratio) / (2.0 * alpha)) if np.isfinite(ratio) and ratio > 1.0 else np.inf
    return ScalarClosedForm(A_hat, Q_hat, gamma, T, alpha, lam1, lam2, t_max)


def closed_form_for(p: ModelParams) -> Optional[ScalarClosedForm]:
    """Closed form for a scalar datum with H = 0, else None"""
    if p.n != 1 or np.any(p.H):
        return None
    return scalar_closed_form(p.A_hat[0, 0], p.Qhat[0, 0], p.gamma, p.T)
