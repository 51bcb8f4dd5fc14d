#!/usr/bin/env python3
"""
src/core/conditions.py - Solvability conditions with numeric margins

(H1)  concavity of the adversary's problem: determinant test on e^{At}
      and, independently, existence of the indefinite Riccati solution
(H2)  uniform convexity of the agent's problem: Galerkin Gram matrix of the
      auxiliary quadratic cost on a piecewise-constant control basis, plus
      the computable sufficient bound C_q for H = 0
contraction  sufficient condition for the consistency fixed point (H = 0)
bvp          nonsingularity of the variation-of-constants shooting matrix

Margins are grid-dependent estimates, not certified constants.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg

from .model import ModelParams, require_valid
from .numkit import (
    MatrixOverflow, TimeGrid, frobenius, mat_exp, smallest_eigenvalue, trapezoid, zoh_discretize,
)
from .riccati import RiccatiEscape, RiccatiSolution, solve_indefinite_K, solve_indefinite_P
from ..utils.log_manager import get_logger

logger = get_logger("conditions")

DETERMINANT_THRESHOLD = 1e-10
EIGENVALUE_THRESHOLD = 1e-8
RICCATI_MATCH_TOLERANCE = 1e-6
PAIR_CHUNK = 256


class ConditionError(Exception):
    """Base error for condition checks"""


class H1Violated(ConditionError):
    """The auxiliary two-point problem is not uniquely solvable"""


class NotApplicable(ConditionError):
    """The requested criterion is only stated for H = 0"""


@dataclass
class Verdict:
    """Boolean verdict with the margin it was decided on (holds <=> margin > threshold)"""
    holds: bool
    margin: float
    threshold: float
    applicable: bool = True
    note: str = ""
    details: Dict[str, Any] = field(default_factory=dict, repr=False)

    @classmethod
    def decide(cls, margin: float, threshold: float, note: str = "", **details) -> "Verdict":
        margin = float(margin)
        return cls(holds=bool(margin > threshold), margin=margin, threshold=threshold,
                   note=note, details=details)

    @classmethod
    def not_applicable(cls, note: str) -> "Verdict":
        return cls(holds=False, margin=float("nan"), threshold=float("nan"),
                   applicable=False, note=note)

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {"applicable": self.applicable}
        if self.applicable:
            doc.update(holds=self.holds, margin=self.margin, threshold=self.threshold)
        if self.note:
            doc["note"] = self.note
        for key, value in self.details.items():
            if isinstance(value, (bool, int, float, str)) or value is None:
                doc[key] = value
        return doc


# ========== (H1) ==========

def h1_block_matrix(p: ModelParams) -> np.ndarray:
    """[[Ah + gH, -gI], [gH^2 + Qhat + Ah^T H + H Ah, -(Ah + gH)^T]]"""
    Ah, H, g, I = p.A_hat, p.H, p.gamma, p.I
    M = Ah + g * H
    Q_breve = g * H @ H + p.Qhat + Ah.T @ H + H @ Ah
    return np.block([[M, -g * I], [Q_breve, -M.T]])


def h1_determinants(p: ModelParams, grid: TimeGrid) -> np.ndarray:
    """det of the lower-right n x n block of e^{At} at every knot"""
    n = p.n
    calA = h1_block_matrix(p)
    dets = np.empty(len(grid))
    for k, t in enumerate(grid.knots):
        try:
            E = mat_exp(calA, t)
        except MatrixOverflow as e:
            raise ConditionError(f"(H1) determinant test overflows at t={t:.6g}") from e
        dets[k] = np.linalg.det(E[n:, n:])
    return dets


def check_h1_determinant(p: ModelParams, grid: TimeGrid,
                         threshold: float = DETERMINANT_THRESHOLD) -> Verdict:
    dets = h1_determinants(p, grid)
    k_min = int(np.argmin(dets))
    failing = np.nonzero(dets <= threshold)[0]
    first_failure = float(grid.knots[failing[0]]) if failing.size else None
    verdict = Verdict.decide(dets[k_min], threshold,
                             argmin_time=float(grid.knots[k_min]),
                             first_failure_time=first_failure,
                             determinants=dets)
    logger.condition_event("H1 (determinant)", verdict.holds, verdict.margin)
    return verdict


@dataclass
class RiccatiCheck:
    holds: bool
    escape_time: Optional[float] = None
    solution: Optional[RiccatiSolution] = field(default=None, repr=False)
    resolved: bool = True


def check_h1_riccati(p: ModelParams, grid: TimeGrid, escape_threshold: float = 1e8,
                     det_threshold: float = DETERMINANT_THRESHOLD) -> RiccatiCheck:
    """True iff the indefinite Riccati flow reaches t = 0 without escaping

    A flow that completes is cross-checked against the block determinant on
    the same knots; a vanishing determinant means the grid stepped through
    the escape, and the check fails at T minus the first failing knot.
    """
    try:
        sol = solve_indefinite_P(p, grid, escape_threshold)
    except RiccatiEscape as e:
        logger.condition_event("H1 (Riccati)", False)
        logger.info(str(e))
        return RiccatiCheck(holds=False, escape_time=e.time, resolved=not e.unresolved)
    failing = np.nonzero(h1_determinants(p, grid) <= det_threshold)[0]
    if failing.size:
        t_fail = float(grid.knots[failing[0]])
        logger.warning(f"Riccati flow reached t = 0 on {grid.n_steps} steps but the determinant "
                       f"vanishes at t = {t_fail:.6g}; the grid does not resolve the escape")
        logger.condition_event("H1 (Riccati)", False)
        return RiccatiCheck(holds=False, escape_time=p.T - t_fail, resolved=False)
    logger.condition_event("H1 (Riccati)", True)
    return RiccatiCheck(holds=True, solution=sol)


# ========== Hamiltonian flow ==========

def hamiltonian_matrix(p: ModelParams) -> np.ndarray:
    """[[Ah, gI], [-Qhat, -Ah^T]]; generates the (z, q) part of the auxiliary system"""
    Ah = p.A_hat
    return np.block([[Ah, p.gamma * p.I], [-p.Qhat, -Ah.T]])


def hamiltonian_flow(p: ModelParams, grid: TimeGrid) -> np.ndarray:
    """Phi(t_k) = e^{Ham t_k}, shape (K+1, 2n, 2n)"""
    Ham = hamiltonian_matrix(p)
    return np.stack([mat_exp(Ham, t) for t in grid.knots])


def _partition(Phi: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return Phi[..., :n, :n], Phi[..., :n, n:], Phi[..., n:, :n], Phi[..., n:, n:]


def _state_flow(A: np.ndarray, grid: TimeGrid) -> np.ndarray:
    return np.stack([mat_exp(A, t) for t in grid.knots])


# ========== (H2) Galerkin form ==========

def _auxiliary_system(p: ModelParams) -> Tuple[np.ndarray, np.ndarray]:
    """Drift and input of w = (z_check, z, q) with q(0) = 0"""
    n = p.n
    IG = p.I - p.Gamma
    Ah = p.A_hat
    M = np.zeros((3 * n, 3 * n))
    M[:n, :n] = p.A
    M[n:2 * n, n:2 * n] = Ah
    M[n:2 * n, 2 * n:] = p.gamma * p.I
    M[2 * n:, :n] = -IG.T @ p.Q
    M[2 * n:, n:2 * n] = -p.Qhat
    M[2 * n:, 2 * n:] = -Ah.T
    Bw = np.zeros((3 * n, p.n1))
    Bw[:n] = p.B
    return M, Bw


class AuxiliaryResponse:
    """Exact zero-order-hold responses of the auxiliary system to piecewise-constant controls"""

    def __init__(self, p: ModelParams, grid: TimeGrid, reference: Optional[RiccatiSolution] = None):
        self.p = p
        self.grid = grid
        n = p.n
        M, Bw = _auxiliary_system(p)
        self.E, self.F = zoh_discretize(M, Bw, grid.dt)

        # homogeneous columns: z_check = 0, q(0) = I
        S = np.zeros((len(grid), 3 * n, n))
        S[0, 2 * n:] = np.eye(n)
        for k in range(grid.n_steps):
            S[k + 1] = self.E @ S[k]
        self.S = S
        Phi12_T, Phi22_T = S[-1, n:2 * n], S[-1, 2 * n:]
        self.terminal_matrix = Phi22_T - p.H @ Phi12_T
        self._check_terminal_matrix()
        if reference is not None:
            self._cross_check(reference)

    def _check_terminal_matrix(self):
        cond = np.linalg.cond(self.terminal_matrix)
        if not np.isfinite(cond) or cond > 1e12:
            raise H1Violated(
                f"Phi22(T) - H Phi12(T) is singular (condition number {cond:.3e}); (H1) fails"
            )
        self._lu = scipy.linalg.lu_factor(self.terminal_matrix)

    def _cross_check(self, reference: RiccatiSolution):
        """Riccati value at t = 0 must equal (Phi22 - H Phi12)^-1 (Phi21 - H Phi11) at T"""
        p = self.p
        Phi_T = mat_exp(hamiltonian_matrix(p), p.T)
        P11, P12, P21, P22 = _partition(Phi_T, p.n)
        implied = np.linalg.solve(P22 - p.H @ P12, P21 - p.H @ P11)
        gap = frobenius(implied - reference.at(0))
        scale = 1.0 + frobenius(implied)
        if gap > RICCATI_MATCH_TOLERANCE * scale:
            logger.warning(f"Riccati solution at t=0 differs from the Hamiltonian flow by {gap:.3e}")
        else:
            logger.debug(f"Riccati/Hamiltonian cross-check gap {gap:.3e}")

    def responses(self, controls: np.ndarray) -> np.ndarray:
        """controls: (K, n1, m) cell values -> states (K+1, 3n, m) satisfying q(T) = H(z_check + z)(T)"""
        n = self.p.n
        K = self.grid.n_steps
        controls = np.asarray(controls, dtype=float)
        if controls.ndim == 2:
            controls = controls[:, :, None]
        if controls.shape[:2] != (K, self.p.n1):
            raise ValueError(f"controls must have shape ({K}, {self.p.n1}, m), got {controls.shape}")
        m = controls.shape[2]
        W = np.zeros((K + 1, 3 * n, m))
        for k in range(K):
            W[k + 1] = self.E @ W[k] + self.F @ controls[k]
        wT = W[-1]
        rhs = self.p.H @ (wT[:n] + wT[n:2 * n]) - wT[2 * n:]
        q0 = scipy.linalg.lu_solve(self._lu, rhs)
        return W + np.einsum("kij,jm->kim", self.S, q0)

    def bilinear(self, W1: np.ndarray, U1: np.ndarray, W2: np.ndarray, U2: np.ndarray) -> np.ndarray:
        """Matrix of the auxiliary cost bilinear form between two response families"""
        p, grid = self.p, self.grid
        n = p.n
        IG = p.I - p.Gamma
        Y1 = W1[:, :n] + np.einsum("ij,kjm->kim", IG, W1[:, n:2 * n])
        Y2 = W2[:, :n] + np.einsum("ij,kjm->kim", IG, W2[:, n:2 * n])
        w = grid.trapezoid_weights
        tracking = np.einsum("k,kia,ij,kjb->ab", w, Y1, p.Q, Y2)
        adversary = p.gamma * np.einsum("k,kia,kib->ab", w, W1[:, 2 * n:], W2[:, 2 * n:])
        effort = grid.dt * np.einsum("kia,ij,kjb->ab", U1, p.R, U2)
        e1 = W1[-1, :n] + W1[-1, n:2 * n]
        e2 = W2[-1, :n] + W2[-1, n:2 * n]
        terminal = e1.T @ p.H @ e2
        return tracking - adversary + effort + terminal


def piecewise_constant_basis(grid: TimeGrid, n1: int, basis_size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Indicator controls on basis_size step blocks x n1 unit directions: (K, n1, m) and cell lengths"""
    K = grid.n_steps
    blocks = np.array_split(np.arange(K), min(basis_size, K))
    U = np.zeros((K, n1, len(blocks) * n1))
    lengths = np.empty(len(blocks) * n1)
    for j, steps in enumerate(blocks):
        for c in range(n1):
            U[steps, c, j * n1 + c] = 1.0
            lengths[j * n1 + c] = steps.size * grid.dt
    return U, lengths


@dataclass
class H2Form:
    gram: np.ndarray
    mass: np.ndarray
    basis: np.ndarray = field(repr=False)

    @property
    def delta0(self) -> float:
        """Smallest generalized eigenvalue of (gram, mass)"""
        return float(scipy.linalg.eigh(self.gram, self.mass, eigvals_only=True,
                                       subset_by_index=[0, 0])[0])


def assemble_h2_form(p: ModelParams, K_or_P: Optional[RiccatiSolution], grid: TimeGrid,
                     basis_size: int = 32) -> H2Form:
    """Gram matrix of the auxiliary cost on a piecewise-constant control basis"""
    aux = AuxiliaryResponse(p, grid, K_or_P)
    U, lengths = piecewise_constant_basis(grid, p.n1, basis_size)
    W = aux.responses(U)
    G = aux.bilinear(W, U, W, U)
    asym = frobenius(G - G.T)
    if asym > 1e-9 * (1.0 + frobenius(G)):
        logger.warning(f"Gram matrix asymmetry {asym:.3e}")
    G = 0.5 * (G + G.T)
    return H2Form(gram=G, mass=np.diag(lengths), basis=U)


def h2_form_value(p: ModelParams, nu: np.ndarray, grid: TimeGrid) -> float:
    """Auxiliary cost of one control given by its cell values (K, n1)"""
    aux = AuxiliaryResponse(p, grid)
    U = np.asarray(nu, dtype=float).reshape(grid.n_steps, p.n1, 1)
    W = aux.responses(U)
    return float(aux.bilinear(W, U, W, U)[0, 0])


def stochastic_h2_form_value(p: ModelParams, nu_samples: np.ndarray, grid: TimeGrid) -> float:
    """Auxiliary cost of a random control given as equally weighted samples (S, K, n1)

    The mean field part (z, q) is driven by the mean control only; each sample
    carries its own z_check. Equals h2_form_value when all samples coincide.
    """
    samples = np.asarray(nu_samples, dtype=float)
    if samples.ndim != 3 or samples.shape[1:] != (grid.n_steps, p.n1):
        raise ValueError(f"samples must have shape (S, {grid.n_steps}, {p.n1})")
    n = p.n
    aux = AuxiliaryResponse(p, grid)
    mean_control = samples.mean(axis=0)[:, :, None]
    W_mean = aux.responses(mean_control)
    z, q = W_mean[:, n:2 * n, 0], W_mean[:, 2 * n:, 0]

    E, F = zoh_discretize(p.A, p.B, grid.dt)
    S = samples.shape[0]
    zc = np.zeros((len(grid), S, n))
    for k in range(grid.n_steps):
        zc[k + 1] = zc[k] @ E.T + samples[:, k] @ F.T

    IG = p.I - p.Gamma
    Y = zc + (z @ IG.T)[:, None, :]
    w = grid.trapezoid_weights
    tracking = np.einsum("k,ksi,ij,ksj->", w, Y, p.Q, Y) / S
    adversary = p.gamma * np.einsum("k,ki,ki->", w, q, q)
    effort = grid.dt * np.einsum("ski,ij,skj->", samples, p.R, samples) / S
    eT = zc[-1] + z[-1]
    terminal = np.einsum("si,ij,sj->", eT, p.H, eT) / S
    return float(tracking - adversary + effort + terminal)


def check_h2(p: ModelParams, grid: TimeGrid, basis_size: int = 32,
             K: Optional[RiccatiSolution] = None, threshold: float = EIGENVALUE_THRESHOLD,
             stability_check: bool = True) -> Verdict:
    """Galerkin estimate of delta0, re-checked on a doubled basis"""
    if K is None:
        try:
            K = solve_indefinite_K(p, grid)
        except RiccatiEscape as e:
            raise H1Violated(str(e)) from e
    form = assemble_h2_form(p, K, grid, basis_size)
    delta0 = form.delta0
    details: Dict[str, Any] = {"basis_size": form.gram.shape[0], "delta0_coarse": delta0}
    estimate = delta0
    stable = True
    if stability_check and 2 * basis_size <= grid.n_steps:
        refined = assemble_h2_form(p, None, grid, 2 * basis_size).delta0
        stable = (delta0 > threshold) == (refined > threshold)
        if not stable:
            logger.warning(f"(H2) verdict flips under basis doubling: {delta0:.6g} -> {refined:.6g}")
        estimate = min(delta0, refined)
        details["delta0_refined"] = refined
    details["stable"] = stable
    verdict = Verdict.decide(estimate, threshold, gram=form.gram, **details)
    logger.condition_event("H2 (Galerkin)", verdict.holds, verdict.margin)
    return verdict


# ========== Sufficient bound C_q ==========

@dataclass
class CqBound:
    b: Dict[str, float]
    C_q: float
    verdict: Verdict


def compute_Cq_bound(p: ModelParams, grid: TimeGrid, threshold: float = EIGENVALUE_THRESHOLD) -> CqBound:
    """C_q = 2 (b1 b2 b3 b4)^2 T^2 + (b1 b3 b5)^2 T^4 / 6; (H2) holds when R - gamma C_q I > 0"""
    if np.any(p.H):
        raise NotApplicable("the C_q bound is only available for H = 0")
    n = p.n
    Phi = hamiltonian_flow(p, grid)
    Phi22 = _partition(Phi, n)[3]
    Phi22_T_inv = np.linalg.inv(Phi22[-1])
    b1 = max(frobenius(M) for M in Phi22)
    b2 = max(frobenius(M @ Phi22_T_inv) for M in Phi22)
    b3 = frobenius(p.Q @ (p.I - p.Gamma))
    eAB = np.array([frobenius(E @ p.B) for E in _state_flow(p.A, grid)])
    b4 = float(trapezoid(eAB, grid))
    b5 = float(eAB.max())
    T = p.T
    C_q = 2.0 * (b1 * b2 * b3 * b4) ** 2 * T ** 2 + (b1 * b3 * b5) ** 2 * T ** 4 / 6.0
    margin = smallest_eigenvalue(p.R - p.gamma * C_q * np.eye(p.n1))
    verdict = Verdict.decide(margin, threshold, note="sufficient only")
    logger.condition_event("H2 (C_q bound)", verdict.holds, margin)
    return CqBound(b={"b1": b1, "b2": b2, "b3": b3, "b4": b4, "b5": b5}, C_q=float(C_q), verdict=verdict)


# ========== Contraction ==========

@dataclass
class ContractionCheck:
    c: Dict[str, float]
    lhs: float
    verdict: Verdict


def _max_transition_norm(F: np.ndarray) -> float:
    """max over knot pairs of |F(t) F(s)^-1|"""
    F_inv = np.linalg.inv(F)
    best = 0.0
    for start in range(0, F.shape[0], PAIR_CHUNK):
        block = np.einsum("aij,bjk->abik", F[start:start + PAIR_CHUNK], F_inv)
        best = max(best, float(np.sqrt((block ** 2).sum(axis=(2, 3))).max()))
    return best


def _tail_integrals(norms: np.ndarray, grid: TimeGrid, weight: np.ndarray) -> float:
    """max over k of the trapezoid of |e^{A(s - t_k)}| weight(s) for s in [t_k, T]"""
    K = grid.n_steps
    best = 0.0
    for k in range(K):
        span = K - k
        vals = norms[:span + 1] * weight[k:]
        best = max(best, float(np.dot(vals[:-1] + vals[1:], np.full(span, 0.5 * grid.dt))))
    return best


def check_contraction(p: ModelParams, K: RiccatiSolution, grid: TimeGrid) -> ContractionCheck:
    """c2 |B R^-1 B^T| |Q(I - Gamma)| (c3 + gamma c1 c2 c4) < 1 (sufficient only)"""
    if np.any(p.H):
        raise NotApplicable("the contraction condition is stated for H = 0")
    if K.grid != grid:
        raise ConditionError("Riccati solution and grid differ")
    n = p.n
    c1 = float(K.P.norms().max())

    # fundamental matrix of x' = (Ah - gamma K) x from the Hamiltonian flow
    Phi = hamiltonian_flow(p, grid)
    P11, P12, _, _ = _partition(Phi, n)
    F = P11 - P12 @ K.at(0)
    c2 = _max_transition_norm(F)

    norms = np.array([frobenius(E) for E in _state_flow(p.A, grid)])
    s = grid.knots
    c3 = _tail_integrals(norms, grid, s)
    c4 = _tail_integrals(norms, grid, p.T * s - 0.5 * s ** 2)

    lhs = c2 * frobenius(p.BRB) * frobenius(p.Q @ (p.I - p.Gamma)) * (c3 + p.gamma * c1 * c2 * c4)
    verdict = Verdict.decide(1.0 - lhs, 0.0, note="sufficient only", lhs=float(lhs))
    logger.condition_event("contraction", verdict.holds, verdict.margin)
    if not verdict.holds:
        logger.warning(f"contraction lhs {lhs:.6g} >= 1; existence is not excluded")
    return ContractionCheck(c={"c1": c1, "c2": c2, "c3": c3, "c4": c4}, lhs=float(lhs), verdict=verdict)


# ========== BVP solvability ==========

def consistency_matrix(p: ModelParams) -> Tuple[np.ndarray, np.ndarray]:
    """Drift and forcing of the consistency system in (m, p, y)"""
    Ah, IG = p.A_hat, p.I - p.Gamma
    Z = np.zeros((p.n, p.n))
    At = np.block([
        [Ah, p.gamma * p.I, p.BRB],
        [-p.Qhat, -Ah.T, Z],
        [p.Q @ IG, Z, -p.A.T],
    ])
    eta_t = np.concatenate([np.zeros(p.n), IG.T @ p.Q @ p.eta, -p.Q @ p.eta])
    return At, eta_t


def terminal_selector(p: ModelParams) -> np.ndarray:
    """L with L (m, p, y)(T) = 0 for p(T) = H m(T), y(T) = -H m(T)"""
    n = p.n
    Z = np.zeros((n, n))
    return np.block([[-p.H, p.I, Z], [p.H, Z, p.I]])


def theta_tilde(p: ModelParams, T: Optional[float] = None) -> np.ndarray:
    n = p.n
    At, _ = consistency_matrix(p)
    Theta = mat_exp(At, p.T if T is None else T)
    return terminal_selector(p) @ Theta[:, n:]


def check_bvp_solvability(p: ModelParams, threshold: float = DETERMINANT_THRESHOLD) -> Verdict:
    Tt = theta_tilde(p)
    det = float(np.linalg.det(Tt))
    scale = max(1.0, frobenius(Tt) ** Tt.shape[0])
    verdict = Verdict.decide(abs(det) / scale, threshold, det_theta=det)
    logger.condition_event("BVP solvability", verdict.holds, det)
    return verdict


# ========== Report ==========

@dataclass
class ConditionsReport:
    h1: Verdict
    h1_method: str
    h2: Verdict
    h2_sufficient_Cq: Verdict
    contraction: Verdict
    bvp: Verdict
    constants: Dict[str, float] = field(default_factory=dict)
    h1_escape_time: Optional[float] = None
    warnings: List[str] = field(default_factory=list)

    @property
    def required_hold(self) -> bool:
        """(H1), (H2) and BVP solvability; contraction is sufficient only"""
        return self.h1.holds and self.h2.holds and self.bvp.holds

    def failed(self) -> List[str]:
        names = []
        for name in ("h1", "h2", "bvp"):
            if not getattr(self, name).holds:
                names.append(name)
        return names

    def to_dict(self) -> Dict[str, Any]:
        return {
            "h1": self.h1.to_dict(),
            "h1_method": self.h1_method,
            "h1_escape_time": self.h1_escape_time,
            "h2": self.h2.to_dict(),
            "h2_sufficient_Cq": self.h2_sufficient_Cq.to_dict(),
            "contraction": self.contraction.to_dict(),
            "bvp": self.bvp.to_dict(),
            "constants": dict(self.constants),
            "required_hold": self.required_hold,
            "warnings": list(self.warnings),
        }


def build_conditions_report(p: ModelParams, grid: TimeGrid, basis_size: int = 32,
                            det_threshold: float = DETERMINANT_THRESHOLD,
                            eig_threshold: float = EIGENVALUE_THRESHOLD,
                            escape_threshold: float = 1e8,
                            stability_check: bool = True) -> ConditionsReport:
    """Run every check; failures become verdicts, not exceptions"""
    require_valid(p)
    warnings: List[str] = []
    constants: Dict[str, float] = {}

    h1 = check_h1_determinant(p, grid, det_threshold)
    ric = check_h1_riccati(p, grid, escape_threshold)
    if h1.holds != ric.holds:
        msg = "(H1) determinant and Riccati criteria disagree on this grid"
        warnings.append(msg)
        logger.warning(msg)
        h1 = Verdict(holds=False, margin=min(h1.margin, 0.0), threshold=h1.threshold,
                     note=msg, details=h1.details)

    if h1.holds:
        try:
            h2 = check_h2(p, grid, basis_size, K=ric.solution, threshold=eig_threshold,
                          stability_check=stability_check)
        except H1Violated as e:
            h2 = Verdict(holds=False, margin=0.0, threshold=eig_threshold, note=str(e))
    else:
        h2 = Verdict(holds=False, margin=0.0, threshold=eig_threshold, note="not assessed: (H1) fails")
    if not h2.details.get("stable", True):
        warnings.append("(H2) verdict unstable under basis doubling")

    try:
        cq = compute_Cq_bound(p, grid, eig_threshold)
        constants.update(cq.b)
        constants["C_q"] = cq.C_q
        cq_verdict = cq.verdict
        if cq_verdict.holds and not h2.holds and h1.holds:
            warnings.append("C_q bound holds but the Galerkin (H2) estimate does not")
    except NotApplicable as e:
        cq_verdict = Verdict.not_applicable(str(e))

    if ric.holds:
        try:
            cc = check_contraction(p, ric.solution, grid)
            constants.update(cc.c)
            constants["contraction_lhs"] = cc.lhs
            contraction = cc.verdict
        except NotApplicable as e:
            contraction = Verdict.not_applicable(str(e))
    else:
        contraction = Verdict(holds=False, margin=0.0, threshold=0.0, note="not assessed: Riccati K escapes")

    bvp = check_bvp_solvability(p, det_threshold)
    constants["det_theta"] = bvp.details["det_theta"]

    report = ConditionsReport(h1=h1, h1_method="Both", h2=h2, h2_sufficient_Cq=cq_verdict,
                              contraction=contraction, bvp=bvp, constants=constants,
                              h1_escape_time=ric.escape_time, warnings=warnings)
    logger.info(f"Conditions: h1={h1.holds} h2={h2.holds} contraction={contraction.holds} bvp={bvp.holds}")
    return report
