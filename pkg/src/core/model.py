#!/usr/bin/env python3
"""
src/core/model.py - Game parameter datum, validation and initial states

ModelParams holds the constant datum (A, B, G, D; Gamma, eta, Q, R, gamma, H)
plus horizon T and initial mean m0. validate() is total: it reports every
violated invariant instead of stopping at the first one.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np

from .numkit import as_matrix, as_vector, frobenius, smallest_eigenvalue, NumkitError


PSD_TOLERANCE = 1e-10


class ModelValidationError(ValueError):
    """Raised by require_valid with the full list of violations"""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("invalid model: " + "; ".join(self.violations))


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Constant parameter datum shared by all agents"""
    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    D: np.ndarray
    Gamma: np.ndarray
    eta: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    gamma: float
    H: np.ndarray
    T: float
    m0: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "G", "D", "Gamma", "Q", "R", "H"):
            object.__setattr__(self, name, _readonly(as_matrix(getattr(self, name), name)))
        for name in ("eta", "m0"):
            object.__setattr__(self, name, _readonly(as_vector(getattr(self, name), name)))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "T", float(self.T))

    @classmethod
    def scalar(cls, A: float, B: float, Q: float, R: float, gamma: float, T: float,
               G: float = 0.0, D: float = 0.0, Gamma: float = 0.0, eta: float = 0.0,
               H: float = 0.0, m0: float = 0.0) -> "ModelParams":
        """Convenience constructor for one-dimensional data"""
        return cls(A=A, B=B, G=G, D=D, Gamma=Gamma, eta=eta, Q=Q, R=R,
                   gamma=gamma, H=H, T=T, m0=m0)

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n1(self) -> int:
        return self.B.shape[1]

    @property
    def n2(self) -> int:
        return self.D.shape[1]

    @property
    def A_hat(self) -> np.ndarray:
        return self.A + self.G

    @property
    def I(self) -> np.ndarray:
        return np.eye(self.n)

    @property
    def R_inv(self) -> np.ndarray:
        return np.linalg.inv(self.R)

    @property
    def BRB(self) -> np.ndarray:
        """B R^-1 B^T"""
        return self.B @ np.linalg.solve(self.R, self.B.T)

    @property
    def Qhat(self) -> np.ndarray:
        """(I - Gamma)^T Q (I - Gamma)"""
        IG = self.I - self.Gamma
        Qh = IG.T @ self.Q @ IG
        return 0.5 * (Qh + Qh.T)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "A": self.A.tolist(), "B": self.B.tolist(), "G": self.G.tolist(),
            "D": self.D.tolist(), "Gamma": self.Gamma.tolist(), "eta": self.eta.tolist(),
            "Q": self.Q.tolist(), "R": self.R.tolist(), "gamma": self.gamma,
            "H": self.H.tolist(), "T": self.T, "m0": self.m0.tolist(),
        }


@dataclass(frozen=True, eq=False)
class DerivedDims:
    n: int
    n1: int
    n2: int
    Qhat: np.ndarray


@dataclass
class ValidationResult:
    """Outcome of validate(): READY with dims, or BROKEN with errors"""
    status: str
    dims: Optional[DerivedDims] = None
    errors: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "READY"


def _check_shape(errors: List[str], name: str, arr: np.ndarray, shape) -> bool:
    if arr.shape != shape:
        errors.append(f"{name} has shape {arr.shape}, expected {shape}")
        return False
    return True


def _check_semidefinite(errors: List[str], name: str, M: np.ndarray, strict: bool = False):
    scale = 1.0 + frobenius(M)
    if frobenius(M - M.T) > 1e-8 * scale:
        errors.append(f"{name} is not symmetric")
        return
    lam = smallest_eigenvalue(M)
    if strict and lam <= PSD_TOLERANCE * scale:
        errors.append(f"{name} must be positive definite, smallest eigenvalue {lam:.6g}")
    elif not strict and lam < -PSD_TOLERANCE * scale:
        errors.append(f"{name} must be positive semidefinite, smallest eigenvalue {lam:.6g}")


def validate(p: ModelParams) -> ValidationResult:
    """Check dimensions, definiteness and positivity; never raises"""
    result = ValidationResult(status="BROKEN")
    errors = result.errors
    try:
        n = p.A.shape[0]
        n1 = p.B.shape[1]
        n2 = p.D.shape[1]
        dims_ok = all([
            _check_shape(errors, "A", p.A, (n, n)),
            _check_shape(errors, "B", p.B, (n, n1)),
            _check_shape(errors, "G", p.G, (n, n)),
            _check_shape(errors, "D", p.D, (n, n2)),
            _check_shape(errors, "Gamma", p.Gamma, (n, n)),
            _check_shape(errors, "eta", p.eta, (n,)),
            _check_shape(errors, "Q", p.Q, (n, n)),
            _check_shape(errors, "R", p.R, (n1, n1)),
            _check_shape(errors, "H", p.H, (n, n)),
            _check_shape(errors, "m0", p.m0, (n,)),
        ])
        if dims_ok:
            _check_semidefinite(errors, "Q", p.Q)
            _check_semidefinite(errors, "H", p.H)
            _check_semidefinite(errors, "R", p.R, strict=True)
        if not (np.isfinite(p.gamma) and p.gamma > 0):
            errors.append(f"gamma must be positive, got {p.gamma}")
        if not (np.isfinite(p.T) and p.T > 0):
            errors.append(f"T must be positive, got {p.T}")
        if not errors:
            result.dims = DerivedDims(n=n, n1=n1, n2=n2, Qhat=_readonly(p.Qhat))
            result.status = "READY"
            if not np.any(p.D):
                result.warnings.append("D = 0: agents are noiseless")
    except (NumkitError, ValueError, TypeError, IndexError, np.linalg.LinAlgError) as e:
        errors.append(f"validation aborted: {e}")
    return result


def require_valid(p: ModelParams) -> DerivedDims:
    result = validate(p)
    if not result.ok:
        raise ModelValidationError(result.errors)
    return result.dims


# ========== Initial states ==========

class InitMode(str, Enum):
    DETERMINISTIC = "deterministic"
    SHARED = "shared"
    RANDOM = "random"


@dataclass(frozen=True, eq=False)
class InitSpec:
    """How agents start: one shared value, an explicit list, or independent random draws"""
    mode: InitMode = InitMode.SHARED
    value: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = None
    means: Optional[np.ndarray] = None
    covariances: Optional[np.ndarray] = None

    @classmethod
    def shared(cls, value=None) -> "InitSpec":
        return cls(InitMode.SHARED, value=None if value is None else _readonly(as_vector(value)))

    @classmethod
    def deterministic(cls, states) -> "InitSpec":
        arr = np.array(states, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        return cls(InitMode.DETERMINISTIC, states=_readonly(arr))

    @classmethod
    def random(cls, means, covariances) -> "InitSpec":
        mu = np.array(means, dtype=float)
        if mu.ndim <= 1:
            mu = mu.reshape(1, -1)
        cov = np.array(covariances, dtype=float)
        if cov.ndim <= 2:
            n = mu.shape[1]
            cov = cov.reshape(1, n, n)
        return cls(InitMode.RANDOM, means=_readonly(mu), covariances=_readonly(cov))

    def check(self, n: int, N: Optional[int] = None) -> List[str]:
        errors = []
        if self.mode == InitMode.SHARED and self.value is not None and self.value.shape != (n,):
            errors.append(f"shared initial value has shape {self.value.shape}, expected ({n},)")
        if self.mode == InitMode.DETERMINISTIC:
            if self.states is None or self.states.shape[1:] != (n,):
                errors.append(f"deterministic states must be a list of {n}-vectors")
            elif N is not None and self.states.shape[0] != N:
                errors.append(f"{self.states.shape[0]} initial states given for N={N} agents")
        if self.mode == InitMode.RANDOM:
            if self.means is None or self.means.shape[1:] != (n,):
                errors.append(f"random means must be {n}-vectors")
            if self.covariances is None or self.covariances.shape[1:] != (n, n):
                errors.append(f"random covariances must be {n}x{n}")
            else:
                for i, S in enumerate(self.covariances):
                    if smallest_eigenvalue(S) < -PSD_TOLERANCE * (1.0 + frobenius(S)):
                        errors.append(f"covariance #{i} is not positive semidefinite")
        return errors

    def means_for(self, N: int, m0: np.ndarray) -> np.ndarray:
        """E x_i(0) for i = 0..N-1, shape (N, n)"""
        n = m0.shape[0]
        errors = self.check(n, N)
        if errors:
            raise ModelValidationError(errors)
        if self.mode == InitMode.SHARED:
            value = m0 if self.value is None else self.value
            return np.tile(value, (N, 1))
        if self.mode == InitMode.DETERMINISTIC:
            return np.array(self.states)
        return self.means[np.arange(N) % self.means.shape[0]]

    def covariances_for(self, N: int, n: int) -> np.ndarray:
        if self.mode != InitMode.RANDOM:
            return np.zeros((N, n, n))
        return self.covariances[np.arange(N) % self.covariances.shape[0]]

    def sample(self, N: int, m0: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Realized x_i(0); random mode draws one Gaussian state per agent"""
        means = self.means_for(N, m0)
        if self.mode != InitMode.RANDOM:
            return means
        if rng is None:
            raise ValueError("random initial states need a generator")
        covs = self.covariances_for(N, m0.shape[0])
        states = np.empty_like(means)
        for i in range(N):
            if np.any(covs[i]):
                states[i] = rng.multivariate_normal(means[i], covs[i], method="eigh")
            else:
                states[i] = means[i]
        return states

    def to_dict(self) -> Dict[str, Any]:
        doc: Dict[str, Any] = {"mode": self.mode.value}
        if self.value is not None:
            doc["value"] = self.value.tolist()
        if self.states is not None:
            doc["states"] = self.states.tolist()
        if self.means is not None:
            doc["means"] = self.means.tolist()
        if self.covariances is not None:
            doc["covariances"] = self.covariances.tolist()
        return doc
