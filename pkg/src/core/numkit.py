#!/usr/bin/env python3
"""
src/core/numkit.py - Dense linear algebra and ODE/SDE kernels

Small fixed-step integrators and matrix helpers shared by every solver:
- TimeGrid / Trajectory carriers (immutable, finite-checked)
- matrix exponential with overflow guard
- classical RK4 (forward or backward) with finite-escape detection
- Euler-Maruyama over batched states
- symmetric smallest eigenvalue, quadrature, ODE residuals
- counter-based noise streams keyed by (seed, replication, agent)
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.integrate import trapezoid as _trapezoid


ESCAPE_THRESHOLD = 1e8
OVERFLOW_LIMIT = 1e300


class NumkitError(Exception):
    """Base error for numerical kernels"""


class ShapeError(NumkitError, ValueError):
    """Incompatible or unexpected array shape"""


class NonFiniteError(NumkitError, ValueError):
    """NaN or Inf where a finite value is required"""


class MatrixOverflow(NumkitError, OverflowError):
    """Matrix exponential entries beyond the representable range"""


class EscapeTime(NumkitError):
    """State norm crossed the escape threshold, or one step stopped resolving the flow"""

    def __init__(self, knot: int, time: float, norm: float, agent: Optional[int] = None,
                 unresolved: bool = False):
        self.knot = knot
        self.time = time
        self.norm = norm
        self.agent = agent
        self.unresolved = unresolved
        where = f"knot {knot} (t={time:.6g})"
        if agent is not None:
            where += f", agent {agent}"
        if unresolved:
            super().__init__(f"finite escape at {where}: RK4 stage {norm:.3e} times the state scale")
        else:
            super().__init__(f"finite escape at {where}: norm {norm:.3e}")


def check_finite(value: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return value


def as_matrix(value, name: str = "matrix") -> np.ndarray:
    """Coerce scalars and nested rows into a finite 2-D float array"""
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a matrix, got shape {arr.shape}")
    return check_finite(arr, name)


def as_vector(value, name: str = "vector") -> np.ndarray:
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim == 2 and 1 in arr.shape:
        arr = arr.reshape(-1)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be a vector, got shape {arr.shape}")
    return check_finite(arr, name)


def frobenius(value: np.ndarray) -> float:
    """Frobenius norm for matrices, Euclidean norm for vectors"""
    return float(np.linalg.norm(np.asarray(value, dtype=float)))


def symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + np.swapaxes(S, -1, -2))


# ========== Time grid and trajectories ==========

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = t0 + k*(t1-t0)/n_steps"""
    t1: float
    n_steps: int = 2000
    t0: float = 0.0

    def __post_init__(self):
        if not isinstance(self.n_steps, (int, np.integer)) or self.n_steps < 2:
            raise ValueError(f"n_steps must be an integer >= 2, got {self.n_steps!r}")
        if not (np.isfinite(self.t0) and np.isfinite(self.t1)) or self.t1 <= self.t0:
            raise ValueError(f"grid needs finite t0 < t1, got [{self.t0}, {self.t1}]")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    @cached_property
    def knots(self) -> np.ndarray:
        knots = np.linspace(self.t0, self.t1, self.n_steps + 1)
        knots.setflags(write=False)
        return knots

    @cached_property
    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        w.setflags(write=False)
        return w

    def __len__(self) -> int:
        return self.n_steps + 1

    def half_index(self, t: float) -> int:
        """Index of t counted in half steps; raises if t is off the half grid"""
        h = int(round(2.0 * (t - self.t0) / self.dt))
        if abs(self.t0 + 0.5 * h * self.dt - t) > 1e-9 * max(1.0, abs(self.t1)):
            raise ValueError(f"time {t} is not a knot or a midpoint of the grid")
        return h

    def knot_index(self, t: float) -> int:
        h = self.half_index(t)
        if h % 2:
            raise ValueError(f"time {t} is a midpoint, not a knot")
        return h // 2

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t1, self.n_steps * factor, self.t0)


class Trajectory:
    """One value (vector or matrix) per knot of a TimeGrid; read-only"""

    def __init__(self, grid: TimeGrid, values):
        arr = np.array(values, dtype=float)
        if arr.ndim == 0 or arr.shape[0] != len(grid):
            raise ShapeError(
                f"trajectory needs {len(grid)} knot values, got shape {arr.shape}"
            )
        check_finite(arr, "trajectory")
        arr.setflags(write=False)
        self.grid = grid
        self.values = arr
        self._midpoints: Optional[np.ndarray] = None

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "Trajectory":
        value = np.asarray(value, dtype=float)
        return cls(grid, np.broadcast_to(value, (len(grid),) + value.shape))

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, k):
        return self.values[k]

    def __repr__(self) -> str:
        return f"Trajectory(n_steps={self.grid.n_steps}, shape={self.shape})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape[1:]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def norms(self) -> np.ndarray:
        flat = self.values.reshape(len(self), -1)
        return np.linalg.norm(flat, axis=1)

    def sup_norm(self) -> float:
        return float(self.norms().max())

    def distance(self, other: "Trajectory") -> float:
        """Sup over knots of the norm of the difference"""
        if other.grid != self.grid:
            raise ShapeError("trajectories live on different grids")
        diff = (self.values - other.values).reshape(len(self), -1)
        return float(np.linalg.norm(diff, axis=1).max())

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "Trajectory":
        return Trajectory(self.grid, np.array([fn(v) for v in self.values]))

    def midpoints(self) -> np.ndarray:
        """Values at t_k + dt/2 by 4-point cubic interpolation (one-sided at the ends)"""
        if self._midpoints is None:
            f = self.values
            if len(self) < 4:
                mid = 0.5 * (f[:-1] + f[1:])
            else:
                mid = np.empty((len(self) - 1,) + self.shape)
                mid[1:-1] = (-f[:-3] + 9.0 * f[1:-2] + 9.0 * f[2:-1] - f[3:]) / 16.0
                mid[0] = (5.0 * f[0] + 15.0 * f[1] - 5.0 * f[2] + f[3]) / 16.0
                mid[-1] = (f[-4] - 5.0 * f[-3] + 15.0 * f[-2] + 5.0 * f[-1]) / 16.0
            mid.setflags(write=False)
            self._midpoints = mid
        return self._midpoints

    def sampler(self) -> Callable[[float], np.ndarray]:
        """Lookup t -> value on knots and midpoints (the points RK4 visits)"""
        grid = self.grid
        mid = self.midpoints()

        def sample(t: float) -> np.ndarray:
            h = grid.half_index(t)
            return self.values[h // 2] if h % 2 == 0 else mid[h // 2]

        return sample

    def columns(self, prefix: str) -> dict:
        """Flatten into named 1-D columns for CSV export"""
        flat = self.values.reshape(len(self), -1)
        if flat.shape[1] == 1:
            return {prefix: flat[:, 0]}
        if len(self.shape) == 2:
            rows, cols = self.shape
            names = [f"{prefix}_{i}_{j}" for i in range(rows) for j in range(cols)]
        else:
            names = [f"{prefix}_{i}" for i in range(flat.shape[1])]
        return {name: flat[:, c] for c, name in enumerate(names)}


# ========== Matrix kernels ==========

def mat_exp(M, t: float = 1.0) -> np.ndarray:
    """e^{Mt} by scaling-and-squaring Pade (scipy.linalg.expm)"""
    M = as_matrix(M, "M")
    if M.shape[0] != M.shape[1]:
        raise ShapeError(f"matrix exponential needs a square matrix, got {M.shape}")
    if not np.isfinite(t):
        raise NonFiniteError("exponent time must be finite")
    with np.errstate(over="ignore", invalid="ignore"):
        E = scipy.linalg.expm(M * t)
    if not np.all(np.isfinite(E)) or np.max(np.abs(E)) > OVERFLOW_LIMIT:
        raise MatrixOverflow(f"e^(Mt) overflows for t={t}, |M|={frobenius(M):.3e}")
    return E


def zoh_discretize(M: np.ndarray, Bm: np.ndarray, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Exact step maps (e^{M dt}, int_0^dt e^{Ms} ds Bm) for piecewise-constant input"""
    d, m = M.shape[0], Bm.shape[1]
    aug = np.zeros((d + m, d + m))
    aug[:d, :d] = M
    aug[:d, d:] = Bm
    E = mat_exp(aug, dt)
    return E[:d, :d], E[:d, d:]


def smallest_eigenvalue(S) -> float:
    S = as_matrix(S, "S")
    if S.shape[0] != S.shape[1]:
        raise ShapeError(f"eigenvalue of non-square matrix {S.shape}")
    scale = max(1.0, frobenius(S))
    if frobenius(S - S.T) > 1e-8 * scale:
        raise NumkitError("matrix is not symmetric within 1e-8 relative")
    return float(scipy.linalg.eigvalsh(symmetrize(S), subset_by_index=[0, 0])[0])


def trapezoid(values: np.ndarray, grid: TimeGrid) -> np.ndarray:
    return _trapezoid(np.asarray(values, dtype=float), dx=grid.dt, axis=0)


# ========== Integrators ==========

Field = Callable[[float, np.ndarray], np.ndarray]


def _escaped(state: np.ndarray, threshold: float) -> Tuple[bool, float]:
    norm = float(np.linalg.norm(state)) if np.all(np.isfinite(state)) else np.inf
    return norm > threshold, norm


def ode_rk4(field: Field, init, grid: TimeGrid, direction: str = "forward",
            escape_threshold: float = ESCAPE_THRESHOLD,
            project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
            max_step_ratio: Optional[float] = None) -> Trajectory:
    """Classical RK4 on the grid; backward runs from t1 down to t0 with init at t1

    With max_step_ratio set, a step whose largest stage |h k_i| exceeds
    max_step_ratio * (1 + |x|) is treated as an escape: near a pole a coarse
    step under-resolves the blow-up and lands on a finite value.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be forward or backward, got {direction!r}")
    x = np.array(init, dtype=float)
    check_finite(x, "initial state")
    K = grid.n_steps
    t = grid.knots
    out = np.empty((K + 1,) + x.shape)
    if direction == "forward":
        order, h = range(K), grid.dt
        out[0] = x
    else:
        order, h = range(K, 0, -1), -grid.dt
        out[K] = x

    with np.errstate(over="ignore", invalid="ignore"):
        for k in order:
            tk = t[k]
            k1 = field(tk, x)
            k2 = field(tk + 0.5 * h, x + 0.5 * h * k1)
            k3 = field(tk + 0.5 * h, x + 0.5 * h * k2)
            k4 = field(tk + h, x + h * k3)
            if max_step_ratio is not None:
                stage = max(float(np.linalg.norm(h * s)) for s in (k1, k2, k3, k4))
                ratio = stage / (1.0 + float(np.linalg.norm(x)))
                if not np.isfinite(ratio) or ratio > max_step_ratio:
                    nxt = k + 1 if h > 0 else k - 1
                    raise EscapeTime(nxt, float(t[nxt]), ratio, unresolved=True)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if project is not None:
                x = project(x)
            nxt = k + 1 if h > 0 else k - 1
            escaped, norm = _escaped(x, escape_threshold)
            if escaped:
                raise EscapeTime(nxt, float(t[nxt]), norm)
            out[nxt] = x
    return Trajectory(grid, out)


@dataclass(frozen=True)
class WhiteNoisePath:
    """Brownian increments dW_k, shape (n_steps, *batch, n2)"""
    grid: TimeGrid
    increments: np.ndarray

    def __post_init__(self):
        if self.increments.shape[0] != self.grid.n_steps:
            raise ShapeError(
                f"noise has {self.increments.shape[0]} steps, grid has {self.grid.n_steps}"
            )

    @property
    def n2(self) -> int:
        return self.increments.shape[-1]

    @classmethod
    def zeros(cls, grid: TimeGrid, n2: int, batch: Sequence[int] = ()) -> "WhiteNoisePath":
        return cls(grid, np.zeros((grid.n_steps,) + tuple(batch) + (n2,)))

    @classmethod
    def sample(cls, grid: TimeGrid, n2: int, rng: np.random.Generator,
               batch: Sequence[int] = ()) -> "WhiteNoisePath":
        z = rng.standard_normal((grid.n_steps,) + tuple(batch) + (n2,))
        return cls(grid, z * np.sqrt(grid.dt))


def counter_stream(seed: int, replication: int, agent: int) -> np.random.Generator:
    """Independent Philox stream for one (seed, replication, agent) key"""
    key = np.random.SeedSequence([int(seed), int(replication), int(agent)])
    return np.random.Generator(np.random.Philox(key))


def euler_maruyama(drift: Field, diffusion, noise: WhiteNoisePath, init,
                   grid: TimeGrid, escape_threshold: float = ESCAPE_THRESHOLD) -> Trajectory:
    """x_{k+1} = x_k + drift(t_k, x_k) dt + dW_k D^T over a batch of states (..., d)"""
    D = as_matrix(diffusion, "diffusion")
    x = np.array(init, dtype=float)
    check_finite(x, "initial state")
    if noise.grid != grid:
        raise ShapeError("noise path and integration grid differ")
    if D.shape[0] != x.shape[-1] or D.shape[1] != noise.n2:
        raise ShapeError(
            f"diffusion {D.shape} incompatible with state dim {x.shape[-1]} "
            f"and noise dim {noise.n2}"
        )
    if noise.increments.shape[1:-1] != x.shape[:-1]:
        raise ShapeError(
            f"noise batch {noise.increments.shape[1:-1]} != state batch {x.shape[:-1]}"
        )
    dt = grid.dt
    out = np.empty((grid.n_steps + 1,) + x.shape)
    out[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(grid.n_steps):
            x = x + drift(grid.knots[k], x) * dt + noise.increments[k] @ D.T
            bad = ~np.isfinite(x) | (np.abs(x) > escape_threshold)
            if bad.any():
                idx = np.argwhere(bad)[0]
                agent = int(idx[0]) if x.ndim > 1 else None
                raise EscapeTime(k + 1, float(grid.knots[k + 1]),
                                 float(np.nan_to_num(np.abs(x).max(), nan=np.inf)), agent)
            out[k + 1] = x
    return Trajectory(grid, out)


def central_difference_residual(traj: Trajectory, field: Field) -> float:
    """Max over interior knots of |x'(t_k) - field(t_k, x_k)| with a 5-point derivative"""
    f = traj.values
    grid = traj.grid
    K = grid.n_steps
    if K < 4:
        raise ShapeError("residual check needs at least 4 steps")
    worst = 0.0
    for k in range(2, K - 1):
        deriv = (f[k - 2] - 8.0 * f[k - 1] + 8.0 * f[k + 1] - f[k + 2]) / (12.0 * grid.dt)
        worst = max(worst, frobenius(deriv - field(grid.knots[k], f[k])))
    return worst
