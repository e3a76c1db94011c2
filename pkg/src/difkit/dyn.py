"""Trajectories on uniform time grids, fixed-step RK4, finite differences, NRMSE."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

VectorField = Callable[[np.ndarray], np.ndarray]

# States beyond this magnitude are treated as a blow-up.
DIVERGENCE_LIMIT = 1e12


class IntegrationDiverged(RuntimeError):
    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"integration diverged at step {step}")


class DegenerateTruth(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    t0: float = 0.0
    dt: float = 0.1
    T: int = 100

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.T)


@dataclass(frozen=True)
class Trajectory:
    """A d x T state matrix sampled on ``grid``."""

    states: np.ndarray
    grid: TimeGrid = field(default_factory=TimeGrid)

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != self.grid.T:
            raise ValueError(f"states shape {states.shape} does not match grid T={self.grid.T}")
        if not np.all(np.isfinite(states)):
            raise ValueError("trajectory contains non-finite values")
        object.__setattr__(self, "states", states)

    @property
    def d(self) -> int:
        return self.states.shape[0]

    @property
    def T(self) -> int:
        return self.states.shape[1]

    def past_window(self, T_c: int) -> "PastWindow":
        return PastWindow(self.states[:, :T_c], T_c)


@dataclass(frozen=True)
class PastWindow:
    states: np.ndarray
    T_c: int

    def __post_init__(self):
        if self.T_c < 1 or self.states.shape[1] != self.T_c:
            raise ValueError(f"bad past window: T_c={self.T_c}, shape={self.states.shape}")


def _check_state(x: np.ndarray, step: int):
    if not np.all(np.isfinite(x)) or np.any(np.abs(x) > DIVERGENCE_LIMIT):
        raise IntegrationDiverged(step)


def rk4_step(f: VectorField, x, dt: float, step: int = 0) -> np.ndarray:
    """One classical Runge-Kutta step. ``x`` may carry leading batch axes."""
    x = np.asarray(x, dtype=np.float64)
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    for k in (k1, k2, k3, k4):
        _check_state(k, step)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _check_state(out, step)
    return out


def integrate(f: VectorField, x0, grid: TimeGrid) -> Trajectory:
    x0 = np.asarray(x0, dtype=np.float64)
    states = np.empty((x0.shape[0], grid.T))
    states[:, 0] = x0
    x = x0
    for k in range(grid.T - 1):
        x = rk4_step(f, x, grid.dt, step=k)
        states[:, k + 1] = x
    return Trajectory(states, grid)


def integrate_batch(f: VectorField, x0: np.ndarray, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Integrate B initial states at once; ``f`` maps (B, d) -> (B, d).

    Returns ``(states, diverged)`` with states of shape (B, d, T). Rows that blow
    up are frozen at zero from the failing step on and flagged in ``diverged``.
    """
    x = np.array(x0, dtype=np.float64)
    B, d = x.shape
    states = np.zeros((B, d, grid.T))
    states[:, :, 0] = x
    diverged = np.zeros(B, dtype=bool)
    dt = grid.dt
    with np.errstate(all="ignore"):
        for k in range(grid.T - 1):
            k1 = f(x)
            k2 = f(x + 0.5 * dt * k1)
            k3 = f(x + 0.5 * dt * k2)
            k4 = f(x + dt * k3)
            x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            bad = ~np.all(np.isfinite(x) & (np.abs(x) <= DIVERGENCE_LIMIT), axis=1)
            if bad.any():
                diverged |= bad
                x[bad] = 0.0
            states[:, :, k + 1] = x
    states[diverged] = 0.0
    return states, diverged


def numerical_derivative(traj: Trajectory | np.ndarray, dt: float | None = None) -> np.ndarray:
    """Central differences inside, one-sided differences at both ends.

    Accepts a Trajectory, or a raw array whose last axis is time (then ``dt``
    is required).
    """
    if isinstance(traj, Trajectory):
        x, dt = traj.states, traj.grid.dt
    else:
        x = np.asarray(traj, dtype=np.float64)
        if dt is None:
            raise ValueError("dt is required for raw arrays")
    if x.shape[-1] < 3:
        raise ValueError("numerical_derivative needs at least 3 time points")
    out = np.empty_like(x)
    out[..., 1:-1] = (x[..., 2:] - x[..., :-2]) / (2.0 * dt)
    out[..., 0] = (x[..., 1] - x[..., 0]) / dt
    out[..., -1] = (x[..., -1] - x[..., -2]) / dt
    return out


def _stack(trajs) -> np.ndarray:
    if isinstance(trajs, np.ndarray):
        return trajs.astype(np.float64, copy=False)
    return np.stack([t.states if isinstance(t, Trajectory) else np.asarray(t, dtype=np.float64)
                     for t in trajs])


def nrmse(pred: Sequence[Trajectory] | np.ndarray, truth: Sequence[Trajectory] | np.ndarray) -> float:
    """RMSE over every entry of the set, divided by the population std of ``truth``."""
    p, t = _stack(pred), _stack(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
    if t.size == 0:
        raise ValueError("empty trajectory set")
    std = float(np.std(t))
    if std == 0.0:
        raise DegenerateTruth("truth set has zero standard deviation")
    return float(np.sqrt(np.mean((p - t) ** 2)) / std)
