"""Adaptive Heun integration of dz/dt = f(z, t) on autodiff tensors.

Gradients are obtained by differentiating through the accepted solver steps.
Rejected trial steps are computed and discarded, so they never reach the loss;
the step size is treated as a control signal and is not differentiated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, as_tensor

log = logging.getLogger(__name__)

Field = Callable[[Tensor, float], Tensor]

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
INITIAL_STEPS = 50
UNDERFLOW = 1e-7


class SolverError(RuntimeError):
    """Integration could not proceed (non-finite field or step-size underflow)."""

    def __init__(self, message: str, t: float):
        super().__init__(message)
        self.t = t


class StiffnessError(SolverError):
    pass


@dataclass
class SolveStats:
    accepted_steps: int = 0
    rejected_steps: int = 0
    nfe: int = 0
    # (step midpoint time, 1 / dt) for every accepted step
    steps_per_unit_time: list[tuple[float, float]] = field(default_factory=list)
    next_dt: float | None = None

    def merge(self, other: "SolveStats") -> None:
        self.accepted_steps += other.accepted_steps
        self.rejected_steps += other.rejected_steps
        self.nfe += other.nfe
        self.steps_per_unit_time.extend(other.steps_per_unit_time)
        self.next_dt = other.next_dt


@dataclass
class Trajectory:
    times: list[float]
    states: list[Tensor]


def _eval(f: Field, z: Tensor, t: float) -> Tensor:
    k = f(z, t)
    if not isinstance(k, Tensor):
        k = as_tensor(np.broadcast_to(np.asarray(k, dtype=z.dtype), z.shape).copy())
    if not np.all(np.isfinite(k.data)):
        raise SolverError(f"vector field returned non-finite values at t={t:.6g}", t)
    return k


def heun_step(f: Field, z: Tensor, t: float, dt: float, tol: float = 1e-2) -> tuple[Tensor, float]:
    """One Heun step with its embedded Euler error estimate.

    Returns the trial state and the scaled max-norm error; ``err <= 1`` means the
    step is acceptable under ``atol = rtol = tol``.
    """
    if dt <= 0:
        raise ValueError(f"step must be positive, got {dt}")
    z = as_tensor(z)
    k1 = _eval(f, z, t)
    k2 = _eval(f, z + k1 * dt, t + dt)
    z_trial = z + (k1 + k2) * (dt / 2)
    diff = np.abs((k2.data - k1.data).astype(np.float64)) * (dt / 2)
    scale = tol + tol * np.abs(z.data.astype(np.float64))
    err = float(np.max(diff / scale)) if diff.size else 0.0
    return z_trial, err


def solve_adaptive(
    f: Field,
    z0,
    t0: float,
    t1: float,
    tol: float = 1e-2,
    dt0: float | None = None,
) -> tuple[Tensor, SolveStats]:
    """Integrate from ``t0`` to ``t1`` with accept/reject step control."""
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    z = as_tensor(z0)
    span = t1 - t0
    dt = min(dt0 if dt0 else span / INITIAL_STEPS, span)
    t = t0
    stats = SolveStats()
    while t < t1:
        proposed = dt
        last = t + dt >= t1
        if last:
            dt = t1 - t
        z_trial, err = heun_step(f, z, t, dt, tol)
        stats.nfe += 2
        factor = MAX_FACTOR if err == 0 else min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * err ** (-1 / 3)))
        if err <= 1.0:
            stats.accepted_steps += 1
            stats.steps_per_unit_time.append((t + dt / 2, 1.0 / dt))
            z = z_trial
            t = t1 if last else t + dt
            # a clipped final step says nothing about the next segment's scale
            stats.next_dt = max(proposed, dt * factor) if last else dt * factor
        else:
            stats.rejected_steps += 1
        dt = dt * factor
        if dt < UNDERFLOW * span and t < t1:
            raise StiffnessError(f"step size underflow at t={t:.6g} (dt={dt:.3g})", t)
    return z, stats


def solve_dense(
    f: Field,
    z0,
    t0: float,
    sample_times: Sequence[float],
    tol: float = 1e-2,
) -> tuple[Trajectory, SolveStats]:
    """Solve from ``t0`` and snapshot the state at each of ``sample_times``."""
    times = [float(s) for s in sample_times]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("sample_times must be strictly increasing")
    if times and times[0] < t0:
        raise ValueError("sample_times must not precede t0")
    z = as_tensor(z0)
    t = t0
    total = SolveStats()
    states: list[Tensor] = []
    dt = None
    for s in times:
        if s > t:
            z, st = solve_adaptive(f, z, t, s, tol, dt0=dt)
            total.merge(st)
            dt = st.next_dt
            t = s
        states.append(z)
    return Trajectory(times, states), total


def heun_fixed(f: Field, z0, t0: float, t1: float, n_steps: int) -> Tensor:
    """Fixed-step Heun, used for order checks."""
    z = as_tensor(z0)
    dt = (t1 - t0) / n_steps
    for i in range(n_steps):
        t = t0 + i * dt
        k1 = _eval(f, z, t)
        k2 = _eval(f, z + k1 * dt, t + dt)
        z = z + (k1 + k2) * (dt / 2)
    return z
