"""Training discretizations and rollout solvers.

A training discretization maps a pair of consecutive samples to an estimate of
the right-hand side, ``(x1 - x0) / dt ~ phi(g, x0, x1, t0, dt)``. All four
schemes here are explicit in the data: the mono-implicit ones (midpoint and the
symmetric fourth-order scheme) only evaluate ``g`` at affine combinations of
the two endpoints, so no nonlinear solve is needed during training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffcore import value_of

__all__ = [
    "Discretization",
    "DISCRETIZATIONS",
    "get_discretization",
    "phi",
    "residual",
    "regularization_point",
    "RolloutFailed",
    "rollout",
    "ROLLOUT_SOLVERS",
]

_C = np.sqrt(3.0) / 6.0


@dataclass(frozen=True)
class Discretization:
    tag: str
    evaluations: int
    order: int


DISCRETIZATIONS = {
    "euler": Discretization("euler", 1, 1),
    "rk4": Discretization("rk4", 4, 4),
    "midpoint": Discretization("midpoint", 1, 2),
    "srk4": Discretization("srk4", 4, 4),
}


def get_discretization(disc) -> Discretization:
    if isinstance(disc, Discretization):
        return disc
    try:
        return DISCRETIZATIONS[str(disc).lower()]
    except KeyError:
        raise ValueError(f"unknown discretization {disc!r}; choose from {sorted(DISCRETIZATIONS)}") from None


def phi(disc, g: Callable, xn, xnp1, tn, dt):
    """Right-hand-side estimate of ``disc`` for the step ``(tn, xn) -> (tn + dt, xnp1)``.

    ``g(x, t)`` is evaluated on batches; its output may live on the tape.
    """
    tag = get_discretization(disc).tag
    if tag == "euler":
        return g(xn, tn)
    if tag == "midpoint":
        return g(0.5 * (xn + xnp1), tn + 0.5 * dt)
    if tag == "rk4":
        k1 = g(xn, tn)
        k2 = g(xn + (0.5 * dt) * k1, tn + 0.5 * dt)
        k3 = g(xn + (0.5 * dt) * k2, tn + 0.5 * dt)
        k4 = g(xn + dt * k3, tn + dt)
        return (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (1.0 / 6.0)
    # symmetric fourth-order MIRK scheme. The outer stage shifted by -c*dt
    # takes its slope from the interpolant at tn + (1/2 + c) dt and vice versa;
    # pairing each shift with the slope on the same side of the midpoint only
    # gives second order. Time is carried as a state with unit rate, so the
    # outer stages sit at tn + (1/2 -+ c) dt.
    mid = 0.5 * (xn + xnp1)
    t_mid = tn + 0.5 * dt
    early = g((0.5 + _C) * xn + (0.5 - _C) * xnp1, tn + (0.5 - _C) * dt)
    late = g((0.5 - _C) * xn + (0.5 + _C) * xnp1, tn + (0.5 + _C) * dt)
    outer_a = g(mid - (_C * dt) * late, t_mid - _C * dt)
    outer_b = g(mid + (_C * dt) * early, t_mid + _C * dt)
    return 0.5 * (outer_a + outer_b)


def residual(disc, g: Callable, xn, xnp1, tn, dt):
    return (xnp1 - xn) * (1.0 / dt) - phi(disc, g, xn, xnp1, tn, dt)


def regularization_point(disc, xn, xnp1, tn, dt):
    """State and time at which the force penalty is evaluated: the step midpoint."""
    return 0.5 * (xn + xnp1), tn + 0.5 * dt


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

ROLLOUT_SOLVERS = ("rk4", "midpoint")


class RolloutFailed(RuntimeError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"rollout failed at step {step}: {reason}")
        self.step = step


def _rhs(model):
    f = model.rhs if hasattr(model, "rhs") else model

    def g(x, t):
        return np.asarray(value_of(f(x, t)), dtype=np.float64)

    return g


def _fd_jacobian(g, x, t, h=1e-7):
    """Forward-difference Jacobians of ``g(., t)`` at a batch ``x``: ``(n, d, d)``."""
    f0 = g(x, t)
    n, d = x.shape
    jac = np.empty((n, d, d))
    for j in range(d):
        xp = x.copy()
        xp[:, j] += h
        jac[:, :, j] = (g(xp, t) - f0) / h
    return jac


def _midpoint_step(g, x, t, dt, step, tol=1e-10, max_iter=50):
    y = x + dt * g(x, t)
    t_mid = t + 0.5 * dt
    eye = np.eye(x.shape[1])
    for _ in range(max_iter):
        mid = 0.5 * (x + y)
        F = y - x - dt * g(mid, t_mid)
        if not np.all(np.isfinite(F)):
            raise RolloutFailed(step, "non-finite Newton residual")
        if np.max(np.abs(F)) <= tol:
            return y
        jac = eye - 0.5 * dt * _fd_jacobian(g, mid, t_mid)
        y = y - np.linalg.solve(jac, F[..., None])[..., 0]
    mid = 0.5 * (x + y)
    if np.max(np.abs(y - x - dt * g(mid, t_mid))) <= tol:
        return y
    raise RolloutFailed(step, f"Newton did not converge in {max_iter} iterations")


def rollout(model, x0, t0: float, t1: float, dt: float, solver: str = "rk4", substeps: int = 1):
    """Integrate a learned model from ``x0``; returns ``(times, states)``.

    ``x0`` may be one state or a batch. ``solver`` is ``"rk4"`` (explicit) or
    ``"midpoint"`` (implicit, Newton with finite-difference Jacobians). States
    are reported every ``dt``; each report interval takes ``substeps`` steps.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if solver not in ROLLOUT_SOLVERS:
        raise ValueError(f"solver must be one of {ROLLOUT_SOLVERS}")
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    g = _rhs(model)
    x = np.array(x0, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    n_steps = int(round((t1 - t0) / dt))
    times = t0 + dt * np.arange(n_steps + 1)
    out = np.empty((n_steps + 1,) + x.shape)
    out[0] = x
    h = dt / substeps
    for n in range(n_steps):
        for s in range(substeps):
            t = times[n] + s * h
            if solver == "rk4":
                k1 = g(x, t)
                k2 = g(x + 0.5 * h * k1, t + 0.5 * h)
                k3 = g(x + 0.5 * h * k2, t + 0.5 * h)
                k4 = g(x + h * k3, t + h)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            else:
                x = _midpoint_step(g, x, t, h, n)
        if not np.all(np.isfinite(x)):
            raise RolloutFailed(n, "non-finite state")
        out[n + 1] = x
    return times, (out[:, 0] if single else out)
