"""Receding-horizon control of tank levels through a learned model.

The control input is a bounded inflow added directly to one tank level. Plans
are found by projected gradient descent on the horizon cost, with gradients
taken through an RK4 rollout of the model on the tape.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ParamVector, lincomb, scatter, value_and_grad, value_of
from .systems import SimulationDiverged, simulate

__all__ = ["PlanningError", "ControlSpec", "ControlTrace", "plan", "horizon_cost", "run_closed_loop",
           "steady_levels"]


class PlanningError(RuntimeError):
    pass


@dataclass
class ControlSpec:
    mu_ref: np.ndarray
    tank: int = 0
    u_min: float = -2.0
    u_max: float = 2.0
    horizon: int = 20
    dt: float = 0.01
    weights: np.ndarray | None = None
    iterations: int = 100
    step: float = 0.05
    tol: float = 1e-7

    def __post_init__(self):
        self.mu_ref = np.asarray(self.mu_ref, dtype=np.float64)
        self.weights = np.ones_like(self.mu_ref) if self.weights is None else np.asarray(self.weights, float)
        if not self.u_min <= self.u_max:
            raise ValueError("u_min must not exceed u_max")
        if self.horizon < 1:
            raise ValueError("horizon must be at least one step")

    @property
    def n_levels(self) -> int:
        return self.mu_ref.size


@dataclass
class ControlTrace:
    t: list[float] = field(default_factory=list)
    u: list[float] = field(default_factory=list)
    plant: list[np.ndarray] = field(default_factory=list)
    predicted: list[np.ndarray] = field(default_factory=list)
    cost: list[float] = field(default_factory=list)
    aborted: bool = False

    def to_csv(self, path) -> None:
        d = len(self.plant[0]) if self.plant else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "u", "stage_cost"] + [f"x_{i + 1}" for i in range(d)]
                       + [f"xhat_{i + 1}" for i in range(d)])
            for row in zip(self.t, self.u, self.cost, self.plant, self.predicted):
                t, u, c, x, xh = row
                w.writerow([f"{t:.17g}", f"{u:.17g}", f"{c:.17g}"] + [f"{v:.17g}" for v in x]
                           + [f"{v:.17g}" for v in xh])


def _control_index(model_dim: int, spec: ControlSpec) -> int:
    return model_dim - spec.n_levels + spec.tank


def _predict(model, x0, t0, u, spec: ControlSpec, dim: int):
    """RK4 rollout of ``model + u_k e_tank``; returns the list of states after each step."""
    ci = _control_index(dim, spec)
    dt = spec.dt
    x = np.asarray(x0, dtype=np.float64)[None, :]
    states = []
    for k in range(spec.horizon):
        src = scatter(u[k : k + 1], [ci], dim)
        t = t0 + k * dt
        f = lambda y, s: lincomb((1.0, 1.0), (model.rhs(y, s), src))
        k1 = f(x, t)
        k2 = f(lincomb((1.0, 0.5 * dt), (x, k1)), t + 0.5 * dt)
        k3 = f(lincomb((1.0, 0.5 * dt), (x, k2)), t + 0.5 * dt)
        k4 = f(lincomb((1.0, dt), (x, k3)), t + dt)
        x = lincomb((1.0, dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0), (x, k1, k2, k3, k4))
        states.append(x)
    return states


def horizon_cost(model, x_now, u, spec: ControlSpec, t_now: float = 0.0):
    """``sum_k ||mu(k) - mu_ref||_w^2`` over the horizon for a control sequence ``u``."""
    dim = np.asarray(x_now).size
    n = spec.n_levels
    cost = 0.0
    for x in _predict(model, x_now, t_now, u, spec, dim):
        err = x[:, dim - n :] - spec.mu_ref
        cost = cost + (err * err * spec.weights).sum()
    return cost


def plan(model, x_now, spec: ControlSpec, t_now: float = 0.0, u_init=None) -> np.ndarray:
    """Projected gradient descent on the horizon cost; returns ``u[0..H-1]`` within bounds."""
    x_now = np.asarray(x_now, dtype=np.float64)
    if not np.all(np.isfinite(x_now)):
        raise PlanningError("non-finite state")
    u0 = np.zeros(spec.horizon) if u_init is None else np.asarray(u_init, dtype=np.float64)
    pv = ParamVector.from_arrays({"u": np.clip(u0, spec.u_min, spec.u_max)})
    if spec.u_min == spec.u_max:
        return pv["u"].copy()
    for _ in range(spec.iterations):
        cost, grad = value_and_grad(lambda p: horizon_cost(model, x_now, p["u"], spec, t_now), pv)
        if not np.isfinite(cost) or not np.all(np.isfinite(grad)):
            raise PlanningError("non-finite horizon cost")
        new = np.clip(pv.data - spec.step * grad, spec.u_min, spec.u_max)
        moved = np.max(np.abs(new - pv.data))
        pv.assign(new)
        if moved < spec.tol:
            break
    return pv["u"].copy()


def run_closed_loop(plant, model, spec: ControlSpec, T: float, x0) -> ControlTrace:
    """Plan on ``model``, apply the first input to ``plant`` for one control step, repeat."""
    x = np.asarray(x0, dtype=np.float64)
    dim = x.size
    ci = _control_index(dim, spec)
    n_steps = int(round(T / spec.dt))
    trace = ControlTrace()
    u_plan = None
    for k in range(n_steps + 1):
        t = k * spec.dt
        mu_err = x[dim - spec.n_levels :] - spec.mu_ref
        stage = float(np.sum(spec.weights * mu_err**2))
        if k == n_steps:
            trace.t.append(t)
            trace.u.append(0.0)
            trace.plant.append(x.copy())
            trace.predicted.append(trace.predicted[-1] if trace.predicted else x.copy())
            trace.cost.append(stage)
            break
        u_plan = plan(model, x, spec, t, None if u_plan is None else np.append(u_plan[1:], u_plan[-1]))
        u = float(u_plan[0])
        predicted = value_of(_predict(model, x, t, u_plan[:1], _one_step(spec), dim)[0])[0]
        trace.t.append(t)
        trace.u.append(u)
        trace.plant.append(x.copy())
        trace.predicted.append(predicted)
        trace.cost.append(stage)
        source = np.zeros(dim)
        source[ci] = u
        try:
            _, xs = simulate(plant, x, t, t + spec.dt, spec.dt, source=source)
        except SimulationDiverged:
            trace.aborted = True
            break
        x = xs[-1]
    return trace


def steady_levels(plant, tank: int, u: float, T: float = 60.0, dt: float = 0.1, tol: float = 1e-8) -> np.ndarray:
    """Tank levels the plant settles to under a constant inflow ``u`` into ``tank``.

    Such levels are reachable references by construction (for ``u`` within the
    input bounds). Raises ``PlanningError`` if the plant has not settled by ``T``.
    """
    dim = plant.dim
    n = plant.n_tanks
    source = np.zeros(dim)
    source[dim - n + tank] = u
    _, xs = simulate(plant, np.zeros(dim), 0.0, T, dt, source=source)
    if np.max(np.abs(xs[-1] - xs[-2])) > tol:
        raise PlanningError("plant did not settle under constant inflow")
    return xs[-1][dim - n:].copy()


def _one_step(spec: ControlSpec) -> ControlSpec:
    return ControlSpec(spec.mu_ref, spec.tank, spec.u_min, spec.u_max, 1, spec.dt, spec.weights,
                       spec.iterations, spec.step, spec.tol)
