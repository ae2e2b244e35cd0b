"""Ground-truth benchmark systems: forced, damped mass-spring and a tank network.

Both systems are written in the form ``dx/dt = (S - R) grad H(x) + f(x, t)``
with constant ``S`` (skew) and diagonal ``R``. The ``*_rhs`` functions use the
componentwise physical equations instead of that form, so comparing them with a
generic pseudo-Hamiltonian evaluation is a genuine cross-check.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "SimulationDiverged",
    "MassSpringSpec",
    "LeakForce",
    "TankNetworkSpec",
    "massspring_rhs",
    "tank_rhs",
    "exact_hamiltonian",
    "simulate",
    "system_to_dict",
    "system_from_dict",
    "save_system",
    "load_system",
]


class SimulationDiverged(RuntimeError):
    def __init__(self, t: float):
        super().__init__(f"non-finite state at t={t:g}")
        self.t = t


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


@dataclass
class MassSpringSpec:
    """``m q'' + c q' + k q = amplitude * sin(omega t)`` with state ``(q, p = m q')``."""

    m: float = 1.0
    k: float = 1.0
    c: float = 0.3
    force_amplitude: float = 1.0
    force_omega: float = 3.0

    kind = "mass_spring"

    def __post_init__(self):
        if self.m <= 0 or self.k <= 0:
            raise ValueError("mass and stiffness must be positive")

    @property
    def dim(self) -> int:
        return 2

    def structure(self) -> np.ndarray:
        return np.array([[0.0, 1.0], [-1.0, 0.0]])

    @property
    def damped_indices(self) -> list[int]:
        return [1]

    @property
    def damping_values(self) -> np.ndarray:
        return np.array([self.c])

    @property
    def force_indices(self) -> list[int]:
        return [1]

    def force(self, t) -> np.ndarray:
        return self.force_amplitude * np.sin(self.force_omega * np.asarray(t, dtype=np.float64))

    def external_force(self, x, t) -> np.ndarray:
        """Force restricted to ``force_indices``: shape ``(batch, 1)``."""
        xb, _ = _batch(x)
        return np.broadcast_to(np.reshape(self.force(t), (-1, 1)), (xb.shape[0], 1)).copy()

    def hamiltonian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        q, p = x[..., 0], x[..., 1]
        return 0.5 * self.k * q**2 + p**2 / (2.0 * self.m)

    def grad_hamiltonian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x * np.array([self.k, 1.0 / self.m])

    def quadratic_weights(self) -> np.ndarray:
        return np.array([self.k, 1.0 / self.m])

    def rhs(self, x, t, source=None):
        return massspring_rhs(self, x, t, source)


@dataclass
class LeakForce:
    """Saturating sink ``coefficient * clip(mu_tank, -saturation, saturation)`` (0-based tank)."""

    tank: int
    coefficient: float
    saturation: float = 0.3

    def __call__(self, mu_tank):
        return self.coefficient * np.clip(mu_tank, -self.saturation, self.saturation)


def _default_edges() -> list[tuple[int, int]]:
    # 4-cycle with one chord, 0-based (source, target)
    return [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]


@dataclass
class TankNetworkSpec:
    """Tanks joined by pipes; state ``x = (phi, mu)`` with pipe momenta ``phi = J * flow``.

    ``edges[i] = (k, l)`` orients pipe ``i`` from tank ``k`` to tank ``l``.
    The incidence matrix :attr:`B` has one row per pipe with ``+1`` at the
    source tank and ``-1`` at the target tank.
    """

    n_tanks: int = 4
    edges: list[tuple[int, int]] = field(default_factory=_default_edges)
    J: np.ndarray | None = None
    A: np.ndarray | None = None
    rho: float = 1.0
    g: float = 1.0
    R_p: np.ndarray | None = None
    leaks: list[LeakForce] = field(default_factory=list)

    kind = "tank"

    def __post_init__(self):
        self.edges = [tuple(int(v) for v in e) for e in self.edges]
        M, N = len(self.edges), self.n_tanks
        self.J = np.full(M, 0.02) if self.J is None else np.asarray(self.J, dtype=np.float64)
        self.A = np.ones(N) if self.A is None else np.asarray(self.A, dtype=np.float64)
        if self.R_p is None:
            self.R_p = np.array([0.03, 0.03, 0.09, 0.03, 0.03]) if M == 5 else np.full(M, 0.03)
        self.R_p = np.asarray(self.R_p, dtype=np.float64)
        self.leaks = [lk if isinstance(lk, LeakForce) else LeakForce(**lk) for lk in self.leaks]
        if self.J.shape != (M,) or self.R_p.shape != (M,) or self.A.shape != (N,):
            raise ValueError("J and R_p need one entry per pipe, A one per tank")
        if np.any(self.J <= 0) or np.any(self.A <= 0):
            raise ValueError("J and A must be positive")
        for k, l in self.edges:
            if k == l or not (0 <= k < N and 0 <= l < N):
                raise ValueError(f"invalid pipe ({k}, {l})")
        for lk in self.leaks:
            if not 0 <= lk.tank < N:
                raise ValueError(f"leak on unknown tank {lk.tank}")

    @property
    def n_pipes(self) -> int:
        return len(self.edges)

    @property
    def dim(self) -> int:
        return self.n_pipes + self.n_tanks

    @property
    def B(self) -> np.ndarray:
        B = np.zeros((self.n_pipes, self.n_tanks))
        for i, (k, l) in enumerate(self.edges):
            B[i, k] = 1.0
            B[i, l] = -1.0
        return B

    def structure(self) -> np.ndarray:
        M, N = self.n_pipes, self.n_tanks
        S = np.zeros((M + N, M + N))
        S[:M, M:] = self.B
        S[M:, :M] = -self.B.T
        return S

    @property
    def damped_indices(self) -> list[int]:
        return list(range(self.n_pipes))

    @property
    def damping_values(self) -> np.ndarray:
        return self.R_p.copy()

    @property
    def force_indices(self) -> list[int]:
        return sorted({self.n_pipes + lk.tank for lk in self.leaks})

    def tank_force(self, mu) -> np.ndarray:
        """Leak terms acting on the tank levels, shape ``(batch, n_tanks)``."""
        mu, _ = _batch(mu)
        f = np.zeros_like(mu)
        for lk in self.leaks:
            f[:, lk.tank] += lk(mu[:, lk.tank])
        return f

    def external_force(self, x, t) -> np.ndarray:
        xb, _ = _batch(x)
        f = self.tank_force(xb[:, self.n_pipes:])
        return f[:, [i - self.n_pipes for i in self.force_indices]]

    def quadratic_weights(self) -> np.ndarray:
        return np.concatenate([1.0 / self.J, self.g * self.rho / self.A])

    def hamiltonian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * np.sum(self.quadratic_weights() * x**2, axis=-1)

    def grad_hamiltonian(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.quadratic_weights()

    def rhs(self, x, t, source=None):
        return tank_rhs(self, x, t, source)

    def without_leaks(self) -> "TankNetworkSpec":
        return TankNetworkSpec(self.n_tanks, list(self.edges), self.J.copy(), self.A.copy(),
                               self.rho, self.g, self.R_p.copy(), [])


def massspring_rhs(spec: MassSpringSpec, x, t, source=None):
    """``(p/m, -k q - c p/m + f(t))``; ``source`` is an optional additive term."""
    xb, single = _batch(x)
    q, p = xb[:, 0], xb[:, 1]
    v = p / spec.m
    out = np.stack([v, -spec.k * q - spec.c * v + spec.force(t)], axis=1)
    if source is not None:
        out = out + source
    return out[0] if single else out


def tank_rhs(spec: TankNetworkSpec, x, t, source=None):
    """Pipe momenta and tank volumes.

    ``phi' = -R_p flow + B P + f_p`` and ``mu' = -B^T flow + f_t`` with
    ``flow = phi / J`` and pressures ``P = g rho mu / A``; leaks populate ``f_t``.
    """
    xb, single = _batch(x)
    M = spec.n_pipes
    phi, mu = xb[:, :M], xb[:, M:]
    B = spec.B
    flow = phi / spec.J
    pressure = spec.g * spec.rho * mu / spec.A
    dphi = -spec.R_p * flow + pressure @ B.T
    dmu = -flow @ B + spec.tank_force(mu)
    out = np.concatenate([dphi, dmu], axis=1)
    if source is not None:
        out = out + source
    return out[0] if single else out


def exact_hamiltonian(spec, x) -> np.ndarray:
    return spec.hamiltonian(x)


def simulate(spec, x0, t0: float, t1: float, sample_dt: float, source=None, substeps: int = 20):
    """Fixed-step classic RK4 at ``sample_dt / substeps``, sampled every ``sample_dt``.

    ``x0`` may be one state ``(d,)`` or a batch ``(n, d)``; the states come
    back as ``(n_samples, d)`` or ``(n_samples, n, d)``. ``source`` is a
    constant additive term on the right-hand side (used for control inputs).
    """
    if sample_dt <= 0:
        raise ValueError("sample_dt must be positive")
    n_steps = int(round((t1 - t0) / sample_dt))
    times = t0 + sample_dt * np.arange(n_steps + 1)
    x = np.array(x0, dtype=np.float64)
    out = np.empty((n_steps + 1,) + x.shape)
    out[0] = x
    h = sample_dt / substeps
    f = spec.rhs
    with np.errstate(over="ignore", invalid="ignore"):
        _integrate(f, x, out, times, h, substeps, source)
    return times, out


def _integrate(f, x, out, times, h, substeps, source):
    for n in range(len(times) - 1):
        t = times[n]
        for s in range(substeps):
            ts = t + s * h
            k1 = f(x, ts, source)
            k2 = f(x + 0.5 * h * k1, ts + 0.5 * h, source)
            k3 = f(x + 0.5 * h * k2, ts + 0.5 * h, source)
            k4 = f(x + h * k3, ts + h, source)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise SimulationDiverged(times[n + 1])
        out[n + 1] = x


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------


def system_to_dict(spec) -> dict:
    if isinstance(spec, MassSpringSpec):
        return {"kind": "mass_spring", **asdict(spec)}
    return {
        "kind": "tank",
        "n_tanks": spec.n_tanks,
        "edges": [list(e) for e in spec.edges],
        "J": spec.J.tolist(),
        "A": spec.A.tolist(),
        "rho": spec.rho,
        "g": spec.g,
        "R_p": spec.R_p.tolist(),
        "leaks": [asdict(lk) for lk in spec.leaks],
    }


def system_from_dict(doc: dict):
    doc = dict(doc)
    kind = doc.pop("kind", None)
    if kind == "mass_spring":
        return MassSpringSpec(**doc)
    if kind == "tank":
        return TankNetworkSpec(**doc)
    raise ValueError(f"unknown system kind {kind!r}")


def save_system(spec, path) -> None:
    Path(path).write_text(json.dumps(system_to_dict(spec), indent=2))


def load_system(path):
    return system_from_dict(json.loads(Path(path).read_text()))
