"""Trainable dynamics models.

:class:`PseudoHamiltonianModel` evaluates ``(S - R) grad H(x) + f(x, t)`` with a
network Hamiltonian, one learnable damping scalar per damped state and an
optional masked force network. :class:`BaselineModel` regresses the right-hand
side directly. Every model keeps its trainable scalars in a single
:class:`~phlab.diffcore.ParamVector` and evaluates through ``rhs(x, t, p)``,
where ``p`` is either the stored arrays or tape leaves.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .diffcore import Node, ParamVector, ScalarNet, StructureError, absolute, concat, scatter, value_of

__all__ = [
    "FORCE_MODES",
    "check_skew",
    "canonical_structure",
    "QuadraticHamiltonian",
    "ForceModel",
    "KnownForce",
    "PseudoHamiltonianModel",
    "BaselineModel",
    "make_phnn",
    "make_baseline",
    "planted_model",
    "phnn_eval",
    "baseline_eval",
    "adjusted_hamiltonian",
    "adjusted_force",
    "replace_force",
    "remove_force",
    "model_descriptor",
    "build_model",
    "save_checkpoint",
    "load_checkpoint",
]

FORCE_MODES = ("state_time", "time", "state")


def check_skew(S) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise StructureError(f"structure matrix must be square, got {S.shape}")
    if not np.array_equal(S, -S.T):
        raise StructureError("structure matrix is not skew-symmetric")
    return S


def canonical_structure(n: int = 1) -> np.ndarray:
    eye = np.eye(n)
    zero = np.zeros((n, n))
    return np.block([[zero, eye], [-eye, zero]])


def _time_column(t, n: int) -> np.ndarray:
    return np.broadcast_to(np.reshape(np.asarray(t, dtype=np.float64), (-1, 1)), (n, 1))


def _as_batch(x):
    if np.ndim(value_of(x)) == 1:
        return (x.reshape(1, -1) if isinstance(x, Node) else np.asarray(x, float)[None, :]), True
    return x, False


class QuadraticHamiltonian:
    """Fixed ``H(x) = 1/2 sum w_i x_i^2``; same call surface as a scalar :class:`ScalarNet`."""

    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.d_in = self.weights.size
        self.d_out = 1

    def forward(self, x, p=None):
        xv = np.asarray(value_of(x), dtype=np.float64)
        return 0.5 * np.sum(self.weights * xv**2, axis=-1, keepdims=True)

    def grad_input(self, x, p=None):
        return x * self.weights


@dataclass
class ForceModel:
    """Network force writing to the state components listed in ``mask``."""

    mode: str
    mask: list[int]
    net: ScalarNet

    def __post_init__(self):
        if self.mode not in FORCE_MODES:
            raise ValueError(f"force mode must be one of {FORCE_MODES}, got {self.mode!r}")
        self.mask = [int(i) for i in self.mask]

    @staticmethod
    def input_dim(mode: str, d: int) -> int:
        return {"state_time": d + 1, "time": 1, "state": d}[mode]

    def __call__(self, x, t, p=None):
        """Masked force values, shape ``(batch, len(mask))``."""
        n = value_of(x).shape[0]
        if self.mode == "time":
            inp = _time_column(t, n)
        elif self.mode == "state":
            inp = x
        else:
            inp = concat([x, _time_column(t, n)], axis=1)
        return self.net.forward(inp, p)


class KnownForce:
    """A prescribed force ``fn(x, t) -> (batch, len(mask))`` in place of a network."""

    def __init__(self, fn: Callable | None, mask):
        self.fn = fn
        self.mask = [int(i) for i in mask]
        self.mode = "known"

    def __call__(self, x, t, p=None):
        xv = np.asarray(value_of(x), dtype=np.float64)
        if self.fn is None:
            return np.zeros((xv.shape[0], len(self.mask)))
        out = np.asarray(self.fn(xv, t), dtype=np.float64)
        return np.broadcast_to(out.reshape(xv.shape[0], -1), (xv.shape[0], len(self.mask)))


class PseudoHamiltonianModel:
    """``g(x, t) = (S - R) grad H(x) + f(x, t)`` with diagonal learnable ``R``.

    ``damped`` lists the state indices carrying a damping scalar (stored in
    ``params["R"]``, unconstrained in sign). ``force`` may be ``None``.
    """

    def __init__(self, S, damped, hamiltonian, force, params: ParamVector):
        self.S = check_skew(S)
        self.dim = self.S.shape[0]
        self.damped = [int(i) for i in damped]
        self.hamiltonian = hamiltonian
        self.force = force
        self.params = params
        if "R" in params and params["R"].shape != (len(self.damped),):
            raise StructureError("damping parameter count does not match the damped index set")

    def __deepcopy__(self, memo):
        params = self.params.copy()
        memo[id(self.params)] = params
        out = PseudoHamiltonianModel.__new__(PseudoHamiltonianModel)
        for key, val in self.__dict__.items():
            setattr(out, key, copy.deepcopy(val, memo))
        return out

    def clone(self) -> "PseudoHamiltonianModel":
        return copy.deepcopy(self)

    # ------------------------------------------------------------------
    def _p(self, p):
        return self.params.views() if p is None else p

    def damping_diag(self, p=None):
        p = self._p(p)
        if not self.damped:
            return np.zeros(self.dim)
        return scatter(p["R"], self.damped, self.dim)

    @property
    def damping(self) -> np.ndarray:
        return self.params["R"].copy() if self.damped else np.zeros(0)

    def grad_hamiltonian(self, x, p=None):
        return self.hamiltonian.grad_input(x, self._p(p))

    def hamiltonian_value(self, x, p=None):
        out = self.hamiltonian.forward(x, self._p(p))
        return value_of(out)[..., 0]

    def force_values(self, x, t, p=None):
        """Force on the masked components only, ``(batch, len(mask))``; zeros if no force."""
        xb, _ = _as_batch(x)
        if self.force is None:
            return np.zeros((value_of(xb).shape[0], 0))
        return self.force(xb, t, self._p(p))

    def assembled_force(self, x, t, p=None):
        xb, single = _as_batch(x)
        n = value_of(xb).shape[0]
        if self.force is None:
            out = np.zeros((n, self.dim))
        else:
            out = scatter(self.force(xb, t, self._p(p)), self.force.mask, self.dim)
        return out[0] if single else out

    def internal(self, x, p=None):
        xb, single = _as_batch(x)
        gh = self.hamiltonian.grad_input(xb, self._p(p))
        if p is None:
            out = gh @ (self.S - np.diag(self.damping_diag())).T
        else:
            out = gh @ self.S.T - gh * self.damping_diag(p)
        return out[0] if single else out

    def rhs(self, x, t, p=None):
        xb, single = _as_batch(x)
        out = self.internal(xb, p)
        if self.force is not None:
            out = out + scatter(self.force(xb, t, self._p(p)), self.force.mask, self.dim)
        return out[0] if single else out

    __call__ = rhs

    def regularized_force(self, x, t, p=None):
        """``sum_i |f_i|`` per sample over the masked components (zeros for known/no force)."""
        if self.force is None or isinstance(self.force, KnownForce):
            return np.zeros(value_of(x).shape[0])
        return absolute(self.force(x, t, self._p(p))).sum(axis=1)


class BaselineModel:
    """Black-box right-hand side.

    ``one-net``: one net on ``(x, t)`` (or on ``x`` alone when ``autonomous``).
    ``two-net``: a state net plus a time net, summed.
    """

    def __init__(self, variant: str, dim: int, nets: dict[str, ScalarNet], params: ParamVector,
                 autonomous: bool = False):
        if variant not in ("one-net", "two-net"):
            raise ValueError(f"unknown baseline variant {variant!r}")
        self.variant = variant
        self.dim = dim
        self.nets = nets
        self.params = params
        self.autonomous = autonomous
        self.force = None
        self.damped: list[int] = []

    def __deepcopy__(self, memo):
        params = self.params.copy()
        memo[id(self.params)] = params
        out = BaselineModel.__new__(BaselineModel)
        for key, val in self.__dict__.items():
            setattr(out, key, copy.deepcopy(val, memo))
        return out

    def clone(self) -> "BaselineModel":
        return copy.deepcopy(self)

    @property
    def damping(self) -> np.ndarray:
        return np.zeros(0)

    def rhs(self, x, t, p=None):
        xb, single = _as_batch(x)
        p = self.params.views() if p is None else p
        n = value_of(xb).shape[0]
        if self.variant == "one-net":
            inp = xb if self.autonomous else concat([xb, _time_column(t, n)], axis=1)
            out = self.nets["one"].forward(inp, p)
        else:
            out = self.nets["state"].forward(xb, p) + self.nets["time"].forward(_time_column(t, n), p)
        return out[0] if single else out

    __call__ = rhs

    def regularized_force(self, x, t, p=None):
        return np.zeros(value_of(x).shape[0])


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def make_phnn(S, damped, force_mode: str | None = None, force_mask=None, seed=0,
              hidden=(100, 100)) -> PseudoHamiltonianModel:
    """Fresh PHNN: Glorot-initialized networks, damping scalars at zero."""
    S = check_skew(S)
    d = S.shape[0]
    rng = np.random.default_rng(seed)
    arrays = ScalarNet.init_arrays(d, 1, rng, hidden, prefix="H.")
    if force_mode is not None:
        force_mask = list(range(d)) if force_mask is None else [int(i) for i in force_mask]
        arrays.update(ScalarNet.init_arrays(ForceModel.input_dim(force_mode, d), len(force_mask), rng,
                                            hidden, prefix="F."))
    if damped:
        arrays["R"] = np.zeros(len(damped))
    params = ParamVector.from_arrays(arrays)
    hnet = ScalarNet(d, 1, params, "H.", tuple(hidden))
    force = None
    if force_mode is not None:
        fnet = ScalarNet(ForceModel.input_dim(force_mode, d), len(force_mask), params, "F.", tuple(hidden))
        force = ForceModel(force_mode, force_mask, fnet)
    return PseudoHamiltonianModel(S, damped, hnet, force, params)


def make_baseline(variant: str, dim: int, seed=0, hidden=None, autonomous: bool = False) -> BaselineModel:
    rng = np.random.default_rng(seed)
    if variant == "one-net":
        hidden = (150, 150) if hidden is None else tuple(hidden)
        d_in = dim if autonomous else dim + 1
        params = ParamVector.from_arrays(ScalarNet.init_arrays(d_in, dim, rng, hidden, prefix="N."))
        nets = {"one": ScalarNet(d_in, dim, params, "N.", hidden)}
    elif variant == "two-net":
        hidden = (100, 100) if hidden is None else tuple(hidden)
        arrays = ScalarNet.init_arrays(dim, dim, rng, hidden, prefix="X.")
        arrays.update(ScalarNet.init_arrays(1, dim, rng, hidden, prefix="T."))
        params = ParamVector.from_arrays(arrays)
        nets = {"state": ScalarNet(dim, dim, params, "X.", hidden),
                "time": ScalarNet(1, dim, params, "T.", hidden)}
    else:
        raise ValueError(f"unknown baseline variant {variant!r}")
    return BaselineModel(variant, dim, nets, params, autonomous)


def planted_model(system, with_force: bool = True) -> PseudoHamiltonianModel:
    """Exact Hamiltonian, damping and force of ``system`` in PHNN form."""
    damped = system.damped_indices
    params = ParamVector.from_arrays({"R": system.damping_values})
    force = None
    if with_force and system.force_indices:
        force = KnownForce(system.external_force, system.force_indices)
    model = PseudoHamiltonianModel(system.structure(), damped, QuadraticHamiltonian(system.quadratic_weights()),
                                   force, params)
    model.system = system
    return model


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def phnn_eval(model: PseudoHamiltonianModel, x, t, p=None):
    return model.rhs(x, t, p)


def baseline_eval(model: BaselineModel, x, t, p=None):
    return model.rhs(x, t, p)


def adjusted_hamiltonian(model: PseudoHamiltonianModel, x) -> np.ndarray:
    """``H(x) - H(0)``, removing the unidentifiable constant."""
    x = np.asarray(x, dtype=np.float64)
    xb = x[None, :] if x.ndim == 1 else x
    vals = model.hamiltonian_value(xb) - model.hamiltonian_value(np.zeros((1, model.dim)))[0]
    return vals[0] if x.ndim == 1 else vals


def adjusted_force(model: PseudoHamiltonianModel, x, t) -> np.ndarray:
    """Masked force values at the samples ``(x, t)`` minus their mean over the samples."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("adjusted_force needs at least one sample")
    f = np.asarray(value_of(model.force_values(x, t)), dtype=np.float64)
    return f - f.mean(axis=0, keepdims=True)


def replace_force(model: PseudoHamiltonianModel, fn: Callable | None) -> PseudoHamiltonianModel:
    """Copy of ``model`` whose force is ``fn(x, t)`` on the same mask (``None`` means zero)."""
    if model.force is None:
        raise ValueError("model has no force term to replace")
    out = model.clone()
    out.force = KnownForce(fn, model.force.mask)
    return out


def remove_force(model: PseudoHamiltonianModel) -> PseudoHamiltonianModel:
    out = model.clone()
    out.force = None
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def model_descriptor(model) -> dict:
    if isinstance(model, BaselineModel):
        net = next(iter(model.nets.values()))
        return {"kind": "baseline", "variant": model.variant, "dim": model.dim,
                "hidden": list(net.hidden), "autonomous": model.autonomous}
    if hasattr(model, "system"):
        from .systems import system_to_dict

        return {"kind": "planted", "system": system_to_dict(model.system),
                "with_force": model.force is not None}
    if isinstance(model.force, KnownForce):
        raise ValueError("models with a prescribed force function cannot be serialized")
    desc = {"kind": "phnn", "dim": model.dim, "S": model.S.tolist(), "damped": model.damped,
            "hidden": list(model.hamiltonian.hidden), "force_mode": None, "force_mask": None}
    if model.force is not None:
        desc["force_mode"] = model.force.mode
        desc["force_mask"] = list(model.force.mask)
    return desc


def build_model(desc: dict, params: ParamVector | None = None, seed=0):
    kind = desc["kind"]
    if kind == "planted":
        from .systems import system_from_dict

        return planted_model(system_from_dict(desc["system"]), desc.get("with_force", True))
    if kind == "baseline":
        model = make_baseline(desc["variant"], desc["dim"], seed, desc.get("hidden"), desc.get("autonomous", False))
    elif kind == "phnn":
        model = make_phnn(desc["S"], desc["damped"], desc.get("force_mode"), desc.get("force_mask"), seed,
                          tuple(desc.get("hidden", (100, 100))))
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    if params is not None:
        if params.index != model.params.index:
            raise StructureError("checkpoint parameters do not match the model descriptor")
        model.params.assign(params.data)
    return model


def _descriptor_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(model, path) -> None:
    """Write parameters to ``path`` and the model descriptor to ``path + '.json'``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.params.save(path)
    _descriptor_path(path).write_text(json.dumps(model_descriptor(model), indent=2))


def load_checkpoint(path):
    path = Path(path)
    desc = json.loads(_descriptor_path(path).read_text())
    params = ParamVector.load(path) if desc["kind"] != "planted" else None
    return build_model(desc, params)
