"""Pseudo-Hamiltonian neural networks for system identification, in plain NumPy."""

from .diffcore import ParamVector, ScalarNet, StructureError
from .models import PseudoHamiltonianModel, make_baseline, make_phnn, planted_model
from .systems import LeakForce, MassSpringSpec, TankNetworkSpec, simulate
from .training import TrainConfig, evaluate, train

__all__ = [
    "ParamVector",
    "ScalarNet",
    "StructureError",
    "PseudoHamiltonianModel",
    "make_phnn",
    "make_baseline",
    "planted_model",
    "LeakForce",
    "MassSpringSpec",
    "TankNetworkSpec",
    "simulate",
    "TrainConfig",
    "train",
    "evaluate",
]

__version__ = "0.1.0"
