"""Numerical laboratory for the viscous Moore-Greitzer compressor model.

Submodules
----------
model      parameters, state, characteristics, right-hand side, equilibria
solver     Lax-Wendroff / RK4 time stepping and a method-of-lines reference
attractor  design flow, stall waves, surge cycles, throttle scans
control    LQR regulation, the three-phase basic controller, a surrogate baseline
cli        scenario runner and file output
"""

from .model import (
    AnnulusState,
    CompressorParams,
    CubicCharacteristic,
    Frame,
    ModelError,
    NoIntersection,
    ThrottleSetting,
    design_equilibria,
    design_equilibrium,
    mean_characteristic,
    psi_c,
    psi_c_prime,
    rhs,
    throttle_inverse,
    throttle_inverse_prime,
)
from .solver import NonFinite, Scheme, SolverConfig, Trajectory, cfl_check, integrate, step

__version__ = "0.1.0"

__all__ = [
    "AnnulusState",
    "CompressorParams",
    "CubicCharacteristic",
    "Frame",
    "ModelError",
    "NoIntersection",
    "NonFinite",
    "Scheme",
    "SolverConfig",
    "ThrottleSetting",
    "Trajectory",
    "cfl_check",
    "design_equilibria",
    "design_equilibrium",
    "integrate",
    "mean_characteristic",
    "psi_c",
    "psi_c_prime",
    "rhs",
    "step",
    "throttle_inverse",
    "throttle_inverse_prime",
]
