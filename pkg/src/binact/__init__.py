"""Influence-vector control for redundantly-actuated binary (ON/OFF) robots.

Provides the core switch-vector algebra, a simulated plant with fault and
load injection, start-up calibration, a hybrid exhaustive/genetic binary
optimizer, an iterative static controller, a bang-bang sliding-mode dynamic
controller, and a reproducible experiment harness.
"""

from binact.core import (
    BinactError,
    BudgetError,
    CalibrationError,
    ConfigurationError,
    ContractError,
    DispersionModel,
    InfluenceMatrix,
    TargetSpec,
    apply_switch,
    residual,
    state_error,
    superpose,
    update_influence,
    updated_jacobian,
)

__version__ = "0.1.0"

__all__ = [
    "BinactError",
    "BudgetError",
    "CalibrationError",
    "ConfigurationError",
    "ContractError",
    "DispersionModel",
    "InfluenceMatrix",
    "TargetSpec",
    "apply_switch",
    "residual",
    "state_error",
    "superpose",
    "update_influence",
    "updated_jacobian",
    "__version__",
]
