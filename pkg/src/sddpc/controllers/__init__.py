"""Receding-horizon controllers sharing the ``(t, y_t) -> u_t`` callback."""

from .base import (
    ControllerInfeasible,
    ControllerLog,
    HorizonConfig,
    PolicySchedule,
    PredictiveController,
    ReferenceSchedule,
    StepRecord,
)
from .datadriven import DeePCController, SPCController, deepc_controller, future_blocks, spc_controller
from .stochastic import (
    StochasticPredictiveController,
    lqr_output_gain,
    mpc_controller,
    sddpc_controller,
    smpc_controller,
)

__all__ = [
    "ControllerInfeasible",
    "ControllerLog",
    "DeePCController",
    "HorizonConfig",
    "PolicySchedule",
    "PredictiveController",
    "ReferenceSchedule",
    "SPCController",
    "StepRecord",
    "StochasticPredictiveController",
    "deepc_controller",
    "future_blocks",
    "lqr_output_gain",
    "mpc_controller",
    "sddpc_controller",
    "smpc_controller",
    "spc_controller",
]
