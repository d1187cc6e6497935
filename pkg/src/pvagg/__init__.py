"""Aggregate modelling and frequency-support control of distributed PV fleets.

Modules
-------
panel    single-diode panel model and the power-deviation table g(dv, S)
fleet    unit / aggregate small-signal models and the nonlinear benchmark fleet
grid     load-frequency-control model and the combined PV + grid plant
care     Riccati solver (matrix sign function)
control  unknown-input observer, tracking LQR and command inversion
sim      RK4 integration, validation and frequency-event runners, metrics
mcs      Monte Carlo study of the averaging error of g
cli      batch entry point
"""

from .control import ControllerConfig, design_controller
from .fleet import Fleet, SharedParams, aggregate_params
from .grid import LfcParams
from .panel import build_lut, calibrate_panel

__all__ = [
    "ControllerConfig",
    "Fleet",
    "LfcParams",
    "SharedParams",
    "aggregate_params",
    "build_lut",
    "calibrate_panel",
    "design_controller",
]
__version__ = "0.1.0"
