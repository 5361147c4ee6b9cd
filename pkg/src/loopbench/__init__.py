"""loopbench: a closed-loop control workbench.

Deterministic fixed-step simulation, the classic PID/tuning-rule baseline,
learned plant surrogates, neural controllers and gain schedulers, and the
two safety supervisor designs that bound their influence.
"""

from . import dataio, errors, metrics, neuro, nnet, pid, safety, simcore, surrogate, tuning
from .simcore import (
    DisturbanceSpec, Fopdt, LinearStateSpace, PlantModel, SecondOrder, SensorSpec,
    SimConfig, TankNonlinear, Trajectory, simulate,
)

__version__ = "0.1.0"

__all__ = [
    "dataio", "errors", "metrics", "neuro", "nnet", "pid", "safety", "simcore",
    "surrogate", "tuning",
    "DisturbanceSpec", "Fopdt", "LinearStateSpace", "PlantModel", "SecondOrder",
    "SensorSpec", "SimConfig", "TankNonlinear", "Trajectory", "simulate",
]
