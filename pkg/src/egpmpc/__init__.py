"""Ensemble Gaussian-process modeling and MPC for driving on multi-friction surfaces."""

from egpmpc.gp import GpHyperparams, GpModel, FitConfig, fit, predict, mean_jacobian
from egpmpc.ensemble import (
    SurfaceModel,
    ObservationWindow,
    WeightConfig,
    ensemble_predict,
    ensemble_linear_predict,
    estimate_weights,
    push_observation,
)
from egpmpc.qpsolve import QpProblem, QpSolution, QpStatus, ToleranceConfig, solve
from egpmpc.vehicle import VehicleState, ControlInput, PlantParams, FrictionMap, plant_step
from egpmpc.mpc import MpcConfig, LtvModel, solve_ftocp, control_loop

__all__ = [
    "GpHyperparams", "GpModel", "FitConfig", "fit", "predict", "mean_jacobian",
    "SurfaceModel", "ObservationWindow", "WeightConfig",
    "ensemble_predict", "ensemble_linear_predict", "estimate_weights", "push_observation",
    "QpProblem", "QpSolution", "QpStatus", "ToleranceConfig", "solve",
    "VehicleState", "ControlInput", "PlantParams", "FrictionMap", "plant_step",
    "MpcConfig", "LtvModel", "solve_ftocp", "control_loop",
]
