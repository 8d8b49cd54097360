"""Simulated arm, camera, and scenario configuration."""

from .kinematics import (ArmGeometry, IkError, JOINT_LIMITS, chain_points,
                         fk_nominal, grasp_rotation, ik_nominal, jacobian)
from .render import Box, CameraModel, Capsule, Renderer, TableSpec
from .scenario import Scenario, load_default, load_scenario
from .sim import (ArmWorld, BodyState, Command, GRAVITY, Observation,
                  ObjectSpec, Outcome, PlacementError)

__all__ = [
    "ArmGeometry", "ArmWorld", "BodyState", "Box", "CameraModel", "Capsule",
    "Command", "GRAVITY", "IkError", "JOINT_LIMITS", "Observation",
    "ObjectSpec", "Outcome", "PlacementError", "Renderer", "Scenario",
    "TableSpec", "chain_points", "fk_nominal", "grasp_rotation", "ik_nominal",
    "jacobian", "load_default", "load_scenario",
]
