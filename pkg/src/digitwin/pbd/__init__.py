"""Unified position-based dynamics for rigid bodies and Cosserat rods."""

from .constraints import (
    PairDeltas,
    SingularConstraintError,
    compute_darboux,
    generalized_inverse_mass,
    generic_project,
    solve_bend_twist,
    solve_rigid_contact,
    solve_rigid_particle_contact,
    solve_shear_stretch,
)
from .engine import ExternalForces, SkippedConstraintWarning, predict_states, step, update_velocities
from .state import DeltaAccumulator, ParticleState, RigidBodyState, RodState, SimConfig, World

__all__ = [
    "DeltaAccumulator", "ExternalForces", "PairDeltas", "ParticleState", "RigidBodyState", "RodState",
    "SimConfig", "SingularConstraintError", "SkippedConstraintWarning", "World", "compute_darboux",
    "generalized_inverse_mass", "generic_project", "predict_states", "solve_bend_twist",
    "solve_rigid_contact", "solve_rigid_particle_contact", "solve_shear_stretch", "step",
    "update_velocities",
]
