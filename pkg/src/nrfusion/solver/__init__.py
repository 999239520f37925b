"""Deformation solver: energy, normal equations, PCG, rotations, pose and the hierarchy."""

from .energy import (EnergyTerms, InternalInconsistencyError, NormalEquations, SolverParams,
                     build_data_system, build_normal_equations, evaluate_energy)
from .flipflop import (FlipFlopResult, build_hierarchy, coarsen, flip_flop_solve, prolongate,
                       solve_coarse_to_fine)
from .pcg import PCGResult, pcg_solve
from .pose import PoseResult, estimate_global_pose
from .rotations import (absorb_rigid_motion, apply_rotation_update, best_rotations, rigid_fit,
                        update_rotations)

__all__ = [
    "EnergyTerms", "InternalInconsistencyError", "NormalEquations", "SolverParams",
    "build_data_system", "build_normal_equations", "evaluate_energy",
    "FlipFlopResult", "build_hierarchy", "coarsen", "flip_flop_solve", "prolongate",
    "solve_coarse_to_fine", "PCGResult", "pcg_solve", "PoseResult", "estimate_global_pose",
    "absorb_rigid_motion", "apply_rotation_update", "best_rotations", "rigid_fit",
    "update_rotations",
]
