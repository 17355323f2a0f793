from .bundle import (BAResult, BundleProblem, InsufficientMatches, full_ba, full_ba_steps, local_ba,
                     motion_only_ba, optimize_bundle, problem_from_map, snapshot_problem, solve_dense,
                     solve_schur)
from .lm import Aborted, LMConfig, LMResult, OptimizationDiverged, lm_iterations, run_lm
from .posegraph import DisconnectedGraphError, PoseGraphEdge, edge_residual, pose_graph_optimize
from .robust import CHI2_MONO, CHI2_MONO_GROSS, CHI2_STEREO, CHI2_STEREO_GROSS, HuberKernel, huber_cost, huber_weight

__all__ = [
    "Aborted", "BAResult", "BundleProblem", "CHI2_MONO", "CHI2_MONO_GROSS", "CHI2_STEREO", "CHI2_STEREO_GROSS", "DisconnectedGraphError",
    "HuberKernel", "InsufficientMatches", "LMConfig", "LMResult", "OptimizationDiverged",
    "PoseGraphEdge", "edge_residual", "full_ba", "full_ba_steps", "huber_cost", "huber_weight",
    "lm_iterations", "local_ba", "motion_only_ba", "optimize_bundle", "pose_graph_optimize",
    "problem_from_map", "run_lm", "snapshot_problem", "solve_dense", "solve_schur",
]
