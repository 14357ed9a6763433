"""Branch MPC on scenario trees with parallel-scan LQR building blocks."""
from . import _kernels
from .condensed import CondensedQP, PredictionMatrices, SharingMap, build_prediction, condense, condense_tree, solve_dense
from .errors import BranchMPCError, FactorizationError, RegularizationRequired, SingularBlockError, TreeError
from .lqr_scan import (
    FeedbackPolicy,
    ScanElementBwd,
    ScanElementFwd,
    StageModel,
    ValueFunction,
    backward_scan,
    combine_bwd,
    combine_fwd,
    feedback_from_values,
    forward_scan,
    init_bwd_element,
    init_fwd_element,
    solve_lqr,
)
from .models_scenarios import (
    LatencySpec,
    ScenarioSpec,
    UnicycleProblem,
    build_intersection_case,
    build_latency_case,
    unicycle_step,
)
from .msilqr_tree import SolverOptions, SolverReport, backward_pass, linear_rollout, linearize, merit, solve, update_mu
from .problem import ALState, BmpcProblem, LinearQuadraticProblem, nonlinear_rollout
from .riccati import TreeStageModels, riccati_path, riccati_tree
from .scan import associative_scan
from .tree_core import TrajectoryTree, TreePath, TreeTopology, build_tree, flatten, path_graph

__version__ = "0.1.0"
backend = _kernels.get_backend().BACKEND
