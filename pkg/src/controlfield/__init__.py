"""Grid-based synthesis of optimal feedback control maps.

The library discretizes finite-horizon control problems on a truncated
spatial box, transports the costate backward along closed-loop
characteristics, and descends on the feedback field with per-time-slice
obstacle (constrained) or Poisson (unconstrained) directions, validated
against closed-form LQR/Riccati, backward-Burgers, and brute-force
dynamic-programming oracles.
"""

from .grids import Grid, TimeGrid, GridField, save_field_csv, load_field_csv
from .problems import (
    ConstraintSet,
    ControlProblem,
    LQRSpec,
    academic_problem,
    derivative_consistency,
    lqr_to_problem,
)
from .flow import (
    FlowBlowUpError,
    Trajectory,
    cost_functional,
    ensemble_objective,
    integrate_flow,
)
from .costate import CostateBlowUpError, CFLAdvisory, solve_costate
from .obstacle import (
    ObstacleConvergenceError,
    ObstacleSolution,
    PoissonConvergenceError,
    complementarity_residual,
    descent_inner_product,
    poisson_direction,
    solve_obstacle_slice,
)
from .lqr import (
    LQRDerived,
    RiccatiBlowUpError,
    RiccatiSolution,
    classical_riccati_gain,
    derive_lqr,
    lqr_feedback,
    lqr_feedback_field,
    lqr_gain,
    solve_riccati,
)

__version__ = "0.1.0"
