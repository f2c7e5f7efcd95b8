"""Options with deliberation costs: exact tabular evaluation, gradients, and an A2OC learner."""

from .a2oc import A2OCConfig, train
from .deliberation import (
    DeliberationConfig,
    deliberation_value,
    expected_duration,
    optimize_mu,
    transformed_evaluate,
)
from .gradients import (
    finite_difference_check,
    option_policy_gradient,
    termination_gradient,
    termination_gradient_exact_bellman,
)
from .gridworld import GridLayout, build_four_rooms, build_intersection_maze
from .mdp import ConvergenceError, Mdp, StationaryPolicy, ValidationError, policy_evaluation, value_iteration
from .options import Theta, Trajectory, intra_option_evaluate, option_models, smdp_evaluate

__version__ = "0.1.0"
