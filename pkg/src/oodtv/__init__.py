"""Invariant risk minimization with total-variation penalties, a learned
penalty-strength network, and a convergent primal-dual trainer."""

from . import datagen, harness, nets, objectives, optim, tensor
from .datagen import EnvBatch, SuiteConfig, generate_environment, make_suite
from .harness import ExperimentConfig, ResultTable, evaluate, run_experiment
from .nets import Network, NetworkSpec, build, lambda_value, rho_weights
from .objectives import (
    GradBundle,
    LagrangianBreakdown,
    empirical_risk,
    grad_w_risk,
    grads_g,
    grads_h,
    lagrangian_g,
    lagrangian_h,
    semi_nash_check,
    subgrad_abs,
    tv_expectation,
)
from .optim import (
    ModelBundle,
    PDState,
    TrainConfig,
    iterations_for_tolerance,
    primal_dual_step,
    step_size,
    train,
)
from .tensor import Tape, Tensor, backward, grad_check

__version__ = "0.1.0"
