"""Control-based reinforcement learning with LQR controllers.

The learnable object is a small vector of model variables ``v`` that is
placed into structured linear dynamics; the controller is the LQR (or
piecewise LQR) policy of that model, and ``v`` is improved by gradient
ascent on the episode return.

Modules
-------
linalg
    Lyapunov and Riccati solvers, Riccati sensitivities.
policy
    Dynamics templates, partitions and the LQR control law.
envs
    CartPole, MountainCarContinuous and Pendulum dynamics.
learner
    Exploration, gradient estimation, value baseline and the training loop.
tabular
    Finite-MDP checks of the CBRL operator and Q-learning rule.
experiment
    Multi-seed runs, CSV output, summaries and the theory bench.
"""

from .errors import (
    CareError, CbrlError, ConfigError, DimensionError, EstimatorError, InputError,
    LyapunovError, RangeError, UpdateRejected,
)
from .linalg import (
    CareSolution, care_directional_derivative, care_residual, care_sensitivities,
    solve_care, solve_lyapunov, spectral_abscissa,
)
from .policy import (
    CostConfig, LqrSpec, PartitionDecision, Task, VariableVector, build_dynamics,
    get_template, lqr_action, map_action, select_partition,
)
from .envs import EnvState, StepResult, env_reset, env_step
from .learner import (
    LearnerConfig, Rollout, ValueBaseline, action_score, advantages, estimate_gradient,
    gradient_ascent_step, policy_variable_jacobian, region_gains, sample_exploratory_action,
    train, update_value_baseline,
)
from .experiment import (
    ExperimentConfig, RunReport, load_task_config, run_experiment, run_theory_bench,
    summarize_runs,
)

__version__ = "0.1.0"
