"""Desk-scale laboratory for policy optimization over masked-diffusion
sequence policies: rollouts with cached-logit branching, one-step
surrogate likelihoods, step-wise and terminal group losses, and oracles
that verify the gradient identities and variance behavior by enumeration
and Monte Carlo.
"""

__version__ = "0.1.0"

from .counters import OpCounters
from .errors import ConfigurationError, ContractViolation, DivergenceError
from .objective import (
    GroupOutcome,
    LossConfig,
    StepGroup,
    TimestepSampler,
    aggregate_step_loss,
    combined_loss,
    group_advantages,
    kl_penalty,
    sample_timesteps,
    step_loss,
    terminal_loss,
)
from .policy import (
    LinearArch,
    MlpArch,
    PolicyParams,
    action_logprob,
    grad_action_logprob,
    greedy_action,
    init_params,
    load_policy,
    sample_action,
    save_policy,
)
from .rollout import Trajectory, UnmaskSchedule, branch, rollout, select_states
from .sequences import (
    Action,
    DiffusionState,
    MaskedSequence,
    Vocab,
    enumerate_actions,
    fill,
)
from .streams import stream
from .surrogate import (
    SurrogateConfig,
    corrupt_prompt,
    seq_surrogate_grad,
    seq_surrogate_logprob,
    state_surrogate_grad,
    state_surrogate_logprob,
)
from .tasks import Task, first_violation_time, make_task
from .trainer import (
    EvalResult,
    OptimizerConfig,
    PolicyConfig,
    RunConfig,
    SamplerConfig,
    TrainResult,
    config_from_dict,
    count_ops,
    evaluate,
    predict_run_totals,
    train,
)
from .verify import (
    OracleProblem,
    VarianceCondition,
    VarianceReport,
    WeightedStates,
    bootstrap_ci,
    build_oracle_problem,
    exact_seq_gradient,
    exact_step_gradient,
    perturb_params,
    prop1_check,
    prop2_check,
    theorem1_check,
    theorem1_offpolicy_check,
    theorem2_check,
    trcov_estimate,
    trcov_protocol,
)

__all__ = [
    "__version__",
    "Action",
    "ConfigurationError",
    "ContractViolation",
    "DiffusionState",
    "DivergenceError",
    "EvalResult",
    "GroupOutcome",
    "LinearArch",
    "LossConfig",
    "MaskedSequence",
    "MlpArch",
    "OpCounters",
    "OptimizerConfig",
    "OracleProblem",
    "PolicyConfig",
    "PolicyParams",
    "RunConfig",
    "SamplerConfig",
    "StepGroup",
    "SurrogateConfig",
    "Task",
    "TimestepSampler",
    "TrainResult",
    "Trajectory",
    "UnmaskSchedule",
    "VarianceCondition",
    "VarianceReport",
    "Vocab",
    "WeightedStates",
    "action_logprob",
    "aggregate_step_loss",
    "bootstrap_ci",
    "branch",
    "build_oracle_problem",
    "combined_loss",
    "config_from_dict",
    "corrupt_prompt",
    "count_ops",
    "enumerate_actions",
    "evaluate",
    "exact_seq_gradient",
    "exact_step_gradient",
    "fill",
    "first_violation_time",
    "grad_action_logprob",
    "greedy_action",
    "group_advantages",
    "init_params",
    "kl_penalty",
    "load_policy",
    "make_task",
    "perturb_params",
    "predict_run_totals",
    "prop1_check",
    "prop2_check",
    "rollout",
    "sample_action",
    "sample_timesteps",
    "save_policy",
    "select_states",
    "seq_surrogate_grad",
    "seq_surrogate_logprob",
    "state_surrogate_grad",
    "state_surrogate_logprob",
    "step_loss",
    "stream",
    "terminal_loss",
    "theorem1_check",
    "theorem1_offpolicy_check",
    "theorem2_check",
    "train",
    "trcov_estimate",
    "trcov_protocol",
]
