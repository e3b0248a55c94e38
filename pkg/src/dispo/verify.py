"""Verification oracles for the gradient identities and variance claims.

Everything here checks the production loss code against quantities computed
a second, independent way.  Exact gradients come from full enumeration of
the (tiny) action space; expectation identities are tested by Monte Carlo
with per-coordinate z-scores so the tolerance is sample-size-aware; the
variance claims are measured with the trace-covariance protocol (repeat
same-state branching, unbiased trace estimator, paired percentile
bootstrap over states).

The expectation identities verified here:

* step loss, group size Z:  E[-grad L_step] = ((Z-1)/Z) * grad J_t, where
  J_t is the expected reward of a surrogate draw at a state from the fixed
  state distribution for step t.  The (Z-1)/Z factor comes from the
  within-group mean baseline; it survives off-policy sampling because the
  baseline part reduces to the score-function identity.
* terminal loss, group size K:  E[-grad L_term] = ((K-1)/K) * grad J_seq.
  Same algebra as the step side: the group-mean baseline is built from the
  sampled completions, so it leaves the same (K-1)/K factor.  A baseline
  independent of the group would make the factor 1; a group mean is not
  such a baseline, for either loss family.
* combined loss:  the weighted sum of the two identities above, with the
  step side averaged over the timestep-sampler weights.

Enumeration requires the corruption-free surrogate: with corruption
disabled the surrogate is a normalized product of per-position rows, so
probabilities sum to one and the score identity holds exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .objective import LossConfig, step_loss
from .policy import PolicyParams, rows_context, sample_action
from .rollout import UnmaskSchedule, rollout
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
    PromptMaskPattern,
    SurrogateConfig,
    full_mask_state,
    state_surrogate_grad,
    state_surrogate_logprob,
)
from .tasks import RewardFn, StringMatchInstance, Task

ACTION_LIMIT = 100_000


def c_factor(group_size: int) -> float:
    """The group-mean-baseline scale (n-1)/n for a group of size n."""
    if group_size < 1:
        raise ContractViolation("group size must be >= 1")
    return (group_size - 1) / group_size


def zero_patterns(prompt_len: int, n_mc: int = 1) -> tuple[PromptMaskPattern, ...]:
    """Identity corruption patterns (nothing masked), for deterministic runs."""
    return (PromptMaskPattern((False,) * prompt_len, 0.0),) * n_mc


def perturb_params(
    params: PolicyParams, rng: np.random.Generator, scale: float = 0.01
) -> PolicyParams:
    """Shift the parameters by a random direction of exact norm ``scale``."""
    direction = rng.normal(size=params.dim)
    direction /= np.linalg.norm(direction)
    return params.replace_theta(params.theta + scale * direction)


@dataclass(frozen=True)
class WeightedStates:
    """A fixed distribution over diffusion states (the d_t of one step)."""

    states: tuple[DiffusionState, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.states) != len(self.weights) or not self.states:
            raise ContractViolation("states and weights must be non-empty and aligned")
        if any(w <= 0 for w in self.weights):
            raise ContractViolation("state weights must be positive")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ContractViolation("state weights must sum to 1")


@dataclass(frozen=True)
class OracleProblem:
    """A tiny instance whose action spaces enumerate exactly.

    ``step_states`` fixes one state distribution per denoising step and
    ``step_weights`` fixes the timestep-sampler law over those steps; both
    are held constant while gradients flow through the policy only.  The
    surrogate config must have corruption disabled.
    """

    prompt: MaskedSequence
    completion_len: int
    reward: RewardFn
    step_states: dict[int, WeightedStates]
    step_weights: dict[int, float]
    surrogate: SurrogateConfig = field(
        default_factory=lambda: SurrogateConfig(n_mc=1, ratio_law="zero")
    )

    def __post_init__(self) -> None:
        if self.surrogate.corruption_enabled:
            raise ContractViolation("oracle problems require corruption disabled")
        if set(self.step_states) != set(self.step_weights):
            raise ContractViolation("step_states and step_weights must cover the same steps")
        if abs(sum(self.step_weights.values()) - 1.0) > 1e-9:
            raise ContractViolation("timestep weights must sum to 1")

    def terminal_state(self) -> DiffusionState:
        return full_mask_state(self.prompt, self.completion_len)


def build_oracle_problem(seed: int = 7) -> tuple[OracleProblem, PolicyParams]:
    """The default enumerable instance plus a generic (non-uniform) policy.

    Vocab of 3, prompt length 2, completion length 3, window 1.  Step 1
    holds the fully masked state; step 2 mixes the three states with the
    first position committed.  Reward is the token-match fraction against
    a fixed target, so it varies across the action space.
    """
    from .policy import LinearArch, init_params

    vocab = Vocab(3)
    prompt = MaskedSequence((0, 2), vocab)
    completion_len = 3
    mid = vocab.mask_id
    full = full_mask_state(prompt, completion_len)
    committed = [
        DiffusionState(prompt, MaskedSequence((v, mid, mid), vocab)) for v in range(vocab.size)
    ]
    problem = OracleProblem(
        prompt=prompt,
        completion_len=completion_len,
        reward=RewardFn("stringmatch", StringMatchInstance((0, 1, 2), vocab.size)),
        step_states={
            1: WeightedStates((full,), (1.0,)),
            2: WeightedStates(tuple(committed), (0.5, 0.3, 0.2)),
        },
        step_weights={1: 0.6, 2: 0.4},
    )
    arch = LinearArch(vocab=vocab, prompt_len=prompt.length, completion_len=completion_len, window=1)
    params = init_params(arch, stream(seed, "oracle-theta"), scale=0.4)
    return problem, params


def exact_step_gradient(
    params: PolicyParams,
    weighted: WeightedStates,
    reward: RewardFn,
    surr_cfg: SurrogateConfig,
    *,
    action_limit: int = ACTION_LIMIT,
) -> np.ndarray:
    """grad J_t by full enumeration: sum_s w(s) sum_a p(a|s) R(s,a) grad log p(a|s).

    Uses the production surrogate likelihood and its gradient, so this is
    exact only when corruption is disabled (the surrogate is then a
    normalized distribution over joint actions; the sum of enumerated
    probabilities is checked against 1).
    """
    if surr_cfg.corruption_enabled:
        raise ContractViolation("exact enumeration requires corruption disabled")
    grad = np.zeros(params.dim)
    for state, weight in zip(weighted.states, weighted.weights):
        patterns = zero_patterns(state.prompt.length, surr_cfg.n_mc)
        total_prob = 0.0
        for action in enumerate_actions(state, limit=action_limit):
            lp = state_surrogate_logprob(params, state, action, surr_cfg, patterns=patterns)
            g = state_surrogate_grad(params, state, action, surr_cfg, patterns=patterns)
            p = math.exp(lp)
            total_prob += p
            r = reward(state.prompt, fill(state, action))
            grad += weight * p * r * g
        if abs(total_prob - 1.0) > 1e-8:
            raise ContractViolation(
                f"enumerated action probabilities sum to {total_prob!r}, expected 1"
            )
    return grad


def exact_seq_gradient(
    params: PolicyParams,
    prompt: MaskedSequence,
    completion_len: int,
    reward: RewardFn,
    surr_cfg: SurrogateConfig,
    *,
    action_limit: int = ACTION_LIMIT,
) -> np.ndarray:
    """grad J_seq by enumerating whole completions at the fully masked state."""
    weighted = WeightedStates((full_mask_state(prompt, completion_len),), (1.0,))
    return exact_step_gradient(params, weighted, reward, surr_cfg, action_limit=action_limit)


@dataclass
class StateTables:
    """Per-action tables at one state: everything the MC loop needs.

    ``grads`` rows are gradients of the surrogate log-likelihood under the
    current parameters; ``ratios`` are current/behavior likelihood ratios;
    ``probs_old`` is the behavior sampling law.  Built once per state so
    the Monte Carlo reduces to index arithmetic.
    """

    state: DiffusionState
    actions: tuple[Action, ...]
    probs_old: np.ndarray
    ratios: np.ndarray
    rewards: np.ndarray
    grads: np.ndarray

    @property
    def n_actions(self) -> int:
        return len(self.actions)


def build_state_tables(
    params: PolicyParams,
    old_params: PolicyParams,
    state: DiffusionState,
    reward: RewardFn,
    surr_cfg: SurrogateConfig,
    *,
    action_limit: int = ACTION_LIMIT,
) -> StateTables:
    if surr_cfg.corruption_enabled:
        raise ContractViolation("state tables require corruption disabled")
    patterns = zero_patterns(state.prompt.length, surr_cfg.n_mc)
    actions = tuple(enumerate_actions(state, limit=action_limit))
    n = len(actions)
    logp_new = np.zeros(n)
    logp_old = np.zeros(n)
    rewards = np.zeros(n)
    grads = np.zeros((n, params.dim))
    for i, action in enumerate(actions):
        logp_new[i] = state_surrogate_logprob(params, state, action, surr_cfg, patterns=patterns)
        logp_old[i] = state_surrogate_logprob(
            old_params, state, action, surr_cfg, patterns=patterns
        )
        grads[i] = state_surrogate_grad(params, state, action, surr_cfg, patterns=patterns)
        rewards[i] = reward(state.prompt, fill(state, action))
    probs_old = np.exp(logp_old)
    if abs(float(probs_old.sum()) - 1.0) > 1e-8:
        raise ContractViolation("behavior probabilities do not sum to 1")
    probs_old = probs_old / probs_old.sum()  # remove float residue for rng.choice
    return StateTables(
        state=state,
        actions=actions,
        probs_old=probs_old,
        ratios=np.exp(logp_new - logp_old),
        rewards=rewards,
        grads=grads,
    )


def sample_group_indices(
    tables: StateTables, group_size: int, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """(n_samples, group_size) action indices drawn i.i.d. from the behavior law."""
    return rng.choice(tables.n_actions, size=(n_samples, group_size), p=tables.probs_old)


def group_gradient_rows(tables: StateTables, idx: np.ndarray) -> np.ndarray:
    """Per-group values of -grad L for the unclipped group loss, vectorized.

    Row r is (1/Z) sum_z ratio * advantage * grad-log-likelihood for the
    group idx[r], exactly what the production loss computes one group at a
    time; a property test pins the two routes together.
    """
    n, z = idx.shape
    r = tables.rewards[idx]
    adv = r - r.mean(axis=1, keepdims=True)
    coef = tables.ratios[idx] * adv / z
    scatter = np.zeros((n, tables.n_actions))
    rows = np.arange(n)
    for col in range(z):
        scatter[rows, idx[:, col]] += coef[:, col]
    return scatter @ tables.grads


@dataclass
class GradientCheckReport:
    """Monte Carlo vs enumeration comparison for one expectation identity."""

    name: str
    n_samples: int
    estimate: np.ndarray
    target: np.ndarray
    std_err: np.ndarray
    max_abs_z: float
    rel_l2: float
    max_ratio: float
    z_threshold: float
    rel_tol: float
    passed: bool
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_samples": self.n_samples,
            "estimate": [float(x) for x in self.estimate],
            "target": [float(x) for x in self.target],
            "max_abs_z": self.max_abs_z,
            "rel_l2": self.rel_l2,
            "max_ratio": self.max_ratio,
            "z_threshold": self.z_threshold,
            "rel_tol": self.rel_tol,
            "passed": self.passed,
            "notes": list(self.notes),
        }


def _finish_report(
    name: str,
    per_sample: np.ndarray,
    target: np.ndarray,
    max_ratio: float,
    z_threshold: float,
    rel_tol: float,
) -> GradientCheckReport:
    n = per_sample.shape[0]
    estimate = per_sample.mean(axis=0)
    std_err = per_sample.std(axis=0, ddof=1) / math.sqrt(n)
    diff = estimate - target
    notes: list[str] = []
    if max_ratio > 1e3:
        z_threshold *= 2.0
        rel_tol *= 2.0
        notes.append(f"extreme importance ratios (max {max_ratio:.3g}); tolerances doubled")
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std_err > 0, diff / std_err, np.where(np.abs(diff) <= 1e-12, 0.0, np.inf))
    target_norm = float(np.linalg.norm(target))
    if target_norm > 0:
        rel_l2 = float(np.linalg.norm(diff)) / target_norm
    else:
        rel_l2 = float(np.linalg.norm(estimate))
        notes.append("zero target; absolute deviation reported in place of relative")
    max_abs_z = float(np.max(np.abs(z)))
    passed = max_abs_z <= z_threshold and rel_l2 <= rel_tol
    return GradientCheckReport(
        name=name,
        n_samples=n,
        estimate=estimate,
        target=target,
        std_err=std_err,
        max_abs_z=max_abs_z,
        rel_l2=rel_l2,
        max_ratio=max_ratio,
        z_threshold=z_threshold,
        rel_tol=rel_tol,
        passed=passed,
        notes=tuple(notes),
    )


def _step_cells(
    params: PolicyParams, old_params: PolicyParams, problem: OracleProblem
) -> tuple[list[StateTables], np.ndarray]:
    """Flatten (step, state) into weighted cells with prebuilt tables."""
    cells: list[StateTables] = []
    probs: list[float] = []
    for t in sorted(problem.step_states):
        weighted = problem.step_states[t]
        omega = problem.step_weights[t]
        for state, w in zip(weighted.states, weighted.weights):
            cells.append(
                build_state_tables(params, old_params, state, problem.reward, problem.surrogate)
            )
            probs.append(omega * w)
    return cells, np.asarray(probs)


def _scatter_cells(
    cells: list[StateTables],
    probs: np.ndarray,
    group_size: int,
    n_samples: int,
    rng: np.random.Generator,
    out: np.ndarray,
    scale: float,
) -> None:
    """Add ``scale`` times a sampled per-replicate group gradient into ``out``.

    Every replicate first draws its cell (a state weighted by sampler law
    times state weight), then a group of actions inside that cell; cells
    are processed in blocks but replicate draws stay i.i.d.
    """
    cell_ids = rng.choice(len(cells), size=n_samples, p=probs)
    for c, tables in enumerate(cells):
        members = np.flatnonzero(cell_ids == c)
        if members.size == 0:
            continue
        idx = sample_group_indices(tables, group_size, members.size, rng)
        out[members] += scale * group_gradient_rows(tables, idx)


def theorem1_check(
    params: PolicyParams,
    problem: OracleProblem,
    n_branches: int = 2,
    n_samples: int = 100_000,
    seed: int = 0,
    *,
    old_params: PolicyParams | None = None,
    z_threshold: float = 4.0,
    rel_tol: float = 0.03,
    name: str | None = None,
) -> GradientCheckReport:
    """Check E[-grad L_step] against ((Z-1)/Z) grad J_t on the oracle problem.

    Groups are sampled from the behavior parameters (``old_params``,
    defaulting to on-policy); the target is enumerated at the current
    parameters and mixed over the problem's timestep weights.  Reported
    z-scores are per coordinate; a coordinate with zero Monte Carlo
    variance must match the target exactly.
    """
    behavior = params if old_params is None else old_params
    cells, probs = _step_cells(params, behavior, problem)
    target = c_factor(n_branches) * sum(
        problem.step_weights[t]
        * exact_step_gradient(params, problem.step_states[t], problem.reward, problem.surrogate)
        for t in problem.step_states
    )
    rng = stream(seed, "theorem1", n_branches)
    per_sample = np.zeros((n_samples, params.dim))
    _scatter_cells(cells, probs, n_branches, n_samples, rng, per_sample, 1.0)
    max_ratio = max(float(t.ratios.max()) for t in cells)
    if name is None:
        mode = "on-policy" if old_params is None else "off-policy"
        name = f"step-gradient-identity Z={n_branches} {mode}"
    return _finish_report(name, per_sample, np.asarray(target), max_ratio, z_threshold, rel_tol)


def theorem1_offpolicy_check(
    params: PolicyParams,
    old_params: PolicyParams,
    problem: OracleProblem,
    n_branches: int = 2,
    n_samples: int = 100_000,
    seed: int = 0,
    **kwargs,
) -> GradientCheckReport:
    """The step identity with groups drawn from perturbed behavior parameters."""
    return theorem1_check(
        params, problem, n_branches, n_samples, seed, old_params=old_params, **kwargs
    )


def theorem2_check(
    params: PolicyParams,
    problem: OracleProblem,
    *,
    alpha_step: float = 0.1,
    alpha_term: float = 1.0,
    n_branches: int = 2,
    n_completions: int = 2,
    n_samples: int = 100_000,
    seed: int = 0,
    old_params: PolicyParams | None = None,
    z_threshold: float = 4.0,
    rel_tol: float = 0.03,
) -> GradientCheckReport:
    """Check the combined-loss gradient identity on the oracle problem.

    Target: alpha_term * ((K-1)/K) * grad J_seq
          + alpha_step * ((Z-1)/Z) * sum_t omega(t) grad J_t.
    Each replicate draws K completions for the terminal group and one
    (step, state, branch-group) for the step loss, both from the behavior
    parameters.  Both group factors are forced by the group-mean baseline;
    neither side escapes it.
    """
    behavior = params if old_params is None else old_params
    rng = stream(seed, "theorem2", n_branches, n_completions)
    per_sample = np.zeros((n_samples, params.dim))
    target = np.zeros(params.dim)
    max_ratio = 1.0

    if alpha_term > 0:
        seq_tables = build_state_tables(
            params, behavior, problem.terminal_state(), problem.reward, problem.surrogate
        )
        idx = sample_group_indices(seq_tables, n_completions, n_samples, rng)
        per_sample += alpha_term * group_gradient_rows(seq_tables, idx)
        target += (
            alpha_term
            * c_factor(n_completions)
            * exact_seq_gradient(
                params, problem.prompt, problem.completion_len, problem.reward, problem.surrogate
            )
        )
        max_ratio = max(max_ratio, float(seq_tables.ratios.max()))

    if alpha_step > 0:
        cells, probs = _step_cells(params, behavior, problem)
        _scatter_cells(cells, probs, n_branches, n_samples, rng, per_sample, alpha_step)
        target += (
            alpha_step
            * c_factor(n_branches)
            * sum(
                problem.step_weights[t]
                * exact_step_gradient(
                    params, problem.step_states[t], problem.reward, problem.surrogate
                )
                for t in problem.step_states
            )
        )
        max_ratio = max(max_ratio, max(float(t.ratios.max()) for t in cells))

    name = f"combined-gradient-identity a_step={alpha_step} a_term={alpha_term}"
    return _finish_report(name, per_sample, target, max_ratio, z_threshold, rel_tol)


@dataclass
class Prop1Report:
    """Subset-scoring variance ratio against the m/L law."""

    n_positions: int
    n_scored: int
    sigma: float
    reward_law: str
    n_samples: int
    var_sub: float
    var_full: float
    ratio: float
    expected: float
    tol: float
    passed: bool

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def prop1_check(
    n_positions: int,
    n_scored: int,
    sigma: float = 1.0,
    n_samples: int = 100_000,
    seed: int = 0,
    *,
    reward_law: str = "uniform",
    tol: float = 0.02,
) -> Prop1Report:
    """Variance of a subset-sum score estimator vs the full-sum estimator.

    Position scores are i.i.d. zero-mean with variance sigma^2 and the
    reward is independent of them, so the ratio is exactly m/L; draws are
    paired (the subset sums the first m of the same scores).
    """
    if not 1 <= n_scored <= n_positions:
        raise ContractViolation("need 1 <= n_scored <= n_positions")
    rng = stream(seed, "prop1")
    g = rng.normal(0.0, sigma, (n_samples, n_positions)) if sigma > 0 else np.zeros(
        (n_samples, n_positions)
    )
    if reward_law == "uniform":
        r = rng.uniform(0.0, 1.0, n_samples)
    elif reward_law == "bernoulli":
        r = (rng.random(n_samples) < 0.5).astype(float)
    elif reward_law == "constant":
        r = np.ones(n_samples)
    else:
        raise ContractViolation(f"unknown reward law {reward_law!r}")
    full = r * g.sum(axis=1)
    sub = r * g[:, :n_scored].sum(axis=1)
    var_full = float(full.var(ddof=1))
    var_sub = float(sub.var(ddof=1))
    expected = n_scored / n_positions
    if var_full == 0.0:
        ratio = float("nan")
        passed = var_sub == 0.0
    else:
        ratio = var_sub / var_full
        passed = abs(ratio - expected) <= tol
    return Prop1Report(
        n_positions=n_positions,
        n_scored=n_scored,
        sigma=sigma,
        reward_law=reward_law,
        n_samples=n_samples,
        var_sub=var_sub,
        var_full=var_full,
        ratio=ratio,
        expected=expected,
        tol=tol,
        passed=passed,
    )


@dataclass
class Prop2Report:
    """Trace-covariance decay against group size."""

    group_sizes: tuple[int, ...]
    trcovs: tuple[float, ...]
    slope: float
    slope_bounds: tuple[float, float]
    n_samples: int
    passed: bool
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["group_sizes"] = list(self.group_sizes)
        d["trcovs"] = list(self.trcovs)
        d["slope_bounds"] = list(self.slope_bounds)
        d["notes"] = list(self.notes)
        return d


def prop2_check(
    params: PolicyParams,
    state: DiffusionState,
    reward: RewardFn,
    surr_cfg: SurrogateConfig,
    group_sizes: tuple[int, ...] = (1, 2, 4, 8),
    n_samples: int = 20_000,
    seed: int = 0,
    *,
    slope_bounds: tuple[float, float] = (-1.2, -0.8),
) -> Prop2Report:
    """Trace covariance of the group-averaged estimator vs group size.

    Uses an action-independent baseline (the enumerated mean reward at the
    state), so the estimator is an average of Z i.i.d. terms and its trace
    covariance must fall like 1/Z; the report carries the fitted log-log
    slope.  Group size 1 is admissible here precisely because the baseline
    does not depend on the sampled group.
    """
    tables = build_state_tables(params, params, state, reward, surr_cfg)
    baseline = float(tables.probs_old @ tables.rewards)
    centered = tables.rewards - baseline
    trcovs = []
    notes: list[str] = []
    for z in group_sizes:
        rng = stream(seed, "prop2", z)
        idx = rng.choice(tables.n_actions, size=(n_samples, z), p=tables.probs_old)
        coef = tables.ratios[idx] * centered[idx] / z
        scatter = np.zeros((n_samples, tables.n_actions))
        rows = np.arange(n_samples)
        for col in range(z):
            scatter[rows, idx[:, col]] += coef[:, col]
        ghat = scatter @ tables.grads
        trcovs.append(float(ghat.var(axis=0, ddof=1).sum()))
    if all(v == 0.0 for v in trcovs):
        notes.append("degenerate: zero variance at every group size")
        slope = float("nan")
        passed = True
    elif any(v == 0.0 for v in trcovs):
        slope = float("nan")
        passed = False
    else:
        slope = float(np.polyfit(np.log(group_sizes), np.log(trcovs), 1)[0])
        passed = slope_bounds[0] <= slope <= slope_bounds[1]
    return Prop2Report(
        group_sizes=tuple(group_sizes),
        trcovs=tuple(trcovs),
        slope=slope,
        slope_bounds=slope_bounds,
        n_samples=n_samples,
        passed=passed,
        notes=tuple(notes),
    )


def trcov_estimate(ghats: np.ndarray) -> float:
    """Unbiased trace-covariance estimate from repeated trials.

    ghats has one gradient estimate per row; the estimator is
    (1/(R-1)) sum_r ||g_r - mean||^2 and needs at least two trials.
    """
    ghats = np.asarray(ghats, dtype=np.float64)
    if ghats.ndim != 2 or ghats.shape[0] < 2:
        raise ContractViolation("trace-covariance estimation needs at least 2 trials")
    centered = ghats - ghats.mean(axis=0, keepdims=True)
    return float((centered**2).sum() / (ghats.shape[0] - 1))


def bootstrap_ci(
    diffs: np.ndarray,
    n_boot: int = 10_000,
    level: float = 0.95,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of paired differences."""
    diffs = np.asarray(diffs, dtype=np.float64)
    if diffs.size < 2:
        raise ContractViolation("bootstrap needs at least 2 paired samples")
    if rng is None:
        rng = stream(0, "bootstrap")
    idx = rng.integers(0, diffs.size, size=(n_boot, diffs.size))
    means = diffs[idx].mean(axis=1)
    lo = float(np.quantile(means, (1.0 - level) / 2.0))
    hi = float(np.quantile(means, 1.0 - (1.0 - level) / 2.0))
    return lo, hi


@dataclass(frozen=True)
class VarianceCondition:
    """One measurement arm: scoring scope and branch-group size."""

    name: str
    scope: str = "action"
    n_branches: int = 2

    def __post_init__(self) -> None:
        if self.scope not in ("action", "all"):
            raise ContractViolation(f"unknown scope {self.scope!r}")
        if self.n_branches < 2:
            raise ContractViolation("variance conditions need a group size of at least 2")


@dataclass(frozen=True)
class CandidateState:
    """A state harvested from a rollout, with its instance's reward."""

    state: DiffusionState
    reward: RewardFn


def collect_states(
    params: PolicyParams,
    task: Task,
    n_steps: int,
    schedule: UnmaskSchedule,
    timesteps: tuple[int, ...],
    seed: int = 0,
    rollouts_per_instance: int = 1,
) -> list[CandidateState]:
    """Harvest intermediate states by rolling the policy over the task pool."""
    out = []
    for i, inst in enumerate(task.instances):
        for k in range(rollouts_per_instance):
            traj = rollout(
                params, inst.prompt, n_steps, schedule, stream(seed, "collect", i, k)
            )
            for t in timesteps:
                out.append(CandidateState(traj.state_at(t), inst.reward))
    return out


@dataclass
class VarianceReport:
    """Per-condition trace-covariance estimates with paired comparisons.

    Differences and their intervals are against the first condition.  The
    state counts record the filtering funnel: harvested, with a non-empty
    mask set, and retained after the advantage filter intersection.
    """

    condition_names: tuple[str, ...]
    reference: str
    per_state: dict[str, tuple[float, ...]]
    estimates: dict[str, float]
    diff_point: dict[str, float]
    diff_ci: dict[str, tuple[float, float]]
    n_candidates: int
    n_maskable: int
    n_retained: int
    advantage_counts: dict[str, int]
    n_trials: int

    def validate(self) -> None:
        for cond, point in self.diff_point.items():
            lo, hi = self.diff_ci[cond]
            if not lo <= point <= hi:
                raise ContractViolation(
                    f"bootstrap interval [{lo}, {hi}] does not bracket the point {point}"
                )

    def to_dict(self) -> dict:
        return {
            "condition_names": list(self.condition_names),
            "reference": self.reference,
            "per_state": {k: list(v) for k, v in self.per_state.items()},
            "estimates": dict(self.estimates),
            "diff_point": dict(self.diff_point),
            "diff_ci": {k: list(v) for k, v in self.diff_ci.items()},
            "n_candidates": self.n_candidates,
            "n_maskable": self.n_maskable,
            "n_retained": self.n_retained,
            "advantage_counts": dict(self.advantage_counts),
            "n_trials": self.n_trials,
        }


def trcov_protocol(
    params: PolicyParams,
    old_params: PolicyParams,
    candidates: list[CandidateState],
    conditions: list[VarianceCondition],
    n_trials: int,
    surr_cfg: SurrogateConfig,
    seed: int = 0,
    *,
    n_boot: int = 10_000,
    level: float = 0.95,
) -> VarianceReport:
    """Repeat same-state branching and compare gradient noise across arms.

    For every candidate state and condition, ``n_trials`` independent
    branch groups are drawn from the behavior parameters and each group's
    unclipped loss gradient is computed; the per-state trace covariance is
    the unbiased trial estimator.  States are kept when (i) their mask set
    is non-empty and (ii) under every condition some trial produced a
    positive advantage (applied literally per condition, then
    intersected).  Differences against the first condition are paired by
    state; intervals are percentile bootstrap.

    Conditions sharing a group size also share their branch draws, so a
    scope comparison sees identical actions and rewards in both arms.
    """
    if n_trials < 2:
        raise ContractViolation("the trial estimator needs n_trials >= 2")
    if not conditions:
        raise ContractViolation("at least one condition is required")
    names = [c.name for c in conditions]
    if len(set(names)) != len(names):
        raise ContractViolation("condition names must be unique")

    maskable = [c for c in candidates if c.state.completion.mask_positions()]
    loss_cfg = LossConfig(clip_eps=None)
    per_state_all: dict[str, list[float]] = {c.name: [] for c in conditions}
    survived: dict[str, list[bool]] = {c.name: [] for c in conditions}

    for i, cand in enumerate(maskable):
        grid = rows_context(old_params, cand.state).grid()
        groups_by_size: dict[int, list[list[tuple[Action, float]]]] = {}
        for cond in conditions:
            z = cond.n_branches
            if z not in groups_by_size:
                groups = []
                for r in range(n_trials):
                    rng = stream(seed, "trcov-group", i, r, z)
                    members = []
                    for _ in range(z):
                        action = sample_action(grid, rng)
                        completed = fill(cand.state, action)
                        members.append((action, cand.reward(cand.state.prompt, completed)))
                    groups.append(members)
                groups_by_size[z] = groups
            ghats = np.zeros((n_trials, params.dim))
            any_positive = False
            for r, members in enumerate(groups_by_size[z]):
                rewards = [rw for _, rw in members]
                if max(rewards) > float(np.mean(rewards)):
                    any_positive = True
                _, grad = step_loss(
                    cand.state,
                    members,
                    params,
                    old_params,
                    loss_cfg,
                    surr_cfg,
                    stream(seed, "trcov-patterns", i, r),
                    scope=cond.scope,
                )
                ghats[r] = -grad
            per_state_all[cond.name].append(trcov_estimate(ghats))
            survived[cond.name].append(any_positive)

    keep = [
        j
        for j in range(len(maskable))
        if all(survived[c.name][j] for c in conditions)
    ]
    per_state = {
        name: tuple(vals[j] for j in keep) for name, vals in per_state_all.items()
    }
    estimates = {
        name: (float(np.mean(vals)) if vals else float("nan")) for name, vals in per_state.items()
    }
    diff_point: dict[str, float] = {}
    diff_ci: dict[str, tuple[float, float]] = {}
    reference = conditions[0].name
    if len(keep) >= 2:
        ref_vals = np.asarray(per_state[reference])
        for cond in conditions[1:]:
            diffs = np.asarray(per_state[cond.name]) - ref_vals
            diff_point[cond.name] = float(diffs.mean())
            diff_ci[cond.name] = bootstrap_ci(
                diffs, n_boot, level, stream(seed, "trcov-boot", cond.name)
            )

    report = VarianceReport(
        condition_names=tuple(names),
        reference=reference,
        per_state=per_state,
        estimates=estimates,
        diff_point=diff_point,
        diff_ci=diff_ci,
        n_candidates=len(candidates),
        n_maskable=len(maskable),
        n_retained=len(keep),
        advantage_counts={name: int(sum(flags)) for name, flags in survived.items()},
        n_trials=n_trials,
    )
    report.validate()
    return report
