"""Oracle machinery: enumeration targets, MC fast paths, variance tools."""

import math

import numpy as np
import pytest

from dispo.errors import ContractViolation
from dispo.objective import LossConfig, step_loss, terminal_loss
from dispo.policy import LinearArch, init_params
from dispo.rollout import UnmaskSchedule
from dispo.sequences import DiffusionState, MaskedSequence, Vocab, enumerate_actions, fill
from dispo.streams import stream
from dispo.surrogate import SurrogateConfig, completion_action, state_surrogate_logprob
from dispo.tasks import RewardFn, StringMatchInstance, make_task
from dispo.verify import (
    CandidateState,
    OracleProblem,
    VarianceCondition,
    WeightedStates,
    bootstrap_ci,
    build_oracle_problem,
    build_state_tables,
    c_factor,
    collect_states,
    exact_seq_gradient,
    exact_step_gradient,
    group_gradient_rows,
    perturb_params,
    prop1_check,
    prop2_check,
    sample_group_indices,
    theorem1_check,
    theorem1_offpolicy_check,
    theorem2_check,
    trcov_estimate,
    trcov_protocol,
    zero_patterns,
)

OFF = SurrogateConfig(n_mc=1, ratio_law="zero")


def test_c_factor():
    assert c_factor(1) == 0.0
    assert c_factor(2) == 0.5
    assert c_factor(4) == 0.75
    with pytest.raises(ContractViolation):
        c_factor(0)


def test_zero_patterns_and_perturbation():
    pats = zero_patterns(3, 2)
    assert len(pats) == 2
    assert all(p.mask == (False, False, False) for p in pats)
    _, params = build_oracle_problem()
    moved = perturb_params(params, stream(1, "perturb"), scale=0.25)
    assert np.linalg.norm(moved.theta - params.theta) == pytest.approx(0.25, abs=1e-12)


def test_weighted_states_validation():
    problem, _ = build_oracle_problem()
    state = problem.terminal_state()
    with pytest.raises(ContractViolation):
        WeightedStates((state,), (0.5,))
    with pytest.raises(ContractViolation):
        WeightedStates((state, state), (1.5, -0.5))
    with pytest.raises(ContractViolation):
        OracleProblem(
            prompt=problem.prompt,
            completion_len=problem.completion_len,
            reward=problem.reward,
            step_states=problem.step_states,
            step_weights=problem.step_weights,
            surrogate=SurrogateConfig(n_mc=1, ratio_law="uniform"),
        )


def test_exact_gradient_vanishes_for_constant_reward():
    problem, params = build_oracle_problem()
    grad = exact_step_gradient(
        params, problem.step_states[1], lambda p, c: 1.0, problem.surrogate
    )
    assert np.max(np.abs(grad)) < 1e-10


def test_exact_gradient_is_shift_invariant():
    problem, params = build_oracle_problem()
    weighted = problem.step_states[2]
    base = exact_step_gradient(params, weighted, problem.reward, problem.surrogate)
    shifted_fn = lambda p, c: problem.reward(p, c) + 3.7
    shifted = exact_step_gradient(params, weighted, shifted_fn, problem.surrogate)
    assert np.allclose(base, shifted, atol=1e-10)


def test_exact_gradient_matches_finite_differences():
    problem, params = build_oracle_problem()
    weighted = problem.step_states[2]

    def objective(theta):
        p = params.replace_theta(theta)
        total = 0.0
        for state, w in zip(weighted.states, weighted.weights):
            pats = zero_patterns(state.prompt.length)
            for action in enumerate_actions(state):
                lp = state_surrogate_logprob(p, state, action, problem.surrogate, patterns=pats)
                r = problem.reward(state.prompt, fill(state, action))
                total += w * math.exp(lp) * r
        return total

    grad = exact_step_gradient(params, weighted, problem.reward, problem.surrogate)
    h = 1e-5
    fd = np.zeros_like(grad)
    for i in range(params.dim):
        e = np.zeros(params.dim)
        e[i] = h
        fd[i] = (objective(params.theta + e) - objective(params.theta - e)) / (2 * h)
    assert np.linalg.norm(fd - grad) / np.linalg.norm(grad) < 1e-6


def test_fast_path_matches_production_step_loss():
    problem, params = build_oracle_problem()
    old = perturb_params(params, stream(2, "old"), scale=0.3)
    state = problem.step_states[2].states[1]
    tables = build_state_tables(params, old, state, problem.reward, problem.surrogate)
    rng = stream(2, "draw")
    idx = sample_group_indices(tables, 3, 40, rng)
    fast = group_gradient_rows(tables, idx)
    cfg = LossConfig(clip_eps=None)
    for row in range(idx.shape[0]):
        members = [(tables.actions[j], float(tables.rewards[j])) for j in idx[row]]
        _, grad = step_loss(state, members, params, old, cfg, problem.surrogate)
        assert np.allclose(fast[row], -grad, atol=1e-12)


def test_fast_path_matches_production_terminal_loss():
    problem, params = build_oracle_problem()
    old = perturb_params(params, stream(3, "old"), scale=0.3)
    state = problem.terminal_state()
    tables = build_state_tables(params, old, state, problem.reward, problem.surrogate)
    idx = sample_group_indices(tables, 2, 25, stream(3, "draw"))
    fast = group_gradient_rows(tables, idx)
    cfg = LossConfig(clip_eps=None)
    for row in range(idx.shape[0]):
        completions = [
            (fill(state, tables.actions[j]), float(tables.rewards[j])) for j in idx[row]
        ]
        _, grad = terminal_loss(
            problem.prompt, completions, params, old, cfg, problem.surrogate
        )
        assert np.allclose(fast[row], -grad, atol=1e-12)


def test_step_identity_zscores_at_modest_samples():
    problem, params = build_oracle_problem()
    report = theorem1_check(params, problem, n_branches=2, n_samples=20_000, seed=5)
    assert report.max_abs_z <= 4.5
    assert report.n_samples == 20_000
    assert "on-policy" in report.name
    d = report.to_dict()
    assert len(d["estimate"]) == params.dim


def test_step_identity_offpolicy_smoke():
    problem, params = build_oracle_problem()
    old = perturb_params(params, stream(6, "old"), scale=0.05)
    report = theorem1_offpolicy_check(params, old, problem, n_samples=20_000, seed=6)
    assert "off-policy" in report.name
    assert report.max_abs_z <= 4.5
    assert report.max_ratio > 1.0


def test_group_size_one_is_degenerate():
    problem, params = build_oracle_problem()
    report = theorem1_check(params, problem, n_branches=1, n_samples=500, seed=7)
    assert report.passed
    assert np.allclose(report.estimate, 0.0)
    assert any("zero target" in note for note in report.notes)


def test_group_factor_scales_the_target():
    problem, params = build_oracle_problem()
    r2 = theorem1_check(params, problem, n_branches=2, n_samples=10, seed=8)
    r4 = theorem1_check(params, problem, n_branches=4, n_samples=10, seed=8)
    assert np.allclose(r4.target, 1.5 * r2.target, atol=1e-12)  # c(4)/c(2) = 1.5


def test_combined_identity_single_family_targets():
    problem, params = build_oracle_problem()
    term_only = theorem2_check(
        params, problem, alpha_step=0.0, alpha_term=1.0, n_samples=10, seed=9
    )
    expect = 0.5 * exact_seq_gradient(
        params, problem.prompt, problem.completion_len, problem.reward, problem.surrogate
    )
    assert np.allclose(term_only.target, expect, atol=1e-12)
    step_only = theorem2_check(
        params, problem, alpha_step=1.0, alpha_term=0.0, n_samples=10, seed=9
    )
    mix = sum(
        problem.step_weights[t]
        * exact_step_gradient(params, problem.step_states[t], problem.reward, problem.surrogate)
        for t in problem.step_states
    )
    assert np.allclose(step_only.target, 0.5 * mix, atol=1e-12)


def test_prop1_edges():
    full = prop1_check(6, 6, n_samples=4000, seed=10)
    assert full.ratio == 1.0 and full.passed
    silent = prop1_check(6, 3, sigma=0.0, n_samples=1000, seed=11)
    assert math.isnan(silent.ratio) and silent.passed
    bern = prop1_check(8, 2, n_samples=50_000, seed=12, reward_law="bernoulli")
    assert bern.passed and bern.expected == 0.25
    with pytest.raises(ContractViolation):
        prop1_check(4, 5)
    with pytest.raises(ContractViolation):
        prop1_check(4, 2, reward_law="poisson")


def test_prop2_zero_advantage_is_degenerate():
    problem, params = build_oracle_problem()
    report = prop2_check(
        params, problem.terminal_state(), lambda p, c: 0.5, problem.surrogate,
        group_sizes=(1, 2), n_samples=200, seed=13,
    )
    assert report.passed
    assert all(v == 0.0 for v in report.trcovs)
    assert math.isnan(report.slope)


def test_prop2_slope_near_inverse_group_size():
    problem, params = build_oracle_problem()
    report = prop2_check(
        params, problem.terminal_state(), problem.reward, problem.surrogate,
        group_sizes=(1, 2, 4), n_samples=6000, seed=14,
    )
    assert report.passed, report.slope
    assert report.slope == pytest.approx(-1.0, abs=0.15)


def test_trcov_estimate_two_trial_identity():
    g1 = np.array([1.0, 2.0, -1.0])
    g2 = np.array([0.0, 1.0, 3.0])
    expect = 0.5 * float(np.sum((g1 - g2) ** 2))
    assert trcov_estimate(np.stack([g1, g2])) == pytest.approx(expect, abs=1e-12)
    with pytest.raises(ContractViolation):
        trcov_estimate(g1[None, :])


def test_trcov_estimate_is_unbiased_on_gaussian_noise():
    rng = stream(15, "gauss")
    sigmas = np.array([1.0, 2.0])
    draws = rng.normal(size=(40_000, 2)) * sigmas
    got = trcov_estimate(draws)
    assert got == pytest.approx(float((sigmas**2).sum()), rel=0.05)


def test_bootstrap_ci_behaviour():
    const = bootstrap_ci(np.full(8, 1.25), n_boot=200, rng=stream(16, "boot"))
    assert const == (1.25, 1.25)
    rng = stream(16, "boot2")
    diffs = rng.normal(size=400)
    lo, hi = bootstrap_ci(diffs, n_boot=2000, rng=stream(16, "boot3"))
    assert lo < float(diffs.mean()) < hi
    assert lo < 0.0 < hi  # zero-mean noise at n=400: the interval spans zero
    with pytest.raises(ContractViolation):
        bootstrap_ci(np.array([1.0]))


def test_variance_condition_validation():
    with pytest.raises(ContractViolation):
        VarianceCondition("bad-scope", scope="branch")
    with pytest.raises(ContractViolation):
        VarianceCondition("too-small", n_branches=1)


def make_probe_task_and_params(scale):
    task = make_task("stringmatch", stream(17, "task"), 3, target_len=4, vocab_size=3)
    arch = LinearArch(task.vocab, task.prompt_len, task.completion_len, window=1)
    params = init_params(arch, stream(17, "theta"), scale=scale)
    return task, params


def test_collect_states_shapes():
    task, params = make_probe_task_and_params(0.4)
    sched = UnmaskSchedule(2)
    cands = collect_states(params, task, 2, sched, (1, 2), seed=18, rollouts_per_instance=2)
    assert len(cands) == 3 * 2 * 2
    assert {len(c.state.completion.mask_positions()) for c in cands} == {4, 2}


def test_trcov_protocol_report_structure():
    task, collector = make_probe_task_and_params(0.4)
    params = init_params(collector.arch, stream(19, "theta"), scale=0.4)
    old = perturb_params(params, stream(19, "old"), scale=0.3)
    cands = collect_states(collector, task, 2, UnmaskSchedule(2), (2,), seed=19)
    conditions = [
        VarianceCondition("action-z2", scope="action", n_branches=2),
        VarianceCondition("all-z2", scope="all", n_branches=2),
    ]
    report = trcov_protocol(params, old, cands, conditions, 8, OFF, seed=20, n_boot=400)
    assert report.reference == "action-z2"
    assert report.n_candidates == 3
    assert report.n_retained <= report.n_maskable <= report.n_candidates
    for name in ("action-z2", "all-z2"):
        assert len(report.per_state[name]) == report.n_retained
        assert report.advantage_counts[name] <= report.n_maskable
    if report.n_retained >= 2:
        lo, hi = report.diff_ci["all-z2"]
        assert lo <= report.diff_point["all-z2"] <= hi
    payload = report.to_dict()
    assert payload["n_trials"] == 8


def test_trcov_protocol_filters_deterministic_states():
    # a saturated policy samples one action only, so no advantage is ever
    # positive and every state falls to the filter
    task, _ = make_probe_task_and_params(0.0)
    arch = LinearArch(task.vocab, task.prompt_len, task.completion_len, window=1)
    w = np.zeros((task.vocab.size, arch.feature_dim))
    w[1, -1] = 1e3
    params = init_params(arch).replace_theta(w.ravel())
    cands = collect_states(params, task, 2, UnmaskSchedule(2), (2,), seed=21)
    conditions = [VarianceCondition("action-z2")]
    report = trcov_protocol(params, params, cands, conditions, 4, OFF, seed=22, n_boot=100)
    assert report.n_retained == 0
    assert math.isnan(report.estimates["action-z2"])
    assert report.diff_ci == {}
    with pytest.raises(ContractViolation):
        trcov_protocol(params, params, cands, conditions, 1, OFF, seed=23)
    with pytest.raises(ContractViolation):
        trcov_protocol(params, params, cands, [], 4, OFF, seed=24)


def test_oracle_problem_rejects_missing_weights():
    problem, _ = build_oracle_problem()
    with pytest.raises(ContractViolation):
        OracleProblem(
            prompt=problem.prompt,
            completion_len=problem.completion_len,
            reward=problem.reward,
            step_states=problem.step_states,
            step_weights={1: 1.0},
        )
