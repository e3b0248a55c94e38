"""Denoising rollouts, unmasking schedules, cached-logit branching."""

import importlib
import io
import json

import numpy as np
import pytest

rollout_mod = importlib.import_module("dispo.rollout")
from dispo.counters import OpCounters
from dispo.errors import ConfigurationError, ContractViolation
from dispo.policy import LinearArch, greedy_action, init_params, rows_context, softmax
from dispo.rollout import UnmaskSchedule, branch, dump_trajectory, rollout, select_states
from dispo.sequences import MaskedSequence, Vocab
from dispo.streams import stream

VOCAB = Vocab(3)
ARCH = LinearArch(VOCAB, prompt_len=2, completion_len=4, window=1)
PROMPT = MaskedSequence((0, 2), VOCAB)


def random_params(seed, scale=0.5):
    return init_params(ARCH, stream(seed, "rollout-params"), scale=scale)


def test_schedule_mask_counts():
    assert UnmaskSchedule(4).mask_counts(4, 1) == [4, 0]
    assert UnmaskSchedule(2).mask_counts(4, 2) == [4, 2, 0]
    assert UnmaskSchedule(1).mask_counts(3, 3) == [3, 2, 1, 0]
    assert UnmaskSchedule(3).mask_counts(4, 2) == [4, 1, 0]


def test_schedule_must_fit_exactly():
    with pytest.raises(ConfigurationError):
        UnmaskSchedule(2).mask_counts(4, 3)  # empty before the last step
    with pytest.raises(ConfigurationError):
        UnmaskSchedule(1).mask_counts(4, 2)  # leftovers at the end
    with pytest.raises(ConfigurationError):
        UnmaskSchedule(0)


def test_block_schedule_restricts_eligibility():
    sched = UnmaskSchedule(1, block_size=2)
    assert sched.eligible((0, 1, 2, 3)) == (0, 1)
    assert sched.eligible((1, 2, 3)) == (1,)
    assert sched.eligible((2, 3)) == (2, 3)
    assert sched.mask_counts(4, 4) == [4, 3, 2, 1, 0]


def test_mask_sets_shrink_on_schedule():
    params = random_params(1)
    sched = UnmaskSchedule(2)
    traj = rollout(params, PROMPT, 2, sched, stream(1, "roll"))
    counts = sched.mask_counts(4, 2)
    for t in range(1, traj.n_steps + 2):
        assert len(traj.state_at(t).mask()) == counts[t - 1]
    assert traj.final_completion().fully_visible()


def test_committed_tokens_persist():
    params = random_params(2)
    traj = rollout(params, PROMPT, 4, UnmaskSchedule(1), stream(2, "roll"))
    for t in range(1, traj.n_steps + 1):
        for pos, tok in traj.events[t - 1]:
            for later in range(t + 1, traj.n_steps + 2):
                assert traj.state_at(later).completion.tokens[pos] == tok


def test_cache_matches_fresh_forward_bitwise():
    params = random_params(3)
    traj = rollout(params, PROMPT, 2, UnmaskSchedule(2), stream(3, "roll"))
    for t in range(1, traj.n_steps + 1):
        fresh = rows_context(params, traj.state_at(t)).rows
        assert np.array_equal(traj.cache_at(t).rows, fresh)
        assert traj.cache_at(t).positions == traj.state_at(t).mask()


def test_greedy_commits_highest_confidence_eligible():
    params = random_params(4)
    sched = UnmaskSchedule(2, block_size=2)
    traj = rollout(params, PROMPT, 2, sched, stream(4, "roll"), greedy=True)
    for t in range(1, traj.n_steps + 1):
        grid = traj.cache_at(t)
        action = greedy_action(grid)
        probs = softmax(grid.rows)
        eligible = set(sched.eligible(grid.positions))
        scored = sorted(
            (-probs[r, action[pos]], pos, action[pos])
            for r, pos in enumerate(grid.positions)
            if pos in eligible
        )
        expect = tuple(sorted((pos, tok) for _, pos, tok in scored[:2]))
        assert traj.events[t - 1] == expect


def test_ties_break_to_lowest_position_then_token():
    params = init_params(ARCH)  # uniform rows everywhere
    traj = rollout(params, PROMPT, 2, UnmaskSchedule(2), stream(5, "roll"), greedy=True)
    assert traj.events == (((0, 0), (1, 0)), ((2, 0), (3, 0)))


def test_rollout_counts_one_forward_per_step():
    params = random_params(6)
    counters = OpCounters()
    rollout(params, PROMPT, 4, UnmaskSchedule(1), stream(6, "roll"), counters=counters)
    assert counters.rollout_forward_passes == 4


def test_branch_runs_no_forward_passes(monkeypatch):
    params = random_params(7)
    traj = rollout(params, PROMPT, 2, UnmaskSchedule(2), stream(7, "roll"))

    def boom(*a, **k):
        raise AssertionError("branch must not run the policy")

    monkeypatch.setattr(rollout_mod, "rows_context", boom)
    pairs = branch(traj, 1, 5, stream(7, "branch"))
    assert len(pairs) == 5
    state = traj.state_at(1)
    for action, completion in pairs:
        assert action.positions() == state.mask()
        assert completion.fully_visible()
        for p in state.completion.visible_positions():
            assert completion.tokens[p] == state.completion.tokens[p]


def test_branch_is_reproducible():
    params = random_params(8)
    traj = rollout(params, PROMPT, 2, UnmaskSchedule(2), stream(8, "roll"))
    a = branch(traj, 2, 3, stream(8, "branch"))
    b = branch(traj, 2, 3, stream(8, "branch"))
    assert [x[0] for x in a] == [x[0] for x in b]
    with pytest.raises(ContractViolation):
        branch(traj, 3, 2, stream(8, "x"))  # no cache at the terminal state
    with pytest.raises(ContractViolation):
        branch(traj, 1, 0, stream(8, "x"))


def test_state_index_bounds():
    params = random_params(9)
    traj = rollout(params, PROMPT, 2, UnmaskSchedule(2), stream(9, "roll"))
    assert traj.state_at(3).completion.fully_visible()
    with pytest.raises(ContractViolation):
        traj.state_at(0)
    with pytest.raises(ContractViolation):
        traj.state_at(4)


def test_rollout_is_seed_deterministic():
    params = random_params(10)
    a = rollout(params, PROMPT, 4, UnmaskSchedule(1), stream(10, "roll"))
    b = rollout(params, PROMPT, 4, UnmaskSchedule(1), stream(10, "roll"))
    assert a.events == b.events
    assert [s.completion.tokens for s in a.states] == [s.completion.tokens for s in b.states]
    g = rollout(params, PROMPT, 4, UnmaskSchedule(1), stream(11, "unused"), greedy=True)
    h = rollout(params, PROMPT, 4, UnmaskSchedule(1), stream(12, "unused"), greedy=True)
    assert g.events == h.events


def test_select_states_is_trajectory_major():
    params = random_params(13)
    trajs = [rollout(params, PROMPT, 2, UnmaskSchedule(2), stream(13, "roll", k)) for k in range(3)]
    assert select_states(trajs, [1, 2]) == [(1, 1), (1, 2), (2, 1), (2, 2), (3, 1), (3, 2)]
    with pytest.raises(ContractViolation):
        select_states(trajs, [3])


def test_dump_trajectory_jsonl():
    params = random_params(14)
    traj = rollout(params, PROMPT, 2, UnmaskSchedule(2), stream(14, "roll"))
    buf = io.StringIO()
    dump_trajectory(traj, buf)
    lines = buf.getvalue().strip().split("\n")
    assert len(lines) == 3
    first = json.loads(lines[0])
    assert first["t"] == 1
    assert first["mask"] == [0, 1, 2, 3]
    assert first["completion"] == [-1, -1, -1, -1]
    assert not first["terminal"]
    last = json.loads(lines[-1])
    assert last["terminal"] and last["mask"] == []
    assert "committed" not in last
    assert all(v >= 0 for v in last["completion"])
