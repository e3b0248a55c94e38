"""Denoising rollouts with cached behavior logits, and same-state branching.

A rollout starts from a fully masked completion and, over a fixed number
of steps, samples a token for every masked position, then commits the
scheduled number of highest-confidence sampled tokens (confidence = the
sampled token's probability; ties break to the lowest position, then the
lowest token id).  The full logits grid of every visited state is cached,
so groups of alternative continuations can later be drawn from the same
state without re-running the policy: that is what ``branch`` does, and it
performs zero forward passes by construction.

Schedules must empty the completion in exactly the configured number of
steps; an optional block size restricts commits to the left-most
incomplete block (semi-autoregressive order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO

import numpy as np

from .counters import OpCounters
from .errors import ConfigurationError, ContractViolation
from .policy import (
    LogitsGrid,
    PolicyParams,
    greedy_action,
    rows_context,
    sample_action,
    softmax,
)
from .sequences import Action, DiffusionState, MaskedSequence, fill


@dataclass(frozen=True)
class UnmaskSchedule:
    """Commit ``tokens_per_step`` tokens per step, optionally block-restricted."""

    tokens_per_step: int
    block_size: int | None = None

    def __post_init__(self) -> None:
        if self.tokens_per_step < 1:
            raise ConfigurationError("tokens_per_step must be >= 1")
        if self.block_size is not None and self.block_size < 1:
            raise ConfigurationError("block_size must be >= 1 when given")

    def eligible(self, masked: tuple[int, ...]) -> tuple[int, ...]:
        """Masked positions eligible for commit: all, or the left-most incomplete block."""
        if self.block_size is None or not masked:
            return masked
        first_block = min(masked) // self.block_size
        lo, hi = first_block * self.block_size, (first_block + 1) * self.block_size
        return tuple(p for p in masked if lo <= p < hi)

    def mask_counts(self, length: int, n_steps: int) -> list[int]:
        """Simulated |mask| per state x_1..x_{n_steps} plus the terminal 0.

        Raises if the schedule cannot empty ``length`` tokens in exactly
        ``n_steps`` steps.  The count sequence is deterministic: commits
        never depend on which tokens were sampled.
        """
        if length < 1 or n_steps < 1:
            raise ConfigurationError("length and n_steps must be >= 1")
        masked = list(range(length))
        counts = [length]
        for t in range(n_steps):
            if not masked:
                raise ConfigurationError(
                    f"schedule empties {length} tokens before step {t + 1} of {n_steps}; "
                    "mask sets must strictly decrease through the final step"
                )
            elig = self.eligible(tuple(masked))
            commit = min(self.tokens_per_step, len(elig))
            for p in elig[:commit]:
                masked.remove(p)
            counts.append(len(masked))
        if masked:
            raise ConfigurationError(
                f"schedule leaves {len(masked)} of {length} tokens masked after {n_steps} steps"
            )
        return counts

    def validate(self, length: int, n_steps: int) -> None:
        self.mask_counts(length, n_steps)


@dataclass(frozen=True)
class Trajectory:
    """States x_1..x_T, the terminal filled sequence, commits, and cached logits."""

    prompt: MaskedSequence
    states: tuple[DiffusionState, ...]  # length T+1; last one is terminal (no masks)
    events: tuple[tuple[tuple[int, int], ...], ...]  # per step: ((pos, token), ...)
    cache: tuple[LogitsGrid, ...]  # length T, behavior logits at each state

    @property
    def n_steps(self) -> int:
        return len(self.events)

    def state_at(self, t: int) -> DiffusionState:
        """State x_t for t in 1..T, or the terminal state at t = T+1."""
        if not 1 <= t <= self.n_steps + 1:
            raise ContractViolation(f"step index {t} outside 1..{self.n_steps + 1}")
        return self.states[t - 1]

    def cache_at(self, t: int) -> LogitsGrid:
        if not 1 <= t <= self.n_steps:
            raise ContractViolation(f"no cached logits for step {t}; valid range 1..{self.n_steps}")
        return self.cache[t - 1]

    def final_completion(self) -> MaskedSequence:
        return self.states[-1].completion


def rollout(
    params: PolicyParams,
    prompt: MaskedSequence,
    n_steps: int,
    schedule: UnmaskSchedule,
    rng: np.random.Generator,
    *,
    counters: OpCounters | None = None,
    greedy: bool = False,
) -> Trajectory:
    """Run one denoising trajectory under the behavior policy ``params``.

    Samples a token for every masked position each step (all sampled
    tokens inform confidence; only the committed subset persists), caches
    every logits grid, and returns the full trajectory.  ``greedy=True``
    takes the argmax token per position instead of sampling, which makes
    the rollout deterministic.
    """
    completion_len = params.arch.completion_len
    schedule.validate(completion_len, n_steps)
    if prompt.length != params.arch.prompt_len:
        raise ConfigurationError(
            f"prompt length {prompt.length} != architecture prompt_len {params.arch.prompt_len}"
        )
    state = DiffusionState(prompt, MaskedSequence.masked(completion_len, prompt.vocab))
    states = []
    events = []
    cache = []
    for _ in range(n_steps):
        states.append(state)
        ctx = rows_context(params, state)
        if counters is not None:
            counters.rollout_forward_passes += 1
        grid = ctx.grid()
        cache.append(grid)
        action = greedy_action(grid) if greedy else sample_action(grid, rng)
        probs = softmax(grid.rows)
        scored = []
        for r, pos in enumerate(grid.positions):
            tok = action[pos]
            scored.append((-probs[r, tok], pos, tok))
        eligible = set(schedule.eligible(grid.positions))
        scored = [s for s in scored if s[1] in eligible]
        scored.sort()
        commit = scored[: min(schedule.tokens_per_step, len(scored))]
        step_events = tuple(sorted((pos, tok) for _, pos, tok in commit))
        events.append(step_events)
        state = DiffusionState(prompt, state.completion.with_tokens(dict(step_events)))
    assert state.completion.fully_visible(), "schedule validation guarantees an empty mask"
    states.append(state)
    return Trajectory(prompt, tuple(states), tuple(events), tuple(cache))


def branch(
    traj: Trajectory, t: int, n_branches: int, rng: np.random.Generator
) -> list[tuple[Action, MaskedSequence]]:
    """Draw ``n_branches`` joint actions at step ``t`` from the cached logits.

    Each action covers the state's full mask set and is completed
    deterministically, yielding alternative terminal sequences from the
    same state.  No policy forward passes happen here: the behavior grid
    was cached by the rollout.
    """
    if n_branches < 1:
        raise ContractViolation("n_branches must be >= 1")
    grid = traj.cache_at(t)
    state = traj.state_at(t)
    out = []
    for _ in range(n_branches):
        action = sample_action(grid, rng)
        out.append((action, fill(state, action)))
    return out


def select_states(trajectories: list[Trajectory], timesteps: list[int]) -> list[tuple[int, int]]:
    """Cartesian product of trajectory indices (1-based) and timesteps."""
    for t in timesteps:
        for traj in trajectories:
            if not 1 <= t <= traj.n_steps:
                raise ContractViolation(f"timestep {t} outside 1..{traj.n_steps}")
    return [(k, t) for k in range(1, len(trajectories) + 1) for t in timesteps]


def dump_trajectory(traj: Trajectory, dest: str | Path | IO[str]) -> None:
    """Write a JSONL debug dump: one record per state, masks rendered as -1."""
    records = []
    for idx, state in enumerate(traj.states):
        t = idx + 1
        rec = {
            "t": t,
            "terminal": idx == len(traj.states) - 1,
            "prompt": state.prompt.to_json_tokens(),
            "completion": state.completion.to_json_tokens(),
            "mask": list(state.completion.mask_positions()),
        }
        if t <= traj.n_steps:
            rec["committed"] = [[p, tok] for p, tok in traj.events[idx]]
        records.append(rec)
    text = "".join(json.dumps(r) + "\n" for r in records)
    if hasattr(dest, "write"):
        dest.write(text)
    else:
        Path(dest).write_text(text)
