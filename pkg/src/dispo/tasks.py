"""Toy reward tasks: 4x4 Sudoku, Countdown arithmetic, and string match.

Each task fixes a vocab, a prompt encoding, and a completion length, and
scores fully visible completions with a deterministic reward in [0, 1].
Rewards never raise on malformed completions; undecodable output scores
zero.

Sudoku: one token per cell.  Vocab has 5 ordinary tokens (digit d is
token d-1, blank marker 4), so prompts stay fully visible.  The
completion has one token per originally empty cell, row-major; reward is
the fraction of those cells filled with the solution digit.

Countdown: the prompt spells the operand numbers and target in decimal
digit tokens; the completion is a fixed-length postfix expression over
operand-slot tokens 0..3, operator tokens 4..7 (+ - * /), and a trailing
pad token 8.  Values are exact rationals.  Reward 1.0 for hitting the
target, 0.1 for any well-formed expression over distinct slots, else 0.

String match: the prompt is the target itself; reward is the fraction of
completion positions matching it (a copy task, useful as the simplest
optimization target).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .rollout import Trajectory
from .sequences import MaskedSequence, Vocab

SUDOKU_VOCAB = Vocab(5)
SUDOKU_BLANK = 4

_ROWS = [tuple(range(4 * r, 4 * r + 4)) for r in range(4)]
_COLS = [tuple(range(c, 16, 4)) for c in range(4)]
_BOXES = [
    (0, 1, 4, 5), (2, 3, 6, 7), (8, 9, 12, 13), (10, 11, 14, 15),
]
SUDOKU_UNITS = _ROWS + _COLS + _BOXES


def _tokens_of(completion) -> tuple[int, ...]:
    if isinstance(completion, MaskedSequence):
        return completion.tokens
    return tuple(int(t) for t in completion)


def sudoku_valid_solution(cells: tuple[int, ...]) -> bool:
    if len(cells) != 16:
        return False
    return all(sorted(cells[i] for i in unit) == [1, 2, 3, 4] for unit in SUDOKU_UNITS)


@dataclass(frozen=True)
class SudokuInstance:
    """A 4x4 puzzle: 0 marks an empty cell; the stored solution is unique."""

    grid: tuple[int, ...]
    solution: tuple[int, ...]
    encoding: str = "cell-tokens"

    def __post_init__(self) -> None:
        if len(self.grid) != 16 or len(self.solution) != 16:
            raise ContractViolation("grid and solution must have 16 cells")
        if not sudoku_valid_solution(self.solution):
            raise ContractViolation("solution violates the one-per-unit constraints")
        for g, s in zip(self.grid, self.solution):
            if g != 0 and g != s:
                raise ContractViolation("givens must agree with the solution")

    def empty_cells(self) -> tuple[int, ...]:
        return tuple(i for i, v in enumerate(self.grid) if v == 0)

    def prompt_tokens(self) -> tuple[int, ...]:
        return tuple(v - 1 if v != 0 else SUDOKU_BLANK for v in self.grid)


def sudoku_reward(instance: SudokuInstance, completion) -> float:
    """Fraction of the originally empty cells filled with the solution digit."""
    tokens = _tokens_of(completion)
    empty = instance.empty_cells()
    if len(tokens) != len(empty):
        return 0.0
    if not empty:
        return 1.0
    correct = sum(
        1 for tok, cell in zip(tokens, empty) if 0 <= tok <= 3 and tok + 1 == instance.solution[cell]
    )
    return correct / len(empty)


def _board_violates(cells: list[int]) -> bool:
    for unit in SUDOKU_UNITS:
        seen = set()
        for c in unit:
            v = cells[c]
            if v == 0:
                continue
            if v not in (1, 2, 3, 4) or v in seen:
                return True
            seen.add(v)
    return False


def first_violation_time(instance: SudokuInstance, traj: Trajectory) -> int | None:
    """Smallest step whose cumulative commits break a Sudoku constraint.

    Commits from steps 1..t are merged with the givens; a duplicate digit in
    any row/column/box, or a committed token that does not decode to a
    digit, is a violation.  Returns None if the whole trajectory stays
    consistent.
    """
    cells = list(instance.grid)
    empty = instance.empty_cells()
    for t, events in enumerate(traj.events, start=1):
        for pos, tok in events:
            if not 0 <= pos < len(empty):
                raise ContractViolation(f"commit position {pos} outside the instance's empty cells")
            cells[empty[pos]] = tok + 1 if 0 <= tok <= 3 else -1
        if _board_violates(cells):
            return t
    return None


def _can_place(cells: list[int], idx: int, digit: int) -> bool:
    for unit in SUDOKU_UNITS:
        if idx in unit and any(cells[c] == digit for c in unit if c != idx):
            return False
    return True


def _random_solution(rng: np.random.Generator) -> tuple[int, ...]:
    cells = [0] * 16

    def backtrack(idx: int) -> bool:
        if idx == 16:
            return True
        for digit in rng.permutation([1, 2, 3, 4]):
            d = int(digit)
            if _can_place(cells, idx, d):
                cells[idx] = d
                if backtrack(idx + 1):
                    return True
                cells[idx] = 0
        return False

    assert backtrack(0), "a 4x4 grid is always completable"
    return tuple(cells)


def count_solutions(grid: tuple[int, ...], cap: int = 2) -> int:
    """Number of completions of ``grid`` (0 = empty), counted up to ``cap``."""
    cells = list(grid)
    empty = [i for i, v in enumerate(cells) if v == 0]
    found = 0

    def backtrack(k: int) -> bool:
        nonlocal found
        if k == len(empty):
            found += 1
            return found >= cap
        idx = empty[k]
        for digit in (1, 2, 3, 4):
            if _can_place(cells, idx, digit):
                cells[idx] = digit
                if backtrack(k + 1):
                    cells[idx] = 0
                    return True
                cells[idx] = 0
        return False

    backtrack(0)
    return found


def generate_sudoku(rng: np.random.Generator, n_empty: int = 6) -> SudokuInstance:
    """A random puzzle with exactly ``n_empty`` empty cells and a unique solution."""
    if not 1 <= n_empty <= 12:
        raise ConfigurationError("n_empty must lie in 1..12 for unique 4x4 puzzles")
    for _ in range(64):
        solution = _random_solution(rng)
        cells = list(solution)
        removed = 0
        for idx in rng.permutation(16):
            if removed == n_empty:
                break
            i = int(idx)
            saved, cells[i] = cells[i], 0
            if count_solutions(tuple(cells)) == 1:
                removed += 1
            else:
                cells[i] = saved
        if removed == n_empty:
            return SudokuInstance(tuple(cells), solution)
    raise ConfigurationError(f"could not build a unique puzzle with {n_empty} empty cells")


COUNTDOWN_VOCAB = Vocab(10)
COUNTDOWN_PAD = 8
COUNTDOWN_OPS = {4: "+", 5: "-", 6: "*", 7: "/"}
COUNTDOWN_COMPLETION_LEN = 7  # postfix over at most 4 operands
COUNTDOWN_PROMPT_LEN = 11  # four 2-digit operand slots + 3-digit target


@dataclass(frozen=True)
class CountdownInstance:
    """Reach ``target`` from ``numbers`` with + - * / and distinct operands."""

    numbers: tuple[int, ...]
    target: int
    encoding: str = "slot-postfix"

    def __post_init__(self) -> None:
        if not 3 <= len(self.numbers) <= 4:
            raise ContractViolation("instances carry 3 or 4 numbers")
        if any(n < 1 or n > 99 for n in self.numbers):
            raise ContractViolation("numbers must lie in 1..99")
        if not 1 <= self.target <= 999:
            raise ContractViolation("target must lie in 1..999")

    def prompt_tokens(self) -> tuple[int, ...]:
        toks: list[int] = []
        for slot in range(4):
            n = self.numbers[slot] if slot < len(self.numbers) else 0
            toks.extend((n // 10, n % 10))
        toks.extend((self.target // 100, (self.target // 10) % 10, self.target % 10))
        return tuple(toks)


def parse_postfix(tokens: tuple[int, ...], numbers: tuple[int, ...]) -> Fraction | None:
    """Evaluate a padded postfix completion; None if malformed.

    Slots must be distinct and in range; padding only at the tail; a
    well-formed expression leaves exactly one value on the stack.
    """
    toks = list(tokens)
    while toks and toks[-1] == COUNTDOWN_PAD:
        toks.pop()
    if not toks or any(t == COUNTDOWN_PAD for t in toks):
        return None
    stack: list[Fraction] = []
    used: set[int] = set()
    for tok in toks:
        if 0 <= tok <= 3:
            if tok >= len(numbers) or tok in used:
                return None
            used.add(tok)
            stack.append(Fraction(numbers[tok]))
        elif tok in COUNTDOWN_OPS:
            if len(stack) < 2:
                return None
            b, a = stack.pop(), stack.pop()
            op = COUNTDOWN_OPS[tok]
            if op == "+":
                stack.append(a + b)
            elif op == "-":
                stack.append(a - b)
            elif op == "*":
                stack.append(a * b)
            else:
                if b == 0:
                    return None
                stack.append(a / b)
        else:
            return None
    return stack[0] if len(stack) == 1 else None


def countdown_reward(instance: CountdownInstance, completion) -> float:
    """1.0 for hitting the target exactly, 0.1 for any other well-formed expression."""
    value = parse_postfix(_tokens_of(completion), instance.numbers)
    if value is None:
        return 0.0
    return 1.0 if value == instance.target else 0.1


def generate_countdown(rng: np.random.Generator, n_numbers: int | None = None) -> CountdownInstance:
    """An instance built from a random expression, so a solution exists."""
    for _ in range(500):
        k = int(rng.integers(3, 5)) if n_numbers is None else n_numbers
        if not 3 <= k <= 4:
            raise ConfigurationError("n_numbers must be 3 or 4")
        numbers = tuple(int(rng.integers(1, 10)) for _ in range(k))

        def build(slots: list[int]) -> tuple[Fraction, list[int]] | None:
            if len(slots) == 1:
                return Fraction(numbers[slots[0]]), [slots[0]]
            cut = int(rng.integers(1, len(slots)))
            left = build(slots[:cut])
            right = build(slots[cut:])
            if left is None or right is None:
                return None
            (lv, lt), (rv, rt) = left, right
            op = int(rng.choice([4, 5, 6, 7]))
            if op == 7 and (rv == 0 or (lv / rv).denominator != 1):
                op = 6  # keep division exact; fall back to multiplication
            if op == 4:
                val = lv + rv
            elif op == 5:
                val = lv - rv
            elif op == 6:
                val = lv * rv
            else:
                val = lv / rv
            return val, lt + rt + [op]

        slots = [int(s) for s in rng.permutation(k)]
        built = build(slots)
        if built is None:
            continue
        value, _ = built
        if value.denominator == 1 and 1 <= value <= 999:
            return CountdownInstance(numbers, int(value))
    raise ConfigurationError("failed to build a solvable instance")


@dataclass(frozen=True)
class StringMatchInstance:
    """Copy task: reproduce the target the prompt displays."""

    target: tuple[int, ...]
    vocab_size: int = 4

    def __post_init__(self) -> None:
        if not self.target:
            raise ContractViolation("target must be non-empty")
        if any(not 0 <= t < self.vocab_size for t in self.target):
            raise ContractViolation("target tokens must be ordinary tokens")


def stringmatch_reward(target, completion) -> float:
    """Fraction of positions matching the target; 0 on a length mismatch."""
    t = _tokens_of(target)
    c = _tokens_of(completion)
    if len(t) != len(c):
        return 0.0
    return sum(1 for a, b in zip(t, c) if a == b) / len(t)


Instance = SudokuInstance | CountdownInstance | StringMatchInstance


@dataclass(frozen=True)
class RewardFn:
    """Terminal scorer bound to a task tag and one instance."""

    task: str
    instance: Instance

    def __call__(self, prompt: MaskedSequence, completion) -> float:
        if self.task == "sudoku":
            return sudoku_reward(self.instance, completion)
        if self.task == "countdown":
            return countdown_reward(self.instance, completion)
        if self.task == "stringmatch":
            return stringmatch_reward(self.instance.target, completion)
        raise ConfigurationError(f"unknown task {self.task!r}")


@dataclass(frozen=True)
class TaskInstance:
    prompt: MaskedSequence
    reward: RewardFn


@dataclass(frozen=True)
class Task:
    """A vocab, fixed prompt/completion lengths, and a pool of instances."""

    name: str
    vocab: Vocab
    prompt_len: int
    completion_len: int
    instances: tuple[TaskInstance, ...]


def _task_instance(name: str, inst: Instance, vocab: Vocab) -> TaskInstance:
    if name == "sudoku":
        tokens = inst.prompt_tokens()
    elif name == "countdown":
        tokens = inst.prompt_tokens()
    else:
        tokens = inst.target
    return TaskInstance(MaskedSequence(tokens, vocab), RewardFn(name, inst))


def make_task(
    name: str,
    rng: np.random.Generator,
    n_instances: int = 8,
    *,
    n_empty: int = 6,
    target_len: int = 8,
    vocab_size: int = 4,
    n_numbers: int | None = 4,
) -> Task:
    """Generate an instance pool with a fixed shape for one run."""
    if n_instances < 1:
        raise ConfigurationError("n_instances must be >= 1")
    if name == "sudoku":
        instances = [generate_sudoku(rng, n_empty) for _ in range(n_instances)]
        vocab, plen, clen = SUDOKU_VOCAB, 16, n_empty
    elif name == "countdown":
        instances = [generate_countdown(rng, n_numbers) for _ in range(n_instances)]
        vocab, plen, clen = COUNTDOWN_VOCAB, COUNTDOWN_PROMPT_LEN, COUNTDOWN_COMPLETION_LEN
    elif name == "stringmatch":
        instances = [
            StringMatchInstance(
                tuple(int(t) for t in rng.integers(0, vocab_size, target_len)), vocab_size
            )
            for _ in range(n_instances)
        ]
        vocab, plen, clen = Vocab(vocab_size), target_len, target_len
    else:
        raise ConfigurationError(f"unknown task {name!r}")
    return Task(name, vocab, plen, clen, tuple(_task_instance(name, i, vocab) for i in instances))


def _instance_to_json(name: str, inst: Instance) -> dict:
    if name == "sudoku":
        return {"grid": list(inst.grid), "solution": list(inst.solution)}
    if name == "countdown":
        return {"numbers": list(inst.numbers), "target": inst.target}
    return {"target": list(inst.target), "vocab_size": inst.vocab_size}


def _instance_from_json(name: str, d: dict) -> Instance:
    if name == "sudoku":
        return SudokuInstance(tuple(d["grid"]), tuple(d["solution"]))
    if name == "countdown":
        return CountdownInstance(tuple(d["numbers"]), int(d["target"]))
    return StringMatchInstance(tuple(d["target"]), int(d.get("vocab_size", 4)))


def save_instances(path: str | Path, task: Task) -> None:
    payload = {
        "task": task.name,
        "prompt_len": task.prompt_len,
        "completion_len": task.completion_len,
        "vocab_size": task.vocab.size,
        "instances": [_instance_to_json(task.name, ti.reward.instance) for ti in task.instances],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_instances(path: str | Path) -> Task:
    d = json.loads(Path(path).read_text())
    name = d["task"]
    instances = [_instance_from_json(name, item) for item in d["instances"]]
    if not instances:
        raise ConfigurationError(f"{path} holds no instances")
    if name == "sudoku":
        vocab = SUDOKU_VOCAB
        clen = len(instances[0].empty_cells())
        for inst in instances:
            if len(inst.empty_cells()) != clen:
                raise ConfigurationError("sudoku instances in one set must share n_empty")
        plen = 16
    elif name == "countdown":
        vocab, plen, clen = COUNTDOWN_VOCAB, COUNTDOWN_PROMPT_LEN, COUNTDOWN_COMPLETION_LEN
    elif name == "stringmatch":
        vocab = Vocab(instances[0].vocab_size)
        plen = clen = len(instances[0].target)
    else:
        raise ConfigurationError(f"unknown task {name!r}")
    return Task(name, vocab, plen, clen, tuple(_task_instance(name, i, vocab) for i in instances))
