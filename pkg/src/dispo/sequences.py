"""Token-sequence domain types.

Vocabularies, masked sequences, denoising states, joint fill actions, and
the deterministic fill operation.  Token ids are dense non-negative
integers; the mask uses the id one past the ordinary range by default.
All types here are immutable value objects, safe to share and to use as
dict keys; serialized form renders the mask as -1.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator

from .errors import ContractViolation

MASK_JSON = -1


@dataclass(frozen=True)
class Vocab:
    """An ordinary-token range [0, size) plus a distinguished mask id."""

    size: int
    mask_id: int = -1

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ContractViolation(f"vocab size must be >= 2, got {self.size}")
        if self.mask_id == -1:
            object.__setattr__(self, "mask_id", self.size)
        if 0 <= self.mask_id < self.size:
            raise ContractViolation(
                f"mask id {self.mask_id} collides with the ordinary range [0, {self.size})"
            )

    def is_ordinary(self, token: int) -> bool:
        return 0 <= token < self.size

    def check_token(self, token: int) -> None:
        if not (self.is_ordinary(token) or token == self.mask_id):
            raise ContractViolation(f"token {token} outside vocab (size {self.size}, mask {self.mask_id})")


@dataclass(frozen=True)
class MaskedSequence:
    """A fixed-length token sequence in which some positions may be masked."""

    tokens: tuple[int, ...]
    vocab: Vocab

    def __post_init__(self) -> None:
        toks = tuple(int(t) for t in self.tokens)
        object.__setattr__(self, "tokens", toks)
        if not toks:
            raise ContractViolation("sequences must be non-empty")
        for t in toks:
            self.vocab.check_token(t)

    @classmethod
    def masked(cls, length: int, vocab: Vocab) -> "MaskedSequence":
        """A fully masked sequence of the given length."""
        if length < 1:
            raise ContractViolation(f"length must be >= 1, got {length}")
        return cls((vocab.mask_id,) * length, vocab)

    @property
    def length(self) -> int:
        return len(self.tokens)

    def mask_positions(self) -> tuple[int, ...]:
        mid = self.vocab.mask_id
        return tuple(i for i, t in enumerate(self.tokens) if t == mid)

    def visible_positions(self) -> tuple[int, ...]:
        mid = self.vocab.mask_id
        return tuple(i for i, t in enumerate(self.tokens) if t != mid)

    def fully_visible(self) -> bool:
        return self.vocab.mask_id not in self.tokens

    def fully_masked(self) -> bool:
        mid = self.vocab.mask_id
        return all(t == mid for t in self.tokens)

    def with_tokens(self, replacements: dict[int, int]) -> "MaskedSequence":
        toks = list(self.tokens)
        for pos, tok in replacements.items():
            if not 0 <= pos < len(toks):
                raise ContractViolation(f"position {pos} out of range for length {len(toks)}")
            toks[pos] = tok
        return MaskedSequence(tuple(toks), self.vocab)

    def to_json_tokens(self) -> list[int]:
        mid = self.vocab.mask_id
        return [MASK_JSON if t == mid else t for t in self.tokens]

    @classmethod
    def from_json_tokens(cls, values: list[int], vocab: Vocab) -> "MaskedSequence":
        return cls(tuple(vocab.mask_id if v == MASK_JSON else v for v in values), vocab)


def mask_set(seq: MaskedSequence) -> tuple[int, ...]:
    """Masked positions of ``seq`` in increasing order."""
    return seq.mask_positions()


@dataclass(frozen=True)
class Action:
    """A joint assignment of ordinary tokens to a set of positions."""

    assignments: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        pairs = tuple(sorted((int(p), int(t)) for p, t in self.assignments))
        positions = [p for p, _ in pairs]
        if len(set(positions)) != len(positions):
            raise ContractViolation("action assigns the same position twice")
        object.__setattr__(self, "assignments", pairs)

    @classmethod
    def from_dict(cls, d: dict[int, int]) -> "Action":
        return cls(tuple(d.items()))

    def to_dict(self) -> dict[int, int]:
        return dict(self.assignments)

    def positions(self) -> tuple[int, ...]:
        return tuple(p for p, _ in self.assignments)

    def __getitem__(self, pos: int) -> int:
        for p, t in self.assignments:
            if p == pos:
                return t
        raise KeyError(pos)

    def __len__(self) -> int:
        return len(self.assignments)


@dataclass(frozen=True)
class DiffusionState:
    """A (prompt, partially masked completion) pair mid-denoising."""

    prompt: MaskedSequence
    completion: MaskedSequence

    def __post_init__(self) -> None:
        if self.prompt.vocab != self.completion.vocab:
            raise ContractViolation("prompt and completion must share a vocab")

    @property
    def vocab(self) -> Vocab:
        return self.prompt.vocab

    def mask(self) -> tuple[int, ...]:
        return self.completion.mask_positions()


def fill(state: DiffusionState, action: Action) -> MaskedSequence:
    """Complete ``state`` by writing ``action`` into the masked positions.

    The action must cover exactly the completion's mask set with ordinary
    tokens; visible positions are untouched.  Deterministic.
    """
    masked = state.completion.mask_positions()
    if action.positions() != masked:
        raise ContractViolation(
            f"action positions {action.positions()} != mask set {masked}"
        )
    vocab = state.completion.vocab
    for _, tok in action.assignments:
        if not vocab.is_ordinary(tok):
            raise ContractViolation(f"action token {tok} is not an ordinary token")
    return state.completion.with_tokens(action.to_dict())


def enumerate_actions(state: DiffusionState, limit: int = 100_000) -> Iterator[Action]:
    """Yield every joint action for ``state``'s mask set, lexicographically.

    Refuses action spaces larger than ``limit`` (meant for oracle-scale
    enumeration only).
    """
    positions = state.completion.mask_positions()
    v = state.vocab.size
    total = v ** len(positions)
    if total > limit:
        raise ContractViolation(f"action space of size {total} exceeds enumeration limit {limit}")
    for combo in itertools.product(range(v), repeat=len(positions)):
        yield Action(tuple(zip(positions, combo)))
