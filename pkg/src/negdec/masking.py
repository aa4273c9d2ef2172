"""Per-step constraint state and token-mask computation.

A sequence carries one trie state for the string constraints and one
active-state bitvector over the concatenated DFA state space for the regex
constraints.  The active vector always contains every DFA start state: a
fresh match can begin at the next generated token.

Mask computation has two interchangeable paths.  The matrix path folds the
packed blocking-mask rows of all active states with a single vectorized
OR-reduction (a boolean-semiring product of the active vector with the
blocking matrix); the iterative path loops over active states explicitly
and serves both as the equivalence oracle and as the no-matmul ablation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .tables import CompiledConstraints, _unpack_row


@dataclass(frozen=True)
class MaskMode:
    """Hard masking or a finite soft logit penalty.

    ``penalty`` is the additive logit shift applied to blocked tokens;
    hard masking is the infinite-penalty limit and pins blocked logits to
    -inf, which guarantees zero selection probability under every
    decoding rule.
    """

    penalty: float

    def __post_init__(self) -> None:
        if self.penalty < 0:
            raise ValueError("mask penalty must be >= 0")

    @property
    def is_hard(self) -> bool:
        return math.isinf(self.penalty)

    @staticmethod
    def hard() -> "MaskMode":
        return MaskMode(math.inf)

    @staticmethod
    def soft(penalty: float) -> "MaskMode":
        return MaskMode(float(penalty))


HARD = MaskMode.hard()


@dataclass(frozen=True)
class SequenceState:
    """Online constraint state for one sequence or one beam."""

    trie_state: int | None
    active: np.ndarray | None  # bool [total_states]

    @property
    def kind(self) -> str:
        if self.trie_state is not None and self.active is not None:
            return "combined"
        if self.trie_state is not None:
            return "string-constraint"
        return "regex-constraint"


def init_state(tables: CompiledConstraints) -> SequenceState:
    trie = tables.string_tables.root if tables.string_tables is not None else None
    active = None
    if tables.global_mats is not None:
        active = tables.global_mats.init_vec.copy()
    return SequenceState(trie_state=trie, active=active)


def blocked_tokens(state: SequenceState, tables: CompiledConstraints) -> np.ndarray:
    """Bit vector over the vocabulary: 1 = appending completes a violation.

    The EOS entry is always 0 (forced in the tables), so a valid
    continuation always exists.
    """
    ntok = tables.vocab.num_tokens
    out = np.zeros(ntok, dtype=bool)
    st = tables.string_tables
    if st is not None and state.trie_state is not None:
        out |= st.block_row(state.trie_state)
    gm = tables.global_mats
    if gm is not None and state.active is not None and gm.total_states > 0:
        idx = np.flatnonzero(state.active)
        assert idx.size > 0, "active set must contain the start states"
        packed = np.bitwise_or.reduce(gm.block_mat[idx], axis=0)
        out |= _unpack_row(packed, ntok)
    return out


def blocked_tokens_iterative(
    state: SequenceState, tables: CompiledConstraints
) -> np.ndarray:
    """Same contract as ``blocked_tokens``, via an explicit state loop."""
    ntok = tables.vocab.num_tokens
    out = np.zeros(ntok, dtype=bool)
    st = tables.string_tables
    if st is not None and state.trie_state is not None:
        out |= st.block_row(state.trie_state)
    gm = tables.global_mats
    if gm is not None and state.active is not None and gm.total_states > 0:
        idx = np.flatnonzero(state.active)
        assert idx.size > 0, "active set must contain the start states"
        for q in idx:
            out |= gm.block_row(int(q))
    return out


def token_is_blocked(
    state: SequenceState, token_id: int, tables: CompiledConstraints
) -> bool:
    """Single-token validity check via sequential bit lookups.

    This is the per-candidate check the rejection-sampling baseline uses;
    it deliberately iterates active states one at a time.
    """
    st = tables.string_tables
    if st is not None and state.trie_state is not None:
        if st.block_bit(state.trie_state, token_id):
            return True
    gm = tables.global_mats
    if gm is not None and state.active is not None and gm.total_states > 0:
        for q in np.flatnonzero(state.active):
            if gm.block_bit(int(q), token_id):
                return True
    return False


def advance(
    state: SequenceState, token_id: int, tables: CompiledConstraints
) -> SequenceState:
    """Fold one selected token into the constraint state.

    The string side is a single table lookup.  The regex side seeds the
    new active vector with the suffix-reach states of the token plus the
    start states, then propagates every previously active state through
    the token transition, dropping dead runs.  EOS is the identity.
    """
    trie = state.trie_state
    st = tables.string_tables
    if st is not None and trie is not None:
        trie = int(st.delta[trie, token_id])
    active = state.active
    gm = tables.global_mats
    if gm is not None and active is not None and gm.total_states > 0:
        nxt = gm.suffix_row(token_id) | gm.init_vec
        moved = gm.delta_global[np.flatnonzero(active), token_id]
        moved = moved[moved != gm.total_states]
        nxt[moved] = True
        active = nxt
    return replace(state, trie_state=trie, active=active)


def apply_mask(logits: np.ndarray, blocked: np.ndarray, mode: MaskMode) -> np.ndarray:
    """Return masked logits; hard mode floors blocked entries to -inf."""
    if logits.shape != blocked.shape:
        raise ValueError("logits and blocked mask must have the same length")
    out = np.asarray(logits, dtype=np.float64).copy()
    if mode.is_hard:
        out[blocked] = -np.inf
    elif mode.penalty != 0.0:
        out[blocked] -= mode.penalty
    return out
