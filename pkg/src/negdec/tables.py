"""Token-level transition tables, blocking masks, and suffix-reach sets.

Two interchangeable construction routes exist for each constraint type:
a naive route that re-scans every token byte string from every constraint
state, and a merge-compositional route that scans only the 257 base tokens
and fills every merged token from its two children:

    delta[q, uv] = delta[delta[q, u], v]
    block[q, uv] = block[q, u] | block[delta[q, u], v]
    reach[uv]    = reach[v] | {delta[q, v] : q in reach[u], not dead}

The two routes must produce bitwise-identical tables; the test suite pins
that equivalence, which is the central anti-regression property of this
package.

Conventions shared by both routes (and required for the identity to hold):

* ``block[q, w]`` for the string tables is 1 iff a forbidden trie state is
  visited at any byte of ``w``, not only the last one.
* ``block[q, w]`` for a DFA additionally starts at 1 when ``q`` itself is
  accepting (only reachable under soft masking, after a violation).
* if any suffix of ``w`` read from the DFA start state visits an accepting
  state, the whole column ``block[:, w]`` is forced to 1: the token carries
  a complete match inside itself, so it is invalid from every state.
* ``reach[w]`` collects the states reached from the start state by every
  suffix of ``w`` including the empty one, so the start state is always a
  member.
* the EOS column is identity in ``delta`` and all-zero in ``block``, so
  decoding can never dead-end.

The dead state is stored as the sentinel index ``num_states`` (one past
the valid range), per table; the global matrices use ``total_states``.
Blocking masks are bit-packed row-wise (``np.packbits``); ``delta`` stays
a dense integer matrix.
"""

from __future__ import annotations

import hashlib
import pickle
import time
from dataclasses import dataclass, field

import numpy as np

from .ac import AcAutomaton, build_ac
from .dfa import PartialDfa, compile_many, dense_dfa_transitions
from .vocab import Vocabulary

DEFAULT_MAX_CELLS = 2**31
TABLES_FILE_FORMAT = "negdec-tables v1"


def _pack_rows(bool_mat: np.ndarray) -> np.ndarray:
    return np.packbits(bool_mat, axis=1)


def _unpack_row(packed_row: np.ndarray, count: int) -> np.ndarray:
    return np.unpackbits(packed_row, count=count).view(bool)


def _check_cells(num_states: int, num_tokens: int, max_cells: int, what: str) -> None:
    cells = num_states * num_tokens
    if cells > max_cells:
        raise ValueError(
            f"precompute for {what} would allocate {cells} table cells "
            f"({num_states} states x {num_tokens} tokens), over the ceiling "
            f"of {max_cells}; raise max_cells or simplify the constraint"
        )


@dataclass
class StringTables:
    """Trie-state transition and blocking tables, one column per token."""

    delta: np.ndarray  # int32 [num_states, num_tokens]
    block: np.ndarray  # packed uint8 [num_states, ceil(num_tokens/8)]
    root: int
    num_tokens: int

    @property
    def num_states(self) -> int:
        return self.delta.shape[0]

    def block_row(self, q: int) -> np.ndarray:
        return _unpack_row(self.block[q], self.num_tokens)

    def block_bit(self, q: int, w: int) -> bool:
        byte = self.block[q, w >> 3]
        return bool((byte >> (7 - (w & 7))) & 1)

    def block_bool(self) -> np.ndarray:
        return np.unpackbits(self.block, axis=1, count=self.num_tokens).view(bool)


@dataclass
class DfaTables:
    """Per-DFA token tables; ``num_states`` is the dead-state sentinel."""

    delta: np.ndarray  # int32 [num_states, num_tokens]
    block: np.ndarray  # packed uint8 [num_states, ceil(num_tokens/8)]
    suffix: list[np.ndarray]  # per token, sorted live states reachable from start
    start: int
    num_tokens: int

    @property
    def num_states(self) -> int:
        return self.delta.shape[0]

    def block_bool(self) -> np.ndarray:
        return np.unpackbits(self.block, axis=1, count=self.num_tokens).view(bool)


@dataclass
class RegexTables:
    per_dfa: list[DfaTables]

    @property
    def total_states(self) -> int:
        return sum(t.num_states for t in self.per_dfa)


@dataclass
class GlobalMatrices:
    """Disjoint-union re-indexing of all DFA tables for matrix masking."""

    block_mat: np.ndarray  # packed uint8 [total_states, ceil(num_tokens/8)]
    suffix_mat: np.ndarray  # packed uint8 [num_tokens, ceil(total_states/8)]
    delta_global: np.ndarray  # int32 [total_states, num_tokens]; dead = total_states
    init_vec: np.ndarray  # bool [total_states]
    num_tokens: int
    offsets: tuple[int, ...]

    @property
    def total_states(self) -> int:
        return self.delta_global.shape[0]

    def block_row(self, q: int) -> np.ndarray:
        return _unpack_row(self.block_mat[q], self.num_tokens)

    def block_bit(self, q: int, w: int) -> bool:
        byte = self.block_mat[q, w >> 3]
        return bool((byte >> (7 - (w & 7))) & 1)

    def suffix_row(self, w: int) -> np.ndarray:
        return _unpack_row(self.suffix_mat[w], self.total_states)


# --- finite hard constraints -------------------------------------------------


def precompute_string_naive(
    ac: AcAutomaton, vocab: Vocabulary, *, max_cells: int = DEFAULT_MAX_CELLS
) -> StringTables:
    """Scan every token byte-by-byte from every trie state."""
    nstates = ac.num_states
    ntok = vocab.num_tokens
    _check_cells(nstates, ntok, max_cells, "the forbidden-string lexicon")
    dense_t = np.ascontiguousarray(ac.dense_transitions().T)  # [256, Q]
    forb = ac.forbidden
    ident = np.arange(nstates, dtype=np.int32)

    delta_tm = np.empty((ntok, nstates), dtype=np.int32)
    block_tm = np.zeros((ntok, nstates), dtype=bool)
    for w in range(ntok):
        bs = vocab.tokens[w]
        if not bs:
            delta_tm[w] = ident
            continue
        state = ident
        blocked = np.zeros(nstates, dtype=bool)
        for byte in bs:
            state = dense_t[byte][state]
            blocked |= forb[state]
        delta_tm[w] = state
        block_tm[w] = blocked
    block_tm[vocab.eos_id] = False
    return StringTables(
        delta=np.ascontiguousarray(delta_tm.T),
        block=_pack_rows(np.ascontiguousarray(block_tm.T)),
        root=ac.root,
        num_tokens=ntok,
    )


def _require_merge_totality(vocab: Vocabulary) -> None:
    covered = set(vocab.base_ids) | {out for _, _, out in vocab.merges}
    if len(covered) != vocab.num_tokens or covered != set(range(vocab.num_tokens)):
        raise ValueError("vocab merge structure incomplete")


def precompute_string_bpe(
    ac: AcAutomaton, vocab: Vocabulary, *, max_cells: int = DEFAULT_MAX_CELLS
) -> StringTables:
    """Scan base tokens only; fill merged tokens by table composition."""
    _require_merge_totality(vocab)
    nstates = ac.num_states
    ntok = vocab.num_tokens
    _check_cells(nstates, ntok, max_cells, "the forbidden-string lexicon")
    dense_t = np.ascontiguousarray(ac.dense_transitions().T)
    forb = ac.forbidden
    ident = np.arange(nstates, dtype=np.int32)

    delta_tm = np.empty((ntok, nstates), dtype=np.int32)
    block_tm = np.zeros((ntok, nstates), dtype=bool)
    for w in sorted(vocab.base_ids):
        bs = vocab.tokens[w]
        if not bs:
            delta_tm[w] = ident
            continue
        state = dense_t[bs[0]]
        delta_tm[w] = state
        block_tm[w] = forb[state]
    for u, v, w in vocab.merges:
        du = delta_tm[u]
        delta_tm[w] = delta_tm[v][du]
        block_tm[w] = block_tm[u] | block_tm[v][du]
    block_tm[vocab.eos_id] = False
    return StringTables(
        delta=np.ascontiguousarray(delta_tm.T),
        block=_pack_rows(np.ascontiguousarray(block_tm.T)),
        root=ac.root,
        num_tokens=ntok,
    )


# --- forbidden regex constraints ----------------------------------------------


def _suffix_scan(
    bs: bytes, start: int, dense_t: np.ndarray, acc: np.ndarray, dead: int
) -> tuple[np.ndarray, bool]:
    """Run every suffix of ``bs`` from ``start``; dead runs drop out.

    Returns (sorted live end states, whether any run visited an accepting
    state).  Index ``j`` tracks the suffix starting at byte offset ``j``;
    the entry for the empty suffix never advances, so ``start`` is always
    in the result.
    """
    k = len(bs)
    states = np.full(k + 1, start, dtype=np.int32)
    accepted = bool(acc[start])
    for t, byte in enumerate(bs):
        moved = dense_t[byte][states[: t + 1]]
        states[: t + 1] = moved
        if acc[moved].any():
            accepted = True
    live = states[states != dead]
    return np.unique(live).astype(np.int32), accepted


def _one_dfa_naive(
    dfa: PartialDfa, vocab: Vocabulary, max_cells: int, label: str
) -> DfaTables:
    nstates = dfa.num_states
    ntok = vocab.num_tokens
    _check_cells(nstates, ntok, max_cells, label)
    dense, acc = dense_dfa_transitions(dfa)
    dense_t = np.ascontiguousarray(dense.T)  # [256, Q+1]
    dead = nstates
    live_acc = acc[:nstates]
    ident = np.arange(nstates, dtype=np.int32)

    delta_tm = np.empty((ntok, nstates), dtype=np.int32)
    block_tm = np.zeros((ntok, nstates), dtype=bool)
    suffix: list[np.ndarray] = []
    lift = np.zeros(ntok, dtype=bool)
    for w in range(ntok):
        bs = vocab.tokens[w]
        if not bs:
            delta_tm[w] = ident
            block_tm[w] = live_acc
            suffix.append(np.asarray([dfa.start], dtype=np.int32))
            continue
        state = ident
        blocked = live_acc.copy()  # a run from an accepting state starts blocked
        for byte in bs:
            state = dense_t[byte][state]
            blocked |= acc[state]
        delta_tm[w] = state
        block_tm[w] = blocked
        reach, accepted = _suffix_scan(bs, dfa.start, dense_t, acc, dead)
        suffix.append(reach)
        lift[w] = accepted
    block_tm[lift] = True
    block_tm[vocab.eos_id] = False
    return DfaTables(
        delta=np.ascontiguousarray(delta_tm.T),
        block=_pack_rows(np.ascontiguousarray(block_tm.T)),
        suffix=suffix,
        start=dfa.start,
        num_tokens=ntok,
    )


def _one_dfa_bpe(
    dfa: PartialDfa, vocab: Vocabulary, max_cells: int, label: str, bpe_suffix: bool
) -> DfaTables:
    nstates = dfa.num_states
    ntok = vocab.num_tokens
    _check_cells(nstates, ntok, max_cells, label)
    dense, acc = dense_dfa_transitions(dfa)
    dense_t = np.ascontiguousarray(dense.T)
    dead = nstates
    live_acc = acc[:nstates]
    ident = np.arange(nstates, dtype=np.int32)
    start = dfa.start

    delta_tm = np.empty((ntok, nstates), dtype=np.int32)
    block_tm = np.zeros((ntok, nstates), dtype=bool)
    suffix: list[np.ndarray | None] = [None] * ntok

    naive_lift = None
    if not bpe_suffix:
        # ablation: reachability scanned independently per token, while
        # delta/block still compose over merges
        naive_lift = np.zeros(ntok, dtype=bool)
        for w in range(ntok):
            reach, accepted = _suffix_scan(
                vocab.tokens[w], start, dense_t, acc, dead
            )
            suffix[w] = reach
            naive_lift[w] = accepted

    for w in sorted(vocab.base_ids):
        bs = vocab.tokens[w]
        if not bs:
            delta_tm[w] = ident
            block_tm[w] = live_acc
            if bpe_suffix:
                suffix[w] = np.asarray([start], dtype=np.int32)
            continue
        byte = bs[0]
        state = dense_t[byte][:nstates]
        delta_tm[w] = state
        block_tm[w] = live_acc | acc[state]
        lifted = False
        if bpe_suffix:
            end = int(dense[start, byte])
            reach = [start] if end == dead else sorted({start, end})
            suffix[w] = np.asarray(reach, dtype=np.int32)
            lifted = bool(acc[end])
        else:
            lifted = bool(naive_lift[w])
        if lifted:
            block_tm[w] = True

    for u, v, w in vocab.merges:
        du = delta_tm[u]
        dv_ext = np.append(delta_tm[v], np.int32(dead))
        bv_ext = np.append(block_tm[v], False)
        delta_tm[w] = dv_ext[du]
        block_tm[w] = block_tm[u] | bv_ext[du]
        reach_u = suffix[u]
        if bpe_suffix:
            moved = delta_tm[v][reach_u]
            moved = moved[moved != dead]
            suffix[w] = np.union1d(suffix[v], moved).astype(np.int32)
            lifted = bool(block_tm[v][start]) or bool(block_tm[v][reach_u].any())
        else:
            lifted = bool(naive_lift[w])
        if lifted:
            block_tm[w] = True

    block_tm[vocab.eos_id] = False
    return DfaTables(
        delta=np.ascontiguousarray(delta_tm.T),
        block=_pack_rows(np.ascontiguousarray(block_tm.T)),
        suffix=list(suffix),
        start=start,
        num_tokens=ntok,
    )


def _dfa_label(i: int, patterns) -> str:
    if patterns is not None and i < len(patterns):
        return f"regex constraint {i} ({patterns[i]!r})"
    return f"regex constraint {i}"


def precompute_regex_naive(
    dfas: list[PartialDfa],
    vocab: Vocabulary,
    *,
    max_cells: int = DEFAULT_MAX_CELLS,
    patterns=None,
) -> RegexTables:
    """Per-DFA tables by direct byte simulation of every token and suffix."""
    return RegexTables(
        per_dfa=[
            _one_dfa_naive(d, vocab, max_cells, _dfa_label(i, patterns))
            for i, d in enumerate(dfas)
        ]
    )


def precompute_regex_bpe(
    dfas: list[PartialDfa],
    vocab: Vocabulary,
    *,
    max_cells: int = DEFAULT_MAX_CELLS,
    patterns=None,
    bpe_suffix: bool = True,
) -> RegexTables:
    """Per-DFA tables by merge composition; bitwise equal to the naive route.

    ``bpe_suffix=False`` keeps the composed transitions but computes the
    suffix-reach sets independently per token (the no-suffix-map ablation).
    """
    _require_merge_totality(vocab)
    return RegexTables(
        per_dfa=[
            _one_dfa_bpe(d, vocab, max_cells, _dfa_label(i, patterns), bpe_suffix)
            for i, d in enumerate(dfas)
        ]
    )


def build_global(tables: RegexTables, *, max_cells: int = DEFAULT_MAX_CELLS) -> GlobalMatrices:
    """Concatenate per-DFA tables over the disjoint global state index.

    Storage is additive in the total state count; the product automaton is
    never formed.
    """
    parts = tables.per_dfa
    ntok = parts[0].num_tokens if parts else 0
    sizes = [t.num_states for t in parts]
    total = sum(sizes)
    _check_cells(total, ntok, max_cells, "the combined regex constraint set")
    offsets = tuple(int(x) for x in np.cumsum([0] + sizes[:-1])) if parts else ()

    if not parts:
        return GlobalMatrices(
            block_mat=np.zeros((0, 0), dtype=np.uint8),
            suffix_mat=np.zeros((0, 0), dtype=np.uint8),
            delta_global=np.zeros((0, 0), dtype=np.int32),
            init_vec=np.zeros(0, dtype=bool),
            num_tokens=ntok,
            offsets=(),
        )

    block_mat = np.vstack([t.block for t in parts])
    delta_parts = []
    for t, off in zip(parts, offsets):
        d = t.delta.astype(np.int32, copy=True)
        dead = t.num_states
        d[d == dead] = total - off  # becomes `total` after the offset shift
        d += off
        delta_parts.append(d)
    delta_global = np.vstack(delta_parts)

    suffix_bool = np.zeros((ntok, total), dtype=bool)
    init_vec = np.zeros(total, dtype=bool)
    for t, off in zip(parts, offsets):
        init_vec[off + t.start] = True
        for w, reach in enumerate(t.suffix):
            suffix_bool[w, reach + off] = True
    return GlobalMatrices(
        block_mat=block_mat,
        suffix_mat=_pack_rows(suffix_bool),
        delta_global=delta_global,
        init_vec=init_vec,
        num_tokens=ntok,
        offsets=offsets,
    )


# --- compiled bundle -----------------------------------------------------------


@dataclass
class CompiledConstraints:
    """Everything the decoder needs for one (vocab, constraint set) pair."""

    vocab: Vocabulary
    patterns: list[bytes]
    regex_patterns: list[str]
    ac: AcAutomaton | None
    string_tables: StringTables | None
    dfas: list[PartialDfa]
    regex_tables: RegexTables | None
    global_mats: GlobalMatrices | None
    precompute_seconds: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def has_strings(self) -> bool:
        return self.string_tables is not None

    @property
    def has_regex(self) -> bool:
        return self.global_mats is not None and self.global_mats.total_states > 0

    def table_bytes(self) -> int:
        total = 0
        if self.string_tables is not None:
            total += self.string_tables.delta.nbytes + self.string_tables.block.nbytes
        if self.regex_tables is not None:
            for t in self.regex_tables.per_dfa:
                total += t.delta.nbytes + t.block.nbytes
                total += sum(a.nbytes for a in t.suffix)
        if self.global_mats is not None:
            g = self.global_mats
            total += g.block_mat.nbytes + g.suffix_mat.nbytes
            total += g.delta_global.nbytes + g.init_vec.nbytes
        return total


def compile_constraints(
    vocab: Vocabulary,
    forbidden_strings=(),
    regex_patterns=(),
    *,
    precompute: str = "bpe",
    bpe_suffix: bool = True,
    max_cells: int = DEFAULT_MAX_CELLS,
) -> CompiledConstraints:
    """Build automata and token tables for a constraint set.

    ``precompute`` selects the construction route ("bpe" or "naive");
    ``bpe_suffix=False`` selects the no-suffix-map ablation.  Outputs are
    identical across all routes, only build time differs.
    """
    if precompute not in ("bpe", "naive"):
        raise ValueError("precompute must be 'bpe' or 'naive'")
    patterns = [bytes(p) for p in forbidden_strings]
    regexes = list(regex_patterns)

    t0 = time.perf_counter()
    ac = None
    string_tables = None
    if patterns:
        ac = build_ac(patterns)
        if precompute == "bpe":
            string_tables = precompute_string_bpe(ac, vocab, max_cells=max_cells)
        else:
            string_tables = precompute_string_naive(ac, vocab, max_cells=max_cells)

    dfas: list[PartialDfa] = []
    regex_tables = None
    global_mats = None
    if regexes:
        dfas = compile_many(regexes)
        if precompute == "bpe":
            regex_tables = precompute_regex_bpe(
                dfas, vocab, max_cells=max_cells, patterns=regexes,
                bpe_suffix=bpe_suffix,
            )
        else:
            regex_tables = precompute_regex_naive(
                dfas, vocab, max_cells=max_cells, patterns=regexes
            )
        global_mats = build_global(regex_tables, max_cells=max_cells)
    elapsed = time.perf_counter() - t0

    return CompiledConstraints(
        vocab=vocab,
        patterns=patterns,
        regex_patterns=regexes,
        ac=ac,
        string_tables=string_tables,
        dfas=dfas,
        regex_tables=regex_tables,
        global_mats=global_mats,
        precompute_seconds=elapsed,
    )


# --- table cache ---------------------------------------------------------------


def constraint_hash(patterns, regexes) -> str:
    h = hashlib.sha256()
    for p in sorted(bytes(x) for x in patterns):
        h.update(b"s:" + p + b"\0")
    for r in regexes:
        h.update(b"r:" + r.encode("utf-8") + b"\0")
    return h.hexdigest()


def save_tables(cc: CompiledConstraints, path: str) -> None:
    payload = {
        "format": TABLES_FILE_FORMAT,
        "vocab_hash": cc.vocab.content_hash(),
        "constraint_hash": constraint_hash(cc.patterns, cc.regex_patterns),
        "tables": cc,
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh)


def load_tables(path: str, vocab: Vocabulary | None = None) -> CompiledConstraints:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("format") != TABLES_FILE_FORMAT:
        raise ValueError(f"{path}: not a {TABLES_FILE_FORMAT} file")
    cc = payload["tables"]
    if vocab is not None and payload["vocab_hash"] != vocab.content_hash():
        raise ValueError(f"{path}: table cache was built for a different vocabulary")
    return cc
