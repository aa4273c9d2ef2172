"""Compile a restricted regex fragment into a partial DFA over bytes.

Supported syntax: literals, byte classes ``[...]`` (ranges, negation),
``.``, concatenation, alternation ``|``, grouping, ``*``, ``+``, ``?`` and
bounded repetition ``{m}`` / ``{m,n}`` / ``{m,}``.  Anything non-regular
(backreferences, lookaround) and anchors are rejected, as are patterns
that accept the empty string.

The pipeline is parse -> Thompson NFA -> subset construction -> Hopcroft
minimization -> prune.  The result omits the non-accepting sink state and
every transition into it: a missing edge means the run is dead.  ``.`` and
negated classes range over all 256 byte values; non-ASCII literals are
expanded to their UTF-8 byte sequences, while class members must be single
bytes (use ``\\xHH`` for values above 0x7F).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

DEFAULT_MAX_REPEAT_STATES = 1024

# PII defaults shipped with the engine; the email pattern is left to user
# configuration.
DEFAULT_PII_PATTERNS: dict[str, str] = {
    "phone_number": "[0-9]{3}-[0-9]{2}-[0-9]{4}",
    "social_security_number": "[0-9]{3}-[0-9]{3}-[0-9]{4}",
    "credit_card_number": "[0-9]{4}-[0-9]{4}-[0-9]{4}-[0-9]{4}",
}


@dataclass(frozen=True)
class PartialDfa:
    """Minimal DFA with the non-accepting sink left implicit.

    Every state is reachable from ``start`` and can reach an accepting
    state; a missing ``delta`` entry denotes the absorbing dead state.
    ``start`` is never accepting (empty-language and empty-string patterns
    are rejected at compile time).
    """

    delta: tuple[dict[int, int], ...]
    start: int
    accepting: frozenset[int]

    @property
    def num_states(self) -> int:
        return len(self.delta)


def dfa_step(dfa: PartialDfa, q: int | None, a: int) -> int | None:
    """One byte of simulation; ``None`` is the absorbing dead state."""
    if q is None:
        return None
    return dfa.delta[q].get(a)


def accepts(dfa: PartialDfa, text: bytes) -> bool:
    q: int | None = dfa.start
    for a in text:
        q = dfa_step(dfa, q, a)
        if q is None:
            return False
    return q in dfa.accepting


# --- parsing ---------------------------------------------------------------

_CLASS_DIGIT = frozenset(range(0x30, 0x3A))
_CLASS_WORD = frozenset(range(0x30, 0x3A)) | frozenset(range(0x41, 0x5B)) | \
    frozenset(range(0x61, 0x7B)) | {0x5F}
_CLASS_SPACE = frozenset(b" \t\n\r\f\v")
_ALL_BYTES = frozenset(range(256))

_CONTROL_ESCAPES = {"n": 0x0A, "t": 0x09, "r": 0x0D, "f": 0x0C, "v": 0x0B, "0": 0x00}


class _N:  # AST node kinds
    LIT = "lit"      # (LIT, frozenset of bytes)  single-symbol class
    CAT = "cat"      # (CAT, [nodes])
    ALT = "alt"      # (ALT, [nodes])
    STAR = "star"    # (STAR, node)
    REP = "rep"      # (REP, node, lo, hi_or_None)


class _Parser:
    def __init__(self, pattern: str):
        self.s = pattern
        self.i = 0

    def error(self, msg: str) -> ValueError:
        return ValueError(f"invalid pattern at position {self.i}: {msg}")

    def unsupported(self, what: str) -> ValueError:
        return ValueError(f"non-regular or unsupported construct: {what}")

    def peek(self) -> str | None:
        return self.s[self.i] if self.i < len(self.s) else None

    def take(self) -> str:
        c = self.s[self.i]
        self.i += 1
        return c

    def parse(self):
        node = self.alternation()
        if self.peek() is not None:
            raise self.error(f"unexpected '{self.peek()}'")
        return node

    def alternation(self):
        parts = [self.concat()]
        while self.peek() == "|":
            self.take()
            parts.append(self.concat())
        return parts[0] if len(parts) == 1 else (_N.ALT, parts)

    def concat(self):
        items = []
        while self.peek() not in (None, "|", ")"):
            items.append(self.postfixed())
        if not items:
            return (_N.CAT, [])
        return items[0] if len(items) == 1 else (_N.CAT, items)

    def postfixed(self):
        node = self.atom()
        while True:
            c = self.peek()
            if c == "*":
                self.take()
                node = (_N.STAR, node)
            elif c == "+":
                self.take()
                node = (_N.CAT, [node, (_N.STAR, node)])
            elif c == "?":
                self.take()
                node = (_N.REP, node, 0, 1)
            elif c == "{":
                node = self.repetition(node)
            else:
                return node

    def repetition(self, node):
        self.take()  # '{'
        lo = self.number()
        hi: int | None = lo
        if self.peek() == ",":
            self.take()
            hi = self.number() if self.peek() != "}" else None
        if self.peek() != "}":
            raise self.error("expected '}' in repetition")
        self.take()
        if hi is not None and hi < lo:
            raise self.error("repetition bound m > n")
        return (_N.REP, node, lo, hi)

    def number(self) -> int:
        digits = ""
        while self.peek() is not None and self.peek().isdigit():
            digits += self.take()
        if not digits:
            raise self.error("expected a number in repetition")
        return int(digits)

    def atom(self):
        c = self.peek()
        if c == "(":
            self.take()
            if self.peek() == "?":
                raise self.unsupported("(?...) group")
            node = self.alternation()
            if self.peek() != ")":
                raise self.error("unbalanced '('")
            self.take()
            return node
        if c == "[":
            return (_N.LIT, self.char_class())
        if c == ".":
            self.take()
            return (_N.LIT, _ALL_BYTES)
        if c in ("^", "$"):
            raise self.unsupported(f"anchor '{c}'")
        if c in ("*", "+", "?", "{"):
            raise self.error(f"quantifier '{c}' with nothing to repeat")
        if c == ")":
            raise self.error("unbalanced ')'")
        if c == "\\":
            self.take()
            return self.escape_atom()
        self.take()
        cp = ord(c)
        if cp <= 0x7F:
            return (_N.LIT, frozenset({cp}))
        # non-ASCII literal: concatenation of its UTF-8 bytes
        seq = [(_N.LIT, frozenset({b})) for b in c.encode("utf-8")]
        return seq[0] if len(seq) == 1 else (_N.CAT, seq)

    def escape_atom(self):
        if self.peek() is None:
            raise self.error("dangling backslash")
        c = self.take()
        if c == "d":
            return (_N.LIT, _CLASS_DIGIT)
        if c == "D":
            return (_N.LIT, _ALL_BYTES - _CLASS_DIGIT)
        if c == "w":
            return (_N.LIT, _CLASS_WORD)
        if c == "W":
            return (_N.LIT, _ALL_BYTES - _CLASS_WORD)
        if c == "s":
            return (_N.LIT, _CLASS_SPACE)
        if c == "S":
            return (_N.LIT, _ALL_BYTES - _CLASS_SPACE)
        return (_N.LIT, frozenset({self.escape_byte(c)}))

    def escape_byte(self, c: str) -> int:
        if c in _CONTROL_ESCAPES:
            return _CONTROL_ESCAPES[c]
        if c == "x":
            hexits = self.s[self.i:self.i + 2]
            if len(hexits) != 2:
                raise self.error("\\x expects two hex digits")
            try:
                value = int(hexits, 16)
            except ValueError:
                raise self.error("\\x expects two hex digits") from None
            self.i += 2
            return value
        if c.isdigit():
            raise self.unsupported(f"backreference \\{c}")
        if c in ("b", "B", "A", "Z", "z", "G"):
            raise self.unsupported(f"assertion \\{c}")
        if c.isalnum():
            raise self.error(f"unknown escape \\{c}")
        cp = ord(c)
        if cp > 0x7F:
            raise self.unsupported("non-ASCII escape")
        return cp

    def char_class(self) -> frozenset[int]:
        self.take()  # '['
        negate = False
        if self.peek() == "^":
            negate = True
            self.take()
        members: set[int] = set()

        def class_member() -> frozenset[int] | int:
            c = self.take()
            if c == "\\":
                if self.peek() is None:
                    raise self.error("dangling backslash in class")
                e = self.take()
                if e == "d":
                    return _CLASS_DIGIT
                if e == "w":
                    return _CLASS_WORD
                if e == "s":
                    return _CLASS_SPACE
                if e in ("D", "W", "S"):
                    raise self.error("negated shorthand inside class")
                return self.escape_byte(e)
            cp = ord(c)
            if cp > 0x7F:
                raise self.unsupported(
                    "multi-byte character in class (byte classes only; use \\xHH)"
                )
            return cp

        while True:
            if self.peek() is None:
                raise self.error("unbalanced '['")
            if self.peek() == "]":
                self.take()
                break
            m = class_member()
            if isinstance(m, frozenset):
                members |= m
                continue
            if self.peek() == "-" and self.i + 1 < len(self.s) and self.s[self.i + 1] != "]":
                self.take()
                hi = class_member()
                if isinstance(hi, frozenset):
                    raise self.error("shorthand cannot bound a range")
                if hi < m:
                    raise self.error("bad class range")
                members |= set(range(m, hi + 1))
            else:
                members.add(m)
        if not members:
            raise self.error("empty character class")
        return frozenset(_ALL_BYTES - members) if negate else frozenset(members)


# --- Thompson NFA ----------------------------------------------------------

class _Nfa:
    """Thompson-style NFA: a state has epsilon edges or one class edge."""

    def __init__(self, max_repeat_states: int):
        self.eps: list[list[int]] = []
        self.sym: list[tuple[frozenset[int], int] | None] = []
        self.max_repeat_states = max_repeat_states

    def state(self) -> int:
        self.eps.append([])
        self.sym.append(None)
        return len(self.eps) - 1

    def build(self, node) -> tuple[int, int]:
        kind = node[0]
        if kind == _N.LIT:
            s, t = self.state(), self.state()
            self.sym[s] = (node[1], t)
            return s, t
        if kind == _N.CAT:
            parts = node[1]
            if not parts:
                s = self.state()
                return s, s
            frags = [self.build(p) for p in parts]
            for (_, a_end), (b_start, _) in zip(frags, frags[1:]):
                self.eps[a_end].append(b_start)
            return frags[0][0], frags[-1][1]
        if kind == _N.ALT:
            s, t = self.state(), self.state()
            for p in node[1]:
                ps, pt = self.build(p)
                self.eps[s].append(ps)
                self.eps[pt].append(t)
            return s, t
        if kind == _N.STAR:
            s, t = self.state(), self.state()
            ps, pt = self.build(node[1])
            self.eps[s] += [ps, t]
            self.eps[pt] += [ps, t]
            return s, t
        if kind == _N.REP:
            _, child, lo, hi = node
            before = len(self.eps)
            frag = self._build_rep(child, lo, hi)
            created = len(self.eps) - before
            if created > self.max_repeat_states:
                raise ValueError(
                    f"repetition expands to {created} NFA states, over the "
                    f"ceiling of {self.max_repeat_states}"
                )
            return frag
        raise AssertionError(f"unknown node kind {kind}")

    def _build_rep(self, child, lo: int, hi: int | None) -> tuple[int, int]:
        # Structural expansion: lo mandatory copies, then either a star
        # (unbounded) or hi-lo optional copies.  Each copy is built fresh.
        start = self.state()
        cur = start
        for _ in range(lo):
            ps, pt = self.build(child)
            self.eps[cur].append(ps)
            cur = pt
        if hi is None:
            ss, st = self.build((_N.STAR, child))
            self.eps[cur].append(ss)
            cur = st
        else:
            for _ in range(hi - lo):
                ps, pt = self.build(child)
                nxt = self.state()
                self.eps[cur] += [ps, nxt]
                self.eps[pt].append(nxt)
                cur = nxt
        return start, cur


def _eps_closure(nfa: _Nfa, states) -> frozenset[int]:
    seen = set(states)
    stack = list(states)
    while stack:
        s = stack.pop()
        for t in nfa.eps[s]:
            if t not in seen:
                seen.add(t)
                stack.append(t)
    return frozenset(seen)


# --- subset construction, Hopcroft, pruning --------------------------------

def _subset_construction(nfa: _Nfa, start: int, accept: int):
    """Determinize; returns (delta maps, accepting set, start=0)."""
    start_set = _eps_closure(nfa, [start])
    ids: dict[frozenset[int], int] = {start_set: 0}
    order = [start_set]
    delta: list[dict[int, int]] = [{}]
    accepting: set[int] = set()
    if accept in start_set:
        accepting.add(0)
    queue = deque([start_set])
    while queue:
        cur = queue.popleft()
        cid = ids[cur]
        edges = [nfa.sym[s] for s in cur if nfa.sym[s] is not None]
        if not edges:
            continue
        alive = frozenset().union(*(cls for cls, _ in edges))
        for byte in sorted(alive):
            move = [t for cls, t in edges if byte in cls]
            nxt = _eps_closure(nfa, move)
            nid = ids.get(nxt)
            if nid is None:
                nid = len(order)
                ids[nxt] = nid
                order.append(nxt)
                delta.append({})
                if accept in nxt:
                    accepting.add(nid)
                queue.append(nxt)
            delta[cid][byte] = nid
    return delta, accepting


def _hopcroft(delta: list[dict[int, int]], accepting: set[int]):
    """Minimize the completion (explicit sink) of a partial DFA.

    Returns the partition as a set of frozensets over 0..n, where state n
    is the sink.  Only bytes that actually label an edge are used as
    splitter symbols: an unused byte sends every state to the sink, a
    constant map that can never split a block.
    """
    n = len(delta)
    sink = n
    active = sorted({b for edges in delta for b in edges})
    inv: dict[int, dict[int, list[int]]] = {b: {} for b in active}
    has_edge: dict[int, set[int]] = {b: set() for b in active}
    for q, edges in enumerate(delta):
        for b, t in edges.items():
            inv[b].setdefault(t, []).append(q)
            has_edge[b].add(q)
    all_states = frozenset(range(n + 1))

    def preimage(block: frozenset[int], byte: int) -> frozenset[int]:
        pre: set[int] = set()
        for t in block:
            pre.update(inv[byte].get(t, ()))
        if sink in block:
            pre.update(all_states - has_edge[byte])
        return frozenset(pre)

    symbols = list(active)
    final = frozenset(accepting)
    nonfinal = all_states - final
    partition = {p for p in (final, nonfinal) if p}
    work = {min(final, nonfinal, key=len)} if final and nonfinal else set(partition)
    while work:
        splitter = work.pop()
        for byte in symbols:
            x = preimage(splitter, byte)
            if not x:
                continue
            next_partition = set()
            for block in partition:
                inter = block & x
                if not inter or inter == block:
                    next_partition.add(block)
                    continue
                diff = block - x
                next_partition.add(inter)
                next_partition.add(diff)
                if block in work:
                    work.remove(block)
                    work.add(inter)
                    work.add(diff)
                else:
                    work.add(min(inter, diff, key=len))
            partition = next_partition
    return partition


def _prune_and_renumber(delta, accepting, partition) -> PartialDfa:
    n = len(delta)
    sink = n
    block_of: dict[int, int] = {}
    blocks = sorted(partition, key=min)
    for bid, block in enumerate(blocks):
        for q in block:
            block_of[q] = bid
    dead_bid = block_of[sink]
    start_bid = block_of[0]
    if start_bid == dead_bid:
        raise ValueError("pattern matches no string")

    # block-level transitions, skipping edges into the dead block
    block_delta: dict[int, dict[int, int]] = {}
    block_acc: set[int] = set()
    for bid, block in enumerate(blocks):
        if bid == dead_bid:
            continue
        rep = min(b for b in block if b != sink)
        edges = {}
        for byte, t in delta[rep].items():
            tb = block_of[t]
            if tb != dead_bid:
                edges[byte] = tb
        block_delta[bid] = edges
        if any(q in accepting for q in block):
            block_acc.add(bid)

    # canonical numbering: BFS from start, edges in byte order
    renum = {start_bid: 0}
    order = [start_bid]
    queue = deque([start_bid])
    while queue:
        bid = queue.popleft()
        for byte in sorted(block_delta[bid]):
            tb = block_delta[bid][byte]
            if tb not in renum:
                renum[tb] = len(order)
                order.append(tb)
                queue.append(tb)
    out_delta: list[dict[int, int]] = []
    for bid in order:
        out_delta.append({b: renum[t] for b, t in sorted(block_delta[bid].items())})
    out_acc = frozenset(renum[b] for b in block_acc if b in renum)
    if not out_acc:
        raise ValueError("pattern matches no string")
    return PartialDfa(delta=tuple(out_delta), start=0, accepting=out_acc)


def compile_regex(pattern: str, *, max_repeat_states: int = DEFAULT_MAX_REPEAT_STATES) -> PartialDfa:
    """Compile a pattern to its minimal partial DFA.

    The pattern body is compiled as-is (unanchored substring semantics are
    the decoder's job, not implicit ``.*`` wrapping).  Raises ``ValueError``
    for syntax errors, unsupported constructs, and patterns accepting the
    empty string.
    """
    ast = _Parser(pattern).parse()
    nfa = _Nfa(max_repeat_states=max_repeat_states)
    start, accept = nfa.build(ast)
    delta, accepting = _subset_construction(nfa, start, accept)
    if 0 in accepting:
        raise ValueError("pattern accepts empty string")
    partition = _hopcroft(delta, accepting)
    return _prune_and_renumber(delta, accepting, partition)


def compile_many(patterns, *, max_repeat_states: int = DEFAULT_MAX_REPEAT_STATES) -> list[PartialDfa]:
    return [compile_regex(p, max_repeat_states=max_repeat_states) for p in patterns]


def load_regex_patterns(path: str) -> list[str]:
    """Regex constraint file: one pattern per line, lexicon-style escaping."""
    from .ac import parse_lexicon_lines

    raw = parse_lexicon_lines(
        open(path, "r", encoding="utf-8").read().splitlines(), origin=path
    )
    return [r.decode("utf-8") for r in raw]


def dense_dfa_transitions(dfa: PartialDfa) -> tuple[np.ndarray, np.ndarray]:
    """Dense [num_states+1, 256] transition table with an explicit dead row.

    Row ``num_states`` is the absorbing dead state; missing edges point at
    it.  Returns (table, accepting-with-dead-flag) for vectorized scans.
    """
    n = dfa.num_states
    dense = np.full((n + 1, 256), n, dtype=np.int32)
    for q, edges in enumerate(dfa.delta):
        for byte, t in edges.items():
            dense[q, byte] = t
    acc = np.zeros(n + 1, dtype=bool)
    for q in dfa.accepting:
        acc[q] = True
    return dense, acc
