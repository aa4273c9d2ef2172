"""Aho-Corasick automaton over a forbidden byte-string lexicon.

The trie state reached after scanning a text is the longest suffix of that
text which is still a prefix of some forbidden string.  Failure links point
to the longest proper suffix that is also a trie prefix, and forbidden
marks are propagated through them so a state is forbidden exactly when
some pattern ends at (is a suffix of) the scanned position.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AcAutomaton:
    """Trie + failure links + propagated forbidden marks.

    ``goto`` is the sparse per-state child map (byte -> state); missing
    edges are resolved through ``fail``.  ``num_states`` is at most
    1 + total pattern length.
    """

    goto: list[dict[int, int]]
    fail: np.ndarray  # int32 [num_states]
    forbidden: np.ndarray  # bool [num_states]
    root: int = 0
    _dense: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def num_states(self) -> int:
        return len(self.goto)

    def dense_transitions(self) -> np.ndarray:
        """Full [num_states, 256] byte-transition table (built on demand).

        This is the failure-link closure of ``goto``: entry [q, a] equals
        ``ac_step(self, q, a)``.  Internal optimization for vectorized
        precomputation; the automaton itself stays sparse.
        """
        if self._dense is None:
            n = self.num_states
            dense = np.zeros((n, 256), dtype=np.int32)
            for a, child in sorted(self.goto[self.root].items()):
                dense[self.root, a] = child
            order = _bfs_order(self)
            for q in order:
                if q == self.root:
                    continue
                dense[q] = dense[self.fail[q]]
                for a, child in sorted(self.goto[q].items()):
                    dense[q, a] = child
            self._dense = dense
        return self._dense


def _bfs_order(ac: AcAutomaton) -> list[int]:
    order = [ac.root]
    queue = deque([ac.root])
    while queue:
        q = queue.popleft()
        for _, child in sorted(ac.goto[q].items()):
            order.append(child)
            queue.append(child)
    return order


def build_ac(patterns) -> AcAutomaton:
    """Build the automaton from a set of non-empty byte strings.

    Patterns are inserted in sorted order so state numbering is
    deterministic.  Duplicate patterns and patterns that are substrings of
    others are fine; mark propagation handles them.
    """
    pats = sorted(set(bytes(p) for p in patterns))
    for p in pats:
        if len(p) == 0:
            raise ValueError("empty forbidden string")

    goto: list[dict[int, int]] = [{}]
    terminal = [False]
    for p in pats:
        q = 0
        for a in p:
            nxt = goto[q].get(a)
            if nxt is None:
                nxt = len(goto)
                goto[q][a] = nxt
                goto.append({})
                terminal.append(False)
            q = nxt
        terminal[q] = True

    n = len(goto)
    fail = np.zeros(n, dtype=np.int32)
    forbidden = np.asarray(terminal, dtype=bool)
    queue = deque()
    for _, child in sorted(goto[0].items()):
        fail[child] = 0
        queue.append(child)
    while queue:
        q = queue.popleft()
        forbidden[q] |= forbidden[fail[q]]
        for a, child in sorted(goto[q].items()):
            # walk the fail chain of q to find the longest suffix with an
            # outgoing edge on a
            f = int(fail[q])
            while f != 0 and a not in goto[f]:
                f = int(fail[f])
            fail[child] = goto[f].get(a, 0)
            queue.append(child)
    return AcAutomaton(goto=goto, fail=fail, forbidden=forbidden)


def ac_step(ac: AcAutomaton, q: int, a: int) -> int:
    """Advance one byte: follow fail links until a goto on ``a`` exists."""
    while q != ac.root and a not in ac.goto[q]:
        q = int(ac.fail[q])
    return ac.goto[q].get(a, ac.root)


def run_ac(ac: AcAutomaton, text: bytes) -> tuple[int, bool]:
    """Scan text from the root; hit=True iff a forbidden state is visited."""
    q = ac.root
    hit = False
    for a in text:
        q = ac_step(ac, q, a)
        hit = hit or bool(ac.forbidden[q])
    return q, hit


def state_string(ac: AcAutomaton, state: int) -> bytes:
    """Byte string spelled by the trie path from root to ``state``."""
    parent = {}
    for q, edges in enumerate(ac.goto):
        for a, child in edges.items():
            parent[child] = (q, a)
    out = []
    q = state
    while q != ac.root:
        q, a = parent[q]
        out.append(a)
    return bytes(reversed(out))


def load_lexicon(path: str) -> list[bytes]:
    """Read a lexicon file: one forbidden string per line (UTF-8).

    Blank lines and ``#`` comment lines are ignored; a leading ``\\#``
    escapes a literal hash.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    return parse_lexicon_lines(lines, origin=path)


def parse_lexicon_lines(lines, origin: str = "<lexicon>") -> list[bytes]:
    out: list[bytes] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            continue
        if line.startswith("\\#"):
            line = line[1:]
        if not line:
            raise ValueError(f"{origin}:{lineno}: empty forbidden string")
        out.append(line.encode("utf-8"))
    return out
