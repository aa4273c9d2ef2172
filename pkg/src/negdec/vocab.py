"""Byte-level BPE vocabulary with an explicit, ordered merge list.

Every token is a byte string over the alphabet 0..255.  The canonical id
layout is fixed: ids 0..255 are the single-byte tokens, id 256 is the EOS
control token (empty byte content), and ids 257.. are merge outputs in
merge order.  Each merged token records exactly one (left, right) parent
pair, so any per-token quantity that composes over concatenation can be
filled in merge order from its two children.  That merge structure is what
the table-precomputation code relies on; this module only has to keep it
consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NUM_BYTE_TOKENS = 256
EOS_ID = 256
NUM_BASE_TOKENS = 257  # 256 byte tokens + EOS

# Pair keys fit two token ids into one int64 so numpy can count/scan pairs.
_KEY_SHIFT = 22
_KEY_MASK = (1 << _KEY_SHIFT) - 1

VOCAB_FILE_HEADER = "negdec-vocab v1"


@dataclass(frozen=True)
class Vocabulary:
    """Token byte strings plus the ordered merge rules that produced them.

    ``tokens[i]`` is the byte content of token id ``i``; the EOS token is
    the single exception and has empty content.  ``merges`` holds
    ``(left_id, right_id, merged_id)`` triples in merge order, and every
    non-base token must be the output of exactly one merge.
    """

    tokens: tuple[bytes, ...]
    merges: tuple[tuple[int, int, int], ...]
    eos_id: int = EOS_ID
    base_ids: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if not self.base_ids:
            object.__setattr__(
                self, "base_ids", frozenset(range(NUM_BASE_TOKENS))
            )
        n = len(self.tokens)
        if not (0 <= self.eos_id < n):
            raise ValueError("eos_id out of range")
        if self.tokens[self.eos_id] != b"":
            raise ValueError("EOS token must have empty byte content")
        merged_out: set[int] = set()
        for left, right, out in self.merges:
            if not (0 <= left < out < n and 0 <= right < out):
                raise ValueError("merge ids must precede the merged id")
            if self.tokens[out] != self.tokens[left] + self.tokens[right]:
                raise ValueError("merged token bytes must equal left ++ right")
            if out in merged_out:
                raise ValueError("token produced by more than one merge")
            merged_out.add(out)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)

    def token_bytes(self, token_id: int) -> bytes:
        if not (0 <= token_id < len(self.tokens)):
            raise ValueError("invalid token id")
        return self.tokens[token_id]

    def mean_token_length(self) -> float:
        return float(np.mean([len(t) for t in self.tokens]))

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for left, right, _ in self.merges:
            h.update(f"{left} {right}\n".encode())
        return h.hexdigest()


def _base_tokens() -> list[bytes]:
    toks = [bytes([b]) for b in range(NUM_BYTE_TOKENS)]
    toks.append(b"")  # EOS
    return toks


def _merge_pass(seq: np.ndarray, left: int, right: int, out: int) -> np.ndarray:
    """One left-to-right pass replacing non-overlapping (left,right) -> out.

    A single pass is exhaustive: a fresh (left,right) adjacency would need
    the new token to equal one of its own parents, which the byte-length
    invariant rules out.
    """
    if seq.size < 2:
        return seq
    hits = np.flatnonzero((seq[:-1] == left) & (seq[1:] == right))
    if hits.size == 0:
        return seq
    if left == right:
        # Overlapping runs (e.g. 'aaaa'): pair greedily from the left.
        kept = []
        last = -2
        for i in hits.tolist():
            if i >= last + 2:
                kept.append(i)
                last = i
        hits = np.asarray(kept, dtype=np.int64)
    seq = seq.copy()
    seq[hits] = out
    keep = np.ones(seq.size, dtype=bool)
    keep[hits + 1] = False
    return seq[keep]


def train_toy_bpe(corpus: bytes, target_size: int) -> Vocabulary:
    """Learn a toy BPE vocabulary by greedy adjacent-pair counting.

    Performs ``target_size - 257`` merge rounds (fewer if the corpus runs
    out of adjacent pairs).  Ties between equally frequent pairs break
    toward the lowest (left_id, right_id) so training is deterministic.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if target_size < NUM_BASE_TOKENS:
        raise ValueError("vocab too small")

    tokens = _base_tokens()
    merges: list[tuple[int, int, int]] = []
    seq = np.frombuffer(corpus, dtype=np.uint8).astype(np.int64)
    for _ in range(target_size - NUM_BASE_TOKENS):
        if seq.size < 2:
            break
        keys = (seq[:-1] << _KEY_SHIFT) | seq[1:]
        uniq, counts = np.unique(keys, return_counts=True)
        # uniq is sorted ascending, so argmax lands on the lowest key
        # among the maximal counts: lowest (left, right) wins ties.
        best = uniq[int(np.argmax(counts))]
        left = int(best >> _KEY_SHIFT)
        right = int(best & _KEY_MASK)
        out = len(tokens)
        tokens.append(tokens[left] + tokens[right])
        merges.append((left, right, out))
        seq = _merge_pass(seq, left, right, out)
    return Vocabulary(tokens=tuple(tokens), merges=tuple(merges))


def encode(vocab: Vocabulary, text: bytes) -> list[int]:
    """Tokenize by applying merge rules in merge order until none applies.

    Each round applies the lowest-ranked rule whose pair is still present;
    the minimum present rank only ever increases, so the number of rounds
    is bounded by the number of rules actually used.
    """
    if len(text) == 0:
        return []
    rank: dict[int, tuple[int, int, int, int]] = {}
    for r, (left, right, out) in enumerate(vocab.merges):
        rank[(left << _KEY_SHIFT) | right] = (r, left, right, out)
    seq = np.frombuffer(text, dtype=np.uint8).astype(np.int64)
    while seq.size >= 2:
        keys = np.unique((seq[:-1] << _KEY_SHIFT) | seq[1:])
        best: tuple[int, int, int, int] | None = None
        for k in keys.tolist():
            hit = rank.get(k)
            if hit is not None and (best is None or hit < best):
                best = hit
        if best is None:
            break
        _, left, right, out = best
        seq = _merge_pass(seq, left, right, out)
    return [int(t) for t in seq]


def decode_ids(vocab: Vocabulary, ids: list[int] | np.ndarray) -> bytes:
    """Concatenate token byte strings; EOS contributes no bytes."""
    out = []
    for i in ids:
        i = int(i)
        if not (0 <= i < len(vocab.tokens)):
            raise ValueError("invalid token id")
        if i == vocab.eos_id:
            continue
        out.append(vocab.tokens[i])
    return b"".join(out)


def save_vocab(vocab: Vocabulary, path: str) -> None:
    """Write the vocab file: a header line, then one merge per line.

    Only ``<left_id> <right_id>`` is stored; the merged id is implicit
    (257 + line index), and byte tokens plus EOS are implicit.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(VOCAB_FILE_HEADER + "\n")
        for left, right, _ in vocab.merges:
            fh.write(f"{left} {right}\n")


def load_vocab(path: str) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != VOCAB_FILE_HEADER:
        raise ValueError(f"{path}:1: expected header '{VOCAB_FILE_HEADER}'")
    tokens = _base_tokens()
    merges: list[tuple[int, int, int]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected '<left_id> <right_id>'")
        try:
            left, right = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: merge ids must be integers") from exc
        out = len(tokens)
        if not (0 <= left < out and 0 <= right < out):
            raise ValueError(f"{path}:{lineno}: merge references undefined token id")
        tokens.append(tokens[left] + tokens[right])
        merges.append((left, right, out))
    return Vocabulary(tokens=tuple(tokens), merges=tuple(merges))
