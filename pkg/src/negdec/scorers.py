"""Pluggable next-token scorers standing in for a language model.

A scorer is any object with ``next_logits(context) -> float64 [vocab]``
that is a pure, deterministic function of the context token ids.  The
n-gram scorer provides natural-ish statistics for desk-scale runs; the
adversarial wrapper boosts tokens that would extend or complete a
forbidden match, which drives the high-rejection regimes used to compare
rejection sampling against mask-based decoding.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict

import numpy as np

from .masking import blocked_tokens, init_state, advance
from .tables import CompiledConstraints
from .vocab import Vocabulary, encode

DEFAULT_EOS_MASS = 0.02


class Scorer:
    """Interface marker; implementations must be pure in the context."""

    vocab_size: int

    def next_logits(self, context) -> np.ndarray:
        raise NotImplementedError


class UniformScorer(Scorer):
    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def next_logits(self, context) -> np.ndarray:
        return np.zeros(self.vocab_size, dtype=np.float64)


class NgramScorer(Scorer):
    """Additively smoothed n-gram counts with backoff to shorter contexts.

    The corpus carries no EOS signal, so a fixed slice of probability mass
    (default 2%) is reserved for EOS and the n-gram distribution fills the
    rest; that keeps toy generations finite.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        corpus: bytes,
        order: int = 2,
        smoothing: float = 0.1,
        eos_mass: float = DEFAULT_EOS_MASS,
    ):
        if not (1 <= order <= 4):
            raise ValueError("order must be in 1..4")
        if not (0.0 < eos_mass < 1.0):
            raise ValueError("eos_mass must be in (0, 1)")
        self.vocab_size = vocab.num_tokens
        self.eos_id = vocab.eos_id
        self.order = order
        self.smoothing = float(smoothing)
        self.eos_mass = float(eos_mass)
        ids = encode(vocab, corpus)
        # counts[k] maps a length-k context tuple to (total, Counter of next)
        self._counts: list[dict] = [defaultdict(Counter) for _ in range(order)]
        for i, tok in enumerate(ids):
            for k in range(order):
                if i < k:
                    continue
                ctx = tuple(ids[i - k:i])
                self._counts[k][ctx][tok] += 1

    def next_logits(self, context) -> np.ndarray:
        context = tuple(int(t) for t in context)
        chosen: Counter | None = None
        for k in range(self.order - 1, -1, -1):
            if len(context) < k:
                continue
            ctx = context[len(context) - k:] if k else ()
            bucket = self._counts[k].get(ctx)
            if bucket:
                chosen = bucket
                break
        probs = np.full(self.vocab_size, self.smoothing, dtype=np.float64)
        if chosen:
            for tok, c in chosen.items():
                probs[tok] += c
        probs[self.eos_id] = 0.0
        probs *= (1.0 - self.eos_mass) / probs.sum()
        probs[self.eos_id] = self.eos_mass
        return np.log(probs)


class AdversarialScorer(Scorer):
    """Adds ``boost`` to the logits of tokens marked by a target predicate.

    The default predicate marks tokens that would complete a violation at
    the constraint state implied by the context, so the boosted
    distribution concentrates probability mass on invalid continuations.
    """

    def __init__(self, base: Scorer, boost: float, target):
        self.base = base
        self.vocab_size = base.vocab_size
        self.boost = float(boost)
        self.target = target

    def next_logits(self, context) -> np.ndarray:
        logits = self.base.next_logits(context)
        mask = self.target(context)
        return logits + self.boost * mask.astype(np.float64)


def blocked_token_targeter(tables: CompiledConstraints, max_cache: int = 65536):
    """Predicate factory: marks the tokens blocked at the context's state.

    Replays the constraint automata over the context; a prefix memo keeps
    repeated decode-loop calls linear.
    """
    cache: dict[tuple, object] = {(): init_state(tables)}

    def state_for(ctx: tuple):
        hit = cache.get(ctx)
        if hit is not None:
            return hit
        state = state_for(ctx[:-1])
        state = advance(state, ctx[-1], tables)
        if len(cache) > max_cache:
            cache.clear()
            cache[()] = init_state(tables)
        cache[ctx] = state
        return state

    def target(context) -> np.ndarray:
        ctx = tuple(int(t) for t in context)
        return blocked_tokens(state_for(ctx), tables)

    return target


def scorer_from_spec(
    spec: str,
    vocab: Vocabulary,
    tables: CompiledConstraints | None = None,
) -> Scorer:
    """Parse a CLI scorer spec.

    Forms: ``uniform``, ``ngram:<order>:<corpus-path>``,
    ``adversarial:<boost>`` (uniform base plus a blocked-token booster;
    requires compiled constraints).
    """
    parts = spec.split(":")
    kind = parts[0]
    if kind == "uniform":
        return UniformScorer(vocab.num_tokens)
    if kind == "ngram":
        if len(parts) != 3:
            raise ValueError("expected ngram:<order>:<corpus-path>")
        order = int(parts[1])
        with open(parts[2], "rb") as fh:
            corpus = fh.read()
        return NgramScorer(vocab, corpus, order=order)
    if kind == "adversarial":
        if len(parts) != 2:
            raise ValueError("expected adversarial:<boost>")
        if tables is None:
            raise ValueError("adversarial scorer needs compiled constraints")
        boost = float(parts[1])
        return AdversarialScorer(
            UniformScorer(vocab.num_tokens), boost, blocked_token_targeter(tables)
        )
    raise ValueError(f"unknown scorer spec '{spec}'")
