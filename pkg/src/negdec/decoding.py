"""Generation loops over masked logits.

The decoder asks the scorer for logits, applies the constraint mask, and
hands the masked logits to a standard decoding rule: greedy, top-k, top-p,
temperature sampling, or beam search.  Under hard masking the emitted byte
string can never contain a forbidden string or a forbidden-regex match,
and EOS is never blocked, so generation always terminates.

The rejection-sampling baseline selects from unmasked logits, checks the
chosen token against the constraint state, and on violation masks just
that token and reselects from the same logits (no extra scorer call).

Beam search treats the mask purely as a feasibility filter: beam scores
accumulate the original (pre-mask) log-probabilities of the selected valid
tokens, so removing invalid probability mass never perturbs the ranking of
surviving hypotheses.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .masking import (
    HARD,
    MaskMode,
    SequenceState,
    advance,
    apply_mask,
    blocked_tokens,
    blocked_tokens_iterative,
    init_state,
    token_is_blocked,
)
from .scorers import Scorer
from .tables import CompiledConstraints
from .vocab import Vocabulary, decode_ids

METHOD_NCO = "nco"
METHOD_RS = "rs"
METHOD_NONE = "none"
_METHODS = (METHOD_NCO, METHOD_RS, METHOD_NONE)


@dataclass(frozen=True)
class Greedy:
    pass


@dataclass(frozen=True)
class TopK:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("top-k needs k >= 1")


@dataclass(frozen=True)
class TopP:
    p: float

    def __post_init__(self):
        if not (0.0 < self.p <= 1.0):
            raise ValueError("top-p needs p in (0, 1]")


@dataclass(frozen=True)
class Temperature:
    tau: float

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError("temperature must be > 0")


@dataclass(frozen=True)
class Beam:
    width: int

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("beam width must be >= 1")


DecodeRule = Greedy | TopK | TopP | Temperature | Beam


@dataclass(frozen=True)
class DecodeConfig:
    rule: DecodeRule = Greedy()
    max_tokens: int = 64
    seed: int = 0
    mode: MaskMode = HARD
    method: str = METHOD_NCO
    mask_path: str = "matmul"  # or "iterative" (the no-matmul ablation)
    scan_prompt: bool = False

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}")
        if self.mask_path not in ("matmul", "iterative"):
            raise ValueError("mask_path must be 'matmul' or 'iterative'")
        if isinstance(self.rule, Beam) and not self.mode.is_hard:
            raise ValueError("beam search supports hard masking only")
        if self.method == METHOD_RS and not self.mode.is_hard:
            raise ValueError("rejection sampling supports hard masking only")


@dataclass
class GenerationResult:
    """Token ids plus the per-generation report the decoder keeps."""

    tokens: list[int]
    text: bytes
    elapsed_s: float
    rejections: int = 0
    masked_counts: list[int] = field(default_factory=list)
    score: float = 0.0


def _softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits)
    if not np.isfinite(m):
        raise ValueError("no selectable token (all logits -inf)")
    z = np.exp(logits - m)
    return z / z.sum()


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits)
    return logits - (m + np.log(np.exp(logits - m).sum()))


def _desc_order(logits: np.ndarray) -> np.ndarray:
    # logit descending, token id ascending on ties
    return np.lexsort((np.arange(logits.size), -logits))


def select_token(rule: DecodeRule, logits: np.ndarray, rng: np.random.Generator) -> int:
    """Apply one decoding rule to (already masked) logits.

    Greedy ties break toward the lowest token id.  Sampling rules draw
    exactly one variate, so fixed seeds reproduce across mask settings
    that leave the logits unchanged.
    """
    if isinstance(rule, Greedy):
        return int(np.argmax(logits))
    if isinstance(rule, Temperature):
        probs = _softmax(logits / rule.tau)
        return int(rng.choice(logits.size, p=probs))
    if isinstance(rule, TopK):
        order = _desc_order(logits)[: rule.k]
        probs = _softmax(logits[order])
        return int(order[rng.choice(order.size, p=probs)])
    if isinstance(rule, TopP):
        order = _desc_order(logits)
        probs = _softmax(logits)[order]
        cut = int(np.searchsorted(np.cumsum(probs), rule.p)) + 1
        pool = order[:cut]
        pool_probs = probs[:cut] / probs[:cut].sum()
        return int(pool[rng.choice(pool.size, p=pool_probs)])
    raise ValueError(f"select_token cannot apply rule {rule!r}")


def _initial_state(
    tables: CompiledConstraints | None, prompt, scan_prompt: bool
) -> SequenceState | None:
    if tables is None:
        return None
    state = init_state(tables)
    if scan_prompt:
        for t in prompt:
            state = advance(state, int(t), tables)
    return state


def _blocked(state, tables, config) -> np.ndarray:
    if config.mask_path == "iterative":
        return blocked_tokens_iterative(state, tables)
    return blocked_tokens(state, tables)


def generate(
    scorer: Scorer,
    vocab: Vocabulary,
    tables: CompiledConstraints | None,
    config: DecodeConfig,
    prompt=(),
) -> GenerationResult:
    """One constrained generation; see module docstring for the loop shape.

    The prompt seeds the scorer context but not the constraint state
    (constraints apply to the generated suffix) unless ``scan_prompt``.
    """
    if config.method == METHOD_RS:
        return generate_rejection(scorer, vocab, tables, config, prompt)
    if isinstance(config.rule, Beam):
        hyps = generate_beam(scorer, vocab, tables, config, prompt)
        best = hyps[0]
        return best

    prompt = [int(t) for t in prompt]
    masked_mode = config.method == METHOD_NCO
    if masked_mode and tables is None:
        raise ValueError("nco decoding needs compiled constraint tables")
    state = _initial_state(tables, prompt, config.scan_prompt) if masked_mode else None
    rng = np.random.default_rng(config.seed)
    context = list(prompt)
    tokens: list[int] = []
    masked_counts: list[int] = []
    t0 = time.perf_counter()
    for _ in range(config.max_tokens):
        logits = scorer.next_logits(context)
        if masked_mode:
            blocked = _blocked(state, tables, config)
            masked_counts.append(int(blocked.sum()))
            logits = apply_mask(logits, blocked, config.mode)
        else:
            masked_counts.append(0)
        w = select_token(config.rule, logits, rng)
        tokens.append(w)
        context.append(w)
        if w == vocab.eos_id:
            break
        if masked_mode:
            state = advance(state, w, tables)
    elapsed = time.perf_counter() - t0
    return GenerationResult(
        tokens=tokens,
        text=decode_ids(vocab, tokens),
        elapsed_s=elapsed,
        rejections=0,
        masked_counts=masked_counts,
    )


def generate_rejection(
    scorer: Scorer,
    vocab: Vocabulary,
    tables: CompiledConstraints | None,
    config: DecodeConfig,
    prompt=(),
) -> GenerationResult:
    """Rejection-sampling baseline: select, check, mask-and-reselect."""
    if tables is None:
        raise ValueError("rejection sampling needs compiled constraint tables")
    if not config.mode.is_hard:
        raise ValueError("rejection sampling supports hard masking only")
    if isinstance(config.rule, Beam):
        raise ValueError("rejection sampling does not support beam search")
    prompt = [int(t) for t in prompt]
    state = _initial_state(tables, prompt, config.scan_prompt)
    rng = np.random.default_rng(config.seed)
    context = list(prompt)
    tokens: list[int] = []
    rejections = 0
    t0 = time.perf_counter()
    for _ in range(config.max_tokens):
        logits = np.asarray(scorer.next_logits(context), dtype=np.float64).copy()
        while True:
            w = select_token(config.rule, logits, rng)
            if not token_is_blocked(state, w, tables):
                break
            logits[w] = -np.inf  # reject and reselect from the same logits
            rejections += 1
        tokens.append(w)
        context.append(w)
        if w == vocab.eos_id:
            break
        state = advance(state, w, tables)
    elapsed = time.perf_counter() - t0
    return GenerationResult(
        tokens=tokens,
        text=decode_ids(vocab, tokens),
        elapsed_s=elapsed,
        rejections=rejections,
        masked_counts=[],
    )


@dataclass
class _BeamHyp:
    tokens: list[int]
    state: SequenceState | None
    score: float


def generate_beam(
    scorer: Scorer,
    vocab: Vocabulary,
    tables: CompiledConstraints | None,
    config: DecodeConfig,
    prompt=(),
) -> list[GenerationResult]:
    """Constrained beam search; returns hypotheses sorted by score.

    Masking filters candidate feasibility only; scores sum the pre-mask
    log-probabilities of the selected tokens.  Constraint states are
    copied with their hypotheses on expansion.
    """
    rule = config.rule
    if not isinstance(rule, Beam):
        raise ValueError("generate_beam needs a Beam rule")
    if not config.mode.is_hard:
        raise ValueError("beam search supports hard masking only")
    masked_mode = config.method == METHOD_NCO
    if masked_mode and tables is None:
        raise ValueError("nco decoding needs compiled constraint tables")
    prompt = [int(t) for t in prompt]
    width = rule.width
    start_state = _initial_state(tables, prompt, config.scan_prompt) if masked_mode else None
    live = [_BeamHyp(tokens=[], state=start_state, score=0.0)]
    finished: list[_BeamHyp] = []
    t0 = time.perf_counter()
    for _ in range(config.max_tokens):
        if not live:
            break
        cand_scores: list[float] = []
        cand_beam: list[int] = []
        cand_tok: list[int] = []
        for bi, hyp in enumerate(live):
            logits = scorer.next_logits(prompt + hyp.tokens)
            logp = _log_softmax(np.asarray(logits, dtype=np.float64))
            if masked_mode:
                blocked = _blocked(hyp.state, tables, config)
                valid = np.flatnonzero(~blocked)
            else:
                valid = np.arange(logp.size)
            cand_scores.extend((hyp.score + logp[valid]).tolist())
            cand_beam.extend([bi] * valid.size)
            cand_tok.extend(valid.tolist())
        scores = np.asarray(cand_scores)
        order = np.lexsort((cand_tok, cand_beam, -scores))[:width]
        next_live: list[_BeamHyp] = []
        for idx in order:
            bi, w = cand_beam[idx], int(cand_tok[idx])
            src = live[bi]
            hyp = _BeamHyp(
                tokens=src.tokens + [w],
                state=src.state,
                score=float(scores[idx]),
            )
            if w == vocab.eos_id:
                finished.append(hyp)
            else:
                if masked_mode:
                    hyp.state = advance(src.state, w, tables)
                next_live.append(hyp)
        live = next_live
    finished.extend(live)  # ran out of budget: report as-is
    finished.sort(key=lambda h: (-h.score, h.tokens))
    elapsed = time.perf_counter() - t0
    return [
        GenerationResult(
            tokens=h.tokens,
            text=decode_ids(vocab, h.tokens),
            elapsed_s=elapsed,
            rejections=0,
            masked_counts=[],
            score=h.score,
        )
        for h in finished[:width]
    ]


def generate_batch(
    scorer: Scorer,
    vocab: Vocabulary,
    tables: CompiledConstraints | None,
    config: DecodeConfig,
    prompts,
    workers: int = 1,
) -> list[GenerationResult]:
    """Decode a batch; element i uses the per-sequence seed ``seed + i``.

    Tables are immutable and shared; each sequence owns its constraint
    state, so batch elements are independent and may run in threads.
    """
    configs = [replace(config, seed=config.seed + i) for i in range(len(prompts))]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(
                pool.map(
                    lambda args: generate(scorer, vocab, tables, args[0], args[1]),
                    zip(configs, prompts),
                )
            )
    return [
        generate(scorer, vocab, tables, cfg, p) for cfg, p in zip(configs, prompts)
    ]
