"""Temperature / nucleus sampling and exact enumeration of response space.

Per-sequence RNG streams are derived from (seed, labels...) so a prompt's
sample is bit-identical whether it is generated alone or inside a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..util import derive_seed, log_softmax, softmax
from .model import (Arch, ContextOverflowError, PolicyError, compose_context,
                    context_windows, logits_for_windows)

# slack for constructed exact-tie cumulative masses; softmax outputs rarely
# land on the boundary but tests and configs use round numbers like 0.5
_TOP_P_EPS = 1e-12

ENUMERATION_CAP = 200_000


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.1
    top_p: float = 1.0
    max_new_tokens: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise PolicyError("temperature must be >= 0")
        if not (0.0 < self.top_p <= 1.0):
            raise PolicyError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise PolicyError("max_new_tokens must be >= 1")


@dataclass
class SampledResponse:
    tokens: tuple[int, ...]
    logprobs: np.ndarray  # per-token log pi under the unmodified distribution

    @property
    def total_logprob(self) -> float:
        return float(self.logprobs.sum())


def _nucleus_rows(p: np.ndarray, top_p: float, draws: np.ndarray) -> np.ndarray:
    """Vectorized nucleus sampling. Order: prob desc, ties by token id asc."""
    B, V = p.shape
    order = np.argsort(-p, axis=1, kind="stable")
    sorted_p = np.take_along_axis(p, order, axis=1)
    csum = np.cumsum(sorted_p, axis=1)
    # smallest prefix whose mass reaches top_p
    keep = (csum < top_p - _TOP_P_EPS).sum(axis=1)
    keep = np.minimum(keep, V - 1)
    mask = np.arange(V) <= keep[:, None]
    kept = np.where(mask, sorted_p, 0.0)
    kept /= kept.sum(axis=1, keepdims=True)
    kcum = np.cumsum(kept, axis=1)
    pos = (kcum < draws[:, None]).sum(axis=1)
    pos = np.minimum(pos, keep)
    return order[np.arange(B), pos]


def sample_responses(arch: Arch, values: np.ndarray, prompts, cfg: SamplerConfig,
                     seeds=None) -> list[SampledResponse]:
    """Sample one response per prompt in lockstep batches.

    ``seeds`` gives one RNG seed per prompt (defaults to cfg.seed + index);
    attached per-token logprobs come from the raw, unmodified distribution.
    """
    prompts = [tuple(p) for p in prompts]
    B = len(prompts)
    if seeds is None:
        seeds = [derive_seed(cfg.seed, i) for i in range(B)]
    if len(seeds) != B:
        raise PolicyError("need one seed per prompt")
    for p in prompts:
        need = 2 + len(p) + cfg.max_new_tokens
        if need > arch.context_len:
            raise ContextOverflowError(
                f"prompt of length {len(p)} cannot fit {cfg.max_new_tokens} new tokens "
                f"in context_len {arch.context_len}")
    if B == 0:
        return []
    gens = [np.random.default_rng(s) for s in seeds]
    windows = context_windows(arch, [compose_context(arch, p) for p in prompts])
    toks: list[list[int]] = [[] for _ in range(B)]
    lps: list[list[float]] = [[] for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    for _ in range(cfg.max_new_tokens):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        logits = logits_for_windows(arch, values, windows[idx])
        ref_lp = log_softmax(logits)
        if cfg.temperature == 0.0:
            nxt = np.argmax(logits, axis=1)
        else:
            p = softmax(logits / cfg.temperature)
            draws = np.array([gens[i].random() for i in idx])
            if cfg.top_p >= 1.0:
                csum = np.cumsum(p, axis=1)
                nxt = np.minimum((csum < draws[:, None]).sum(axis=1), p.shape[1] - 1)
            else:
                nxt = _nucleus_rows(p, cfg.top_p, draws)
        for row, i in enumerate(idx):
            t = int(nxt[row])
            toks[i].append(t)
            lps[i].append(float(ref_lp[row, t]))
            if arch.eos_id is not None and t == arch.eos_id:
                alive[i] = False
        windows[idx, :-1] = windows[idx, 1:]
        windows[idx, -1] = nxt
    return [SampledResponse(tuple(t), np.asarray(l)) for t, l in zip(toks, lps)]


def sample_response(arch: Arch, values: np.ndarray, prompt, cfg: SamplerConfig,
                    seed: int | None = None) -> SampledResponse:
    return sample_responses(arch, values, [prompt], cfg,
                            seeds=[cfg.seed if seed is None else seed])[0]


def greedy_decode(arch: Arch, values: np.ndarray, prompts, max_new_tokens: int) -> list[tuple[int, ...]]:
    cfg = SamplerConfig(temperature=0.0, top_p=1.0, max_new_tokens=max_new_tokens)
    return [r.tokens for r in sample_responses(arch, values, prompts, cfg)]


def enumerate_responses(arch: Arch, values: np.ndarray, prompt, max_len: int,
                        cap: int = ENUMERATION_CAP):
    """All stoppable responses up to max_len with exact log-probabilities.

    A response ends at the first EOS or at exactly max_len tokens; the
    returned probabilities sum to 1. Raises when the frontier would exceed
    ``cap`` states (switch to Monte Carlo estimates in that case).
    """
    if max_len < 1:
        raise PolicyError("max_len must be >= 1")
    prompt = tuple(prompt)
    base = compose_context(arch, prompt)
    if len(base) + max_len - 1 > arch.context_len:
        raise ContextOverflowError("enumeration would overflow context_len")
    V = arch.vocab_size
    frontier: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    done: list[tuple[tuple[int, ...], float]] = []
    for depth in range(max_len):
        if len(frontier) * V > cap:
            raise PolicyError(
                f"enumeration needs more than {cap} states at depth {depth}; use mc mode")
        ctxs = [base + pre for pre, _ in frontier]
        lp = log_softmax(logits_for_windows(arch, values, context_windows(arch, ctxs)))
        nxt: list[tuple[tuple[int, ...], float]] = []
        last = depth == max_len - 1
        for row, (pre, acc) in enumerate(frontier):
            for t in range(V):
                cand = (pre + (t,), acc + float(lp[row, t]))
                if (arch.eos_id is not None and t == arch.eos_id) or last:
                    done.append(cand)
                else:
                    nxt.append(cand)
        frontier = nxt
    seqs = [s for s, _ in done]
    logps = np.array([l for _, l in done])
    return seqs, logps
