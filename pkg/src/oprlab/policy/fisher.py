"""Fisher-vector products for the sequence-level Fisher information matrix.

F = E_x E_{y ~ pi(.|x)} [ grad log pi(y|x) grad log pi(y|x)^T ]

The product F v is computed without materializing F: each sampled (or
enumerated) sequence contributes (u . v) u where u is its score gradient.
The directional term u . v comes from a forward-mode pass and all
contributions fold into a single weighted backward pass. FisherOperator
freezes the sequence set once so repeated applications (power iteration)
act on one fixed operator.
"""

from __future__ import annotations

import numpy as np

from ..util import derive_seed, log_softmax, softmax
from .model import (Arch, PolicyError, backward_from_dlogits, compose_context,
                    context_windows, logits_for_windows, logits_jvp)
from .sample import ENUMERATION_CAP, SamplerConfig, enumerate_responses, sample_responses


class FisherOperator:
    """v -> F v over a frozen set of weighted (prompt, response) pairs.

    mode="mc" samples ``mc_samples`` responses per prompt from the unmodified
    policy; mode="exact" enumerates the full response space (small models only).
    """

    def __init__(self, arch: Arch, values: np.ndarray, prompts, *, max_len: int,
                 mode: str = "mc", mc_samples: int = 16, seed: int = 0,
                 cap: int = ENUMERATION_CAP):
        prompts = [tuple(p) for p in prompts]
        if not prompts:
            raise PolicyError("Fisher estimation needs at least one prompt")
        self.arch = arch
        self.values = np.asarray(values, dtype=np.float64)
        pairs: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
        weights: list[float] = []
        if mode == "exact":
            for p in prompts:
                seqs, logps = enumerate_responses(arch, values, p, max_len, cap=cap)
                probs = np.exp(logps)
                for s, pr in zip(seqs, probs):
                    pairs.append((p, s))
                    weights.append(float(pr) / len(prompts))
        elif mode == "mc":
            if mc_samples < 1:
                raise PolicyError("mc_samples must be >= 1 in mc mode")
            cfg = SamplerConfig(temperature=1.0, top_p=1.0, max_new_tokens=max_len, seed=seed)
            for i, p in enumerate(prompts):
                reps = sample_responses(arch, values, [p] * mc_samples, cfg,
                                        seeds=[derive_seed(seed, i, k) for k in range(mc_samples)])
                for r in reps:
                    pairs.append((p, r.tokens))
                    weights.append(1.0 / (len(prompts) * mc_samples))
        else:
            raise PolicyError(f"unknown fisher mode {mode!r}")
        self.mode = mode
        contexts, targets, owner = [], [], []
        for k, (prompt, response) in enumerate(pairs):
            base = compose_context(arch, prompt)
            for t, y in enumerate(response):
                contexts.append(base + response[:t])
                targets.append(y)
                owner.append(k)
        self._windows = context_windows(arch, contexts)
        self._owner = np.asarray(owner, dtype=np.int64)
        self._weights = np.asarray(weights)
        logits, self._cache = logits_for_windows(arch, self.values, self._windows, with_cache=True)
        self._dbase = -softmax(logits)
        self._dbase[np.arange(len(targets)), np.asarray(targets, dtype=np.int64)] += 1.0

    @property
    def n_params(self) -> int:
        return self.values.size

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        jvp = logits_jvp(self.arch, self.values, self._cache, self._windows, v)
        s_pos = np.sum(self._dbase * jvp, axis=1)
        s_pair = np.zeros(self._weights.size)
        np.add.at(s_pair, self._owner, s_pos)
        dlogits = self._dbase * (self._weights * s_pair)[self._owner, None]
        return backward_from_dlogits(self.arch, self.values, self._cache, dlogits)


def fisher_vector_product(arch: Arch, values: np.ndarray, prompts, v: np.ndarray, *,
                          max_len: int, mode: str = "mc", mc_samples: int = 16,
                          seed: int = 0, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """One-shot F v estimate over the prompt distribution (uniform over ``prompts``)."""
    op = FisherOperator(arch, values, prompts, max_len=max_len, mode=mode,
                        mc_samples=mc_samples, seed=seed, cap=cap)
    return op.apply(v)
