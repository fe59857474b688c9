import numpy as np
import pytest

from oprlab.policy import Arch, init_params, mlp_arch, tabular_arch
from oprlab.util import rng_for


@pytest.fixture
def small_tabular() -> Arch:
    return tabular_arch(10, window=4, n_features=16, context_len=16,
                        bos_id=1, eos_id=2, sep_id=3)


@pytest.fixture
def small_mlp() -> Arch:
    return mlp_arch(10, window=4, emb_dim=4, hidden_dim=8, n_layers=1, context_len=16,
                    bos_id=1, eos_id=2, sep_id=3)


def random_values(arch: Arch, seed: int) -> np.ndarray:
    return init_params(arch, rng_for(seed, "test-init"))


def random_batch(arch: Arch, rng: np.random.Generator, n: int = 5,
                 prompt_len: int = 3, resp_len: int = 3):
    """Random (prompt, response) pairs that fit the context window."""
    batch = []
    for _ in range(n):
        p = tuple(int(t) for t in rng.integers(4, arch.vocab_size, size=prompt_len))
        r = tuple(int(t) for t in rng.integers(4, arch.vocab_size, size=resp_len))
        batch.append((p, r))
    return batch
