"""Shared plumbing: stable seed derivation, hashing, JSONL io, finite differences."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

import numpy as np

_SPLITMIX_GAMMA = np.uint64(0x9E3779B97F4A7C15)


def mix64(x: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """SplitMix64 finalizer; wraps mod 2**64 elementwise."""
    x = np.uint64(x) if np.isscalar(x) else x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def derive_seed(*parts: int | str) -> int:
    """Stable 63-bit seed from a label path; independent of process hash randomization."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        tag = b"i" + int(p).to_bytes(16, "little", signed=True) if isinstance(p, (int, np.integer)) else b"s" + str(p).encode()
        h.update(len(tag).to_bytes(2, "little"))
        h.update(tag)
    return int.from_bytes(h.digest(), "little") >> 1


def rng_for(*parts: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding used for config and content hashes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def write_jsonl(path: Path | str, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, separators=(", ", ": ")) + "\n")


def read_jsonl(path: Path | str) -> Iterator[dict]:
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


def central_diff_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray,
                          eps: float = 1e-5, order: int = 2) -> np.ndarray:
    """Central-difference gradient of a scalar function; order 2 or 4 stencil."""
    if order not in (2, 4):
        raise ValueError(f"unsupported stencil order {order}")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        if order == 2:
            g[i] = (fn(x + e) - fn(x - e)) / (2.0 * eps)
        else:
            g[i] = (8.0 * (fn(x + e) - fn(x - e)) - (fn(x + 2 * e) - fn(x - 2 * e))) / (12.0 * eps)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float | None = None) -> float:
    """max_i |a_i - b_i| / denom_i with denom_i = max(|a_i|, |b_i|, floor).

    Default floor is 1e-6 * the largest magnitude present, so near-zero
    coordinates are judged against the overall scale instead of themselves.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    if scale == 0.0:
        return 0.0
    if floor is None:
        floor = 1e-6 * scale
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True)))[..., 0]


def log_softmax(z: np.ndarray) -> np.ndarray:
    return z - logsumexp_rows(z)[..., None]


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)
