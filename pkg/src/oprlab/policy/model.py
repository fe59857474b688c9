"""Tiny autoregressive policy backends with exact hand-rolled gradients.

Two backends share one flat-parameter interface:

* ``tabular``: logits are a linear map of deterministic hashed context
  features. Cheap, fully enumerable, the workhorse for exact diagnostics.
* ``mlp``: embeddings of a fixed context window feed one or two hidden
  layers (tanh or relu). Small enough to train in seconds, big enough
  to forget.

All parameters live in a single float64 vector so optimizers, probes and
Fisher products can treat the policy as a flat function R^n -> logits.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..util import log_softmax, mix64, softmax

CHECKPOINT_FORMAT_VERSION = 1


class PolicyError(ValueError):
    pass


class ContextOverflowError(PolicyError):
    """Context longer than the model accepts; never silently truncated."""


class NonFiniteLossError(PolicyError):
    def __init__(self, sample_index: int, value: float):
        self.sample_index = sample_index
        super().__init__(f"non-finite loss {value!r} at batch sample {sample_index}")


@dataclass(frozen=True)
class Arch:
    """Self-describing architecture; everything a checkpoint needs to rebuild."""

    kind: str
    vocab_size: int
    context_len: int
    window: int
    n_features: int = 0       # tabular
    emb_dim: int = 0          # mlp
    hidden_dim: int = 0       # mlp
    n_layers: int = 1         # mlp hidden layers
    activation: str = "tanh"  # mlp nonlinearity: tanh | relu
    skip_table: bool = False  # mlp: additive (position, token) -> logit table
    cosine_head: bool = False  # mlp: logits = head_scale * cos(hidden, class weight), no bias
    head_scale: float = 10.0  # fixed logit scale of the cosine head
    pad_id: int = 0
    bos_id: int = 0
    sep_id: int = 0
    eos_id: int | None = None
    feature_seed: int = 0x5EEDFEED  # tabular hash stream

    def __post_init__(self):
        if self.kind not in ("tabular", "mlp"):
            raise PolicyError(f"unknown backend kind {self.kind!r}")
        if self.vocab_size < 2:
            raise PolicyError("vocab_size must be >= 2")
        if not (1 <= self.window <= self.context_len):
            raise PolicyError("window must satisfy 1 <= window <= context_len")
        for name in ("pad_id", "bos_id", "sep_id"):
            v = getattr(self, name)
            if not (0 <= v < self.vocab_size):
                raise PolicyError(f"{name}={v} outside vocab")
        if self.eos_id is not None and not (0 <= self.eos_id < self.vocab_size):
            raise PolicyError(f"eos_id={self.eos_id} outside vocab")
        if self.kind == "tabular" and self.n_features < 1:
            raise PolicyError("tabular backend needs n_features >= 1")
        if self.kind == "tabular" and (self.skip_table or self.cosine_head):
            raise PolicyError("skip_table and cosine_head are mlp-backend options")
        if self.cosine_head and self.head_scale <= 0:
            raise PolicyError("cosine_head needs head_scale > 0")
        if self.kind == "mlp":
            if self.emb_dim < 1 or self.hidden_dim < 1:
                raise PolicyError("mlp backend needs emb_dim and hidden_dim >= 1")
            if self.n_layers not in (1, 2):
                raise PolicyError("mlp backend supports 1 or 2 hidden layers")
            if self.activation not in ("tanh", "relu"):
                raise PolicyError(f"unknown activation {self.activation!r}")

    def param_count(self) -> int:
        V, C = self.vocab_size, self.window
        if self.kind == "tabular":
            return V * self.n_features
        d, H = self.emb_dim, self.hidden_dim
        n = V * d + C * d * H + H + H * V
        if not self.cosine_head:
            n += V
        if self.n_layers == 2:
            n += H * H + H
        if self.skip_table:
            n += C * V * V
        return n


def tabular_arch(vocab_size: int, *, window: int = 4, n_features: int = 8,
                 context_len: int | None = None, **ids) -> Arch:
    return Arch(kind="tabular", vocab_size=vocab_size, window=window,
                context_len=context_len if context_len is not None else max(window, 16),
                n_features=n_features, **ids)


def mlp_arch(vocab_size: int, *, window: int = 16, emb_dim: int = 8, hidden_dim: int = 64,
             n_layers: int = 2, context_len: int = 40, activation: str = "tanh",
             skip_table: bool = False, cosine_head: bool = False,
             head_scale: float = 10.0, **ids) -> Arch:
    return Arch(kind="mlp", vocab_size=vocab_size, window=window, context_len=context_len,
                emb_dim=emb_dim, hidden_dim=hidden_dim, n_layers=n_layers,
                activation=activation, skip_table=skip_table, cosine_head=cosine_head,
                head_scale=head_scale, **ids)


def init_params(arch: Arch, rng: np.random.Generator) -> np.ndarray:
    if arch.kind == "tabular":
        return rng.normal(0.0, 0.3, size=arch.param_count())
    V, C, d, H = arch.vocab_size, arch.window, arch.emb_dim, arch.hidden_dim
    gain = np.sqrt(2.0) if arch.activation == "relu" else 1.0
    parts = [rng.normal(0.0, 0.5, size=V * d),
             rng.normal(0.0, gain / np.sqrt(C * d), size=C * d * H),
             np.zeros(H)]
    if arch.n_layers == 2:
        parts += [rng.normal(0.0, gain / np.sqrt(H), size=H * H), np.zeros(H)]
    parts.append(rng.normal(0.0, 1.0 / np.sqrt(H), size=H * V))
    if not arch.cosine_head:
        parts.append(np.zeros(V))
    if arch.skip_table:
        parts.append(np.zeros(C * V * V))
    return np.concatenate(parts)


def _mlp_views(arch: Arch, values: np.ndarray):
    V, C, d, H = arch.vocab_size, arch.window, arch.emb_dim, arch.hidden_dim
    o = 0
    emb = values[o:o + V * d].reshape(V, d); o += V * d
    W1 = values[o:o + C * d * H].reshape(C * d, H); o += C * d * H
    b1 = values[o:o + H]; o += H
    W2 = b2 = None
    if arch.n_layers == 2:
        W2 = values[o:o + H * H].reshape(H, H); o += H * H
        b2 = values[o:o + H]; o += H
    Wo = values[o:o + H * V].reshape(H, V); o += H * V
    bo = None
    if not arch.cosine_head:
        bo = values[o:o + V]; o += V
    Td = None
    if arch.skip_table:
        Td = values[o:o + C * V * V].reshape(C * V, V); o += C * V * V
    assert o == values.size
    return emb, W1, b1, W2, b2, Wo, bo, Td


def _table_rows(arch: Arch, windows: np.ndarray) -> np.ndarray:
    """Row index into the (position, token) logit table for each window slot."""
    return windows + (np.arange(arch.window, dtype=np.int64) * arch.vocab_size)[None, :]


def _act(arch: Arch, a: np.ndarray) -> np.ndarray:
    return np.tanh(a) if arch.activation == "tanh" else np.maximum(a, 0.0)


def _dact(arch: Arch, h: np.ndarray) -> np.ndarray:
    """Derivative of the activation expressed through its output h."""
    if arch.activation == "tanh":
        return 1.0 - h * h
    return (h > 0.0).astype(np.float64)


def _check_values(arch: Arch, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (arch.param_count(),):
        raise PolicyError(f"expected {arch.param_count()} parameters, got shape {values.shape}")
    return values


# ---------------------------------------------------------------- contexts

def compose_context(arch: Arch, prompt, response_prefix=()) -> tuple[int, ...]:
    """Canonical serialization the policy conditions on: BOS prompt SEP prefix."""
    return (arch.bos_id, *prompt, arch.sep_id, *response_prefix)


def context_windows(arch: Arch, contexts) -> np.ndarray:
    """Right-aligned fixed-size windows, left-padded with pad_id.

    Raises ContextOverflowError when any context exceeds context_len.
    """
    out = np.full((len(contexts), arch.window), arch.pad_id, dtype=np.int64)
    for i, ctx in enumerate(contexts):
        n = len(ctx)
        if n > arch.context_len:
            raise ContextOverflowError(f"context length {n} exceeds context_len {arch.context_len}")
        tail = ctx[-arch.window:] if n > arch.window else ctx
        if len(tail):
            out[i, arch.window - len(tail):] = tail
    return out


# ---------------------------------------------------------------- tabular features

def _tabular_features(arch: Arch, windows: np.ndarray) -> np.ndarray:
    """Deterministic features of the window: bias column plus hashed projections in [-1, 1)."""
    B = windows.shape[0]
    F = arch.n_features
    phi = np.empty((B, F), dtype=np.float64)
    phi[:, 0] = 1.0
    if F == 1:
        return phi
    mask = 0xFFFFFFFFFFFFFFFF
    acc = np.full(B, np.uint64(arch.feature_seed & mask), dtype=np.uint64)
    cols = windows.astype(np.uint64)
    for j in range(windows.shape[1]):
        salt = np.uint64((j * 0xD1B54A32D192ED03) & mask)
        acc = mix64(acc ^ ((cols[:, j] + np.uint64(1)) * np.uint64(0x9E3779B97F4A7C15)) ^ salt)
    for j in range(1, F):
        h = mix64(acc ^ np.uint64((j * 0xBF58476D1CE4E5B9) & mask))
        phi[:, j] = (h >> np.uint64(11)).astype(np.float64) * (2.0 / 2**53) - 1.0
    return phi


# ---------------------------------------------------------------- forward / backward / jvp

def logits_for_windows(arch: Arch, values: np.ndarray, windows: np.ndarray,
                       with_cache: bool = False):
    """Next-token logits for a batch of context windows; optional cache for backward."""
    values = _check_values(arch, values)
    if arch.kind == "tabular":
        W = values.reshape(arch.vocab_size, arch.n_features)
        phi = _tabular_features(arch, windows)
        logits = phi @ W.T
        return (logits, {"phi": phi}) if with_cache else logits
    emb, W1, b1, W2, b2, Wo, bo, Td = _mlp_views(arch, values)
    B = windows.shape[0]
    Xf = emb[windows].reshape(B, -1)
    h1 = _act(arch, Xf @ W1 + b1)
    h2 = _act(arch, h1 @ W2 + b2) if arch.n_layers == 2 else h1
    cache = {"windows": windows, "Xf": Xf, "h1": h1, "h2": h2}
    if arch.cosine_head:
        hn = np.sqrt((h2 * h2).sum(axis=1)) + 1e-12
        u = h2 / hn[:, None]
        wn = np.sqrt((Wo * Wo).sum(axis=0)) + 1e-12
        Wn = Wo / wn[None, :]
        logits = arch.head_scale * (u @ Wn)
        cache.update(u=u, hn=hn, Wn=Wn, wn=wn)
    else:
        logits = h2 @ Wo + bo
    if Td is not None:
        logits = logits + Td[_table_rows(arch, windows)].sum(axis=1)
    if with_cache:
        return logits, cache
    return logits


def backward_from_dlogits(arch: Arch, values: np.ndarray, cache: dict,
                          dlogits: np.ndarray) -> np.ndarray:
    """Flat parameter gradient given d(objective)/d(logits) for the cached batch."""
    values = _check_values(arch, values)
    if arch.kind == "tabular":
        return (dlogits.T @ cache["phi"]).ravel()
    emb, W1, b1, W2, b2, Wo, bo, Td = _mlp_views(arch, values)
    windows, Xf, h1, h2 = cache["windows"], cache["Xf"], cache["h1"], cache["h2"]
    B = windows.shape[0]
    if arch.cosine_head:
        u, hn, Wn, wn = cache["u"], cache["hn"], cache["Wn"], cache["wn"]
        s = arch.head_scale
        A = s * (u.T @ dlogits)
        dWo = (A - Wn * (Wn * A).sum(axis=0, keepdims=True)) / wn[None, :]
        dbo = None
        dh2 = s * (dlogits @ Wn.T)
        dh2 = (dh2 - u * (dh2 * u).sum(axis=1, keepdims=True)) / hn[:, None]
    else:
        dWo = h2.T @ dlogits
        dbo = dlogits.sum(axis=0)
        dh2 = dlogits @ Wo.T
    if arch.n_layers == 2:
        da2 = dh2 * _dact(arch, h2)
        dW2 = h1.T @ da2
        db2 = da2.sum(axis=0)
        dh1 = da2 @ W2.T
    else:
        dh1 = dh2
    da1 = dh1 * _dact(arch, h1)
    dW1 = Xf.T @ da1
    db1 = da1.sum(axis=0)
    dXf = da1 @ W1.T
    demb = np.zeros_like(emb)
    np.add.at(demb, windows.ravel(), dXf.reshape(B * arch.window, arch.emb_dim))
    parts = [demb.ravel(), dW1.ravel(), db1]
    if arch.n_layers == 2:
        parts += [dW2.ravel(), db2]
    parts.append(dWo.ravel())
    if dbo is not None:
        parts.append(dbo)
    if Td is not None:
        dTd = np.zeros_like(Td)
        np.add.at(dTd, _table_rows(arch, windows).ravel(),
                  np.repeat(dlogits, arch.window, axis=0))
        parts.append(dTd.ravel())
    return np.concatenate(parts)


def logits_jvp(arch: Arch, values: np.ndarray, cache: dict, windows: np.ndarray,
               tangent: np.ndarray) -> np.ndarray:
    """Directional derivative of the logits along a flat parameter tangent."""
    values = _check_values(arch, values)
    tangent = _check_values(arch, tangent)
    if arch.kind == "tabular":
        tW = tangent.reshape(arch.vocab_size, arch.n_features)
        return cache["phi"] @ tW.T
    emb, W1, b1, W2, b2, Wo, bo, Td = _mlp_views(arch, values)
    temb, tW1, tb1, tW2, tb2, tWo, tbo, tTd = _mlp_views(arch, tangent)
    Xf, h1, h2 = cache["Xf"], cache["h1"], cache["h2"]
    B = windows.shape[0]
    tXf = temb[windows].reshape(B, -1)
    ta1 = Xf @ tW1 + tXf @ W1 + tb1
    th1 = _dact(arch, h1) * ta1
    if arch.n_layers == 2:
        ta2 = h1 @ tW2 + th1 @ W2 + tb2
        th2 = _dact(arch, h2) * ta2
    else:
        th2 = th1
    if arch.cosine_head:
        u, hn, Wn, wn = cache["u"], cache["hn"], cache["Wn"], cache["wn"]
        tu = (th2 - u * (th2 * u).sum(axis=1, keepdims=True)) / hn[:, None]
        tWn = (tWo - Wn * (Wn * tWo).sum(axis=0, keepdims=True)) / wn[None, :]
        out = arch.head_scale * (tu @ Wn + u @ tWn)
    else:
        out = h2 @ tWo + th2 @ Wo + tbo
    if Td is not None:
        out = out + tTd[_table_rows(arch, windows)].sum(axis=1)
    return out


# ---------------------------------------------------------------- public ops

def next_token_logits(arch: Arch, values: np.ndarray, context) -> np.ndarray:
    """Logits over the vocab after an explicit context token sequence."""
    return logits_for_windows(arch, values, context_windows(arch, [tuple(context)]))[0]


def _position_table(arch: Arch, batch):
    """Flatten (prompt, response) pairs into per-position rows.

    Returns windows (P, window), targets (P,), sample_id (P,), sample_sizes.
    """
    contexts, targets, owner = [], [], []
    for k, (prompt, response) in enumerate(batch):
        prompt = tuple(prompt)
        response = tuple(response)
        if len(response) == 0:
            raise PolicyError(f"empty response at batch sample {k}")
        full = compose_context(arch, prompt, response)
        if len(full) - 1 > arch.context_len:
            raise ContextOverflowError(
                f"sample {k}: context length {len(full) - 1} exceeds context_len {arch.context_len}")
        base = compose_context(arch, prompt)
        for t, y in enumerate(response):
            contexts.append(base + response[:t])
            targets.append(y)
            owner.append(k)
    return (context_windows(arch, contexts), np.asarray(targets, dtype=np.int64),
            np.asarray(owner, dtype=np.int64), len(batch))


def sequence_logprob(arch: Arch, values: np.ndarray, prompt, response):
    """Total and per-token log-probability of a response given a prompt."""
    windows, targets, _, _ = _position_table(arch, [(prompt, response)])
    logits = logits_for_windows(arch, values, windows)
    lp = log_softmax(logits)[np.arange(len(targets)), targets]
    return float(lp.sum()), lp


def batch_sequence_logprobs(arch: Arch, values: np.ndarray, batch) -> list[np.ndarray]:
    """Per-token logprob arrays for many (prompt, response) pairs in one forward pass."""
    if not batch:
        return []
    windows, targets, owner, B = _position_table(arch, batch)
    logits = logits_for_windows(arch, values, windows)
    lp = log_softmax(logits)[np.arange(len(targets)), targets]
    return [lp[owner == k] for k in range(B)]


def ce_loss_and_grad(arch: Arch, values: np.ndarray, batch):
    """Mean sequence cross-entropy over the batch and its exact flat gradient."""
    values = _check_values(arch, values)
    if not batch:
        raise PolicyError("empty batch")
    windows, targets, owner, B = _position_table(arch, batch)
    logits, cache = logits_for_windows(arch, values, windows, with_cache=True)
    logp = log_softmax(logits)
    rows = np.arange(len(targets))
    per_pos = logp[rows, targets]
    per_sample = np.zeros(B)
    np.add.at(per_sample, owner, -per_pos)
    for k in range(B):
        if not np.isfinite(per_sample[k]):
            raise NonFiniteLossError(k, per_sample[k])
    loss = float(per_sample.mean())
    dlogits = softmax(logits)
    dlogits[rows, targets] -= 1.0
    dlogits /= B
    return loss, backward_from_dlogits(arch, values, cache, dlogits)


def sequence_logprob_grad(arch: Arch, values: np.ndarray, prompt, response) -> np.ndarray:
    """Exact gradient of log pi(response | prompt); negative of the one-sample CE gradient."""
    loss, grad = ce_loss_and_grad(arch, values, [(prompt, response)])
    return -grad


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: Path | str, arch: Arch, values: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, "arch": asdict(arch)}
    np.savez(path, values=_check_values(arch, values), meta=np.array(json.dumps(meta)))


def load_checkpoint(path: Path | str) -> tuple[Arch, np.ndarray]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise PolicyError(f"unsupported checkpoint format {meta.get('format_version')!r}")
        arch = Arch(**meta["arch"])
        values = z["values"].astype(np.float64)
    return arch, _check_values(arch, values)
