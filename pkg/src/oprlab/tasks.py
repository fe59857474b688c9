"""Synthetic verifiable token-transduction tasks and task streams.

Every task maps a marked prompt to a deterministic gold response, so any
rollout can be scored by rule. Prompts are token tuples over a shared
vocabulary with a fixed reserved layout:

    0 PAD, 1 BOS, 2 EOS, 3 SEP, 4/5 class labels, 6..13 task markers,
    14.. content alphabet.

A prompt is (task marker, *content); gold responses never include EOS,
which is appended by the training side.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .util import canonical_json, derive_seed, read_jsonl, sha256_bytes, write_jsonl

MAX_MARKER_SLOTS = 8


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """Shared token space; reserved ids are fixed, content fills the tail."""

    size: int
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    sep_id: int = 3
    class_a: int = 4
    class_b: int = 5
    marker_base: int = 6

    def __post_init__(self):
        if not (8 <= self.size <= 64):
            raise TaskError(f"vocab size {self.size} outside [8, 64]")
        reserved = [self.pad_id, self.bos_id, self.eos_id, self.sep_id]
        if len(set(reserved)) != 4 or any(not (0 <= r < self.size) for r in reserved):
            raise TaskError("reserved ids must be distinct and inside the vocab")

    @property
    def content_start(self) -> int:
        return self.marker_base + MAX_MARKER_SLOTS

    @property
    def content_tokens(self) -> tuple[int, ...]:
        return tuple(range(self.content_start, self.size))

    def marker(self, task_id: int) -> int:
        tok = self.marker_base + task_id
        if not (0 <= task_id < MAX_MARKER_SLOTS) or tok >= self.size:
            raise TaskError(f"no marker slot for task {task_id} in vocab of size {self.size}")
        return tok


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    kind: str
    metric: str                      # "exact-match" | "edit-similarity"
    marker: int
    n_train: int
    n_eval: int
    content_len: tuple[int, int]
    seed: int
    shift: int | None = None         # caesar-shift-k
    parity_token: int | None = None  # parity-classify
    alphabet: tuple[int, ...] | None = None  # own content draw; None = full content range
    shared_alphabet: tuple[int, ...] | None = None  # pool common to every task in the stream
    shared_rate: float = 0.0         # per-token probability of drawing from the shared pool

    @property
    def name(self) -> str:
        return self.kind


@dataclass
class TaskDataset:
    spec: TaskSpec
    train: list[tuple[tuple[int, ...], tuple[int, ...]]]
    eval: list[tuple[tuple[int, ...], tuple[int, ...]]]


# ---------------------------------------------------------------- gold functions

def _gold_copy(spec, vocab, content):
    return tuple(content)


def _gold_reverse(spec, vocab, content):
    return tuple(reversed(content))


def _gold_sort(spec, vocab, content):
    return tuple(sorted(content))


def _shift_content(vocab, content, shift):
    alpha = vocab.content_tokens
    base = vocab.content_start
    k = len(alpha)
    return tuple(alpha[(t - base + shift) % k] for t in content)


def _gold_successor(spec, vocab, content):
    return _shift_content(vocab, content, 1)


def _gold_caesar(spec, vocab, content):
    return _shift_content(vocab, content, spec.shift)


def _gold_parity(spec, vocab, content):
    even = content.count(spec.parity_token) % 2 == 0
    return (vocab.class_a,) if even else (vocab.class_b,)


def _gold_max(spec, vocab, content):
    return (max(content),)


def _gold_dedup(spec, vocab, content):
    out = []
    for t in content:
        if not out or out[-1] != t:
            out.append(t)
    return tuple(out)


KINDS = {
    "copy": _gold_copy,
    "reverse": _gold_reverse,
    "sort": _gold_sort,
    "successor-mod-v": _gold_successor,
    "parity-classify": _gold_parity,
    "max-token": _gold_max,
    "dedup": _gold_dedup,
    "caesar-shift-k": _gold_caesar,
}

DEFAULT_KIND_ORDER = ("copy", "reverse", "sort", "successor-mod-v",
                      "parity-classify", "max-token", "dedup", "caesar-shift-k")

DEFAULT_METRIC = {
    "copy": "edit-similarity",
    "reverse": "edit-similarity",
    "sort": "edit-similarity",
    "successor-mod-v": "edit-similarity",
    "parity-classify": "exact-match",
    "max-token": "exact-match",
    "dedup": "edit-similarity",
    "caesar-shift-k": "edit-similarity",
}

_MIN_ALPHABET = {"copy": 1, "reverse": 2, "sort": 2, "successor-mod-v": 2,
                 "parity-classify": 2, "max-token": 2, "dedup": 2, "caesar-shift-k": 2}


def gold_for_prompt(spec: TaskSpec, vocab: Vocab, prompt) -> tuple[int, ...]:
    """Gold response for any well-formed prompt of this task, training data or not."""
    prompt = tuple(prompt)
    if not prompt or prompt[0] != spec.marker:
        raise TaskError(f"prompt does not start with task marker {spec.marker}")
    content = prompt[1:]
    bad = [t for t in content if t not in vocab.content_tokens]
    if bad:
        raise TaskError(f"prompt content tokens {bad} outside content alphabet")
    return KINDS[spec.kind](spec, vocab, content)


# ---------------------------------------------------------------- rule metric

def levenshtein(a, b) -> int:
    a, b = tuple(a), tuple(b)
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def strip_trailing(response, vocab: Vocab) -> tuple[int, ...]:
    """Drop trailing EOS/PAD before scoring; interior tokens are kept verbatim."""
    out = list(response)
    while out and out[-1] in (vocab.eos_id, vocab.pad_id):
        out.pop()
    return tuple(out)


def rule_score(spec: TaskSpec, vocab: Vocab, prompt, response) -> float:
    """Score in [0, 1] of a response against the task's gold for this prompt."""
    gold = gold_for_prompt(spec, vocab, prompt)
    resp = strip_trailing(response, vocab)
    if spec.metric == "exact-match":
        return 1.0 if resp == gold else 0.0
    if spec.metric == "edit-similarity":
        denom = max(len(resp), len(gold))
        if denom == 0:
            return 1.0
        return 1.0 - levenshtein(resp, gold) / denom
    raise TaskError(f"unknown metric {spec.metric!r}")


# ---------------------------------------------------------------- generation

def task_alphabet(spec: TaskSpec, vocab: Vocab) -> tuple[int, ...]:
    """Content tokens this task's prompts draw from by default.

    Tasks may be confined to a slice of the shared content range so that the
    stream mixes tasks with partially distinct input distributions; a stream
    may additionally reserve a pool of tokens common to every task (see
    ``spec.shared_alphabet``). Gold rules still operate over the full content
    range.
    """
    return spec.alphabet if spec.alphabet is not None else vocab.content_tokens


def _draw_content(spec: TaskSpec, vocab: Vocab, rng: np.random.Generator) -> tuple[int, ...]:
    lo, hi = spec.content_len
    n = int(rng.integers(lo, hi + 1))
    alpha = task_alphabet(spec, vocab)
    shared = spec.shared_alphabet or ()
    rate = spec.shared_rate if shared else 0.0

    def draw() -> int:
        if rate > 0.0 and rng.random() < rate:
            return int(shared[rng.integers(len(shared))])
        return int(alpha[rng.integers(len(alpha))])

    if spec.kind == "dedup":
        # encourage runs so the task differs from copy
        toks = [draw()]
        for _ in range(n - 1):
            toks.append(toks[-1] if rng.random() < 0.45 else draw())
        return tuple(toks)
    if spec.kind == "parity-classify":
        # boost the counted token so both classes actually occur
        toks = [spec.parity_token if rng.random() < 0.35 else draw() for _ in range(n)]
        return tuple(toks)
    if rate == 0.0:
        return tuple(alpha[i] for i in rng.integers(0, len(alpha), size=n))
    return tuple(draw() for _ in range(n))


def generate_task_dataset(spec: TaskSpec, vocab: Vocab) -> TaskDataset:
    """Deterministic dataset with distinct prompts and a disjoint train/eval split."""
    if spec.kind not in KINDS:
        raise TaskError(f"unknown task kind {spec.kind!r}")
    lo, hi = spec.content_len
    if not (1 <= lo <= hi):
        raise TaskError(f"invalid content_len {spec.content_len}")
    alpha = task_alphabet(spec, vocab)
    shared = spec.shared_alphabet or ()
    if not (0.0 <= spec.shared_rate <= 1.0):
        raise TaskError(f"shared_rate {spec.shared_rate} outside [0, 1]")
    outside = [t for t in (*alpha, *shared) if t not in vocab.content_tokens]
    if outside:
        raise TaskError(f"task alphabet tokens {outside} outside the content range")
    if len(alpha) < _MIN_ALPHABET[spec.kind]:
        raise TaskError(f"alphabet of {len(alpha)} content tokens is "
                        f"too small for kind {spec.kind!r}")
    if spec.kind == "caesar-shift-k" and not spec.shift:
        raise TaskError("caesar-shift-k needs a nonzero shift")
    if spec.kind == "parity-classify" and spec.parity_token not in alpha:
        raise TaskError("parity-classify needs a content-alphabet parity token")
    need = spec.n_train + spec.n_eval
    rate = spec.shared_rate if shared else 0.0
    if rate >= 1.0:
        reachable = len(set(shared))
    elif rate > 0.0:
        reachable = len(set(alpha) | set(shared))
    else:
        reachable = len(alpha)
    space = sum(reachable ** n for n in range(lo, hi + 1))
    if space < need:
        raise TaskError(f"prompt space {space} smaller than requested {need} items "
                        f"for kind {spec.kind!r}")
    rng = np.random.default_rng(derive_seed(spec.seed, "data", spec.task_id))
    seen: set[tuple[int, ...]] = set()
    items: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
    attempts = 0
    while len(items) < need:
        attempts += 1
        if attempts > 200 * need:
            raise TaskError(f"could not draw {need} distinct prompts for {spec.kind!r}")
        content = _draw_content(spec, vocab, rng)
        if content in seen:
            continue
        seen.add(content)
        prompt = (spec.marker, *content)
        items.append((prompt, KINDS[spec.kind](spec, vocab, content)))
    return TaskDataset(spec=spec, train=items[:spec.n_train], eval=items[spec.n_train:])


# ---------------------------------------------------------------- streams

@dataclass(frozen=True)
class StreamConfig:
    n_tasks: int = 8
    vocab_size: int = 62
    kinds: tuple[str, ...] | None = None
    n_train: int = 2000
    n_eval: int = 250
    content_len: tuple[int, int] = (2, 5)
    content_len_overrides: tuple[tuple[str, tuple[int, int]], ...] = ()
    content_slices: bool = True
    slice_width: int | None = None   # tokens per slice; wider than the stride = overlap
    shared_tokens: int = 0           # content tokens reserved as a pool common to all tasks
    shared_rate: float = 0.0         # per-token probability of drawing from that pool
    seed: int = 7


@dataclass
class TaskStream:
    vocab: Vocab
    specs: list[TaskSpec]
    config: StreamConfig
    _datasets: list[TaskDataset] | None = field(default=None, repr=False)

    @property
    def n_tasks(self) -> int:
        return len(self.specs)

    def datasets(self) -> list[TaskDataset]:
        if self._datasets is None:
            self._datasets = [generate_task_dataset(s, self.vocab) for s in self.specs]
        return self._datasets

    def spec_by_id(self, task_id: int) -> TaskSpec:
        return self.specs[task_id]

    def stream_hash(self) -> str:
        payload = canonical_json([self.config.__dict__ | {"kinds": list(self.config.kinds or ())},
                                  [s.__dict__ for s in self.specs]], )
        return sha256_bytes(payload.encode())


def build_stream(config: StreamConfig) -> TaskStream:
    kinds = tuple(config.kinds) if config.kinds else DEFAULT_KIND_ORDER[:config.n_tasks]
    if len(kinds) != config.n_tasks:
        raise TaskError(f"{config.n_tasks} tasks requested but {len(kinds)} kinds given")
    if len(set(kinds)) != len(kinds):
        raise TaskError(f"duplicate task kinds in stream: {kinds}")
    for k in kinds:
        if k not in KINDS:
            raise TaskError(f"unknown task kind {k!r}")
    if config.n_tasks < 1 or config.n_tasks > MAX_MARKER_SLOTS:
        raise TaskError(f"n_tasks must be in [1, {MAX_MARKER_SLOTS}]")
    if config.n_train < 1 or config.n_eval < 1:
        raise TaskError("n_train and n_eval must be >= 1")
    vocab = Vocab(size=config.vocab_size)
    alpha = vocab.content_tokens
    if not alpha:
        raise TaskError(f"vocab size {config.vocab_size} leaves no content tokens")
    if not (0.0 <= config.shared_rate <= 1.0):
        raise TaskError(f"shared_rate {config.shared_rate} outside [0, 1]")
    if config.shared_tokens < 0:
        raise TaskError(f"shared_tokens must be >= 0, got {config.shared_tokens}")
    if config.shared_tokens and not config.content_slices:
        raise TaskError("shared_tokens requires content_slices; without slices "
                        "every task already draws from the full content range")
    shared = tuple(alpha[:config.shared_tokens])
    slices: list[tuple[int, ...] | None] = [None] * config.n_tasks
    if config.content_slices:
        # carve the content range left after the shared pool into per-task
        # slices laid out at a fixed stride; a slice_width above the stride
        # makes neighbouring tasks share part of their prompt alphabets
        rest = alpha[config.shared_tokens:]
        stride = len(rest) // config.n_tasks
        if stride < 2:
            raise TaskError(
                f"{len(rest)} content tokens cannot cover {config.n_tasks} slices "
                f"of width >= 2; grow vocab_size or shrink the shared pool")
        width = stride if config.slice_width is None else config.slice_width
        if not (2 <= width <= len(rest)):
            raise TaskError(f"slice_width {width} outside [2, {len(rest)}]")
        slices = [tuple(rest[(i * stride + j) % len(rest)] for j in range(width))
                  for i in range(config.n_tasks)]
    overrides = dict(config.content_len_overrides)
    specs = []
    for i, kind in enumerate(kinds):
        shift = parity_token = None
        task_alpha = slices[i] if slices[i] is not None else alpha
        if kind == "caesar-shift-k":
            shift = 1 + derive_seed(config.seed, "shift", i) % (len(alpha) - 1) if len(alpha) > 1 else None
            if shift == 1:
                shift = 2 if len(alpha) > 2 else 1  # keep distinct from successor-mod-v
        if kind == "parity-classify":
            parity_token = task_alpha[derive_seed(config.seed, "parity", i) % len(task_alpha)]
        specs.append(TaskSpec(
            task_id=i, kind=kind, metric=DEFAULT_METRIC[kind], marker=vocab.marker(i),
            n_train=config.n_train, n_eval=config.n_eval,
            content_len=tuple(overrides.get(kind, config.content_len)),
            seed=derive_seed(config.seed, "task", i), shift=shift, parity_token=parity_token,
            alphabet=slices[i], shared_alphabet=shared or None,
            shared_rate=config.shared_rate if shared else 0.0))
    return TaskStream(vocab=vocab, specs=specs, config=config)


# ---------------------------------------------------------------- historical prompts

@dataclass
class HistoricalPromptPool:
    """Prompts the model trained on in earlier stages; gold is deliberately absent."""

    task_ids: list[int]
    prompts: dict[int, list[tuple[int, ...]]]

    def items(self) -> list[tuple[int, tuple[int, ...]]]:
        return [(tid, p) for tid in self.task_ids for p in self.prompts[tid]]

    def counts(self) -> list[int]:
        return [len(self.prompts[tid]) for tid in self.task_ids]


def historical_pool(stream: TaskStream, upto_stage: int,
                    per_task_limit: int | None = None) -> HistoricalPromptPool:
    """Training prompts of all tasks before ``upto_stage``, in stream order."""
    if not (1 <= upto_stage <= stream.n_tasks):
        raise TaskError(f"upto_stage {upto_stage} outside [1, {stream.n_tasks}]")
    datasets = stream.datasets()
    task_ids, prompts = [], {}
    for tid in range(upto_stage):
        ps = [p for p, _ in datasets[tid].train]
        if per_task_limit is not None:
            ps = ps[:per_task_limit]
        if len(set(ps)) != len(ps):
            raise TaskError(f"duplicate prompts in historical pool for task {tid}")
        task_ids.append(tid)
        prompts[tid] = ps
    return HistoricalPromptPool(task_ids=task_ids, prompts=prompts)


# ---------------------------------------------------------------- serialization

def write_dataset_jsonl(path: Path | str, dataset: TaskDataset) -> None:
    rows = []
    for split in ("train", "eval"):
        for prompt, gold in getattr(dataset, split):
            rows.append({"task_id": dataset.spec.task_id, "split": split,
                         "prompt_tokens": list(prompt), "gold_tokens": list(gold)})
    write_jsonl(path, rows)


def read_dataset_jsonl(path: Path | str, spec: TaskSpec) -> TaskDataset:
    train, evals = [], []
    for row in read_jsonl(path):
        if row["task_id"] != spec.task_id:
            raise TaskError(f"row task_id {row['task_id']} does not match spec {spec.task_id}")
        pair = (tuple(row["prompt_tokens"]), tuple(row["gold_tokens"]))
        (train if row["split"] == "train" else evals).append(pair)
    return TaskDataset(spec=spec, train=train, eval=evals)
