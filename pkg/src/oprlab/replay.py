"""On-policy replay: roll out the latest policy on old prompts, keep the best.

The buffer built here is the object under study: after stage i, the current
checkpoint answers the prompts it was trained on before, each answer is
scored (by task rule or by the policy's own confidence), and the top of the
pool is replayed verbatim as supervised pairs during stage i+1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .policy import Arch, ContextOverflowError, SamplerConfig, sample_responses
from .tasks import HistoricalPromptPool, TaskStream, rule_score
from .util import derive_seed, read_jsonl, write_jsonl

log = logging.getLogger(__name__)

SCORERS = ("rule", "self-confidence")


class ReplayError(ValueError):
    pass


@dataclass
class RolloutRecord:
    task_id: int
    prompt: tuple[int, ...]
    response: tuple[int, ...]
    logprobs: np.ndarray | None = None
    score: float | None = None
    scorer: str | None = None
    kept: bool = False


@dataclass
class ReplayBuffer:
    """Replay pairs plus the full scored pool they were selected from."""

    stage: int                      # stage whose checkpoint produced the pool
    mode: str                       # "top" | "bottom" | "gold"
    scorer: str | None
    budget: int
    items: list[tuple[int, tuple[int, ...], tuple[int, ...]]]  # (task_id, prompt, response)
    thresholds: dict[int, float]    # per-task boundary score of the kept set
    pool: list[RolloutRecord]

    def pairs(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [(p, r) for _, p, r in self.items]

    def __len__(self) -> int:
        return len(self.items)


def rollout_historical(arch: Arch, values: np.ndarray, pool: HistoricalPromptPool,
                       sampler: SamplerConfig, *, stage: int, seed: int,
                       batch_size: int = 512) -> list[RolloutRecord]:
    """One sampled response per historical prompt, with attached logprobs.

    Prompts that cannot fit max_new_tokens inside the model context are
    dropped up front (and logged). Per-prompt seeds derive from
    (seed, stage, task, prompt index) so results do not depend on batching.
    Each task's records are emitted in a per-stage seeded order; downstream
    selection breaks score ties by this order, so the rotation spreads
    boundary ties across the pool from stage to stage.
    """
    records: list[RolloutRecord] = []
    jobs: list[tuple[int, int, tuple[int, ...]]] = []
    dropped = {tid: 0 for tid in pool.task_ids}
    for tid in pool.task_ids:
        prompts = pool.prompts[tid]
        order = np.random.default_rng(
            derive_seed(seed, "rollout-order", stage, tid)).permutation(len(prompts))
        for idx in (int(i) for i in order):
            prompt = prompts[idx]
            if 2 + len(prompt) + sampler.max_new_tokens > arch.context_len:
                dropped[tid] += 1
                continue
            jobs.append((tid, idx, prompt))
    for tid, n in dropped.items():
        if n:
            log.warning("rollout: dropped %d overlong prompts for task %d", n, tid)
    if not jobs:
        raise ReplayError("no historical prompts fit the model context")
    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start:start + batch_size]
        seeds = [derive_seed(seed, "rollout", stage, tid, idx) for tid, idx, _ in chunk]
        outs = sample_responses(arch, values, [p for _, _, p in chunk], sampler, seeds=seeds)
        for (tid, _, prompt), out in zip(chunk, outs):
            records.append(RolloutRecord(task_id=tid, prompt=prompt, response=out.tokens,
                                         logprobs=out.logprobs))
    return records


def score_rollouts(records: list[RolloutRecord], scorer: str,
                   stream: TaskStream) -> list[RolloutRecord]:
    """Attach scores in place: task-rule score or length-normalized confidence."""
    if scorer not in SCORERS:
        raise ReplayError(f"unknown scorer {scorer!r}")
    for rec in records:
        if scorer == "rule":
            spec = stream.spec_by_id(rec.task_id)
            rec.score = rule_score(spec, stream.vocab, rec.prompt, rec.response)
        else:
            if rec.logprobs is None or len(rec.logprobs) == 0:
                raise ReplayError("self-confidence scoring needs rollouts with attached logprobs")
            rec.score = float(np.mean(rec.logprobs))
        rec.scorer = scorer
    return records


def allocate_budget(budget: int, n_tasks: int, caps=None) -> list[int]:
    """Split a replay budget evenly over tasks, remainder to the earliest.

    Per-task caps clip the even split; freed budget is redistributed
    left-to-right among uncapped tasks; anything still left is dropped.
    """
    if budget < 0:
        raise ReplayError("budget must be >= 0")
    if n_tasks < 1:
        raise ReplayError("need at least one historical task")
    if caps is not None and len(caps) != n_tasks:
        raise ReplayError(f"expected {n_tasks} caps, got {len(caps)}")
    base = budget // n_tasks
    alloc = [base + (1 if i < budget % n_tasks else 0) for i in range(n_tasks)]
    if caps is None:
        return alloc
    freed = 0
    for i in range(n_tasks):
        if alloc[i] > caps[i]:
            freed += alloc[i] - caps[i]
            alloc[i] = caps[i]
    while freed > 0:
        progress = False
        for i in range(n_tasks):
            if freed == 0:
                break
            if alloc[i] < caps[i]:
                alloc[i] += 1
                freed -= 1
                progress = True
        if not progress:
            log.warning("allocate_budget: dropping %d unplaceable replay slots", freed)
            break
    return alloc


def build_opr_buffer(records: list[RolloutRecord], budget: int, *, stage: int,
                     mode: str = "top", allocation: list[int] | None = None) -> ReplayBuffer:
    """Keep the per-task best (or worst) scored rollouts within the budget.

    Selection is a stable sort by score, so records tied at the quantile
    boundary keep their pool order and the earlier ones win. Rollout pools
    arrive in a per-stage rotated order (see rollout_historical), which
    stops boundary ties from pinning the same few prompts forever. The
    per-task threshold is the boundary score of the kept set (top mode:
    lowest kept score). When no explicit per-task allocation is given it
    comes from allocate_budget with pool sizes as caps; an oversized
    allocation is clipped and logged.
    """
    if mode not in ("top", "bottom"):
        raise ReplayError(f"unknown selection mode {mode!r}")
    if any(r.score is None for r in records):
        raise ReplayError("records must be scored before selection")
    scorers = {r.scorer for r in records}
    if len(scorers) != 1:
        raise ReplayError(f"mixed scorers in pool: {scorers}")
    task_ids = sorted({r.task_id for r in records})
    by_task = {tid: [r for r in records if r.task_id == tid] for tid in task_ids}
    if allocation is None:
        alloc = allocate_budget(budget, len(task_ids), caps=[len(by_task[t]) for t in task_ids])
    else:
        if len(allocation) != len(task_ids):
            raise ReplayError(f"allocation covers {len(allocation)} tasks, pool has {len(task_ids)}")
        if sum(allocation) > budget:
            raise ReplayError(f"allocation {allocation} exceeds budget {budget}")
        alloc = list(allocation)
        for k, tid in enumerate(task_ids):
            if alloc[k] > len(by_task[tid]):
                log.warning("build_opr_buffer: clipping task %d allocation %d to pool size %d",
                            tid, alloc[k], len(by_task[tid]))
                alloc[k] = len(by_task[tid])
    items, thresholds = [], {}
    for rec in records:
        rec.kept = False
    for tid, quota in zip(task_ids, alloc):
        ranked = sorted(by_task[tid], key=lambda r: r.score, reverse=(mode == "top"))
        kept = ranked[:quota]
        for rec in kept:
            rec.kept = True
            items.append((rec.task_id, rec.prompt, rec.response))
        if kept:
            thresholds[tid] = kept[-1].score
    return ReplayBuffer(stage=stage, mode=mode, scorer=next(iter(scorers)),
                        budget=budget, items=items, thresholds=thresholds, pool=records)


def build_vanilla_buffer(stream: TaskStream, upto_stage: int, rho: float,
                         n_next: int, seed: int) -> ReplayBuffer:
    """Uniformly sampled gold pairs from earlier tasks, floor(rho * n_next) total."""
    if not (0.0 < rho <= 1.0):
        raise ReplayError(f"replay fraction rho={rho} outside (0, 1]")
    if not (1 <= upto_stage <= stream.n_tasks):
        raise ReplayError(f"upto_stage {upto_stage} outside stream")
    datasets = stream.datasets()
    budget = int(rho * n_next)
    sizes = [len(datasets[t].train) for t in range(upto_stage)]
    alloc = allocate_budget(budget, upto_stage, caps=sizes)
    items = []
    pool = []
    for tid, quota in enumerate(alloc):
        rng = np.random.default_rng(derive_seed(seed, "vanilla", upto_stage, tid))
        idx = rng.choice(sizes[tid], size=quota, replace=False)
        for i in sorted(int(x) for x in idx):
            prompt, gold = datasets[tid].train[i]
            items.append((tid, prompt, gold))
            pool.append(RolloutRecord(task_id=tid, prompt=prompt, response=gold,
                                      score=None, scorer=None, kept=True))
    return ReplayBuffer(stage=upto_stage, mode="gold", scorer=None, budget=budget,
                        items=items, thresholds={}, pool=pool)


# ---------------------------------------------------------------- persistence

def save_buffer_jsonl(path: Path | str, buffer: ReplayBuffer) -> None:
    """Persist the full scored pool with kept flags, selected rows included."""
    rows = []
    for rec in buffer.pool:
        rows.append({
            "stage": buffer.stage,
            "task_id": rec.task_id,
            "prompt_tokens": list(rec.prompt),
            "response_tokens": list(rec.response),
            "score": rec.score,
            "scorer_kind": rec.scorer,
            "kept": rec.kept,
        })
    write_jsonl(path, rows)


def load_pool_jsonl(path: Path | str) -> tuple[int, list[RolloutRecord]]:
    """Rebuild a scored pool (without logprobs) from a buffer snapshot."""
    records = []
    stage = None
    for row in read_jsonl(path):
        stage = row["stage"] if stage is None else stage
        if row["stage"] != stage:
            raise ReplayError(f"{path}: mixed stages in pool file")
        records.append(RolloutRecord(
            task_id=row["task_id"], prompt=tuple(row["prompt_tokens"]),
            response=tuple(row["response_tokens"]), score=row["score"],
            scorer=row["scorer_kind"], kept=row["kept"]))
    if stage is None:
        raise ReplayError(f"{path}: empty pool file")
    return stage, records
