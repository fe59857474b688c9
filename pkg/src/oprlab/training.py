"""Stage-wise supervised training and the sequential task loop.

Replayed pairs are concatenated with the incoming task's data and share one
plain cross-entropy path; method differences live entirely in how the buffer
was built (or, for the distillation baseline, in an extra KL term).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diagnostics
from .metrics import AccuracyMatrix, evaluate_task
from .policy import (Arch, NonFiniteLossError, SamplerConfig, backward_from_dlogits,
                     batch_sequence_logprobs, ce_loss_and_grad, init_params,
                     logits_for_windows, sample_responses)
from .policy.model import _position_table
from .replay import (ReplayBuffer, RolloutRecord, build_opr_buffer, build_vanilla_buffer,
                     rollout_historical, score_rollouts)
from .tasks import TaskStream, historical_pool
from .util import derive_seed, log_softmax, rng_for, softmax

DEFAULT_EPOCHS = (5, 3, 7, 5, 3, 5, 5, 7)

METHOD_NAMES = ("seq-sft", "vanilla-replay", "sdft", "mtl", "opr-ru", "opr-sc", "opr-low-score")


class TrainingError(ValueError):
    pass


class StageDivergenceError(RuntimeError):
    def __init__(self, stage: int, step: int, loss: float, initial: float):
        self.stage, self.step, self.loss, self.initial = stage, step, loss, initial
        super().__init__(f"stage {stage} diverged at step {step}: "
                         f"loss {loss!r} vs initial {initial!r}")


@dataclass(frozen=True)
class OptimConfig:
    optimizer: str = "adam"
    step_size: float = 2e-3
    batch_size: int = 32
    epochs: tuple[int, ...] = DEFAULT_EPOCHS
    epochs_multiplier: float = 1.0
    mtl_epochs: int | None = None
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")
        if self.step_size <= 0 or self.batch_size < 1 or self.epochs_multiplier <= 0:
            raise TrainingError("step_size, batch_size and epochs_multiplier must be positive")
        if any(e < 1 for e in self.epochs):
            raise TrainingError("epochs entries must be >= 1")

    def stage_epochs(self, stage: int) -> int:
        base = self.epochs[stage % len(self.epochs)]
        return max(1, round(base * self.epochs_multiplier))

    def joint_epochs(self) -> int:
        if self.mtl_epochs is not None:
            return self.mtl_epochs
        return max(1, round(float(np.mean(self.epochs)) * self.epochs_multiplier))


@dataclass(frozen=True)
class MethodSpec:
    name: str
    rho: float = 0.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    sdft_beta: float = 1.0
    sdft_kl_direction: str = "reverse"
    sdft_contexts: str = "teacher-forced"

    def __post_init__(self):
        if self.name not in METHOD_NAMES:
            raise TrainingError(f"unknown method {self.name!r}; expected one of {METHOD_NAMES}")
        if self.name in ("seq-sft", "mtl") and self.rho != 0.0:
            raise TrainingError(f"{self.name} does not take a replay fraction (rho={self.rho})")
        if self.uses_replay and not (0.0 < self.rho <= 1.0):
            raise TrainingError(f"{self.name} needs rho in (0, 1], got {self.rho}")
        if self.name == "sdft":
            if self.sdft_beta <= 0:
                raise TrainingError("sdft needs beta > 0")
            if self.sdft_kl_direction not in ("reverse", "forward"):
                raise TrainingError(f"unknown kl direction {self.sdft_kl_direction!r}")
            if self.sdft_contexts not in ("teacher-forced", "rollout"):
                raise TrainingError(f"unknown sdft context source {self.sdft_contexts!r}")

    @property
    def uses_replay(self) -> bool:
        return self.name in ("vanilla-replay", "opr-ru", "opr-sc", "opr-low-score")

    @property
    def scorer(self) -> str | None:
        return {"opr-ru": "rule", "opr-sc": "self-confidence", "opr-low-score": "rule"}.get(self.name)

    @property
    def selection_mode(self) -> str | None:
        if self.name in ("opr-ru", "opr-sc"):
            return "top"
        if self.name == "opr-low-score":
            return "bottom"
        return None

    @property
    def tag(self) -> str:
        return f"{self.name}-rho{self.rho:g}" if self.uses_replay else self.name


# ---------------------------------------------------------------- optimizers

class _Sgd:
    def __init__(self, cfg: OptimConfig, n: int):
        self.lr = cfg.step_size
        self.wd = cfg.weight_decay

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.wd:
            values = values * (1.0 - self.lr * self.wd)
        return values - self.lr * grad


class _Adam:
    def __init__(self, cfg: OptimConfig, n: int):
        self.lr = cfg.step_size
        self.wd = cfg.weight_decay
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        if self.wd:
            values = values * (1.0 - self.lr * self.wd)
        return values - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(cfg: OptimConfig, n_params: int):
    return _Sgd(cfg, n_params) if cfg.optimizer == "sgd" else _Adam(cfg, n_params)


# ---------------------------------------------------------------- losses

def sdft_loss_and_grad(arch: Arch, values: np.ndarray, teacher_values: np.ndarray,
                       batch, beta: float, direction: str = "reverse",
                       contexts: str = "teacher-forced", sampler: SamplerConfig | None = None,
                       kl_seed: int = 0):
    """CE plus beta times the mean per-token KL against a frozen teacher.

    The KL is evaluated on teacher-forced response positions by default, or on
    fresh student rollouts of the batch prompts when contexts="rollout".
    beta=0 reduces exactly to the plain CE path.
    """
    if beta < 0:
        raise TrainingError("beta must be >= 0")
    ce_loss, grad = ce_loss_and_grad(arch, values, batch)
    if beta == 0:
        return ce_loss, grad, 0.0
    if contexts == "teacher-forced":
        kl_pairs = batch
    else:
        cfg = sampler or SamplerConfig(temperature=1.0, top_p=1.0, max_new_tokens=8)
        prompts = [p for p, _ in batch]
        outs = sample_responses(arch, values, prompts, cfg,
                                seeds=[derive_seed(kl_seed, i) for i in range(len(prompts))])
        kl_pairs = [(p, r.tokens) for p, r in zip(prompts, outs) if len(r.tokens)]
        if not kl_pairs:
            return ce_loss, grad, 0.0
    windows, _, _, _ = _position_table(arch, kl_pairs)
    logits, cache = logits_for_windows(arch, values, windows, with_cache=True)
    t_logits = logits_for_windows(arch, teacher_values, windows)
    logp = log_softmax(logits)
    logt = log_softmax(t_logits)
    p = softmax(logits)
    n_pos = windows.shape[0]
    if direction == "reverse":
        per_pos = np.sum(p * (logp - logt), axis=1)
        kl = float(per_pos.mean())
        dlogits = p * ((logp - logt) - per_pos[:, None]) / n_pos
    elif direction == "forward":
        t = softmax(t_logits)
        kl = float(np.sum(t * (logt - logp), axis=1).mean())
        dlogits = (p - t) / n_pos
    else:
        raise TrainingError(f"unknown kl direction {direction!r}")
    grad = grad + beta * backward_from_dlogits(arch, values, cache, dlogits)
    return ce_loss + beta * kl, grad, kl


# ---------------------------------------------------------------- stage loop

@dataclass
class StageResult:
    values: np.ndarray
    trace: list[tuple[int, int, float, float]]   # (step, epoch, loss, replay_frac)
    n_steps: int
    seconds: float


def to_training_pairs(task_pairs, buffer: ReplayBuffer | None, eos_id: int | None):
    """Gold targets get EOS appended; rollout responses are replayed verbatim."""
    eos = () if eos_id is None else (eos_id,)
    merged = [(p, tuple(g) + eos, False) for p, g in task_pairs]
    if buffer is not None:
        for _, prompt, response in buffer.items:
            target = tuple(response) + eos if buffer.mode == "gold" else tuple(response)
            merged.append((prompt, target, True))
    return merged


def train_stage(arch: Arch, values: np.ndarray, task_pairs, buffer: ReplayBuffer | None,
                cfg: OptimConfig, *, stage: int, epochs: int, loss_kind: str = "ce",
                method: MethodSpec | None = None, probe=None) -> StageResult:
    """Train one stage on task data plus replay buffer with a single loss path.

    Aborts with StageDivergenceError when a batch loss is non-finite or
    exceeds 1e3 x the stage's first batch loss. Only the stage-end parameters
    are returned; intermediate checkpoints are never retained.
    """
    if loss_kind not in ("ce", "sdft"):
        raise TrainingError(f"unknown loss kind {loss_kind!r}")
    merged = to_training_pairs(task_pairs, buffer, arch.eos_id)
    if not merged:
        raise TrainingError(f"stage {stage}: no training examples")
    teacher = values.copy() if loss_kind == "sdft" else None
    values = values.copy()
    rng = rng_for(cfg.seed, "shuffle", stage)
    opt = make_optimizer(cfg, values.size)
    trace: list[tuple[int, int, float, float]] = []
    step = 0
    initial: float | None = None
    t0 = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(len(merged))
        for lo in range(0, len(merged), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = [(merged[i][0], merged[i][1]) for i in idx]
            replay_frac = float(np.mean([merged[i][2] for i in idx]))
            if loss_kind == "sdft":
                m = method or MethodSpec(name="sdft")
                loss, grad, _ = sdft_loss_and_grad(
                    arch, values, teacher, batch, m.sdft_beta, m.sdft_kl_direction,
                    m.sdft_contexts, m.sampler, kl_seed=derive_seed(cfg.seed, "sdft", stage, step))
            else:
                loss, grad = ce_loss_and_grad(arch, values, batch)
            if initial is None:
                initial = loss
            if not np.isfinite(loss) or (initial > 0 and loss > 1e3 * initial):
                raise StageDivergenceError(stage, step, loss, initial)
            values = opt.step(values, grad)
            trace.append((step, epoch, loss, replay_frac))
            step += 1
            if probe is not None:
                probe(stage, step, values)
    return StageResult(values=values, trace=trace, n_steps=step,
                       seconds=time.perf_counter() - t0)


# ---------------------------------------------------------------- continual loop

@dataclass(frozen=True)
class DiagConfig:
    stage_kl: bool = True
    kl_prompts_per_task: int = 24
    kl_mc_samples: int = 1
    window_interval: int = 0          # probe every k steps; 0 disables
    window_prompts_per_task: int = 8
    window_eval_items: int = 24


@dataclass
class ContinualResult:
    method: MethodSpec
    matrix: AccuracyMatrix
    values: np.ndarray
    stage_values: list[np.ndarray]
    buffers: list[ReplayBuffer | None]
    traces: list[list[tuple[int, int, float, float]]]
    diag_rows: list[dict]
    stage_seconds: list[float]


class _WindowProbe:
    """Logs KL(current || window start) and prior-task accuracy each interval."""

    def __init__(self, arch, stream, diag: DiagConfig, upto_stage: int, run_seed: int,
                 max_new_tokens: int, rows: list[dict]):
        self.arch, self.stream, self.diag, self.rows = arch, stream, diag, rows
        self.max_new_tokens = max_new_tokens
        datasets = stream.datasets()
        rng = rng_for(run_seed, "window-probe", upto_stage)
        self.prompts = []
        self.eval_sets = []
        for tid in range(upto_stage):
            train_prompts = [p for p, _ in datasets[tid].train]
            take = rng.choice(len(train_prompts), size=min(diag.window_prompts_per_task,
                                                           len(train_prompts)), replace=False)
            self.prompts.extend(train_prompts[i] for i in sorted(int(x) for x in take))
            ev = datasets[tid].eval[:diag.window_eval_items]
            self.eval_sets.append((stream.spec_by_id(tid), ev))
        self.anchor = None
        self.anchor_acc = None
        self.seed = derive_seed(run_seed, "window-kl", upto_stage)

    def _acc(self, values) -> float:
        accs = [evaluate_task(self.arch, values, spec, self.stream.vocab, ev, self.max_new_tokens)
                for spec, ev in self.eval_sets]
        return float(np.mean(accs))

    def start(self, values):
        self.anchor = values.copy()
        self.anchor_acc = self._acc(values)

    def __call__(self, stage, step, values):
        if self.diag.window_interval <= 0 or step % self.diag.window_interval != 0:
            return
        est = diagnostics.seq_kl(self.arch, values, self.anchor, self.prompts, mode="mc",
                                 mc_samples=self.diag.kl_mc_samples, max_len=self.max_new_tokens,
                                 seed=derive_seed(self.seed, step))
        acc = self._acc(values)
        self.rows.append({"stage": stage, "step": step, "quantity": "window_kl",
                          "value": est.value, "mode": "mc", "stderr": est.stderr})
        self.rows.append({"stage": stage, "step": step, "quantity": "window_forgetting",
                          "value": self.anchor_acc - acc, "mode": "eval", "stderr": None})
        self.anchor = values.copy()
        self.anchor_acc = acc


def _build_buffer(method: MethodSpec, stream: TaskStream, stage: int, values, arch,
                  run_seed: int, pool_loader=None) -> ReplayBuffer | None:
    """Replay buffer for the stage about to start (stage > 0), or None."""
    if not method.uses_replay or stage == 0:
        return None
    datasets = stream.datasets()
    budget = int(method.rho * len(datasets[stage].train))
    if method.name == "vanilla-replay":
        return build_vanilla_buffer(stream, stage, method.rho, len(datasets[stage].train),
                                    seed=derive_seed(run_seed, "vanilla", stage))
    if pool_loader is not None:
        records = pool_loader(stage)
        if any(r.score is None for r in records):
            raise TrainingError(f"stage {stage}: reused pool is unscored")
    else:
        pool = historical_pool(stream, stage)
        records = rollout_historical(arch, values, pool, method.sampler, stage=stage,
                                     seed=derive_seed(run_seed, "rollout-seed"))
        records = score_rollouts(records, method.scorer, stream)
    return build_opr_buffer(records, budget, stage=stage, mode=method.selection_mode)


def run_continual(stream: TaskStream, method: MethodSpec, arch: Arch, cfg: OptimConfig,
                  *, run_seed: int, diag: DiagConfig | None = None,
                  pool_loader=None) -> ContinualResult:
    """Train through the stream with one method and measure the accuracy matrix.

    The same run_seed yields the same init, shuffles, rollouts and matrix,
    bit for bit. pool_loader, when given, supplies pre-scored rollout pools
    per stage (the low-score ablation reuses the top run's pools this way).
    """
    diag = diag or DiagConfig()
    datasets = stream.datasets()
    labels = [s.name for s in stream.specs]
    max_new = method.sampler.max_new_tokens
    longest_prompt = max(1 + s.content_len[1] for s in stream.specs)
    if 2 + longest_prompt + max_new > arch.context_len:
        raise TrainingError(
            f"context_len {arch.context_len} cannot hold prompts up to {longest_prompt} "
            f"tokens plus {max_new} new tokens")
    values = init_params(arch, rng_for(run_seed, "init"))
    diag_rows: list[dict] = []

    if method.name == "mtl":
        all_pairs = [pair for ds in datasets for pair in ds.train]
        cfg_joint = replace(cfg, seed=derive_seed(run_seed, "opt"))
        res = train_stage(arch, values, all_pairs, None, cfg_joint, stage=0,
                          epochs=cfg.joint_epochs(), loss_kind="ce")
        matrix = AccuracyMatrix.empty(labels, n_stages=1)
        for tid in range(stream.n_tasks):
            matrix.set(tid, 0, evaluate_task(arch, res.values, stream.spec_by_id(tid),
                                             stream.vocab, datasets[tid].eval, max_new))
        return ContinualResult(method=method, matrix=matrix, values=res.values,
                               stage_values=[res.values], buffers=[None], traces=[res.trace],
                               diag_rows=diag_rows, stage_seconds=[res.seconds])

    matrix = AccuracyMatrix.empty(labels)
    stage_values, buffers, traces, seconds = [], [], [], []
    for stage in range(stream.n_tasks):
        buffer = _build_buffer(method, stream, stage, values, arch, run_seed, pool_loader)
        probe = None
        if diag.window_interval > 0 and stage > 0:
            probe = _WindowProbe(arch, stream, diag, stage, run_seed, max_new, diag_rows)
            probe.start(values)
        start_values = values
        cfg_stage = replace(cfg, seed=derive_seed(run_seed, "opt"))
        loss_kind = "sdft" if method.name == "sdft" else "ce"
        res = train_stage(arch, values, datasets[stage].train, buffer, cfg_stage,
                          stage=stage, epochs=cfg.stage_epochs(stage), loss_kind=loss_kind,
                          method=method, probe=probe)
        values = res.values
        if diag.stage_kl and stage > 0:
            hist = historical_pool(stream, stage)
            rng = rng_for(run_seed, "stage-kl", stage)
            prompts = []
            for tid in hist.task_ids:
                ps = hist.prompts[tid]
                take = rng.choice(len(ps), size=min(diag.kl_prompts_per_task, len(ps)),
                                  replace=False)
                prompts.extend(ps[i] for i in sorted(int(x) for x in take))
            est = diagnostics.seq_kl(arch, values, start_values, prompts, mode="mc",
                                     mc_samples=diag.kl_mc_samples, max_len=max_new,
                                     seed=derive_seed(run_seed, "stage-kl-mc", stage))
            diag_rows.append({"stage": stage, "step": res.n_steps, "quantity": "stage_kl",
                              "value": est.value, "mode": "mc", "stderr": est.stderr})
        for tid in range(stage + 1):
            matrix.set(tid, stage, evaluate_task(arch, values, stream.spec_by_id(tid),
                                                 stream.vocab, datasets[tid].eval, max_new))
        stage_values.append(values)
        buffers.append(buffer)
        traces.append(res.trace)
        seconds.append(res.seconds)
    return ContinualResult(method=method, matrix=matrix, values=values,
                           stage_values=stage_values, buffers=buffers, traces=traces,
                           diag_rows=diag_rows, stage_seconds=seconds)
