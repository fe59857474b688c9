"""Run orchestration: execute (method x seed) jobs, persist artifacts, aggregate.

A run directory is append-only: reruns need a fresh directory or an explicit
overwrite. Every artifact a later step consumes is a file, so reports and
ablations are pure transformations of what is on disk.
"""

from __future__ import annotations

import csv
import io
import json
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from ..metrics import bwt, overall_acc, save_matrix_csv
from ..replay import RolloutRecord, load_pool_jsonl, save_buffer_jsonl
from ..tasks import build_stream
from ..training import ContinualResult, MethodSpec, run_continual
from ..diagnostics import write_diagnostics_jsonl
from ..policy import save_checkpoint
from ..util import canonical_json, derive_seed, sha256_bytes, sha256_file
from .config import ConfigError, ExperimentConfig

RUNRECORD = "runrecord.json"


class HarnessError(RuntimeError):
    pass


def prepare_run_dir(path: Path, overwrite: bool) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise HarnessError(f"run directory {path} already has contents; "
                               f"pass --overwrite or choose a new directory")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def canonical_pool_hash(records: list[RolloutRecord]) -> str:
    """Hash of the scored pool content itself, independent of kept flags."""
    rows = [[r.task_id, list(r.prompt), list(r.response), r.score, r.scorer]
            for r in records]
    return sha256_bytes(canonical_json(rows).encode())


def _write_trace_csv(path: Path, trace) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch", "loss", "replay_frac"])
    for step, epoch, loss, frac in trace:
        w.writerow([step, epoch, repr(float(loss)), repr(float(frac))])
    path.write_text(buf.getvalue())


def persist_result(job_dir: Path, result: ContinualResult, arch) -> dict:
    """Write one (method, seed) job's artifacts; return a summary for the record."""
    job_dir.mkdir(parents=True, exist_ok=True)
    save_matrix_csv(job_dir / "accuracy_matrix.csv", result.matrix)
    buffer_files, pool_hashes = [], {}
    for stage, buffer in enumerate(result.buffers):
        if buffer is None:
            continue
        name = f"buffer_stage_{stage:02d}.jsonl"
        save_buffer_jsonl(job_dir / name, buffer)
        buffer_files.append(name)
        pool_hashes[str(stage)] = canonical_pool_hash(buffer.pool)
    for stage, trace in enumerate(result.traces):
        _write_trace_csv(job_dir / f"loss_stage_{stage:02d}.csv", trace)
    for stage, values in enumerate(result.stage_values):
        save_checkpoint(job_dir / f"stage_{stage:02d}.npz", arch, values)
    write_diagnostics_jsonl(job_dir / "diagnostics.jsonl", result.diag_rows)
    b = bwt(result.matrix)
    return {
        "bwt": b,
        "acc": overall_acc(result.matrix),
        "final_accuracies": [float(x) for x in result.matrix.final_column()],
        "task_labels": result.matrix.task_labels,
        "matrix": "accuracy_matrix.csv",
        "buffers": buffer_files,
        "pool_hashes": pool_hashes,
        "stage_seconds": [round(s, 3) for s in result.stage_seconds],
        "diagnostics": "diagnostics.jsonl",
    }


def run_job(payload: dict) -> tuple[str, int, dict]:
    """One (method, seed) training run; top-level for process-pool pickling."""
    from .config import parse_config
    cfg = parse_config(payload["config_text"])
    stream = build_stream(cfg.stream_config())
    arch = cfg.arch()
    method = MethodSpec(**payload["method"])
    seed = payload["seed"]
    out = Path(payload["out_dir"])
    pool_loader = None
    if payload.get("pool_source"):
        src = Path(payload["pool_source"])

        def pool_loader(stage: int, _src=src):
            path = _src / f"buffer_stage_{stage:02d}.jsonl"
            if not path.exists():
                raise HarnessError(f"ablation pool source missing: {path}")
            return load_pool_jsonl(path)[1]

    result = run_continual(stream, method, arch, cfg.optim_config(), run_seed=seed,
                           diag=cfg.diag_config(), pool_loader=pool_loader)
    summary = persist_result(out, result, arch)
    return method.tag, seed, summary


def _method_payload(spec: MethodSpec) -> dict:
    d = asdict(spec)
    d["sampler"] = spec.sampler
    return d


def execute_jobs(jobs: list[dict], workers: int) -> dict:
    """Run all jobs (possibly in parallel) and collect summaries by method tag."""
    results: dict[str, dict] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_job, jobs))
    else:
        outcomes = [run_job(j) for j in jobs]
    for tag, seed, summary in outcomes:
        results.setdefault(tag, {})[str(seed)] = summary
    return results


def aggregate(per_seed: dict) -> dict:
    accs = [s["acc"] for s in per_seed.values()]
    bwts = [s["bwt"] for s in per_seed.values()]
    agg = {"acc_mean": float(np.mean(accs)), "acc_std": float(np.std(accs))}
    if all(b is not None for b in bwts):
        agg["bwt_mean"] = float(np.mean(bwts))
        agg["bwt_std"] = float(np.std(bwts))
    else:
        agg["bwt_mean"] = agg["bwt_std"] = None
    finals = np.array([s["final_accuracies"] for s in per_seed.values()])
    agg["final_accuracies_mean"] = [float(x) for x in finals.mean(axis=0)]
    return agg


def write_comparison_csv(path: Path, record: dict) -> None:
    methods = record["methods"]
    labels = next(iter(methods.values()))["seeds"]
    any_seed = next(iter(labels.values()))
    task_labels = any_seed["task_labels"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "rho", "acc_mean", "acc_std", "bwt_mean", "bwt_std"]
               + [f"final_{t}" for t in task_labels])
    for tag, m in methods.items():
        a = m["aggregate"]
        row = [tag, m["method"]["rho"], f"{a['acc_mean']:.4f}", f"{a['acc_std']:.4f}",
               "" if a["bwt_mean"] is None else f"{a['bwt_mean']:.4f}",
               "" if a["bwt_std"] is None else f"{a['bwt_std']:.4f}"]
        row += [f"{x:.4f}" for x in a["final_accuracies_mean"]]
        w.writerow(row)
    path.write_text(buf.getvalue())


def content_hash(out_dir: Path, record: dict) -> str:
    """Hash of the run's scientific content: matrices and buffer files, path-sorted."""
    paths = []
    for tag, m in record["methods"].items():
        for seed, s in m["seeds"].items():
            base = Path(s["dir"])
            paths.append(base / s["matrix"])
            paths.extend(base / b for b in s["buffers"])
    h_parts = []
    for rel in sorted(paths):
        h_parts.append(f"{rel}:{sha256_file(out_dir / rel)}")
    return sha256_bytes("\n".join(h_parts).encode())


def finalize_record(cfg: ExperimentConfig, out_dir: Path, kind: str, results: dict,
                    methods: list[MethodSpec], seeds: list[int], extra: dict | None = None) -> dict:
    by_tag = {m.tag: m for m in methods}
    record = {
        "schema_version": 1,
        "kind": kind,
        "config_hash": cfg.config_hash(),
        "seeds": seeds,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "methods": {},
    }
    for tag, per_seed in results.items():
        spec = by_tag[tag]
        record["methods"][tag] = {
            "method": {"name": spec.name, "rho": spec.rho},
            "seeds": {s: dict(summary, dir=f"{tag}/seed{s}")
                      for s, summary in sorted(per_seed.items(), key=lambda kv: int(kv[0]))},
            "aggregate": aggregate(per_seed),
        }
    if extra:
        record.update(extra)
    record["content_hash"] = content_hash(out_dir, record)
    (out_dir / RUNRECORD).write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    write_comparison_csv(out_dir / "comparison.csv", record)
    return record


def _snapshot_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    (out_dir / "config.yaml").write_text(cfg.text)


def cli_run(cfg: ExperimentConfig, out_dir: Path, *, seeds: list[int] | None = None,
            workers: int | None = None, overwrite: bool = False,
            methods: list[MethodSpec] | None = None) -> dict:
    """Train every configured method over every seed and aggregate one record."""
    out_dir = prepare_run_dir(out_dir, overwrite)
    _snapshot_config(cfg, out_dir)
    seeds = seeds if seeds is not None else cfg.seeds
    workers = workers if workers is not None else cfg.workers
    methods = methods if methods is not None else cfg.method_specs()
    jobs = [{"config_text": cfg.text, "method": _method_payload(m), "seed": s,
             "out_dir": str(out_dir / m.tag / f"seed{s}")}
            for m in methods for s in seeds]
    results = execute_jobs(jobs, workers)
    return finalize_record(cfg, out_dir, "run", results, methods, seeds)


def cli_sweep(cfg: ExperimentConfig, out_dir: Path, *, rho_list: list[float] | None = None,
              seeds: list[int] | None = None, workers: int | None = None,
              overwrite: bool = False) -> dict:
    """Replay-budget sweep over rho for every replay-capable configured method."""
    rho_list = rho_list if rho_list is not None else cfg.rho_list
    if not rho_list:
        raise ConfigError("sweep needs a non-empty rho list")
    base = [m for m in cfg.method_specs() if m.uses_replay]
    if not base:
        raise ConfigError("sweep needs at least one replay-capable method in the config")
    methods = [replace(m, rho=float(r)) for m in base for r in rho_list]
    out_dir = prepare_run_dir(out_dir, overwrite)
    _snapshot_config(cfg, out_dir)
    seeds = seeds if seeds is not None else cfg.seeds
    workers = workers if workers is not None else cfg.workers
    jobs = [{"config_text": cfg.text, "method": _method_payload(m), "seed": s,
             "out_dir": str(out_dir / m.tag / f"seed{s}")}
            for m in methods for s in seeds]
    results = execute_jobs(jobs, workers)
    trends = {}
    for name in sorted({m.name for m in base}):
        accs = []
        for r in sorted(rho_list):
            tag = replace([m for m in base if m.name == name][0], rho=float(r)).tag
            if tag in results:
                accs.append(aggregate(results[tag])["acc_mean"])
        trends[name] = bool(all(b >= a - 1e-9 for a, b in zip(accs, accs[1:])))
    record = finalize_record(cfg, out_dir, "sweep", results, methods, seeds,
                             extra={"rho_list": sorted(rho_list),
                                    "acc_monotone_in_rho": trends})
    _write_sweep_csv(out_dir / "sweep.csv", record, sorted(rho_list))
    return record


def _write_sweep_csv(path: Path, record: dict, rho_list: list[float]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "rho", "acc_mean", "acc_std", "bwt_mean", "bwt_std",
                "acc_monotone_in_rho"])
    trends = record.get("acc_monotone_in_rho", {})
    for tag, m in record["methods"].items():
        a = m["aggregate"]
        name = m["method"]["name"]
        w.writerow([name, m["method"]["rho"], f"{a['acc_mean']:.4f}", f"{a['acc_std']:.4f}",
                    "" if a["bwt_mean"] is None else f"{a['bwt_mean']:.4f}",
                    "" if a["bwt_std"] is None else f"{a['bwt_std']:.4f}",
                    int(trends.get(name, False))])
    path.write_text(buf.getvalue())


def cli_ablate(cfg: ExperimentConfig, out_dir: Path, *, rho: float = 0.10,
               seeds: list[int] | None = None, workers: int | None = None,
               overwrite: bool = False) -> dict:
    """Selection-direction falsification: vanilla vs top-score vs bottom-score.

    The bottom-score run replays the exact rollout pools persisted by the
    top-score run (loaded from its buffer files), so the two differ only in
    which side of the score ranking survives.
    """
    out_dir = prepare_run_dir(out_dir, overwrite)
    _snapshot_config(cfg, out_dir)
    seeds = seeds if seeds is not None else cfg.seeds
    workers = workers if workers is not None else cfg.workers
    sampler = cfg.sampler_config()
    vanilla = MethodSpec(name="vanilla-replay", rho=rho, sampler=sampler)
    top = MethodSpec(name="opr-ru", rho=rho, sampler=sampler)
    bottom = MethodSpec(name="opr-low-score", rho=rho, sampler=sampler)
    jobs = [{"config_text": cfg.text, "method": _method_payload(m), "seed": s,
             "out_dir": str(out_dir / m.tag / f"seed{s}")}
            for m in (vanilla, top) for s in seeds]
    results = execute_jobs(jobs, workers)
    bottom_jobs = [{"config_text": cfg.text, "method": _method_payload(bottom), "seed": s,
                    "out_dir": str(out_dir / bottom.tag / f"seed{s}"),
                    "pool_source": str(out_dir / top.tag / f"seed{s}")}
                   for s in seeds]
    results.update(execute_jobs(bottom_jobs, workers))
    for s in seeds:
        ph_top = results[top.tag][str(s)]["pool_hashes"]
        ph_bot = results[bottom.tag][str(s)]["pool_hashes"]
        if ph_top != ph_bot:
            raise HarnessError(f"seed {s}: ablation pools diverged between top and bottom runs")
    agg = {tag: aggregate(results[tag]) for tag in results}
    ordering = {
        "top_gt_vanilla": bool(agg[top.tag]["bwt_mean"] > agg[vanilla.tag]["bwt_mean"]),
        "bottom_lt_vanilla": bool(agg[bottom.tag]["bwt_mean"] < agg[vanilla.tag]["bwt_mean"]),
        "per_seed_top_gt_bottom": bool(all(
            results[top.tag][str(s)]["bwt"] > results[bottom.tag][str(s)]["bwt"]
            for s in seeds)),
    }
    record = finalize_record(cfg, out_dir, "ablate", results, [vanilla, top, bottom], seeds,
                             extra={"rho": rho, "ordering": ordering,
                                    "pool_source": top.tag})
    _write_ablation_csv(out_dir / "ablation.csv", record)
    return record


def _write_ablation_csv(path: Path, record: dict) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "rho", "acc_mean", "bwt_mean", "bwt_std", "pool_hash_stage1_first_seed"])
    for tag, m in record["methods"].items():
        a = m["aggregate"]
        seed0 = next(iter(m["seeds"].values()))
        hashes = seed0.get("pool_hashes", {})
        w.writerow([tag, m["method"]["rho"], f"{a['acc_mean']:.4f}",
                    "" if a["bwt_mean"] is None else f"{a['bwt_mean']:.4f}",
                    "" if a["bwt_std"] is None else f"{a['bwt_std']:.4f}",
                    hashes.get("1", "")])
    ordering = record.get("ordering", {})
    w.writerow([])
    for k, v in ordering.items():
        w.writerow([f"check_{k}", int(v)])
    path.write_text(buf.getvalue())


def load_runrecord(run_dir: Path) -> dict:
    path = Path(run_dir) / RUNRECORD
    if not path.exists():
        raise HarnessError(f"no {RUNRECORD} in {run_dir}")
    return json.loads(path.read_text())
