"""Report bundle: figures and their backing CSVs, rebuilt from run artifacts.

Reporting is a pure transformation over files a run already wrote. Nothing
here trains or samples; a missing input is an error that names what was found
so partial runs fail loudly instead of producing half a report.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from ..metrics import load_matrix_csv
from ..util import read_jsonl
from .runner import RUNRECORD, HarnessError, load_runrecord

_COLORS = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb"]


def _color(i: int) -> str:
    return _COLORS[i % len(_COLORS)]


def _require(run_dir: Path) -> dict:
    run_dir = Path(run_dir)
    if not (run_dir / RUNRECORD).exists():
        found = sorted(p.name for p in run_dir.glob("*")) if run_dir.exists() else []
        raise HarnessError(f"{run_dir} is not a finished run directory "
                           f"(no {RUNRECORD}; found {found})")
    return load_runrecord(run_dir)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _method_iter(record: dict):
    for tag in sorted(record["methods"]):
        yield tag, record["methods"][tag]


def scatter_summary(run_dir: Path, out_dir: Path) -> None:
    """Final average accuracy against backward transfer, one point per method."""
    record = _require(run_dir)
    rows = []
    for tag, m in _method_iter(record):
        a = m["aggregate"]
        if a["bwt_mean"] is None:
            continue
        rows.append([tag, f"{a['acc_mean']:.4f}", f"{a['bwt_mean']:.4f}",
                     f"{a['acc_std']:.4f}", f"{a['bwt_std']:.4f}"])
    _write_csv(out_dir / "fig1_scatter.csv",
               ["method", "acc_mean", "bwt_mean", "acc_std", "bwt_std"], rows)
    fig, ax = plt.subplots(figsize=(5.2, 4.0))
    for i, row in enumerate(rows):
        tag, acc, b, acc_sd, b_sd = row
        ax.errorbar(float(b), float(acc), xerr=float(b_sd), yerr=float(acc_sd),
                    fmt="o", color=_color(i), capsize=3, label=tag)
        ax.annotate(tag, (float(b), float(acc)), textcoords="offset points",
                    xytext=(6, 4), fontsize=8)
    ax.set_xlabel("backward transfer (pp)")
    ax.set_ylabel("final average accuracy (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / "fig1_scatter.png", dpi=150)
    plt.close(fig)


def _seed_dirs(run_dir: Path, m: dict):
    for seed, s in sorted(m["seeds"].items(), key=lambda kv: int(kv[0])):
        yield int(seed), Path(run_dir) / s["dir"]


def loss_curves(run_dir: Path, out_dir: Path) -> None:
    """Seed-averaged training loss per stage and method, stages concatenated."""
    record = _require(run_dir)
    rows, series = [], {}
    for tag, m in _method_iter(record):
        per_seed = []
        for seed, d in _seed_dirs(run_dir, m):
            stages = {}
            for f in sorted(d.glob("loss_stage_*.csv")):
                stage = int(f.stem.split("_")[-1])
                with f.open() as fh:
                    r = list(csv.DictReader(fh))
                stages[stage] = [(int(x["step"]), float(x["loss"])) for x in r]
            per_seed.append(stages)
        if not per_seed:
            continue
        merged = []
        for stage in sorted(per_seed[0]):
            n = min(len(s[stage]) for s in per_seed)
            for i in range(n):
                step = per_seed[0][stage][i][0]
                loss = float(np.mean([s[stage][i][1] for s in per_seed]))
                merged.append((stage, step, loss))
                rows.append([stage, step, tag, f"{loss:.6f}"])
        series[tag] = merged
    _write_csv(out_dir / "fig_loss.csv", ["stage", "step", "method", "loss"], rows)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for i, (tag, merged) in enumerate(sorted(series.items())):
        xs = np.arange(len(merged))
        ax.plot(xs, [v for _, _, v in merged], color=_color(i), lw=1.0, label=tag)
    bounds = None
    if series:
        first = next(iter(series.values()))
        bounds = [i for i in range(1, len(first)) if first[i][0] != first[i - 1][0]]
    for b in bounds or []:
        ax.axvline(b, color="0.8", lw=0.6, zorder=0)
    ax.set_xlabel("training step (stages concatenated)")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "fig_loss.png", dpi=150)
    plt.close(fig)


def per_task_deltas(run_dir: Path, out_dir: Path) -> None:
    """Final per-task accuracy change of each method against a reference method."""
    record = _require(run_dir)
    tags = [t for t, _ in _method_iter(record)]
    ref = next((t for t in tags if t.startswith("vanilla-replay")),
               next((t for t in tags if t == "seq-sft"), tags[0]))
    ref_m = record["methods"][ref]
    labels = next(iter(ref_m["seeds"].values()))["task_labels"]
    ref_final = np.array(ref_m["aggregate"]["final_accuracies_mean"])
    rows, bars = [], {}
    for tag, m in _method_iter(record):
        if tag == ref:
            continue
        final = np.array(m["aggregate"]["final_accuracies_mean"])
        if len(final) != len(ref_final):
            continue
        delta = final - ref_final
        bars[tag] = delta
        for t, dv in zip(labels, delta):
            rows.append([tag, t, f"{dv:.4f}"])
    _write_csv(out_dir / "fig_delta.csv", ["method", "task", "delta_vs_" + ref], rows)
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    width = 0.8 / max(1, len(bars))
    x = np.arange(len(labels))
    for i, (tag, delta) in enumerate(sorted(bars.items())):
        ax.bar(x + i * width, delta, width=width, color=_color(i), label=tag)
    ax.axhline(0, color="0.3", lw=0.8)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(f"final accuracy minus {ref} (pp)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "fig_delta.png", dpi=150)
    plt.close(fig)


def per_task_table(run_dir: Path, out_dir: Path) -> None:
    """Per-task final accuracy for every method, seed-averaged."""
    record = _require(run_dir)
    labels = None
    rows = []
    for tag, m in _method_iter(record):
        labels = next(iter(m["seeds"].values()))["task_labels"]
        final = m["aggregate"]["final_accuracies_mean"]
        rows.append([tag] + [f"{v:.4f}" for v in final])
    _write_csv(out_dir / "per_task_accuracy.csv", ["method"] + list(labels or []), rows)
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    x = np.arange(len(labels))
    for i, row in enumerate(rows):
        ax.plot(x, [float(v) for v in row[1:]], marker="o", ms=4, lw=1.2,
                color=_color(i), label=row[0])
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("final accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "per_task_accuracy.png", dpi=150)
    plt.close(fig)


def stage_kl_figure(run_dir: Path, out_dir: Path) -> None:
    """Per-stage policy drift on historical prompts, seed-averaged per method."""
    record = _require(run_dir)
    rows, series = [], {}
    for tag, m in _method_iter(record):
        per_stage: dict[int, list[float]] = {}
        for seed, d in _seed_dirs(run_dir, m):
            f = d / "diagnostics.jsonl"
            if not f.exists():
                continue
            for row in read_jsonl(f):
                if row.get("quantity") == "stage_kl":
                    per_stage.setdefault(int(row["stage"]), []).append(float(row["value"]))
        if not per_stage:
            continue
        pts = [(st, float(np.mean(vs))) for st, vs in sorted(per_stage.items())]
        series[tag] = pts
        for st, v in pts:
            rows.append([tag, st, f"{v:.8f}"])
    _write_csv(out_dir / "stage_kl.csv", ["method", "stage", "kl_mean"], rows)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for i, (tag, pts) in enumerate(sorted(series.items())):
        ax.plot([s for s, _ in pts], [v for _, v in pts], marker="o", ms=4,
                color=_color(i), label=tag)
    ax.set_xlabel("stage")
    ax.set_ylabel("sequence KL to pre-stage policy (nats)")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "stage_kl.png", dpi=150)
    plt.close(fig)


def build_report(run_dir: Path, out_dir: Path | None = None) -> Path:
    """Render the full bundle; returns the directory holding it."""
    run_dir = Path(run_dir)
    record = _require(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    scatter_summary(run_dir, out)
    loss_curves(run_dir, out)
    per_task_deltas(run_dir, out)
    per_task_table(run_dir, out)
    stage_kl_figure(run_dir, out)
    manifest = {
        "source": str(run_dir),
        "config_hash": record["config_hash"],
        "content_hash": record["content_hash"],
        "files": sorted(p.name for p in out.glob("*") if p.name != "manifest.json"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out
