"""Continual-learning metrics: accuracy matrices, backward transfer, deltas.

The accuracy matrix a[i][j] holds task i's eval accuracy (percent) measured
at the checkpoint after stage j; only i <= j is defined for sequential runs.
CSV layout mirrors the familiar lower-triangular table: one row per stage,
one column per task, blank upper triangle.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .policy import Arch, greedy_decode
from .tasks import TaskDataset, TaskSpec, Vocab, rule_score


class MetricsError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    """values[i, j] = accuracy of task i after stage j; NaN where undefined."""

    task_labels: list[str]
    values: np.ndarray  # (n_tasks, n_stages) float64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[0] != len(self.task_labels):
            raise MetricsError("one label per task row required")

    @property
    def n_tasks(self) -> int:
        return self.values.shape[0]

    @property
    def n_stages(self) -> int:
        return self.values.shape[1]

    @classmethod
    def empty(cls, task_labels, n_stages: int | None = None) -> "AccuracyMatrix":
        n = len(task_labels)
        return cls(list(task_labels), np.full((n, n_stages if n_stages else n), np.nan))

    def set(self, task: int, stage: int, value: float) -> None:
        if not (0.0 <= value <= 100.0):
            raise MetricsError(f"accuracy {value} outside [0, 100]")
        self.values[task, stage] = value

    def final_column(self) -> np.ndarray:
        col = self.values[:, -1]
        if np.isnan(col).any():
            raise MetricsError("final column incomplete")
        return col


def bwt(matrix: AccuracyMatrix) -> float | None:
    """Mean final-minus-diagonal accuracy over all but the last task.

    Returns None when backward transfer is undefined: a single-task run or a
    single-checkpoint (jointly trained) matrix has no earlier diagonal to
    compare against.
    """
    n, s = matrix.n_tasks, matrix.n_stages
    if n < 2 or s != n:
        return None
    final = matrix.final_column()
    diag = np.array([matrix.values[i, i] for i in range(n - 1)])
    if np.isnan(diag).any():
        raise MetricsError("diagonal incomplete")
    return float(np.mean(final[: n - 1] - diag))


def overall_acc(matrix: AccuracyMatrix) -> float:
    return float(np.mean(matrix.final_column()))


def per_task_delta(a: AccuracyMatrix, b: AccuracyMatrix) -> np.ndarray:
    """Final-checkpoint accuracy gap per task between two method runs."""
    if a.task_labels != b.task_labels:
        raise MetricsError(f"task labels differ: {a.task_labels} vs {b.task_labels}")
    return a.final_column() - b.final_column()


def evaluate_task(arch: Arch, values: np.ndarray, spec: TaskSpec, vocab: Vocab,
                  eval_set, max_new_tokens: int) -> float:
    """Mean rule score (x100) of greedy decodes over a task's eval set."""
    if not eval_set:
        raise MetricsError(f"empty eval set for task {spec.task_id}")
    prompts = [p for p, _ in eval_set]
    responses = greedy_decode(arch, values, prompts, max_new_tokens)
    scores = [rule_score(spec, vocab, p, r) for p, r in zip(prompts, responses)]
    return float(np.mean(scores) * 100.0)


# ---------------------------------------------------------------- CSV io

def matrix_to_csv(matrix: AccuracyMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage"] + list(matrix.task_labels))
    for j in range(matrix.n_stages):
        row: list[str] = [str(j + 1)]
        for i in range(matrix.n_tasks):
            v = matrix.values[i, j]
            row.append("" if np.isnan(v) else repr(float(v)))
        w.writerow(row)
    return buf.getvalue()


def save_matrix_csv(path: Path | str, matrix: AccuracyMatrix) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(matrix_to_csv(matrix))


def load_matrix_csv(path: Path | str) -> AccuracyMatrix:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][0] != "stage":
        raise MetricsError(f"{path}: not an accuracy matrix csv")
    labels = rows[0][1:]
    n_stages = len(rows) - 1
    values = np.full((len(labels), n_stages), np.nan)
    for j, row in enumerate(rows[1:]):
        for i, cell in enumerate(row[1:]):
            if cell.strip():
                values[i, j] = float(cell)
    return AccuracyMatrix(labels, values)
