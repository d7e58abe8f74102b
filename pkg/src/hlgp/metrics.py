"""Continual-learning scoreboard.

``AccuracyMatrix`` holds A[i][j]: accuracy in percent on task j's test set
after training task i (lower-triangular). FAA averages the final row, CAA
averages the per-stage row means, and AF is max-over-history forgetting of
each old task relative to the final row. Negative forgetting is reported
as-is.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

from .errors import ContractError


class AccuracyMatrix:
    def __init__(self, rows: Optional[list[list[float]]] = None):
        self.rows: list[list[float]] = []
        for row in rows or []:
            self.add_row(row)

    @property
    def num_tasks(self) -> int:
        return len(self.rows)

    def add_row(self, row: Sequence[float]) -> None:
        row = [float(x) for x in row]
        if len(row) != len(self.rows) + 1:
            raise ContractError(
                f"row {len(self.rows)} must have {len(self.rows) + 1} entries, "
                f"got {len(row)}"
            )
        if any(not (0.0 <= x <= 100.0) for x in row):
            raise ContractError(f"accuracy outside [0, 100]: {row}")
        self.rows.append(row)

    def prefix(self, tasks: int) -> "AccuracyMatrix":
        return AccuracyMatrix(self.rows[:tasks])

    def to_lists(self) -> list[list[float]]:
        return [list(r) for r in self.rows]


def _require(a: AccuracyMatrix, min_tasks: int = 1) -> None:
    if a.num_tasks < min_tasks:
        raise ContractError(
            f"matrix has {a.num_tasks} completed tasks, need >= {min_tasks}"
        )


def faa(a: AccuracyMatrix) -> float:
    """Final average accuracy: mean of the last row."""
    _require(a)
    last = a.rows[-1]
    return sum(last) / len(last)


def caa(a: AccuracyMatrix) -> float:
    """Continual average accuracy: mean over stages of each stage's mean."""
    _require(a)
    return sum(sum(r) / len(r) for r in a.rows) / a.num_tasks


def af(a: AccuracyMatrix) -> float:
    """Average forgetting over tasks 0..T-2: best historical accuracy
    before the final stage minus final accuracy."""
    _require(a, min_tasks=2)
    t = a.num_tasks
    total = 0.0
    for j in range(t - 1):
        best = max(a.rows[i][j] for i in range(j, t - 1))
        total += best - a.rows[t - 1][j]
    return total / (t - 1)


def matrix_from_log(log: Iterable, num_tasks: int) -> AccuracyMatrix:
    """Recompute the matrix from per-sample prediction records.

    Each record is (after_task, eval_task, predicted_label, true_label).
    Serves as the brute-force cross-check of the accumulated matrix.
    """
    hits: dict[tuple[int, int], int] = {}
    counts: dict[tuple[int, int], int] = {}
    for after_task, eval_task, predicted, label in log:
        key = (int(after_task), int(eval_task))
        counts[key] = counts.get(key, 0) + 1
        hits[key] = hits.get(key, 0) + int(predicted == label)
    out = AccuracyMatrix()
    for i in range(num_tasks):
        row = []
        for j in range(i + 1):
            if (i, j) not in counts:
                raise ContractError(f"log has no records for cell ({i}, {j})")
            row.append(100.0 * hits[(i, j)] / counts[(i, j)])
        out.add_row(row)
    return out


METRICS_CSV_HEADER = "task,faa,caa,af"


def metrics_csv(a: AccuracyMatrix) -> str:
    """One row per completed task, metrics over the prefix up to that task.
    AF is blank on the first row (undefined for a single task)."""
    _require(a)
    lines = [METRICS_CSV_HEADER]
    for t in range(1, a.num_tasks + 1):
        p = a.prefix(t)
        af_cell = "" if t == 1 else f"{af(p):.6f}"
        lines.append(f"{t - 1},{faa(p):.6f},{caa(p):.6f},{af_cell}")
    return "\n".join(lines) + "\n"
