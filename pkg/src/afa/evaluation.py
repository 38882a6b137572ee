"""Routed inference, accuracy matrices and the Transfer / Average / Last metrics."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .adapters import AFFA, FROZEN, abfa
from .errors import ContractError, FormatError
from .linalg import DTYPE, cosine_matrix

CHUNK = 64  # fixed so results never depend on the worker count


def _check_ready(state) -> None:
    if state.trained_tasks < 1:
        raise ContractError("model has no trained tasks")


@torch.no_grad()
def route_batch(state, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Selector decision per sample: task id (or -1 for unseen) and best score."""
    _check_ready(state)
    return state.bank.select_batch(state.encode_image(x, FROZEN))


@torch.no_grad()
def _predict_chunk(state, x: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
    routes, _ = route_batch(state, x)
    preds = torch.empty(x.shape[0], dtype=torch.long)
    for r in torch.unique(routes).tolist():
        rows = (routes == r).nonzero(as_tuple=True)[0]
        path = AFFA if r < 0 else abfa(r)
        img = state.encode_image(x[rows], path)
        txt = state.encode_text(candidates, path)
        # argmax returns the first maximum; candidates are sorted, so ties go to the lowest id
        preds[rows] = candidates[cosine_matrix(img, txt).argmax(dim=1)]
    return preds


def predict_batch(state, x, candidate_classes, threads: int = 1) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE).reshape(-1, state.encoder.d_in)
    cands = torch.as_tensor(sorted(set(int(c) for c in candidate_classes)), dtype=torch.long)
    if cands.numel() == 0:
        raise ContractError("no candidate classes")
    _check_ready(state)
    chunks = [x[i : i + CHUNK] for i in range(0, x.shape[0], CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _predict_chunk(state, c, cands), chunks))
    else:
        parts = [_predict_chunk(state, c, cands) for c in chunks]
    return torch.cat(parts) if parts else torch.empty(0, dtype=torch.long)


def predict(state, x, candidate_classes) -> int:
    return int(predict_batch(state, x, candidate_classes)[0])


def evaluate_task(state, test_set, classes=None, threads: int = 1) -> float:
    """Accuracy on one task's test set, predicting among that task's classes."""
    if len(test_set) == 0:
        raise ContractError("empty test set")
    if classes is None:
        classes = state.classes_of(test_set.task_id)
    truth = state.class_offsets[test_set.task_id] + test_set.labels
    preds = predict_batch(state, test_set.x, classes, threads)
    return float((preds == truth).to(DTYPE).mean())


def evaluate_row(state, test_sets, threads: int = 1) -> list[float]:
    return [evaluate_task(state, ts, threads=threads) for ts in test_sets]


def selection_accuracy(state, test_set) -> float:
    if len(test_set) == 0:
        raise ContractError("empty test set")
    routes, _ = route_batch(state, test_set.x)
    return float((routes == test_set.task_id).to(DTYPE).mean())


def unseen_rate(state, test_set) -> float:
    routes, _ = route_batch(state, test_set.x)
    return float((routes < 0).to(DTYPE).mean())


@dataclass
class AccuracyMatrix:
    """``values[i, j]``: accuracy on task j after training through task i (NaN if not yet filled).

    Entries are fractions in [0, 1], or percentages in [0, 100] when ``percent`` is set
    (reported tables are usually in percent).
    """

    values: np.ndarray
    names: list[str]
    percent: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ContractError(f"accuracy matrix must be square, got {self.values.shape}")
        if len(self.names) != self.values.shape[0]:
            raise ContractError("one name per task required")
        top = 100.0 if self.percent else 1.0
        filled = self.values[~np.isnan(self.values)]
        if ((filled < 0) | (filled > top)).any():
            raise ContractError(f"accuracies must lie in [0, {top:g}]")

    @classmethod
    def empty(cls, names: Sequence[str]) -> "AccuracyMatrix":
        n = len(names)
        return cls(np.full((n, n), np.nan), list(names))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def complete(self) -> bool:
        return not np.isnan(self.values).any()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.names)
        for row in self.values:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        if not rows:
            raise FormatError("empty matrix CSV")
        names = [n.strip() for n in rows[0]]
        try:
            values = [[float(v) for v in r] for r in rows[1:]]
        except ValueError as exc:
            raise FormatError(f"non-numeric matrix entry: {exc}") from exc
        if len(values) != len(names) or any(len(r) != len(names) for r in values):
            raise FormatError(f"matrix CSV must be {len(names)}x{len(names)} below the header")
        values = np.array(values)
        # a fraction matrix never exceeds 1, so anything larger is a percentage table
        return cls(values, names, percent=bool((values > 1).any()))


@dataclass
class MetricsReport:
    names: list[str]
    transfer: list[Optional[float]]  # None for the first task
    average: list[float]
    last: list[float]
    transfer_mean: Optional[float]
    average_mean: float
    last_mean: float
    selection: Optional[list[list[Optional[float]]]] = None

    def to_dict(self) -> dict:
        out = {
            "tasks": self.names,
            "transfer": self.transfer,
            "average": self.average,
            "last": self.last,
            "overall": {
                "transfer": self.transfer_mean,
                "average": self.average_mean,
                "last": self.last_mean,
            },
        }
        if self.selection is not None:
            out["task_selection"] = self.selection
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *self.names, "overall"])
        fmt = lambda v: "" if v is None else f"{v:.6g}"
        w.writerow(["transfer", *map(fmt, self.transfer), fmt(self.transfer_mean)])
        w.writerow(["average", *map(fmt, self.average), fmt(self.average_mean)])
        w.writerow(["last", *map(fmt, self.last), fmt(self.last_mean)])
        return buf.getvalue()

    def to_table(self, digits: int = 1) -> str:
        head = ["", *self.names, "overall"]
        fmt = lambda v: "" if v is None else f"{v:.{digits}f}"
        body = [
            ["Transfer", *map(fmt, self.transfer), fmt(self.transfer_mean)],
            ["Average", *map(fmt, self.average), fmt(self.average_mean)],
            ["Last", *map(fmt, self.last), fmt(self.last_mean)],
        ]
        widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
        lines = ["  ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in [head, *body]]
        return "\n".join(lines) + "\n"


def metrics(matrix: AccuracyMatrix) -> MetricsReport:
    """Column statistics of a complete accuracy matrix.

    Transfer of task j is the mean of the rows before j was trained, Average
    the mean of the whole column, Last the final row. Task 1 has no Transfer
    and is left out of the overall Transfer mean.
    """
    if not matrix.complete:
        raise ContractError("metrics need a fully filled accuracy matrix")
    A = matrix.values
    T = matrix.T
    transfer = [None] + [float(A[:j, j].mean()) for j in range(1, T)]
    average = [float(A[:, j].mean()) for j in range(T)]
    last = [float(v) for v in A[T - 1]]
    t_vals = [v for v in transfer if v is not None]
    return MetricsReport(
        list(matrix.names),
        transfer,
        average,
        last,
        float(np.mean(t_vals)) if t_vals else None,
        float(np.mean(average)),
        float(np.mean(last)),
    )


def task_selection_table(state, test_sets) -> list[list[Optional[float]]]:
    """Entry (i, j), j <= i: share of task-j test samples routed to task j after task i.

    Prototypes never change once fitted, so the selector after task i is the
    first i+1 tasks of the final bank; one trained state yields every row.
    """
    if len(test_sets) > state.trained_tasks:
        raise ContractError(
            f"selection table over {len(test_sets)} tasks, but only {state.trained_tasks} trained"
        )
    with torch.no_grad():
        feats = [state.encode_image(ts.x, FROZEN) if len(ts) else None for ts in test_sets]
    table = []
    for i in range(len(test_sets)):
        bank = state.bank.prefix(i + 1)
        row: list[Optional[float]] = []
        for j, ts in enumerate(test_sets):
            if j > i:
                row.append(None)
                continue
            if feats[j] is None:
                raise ContractError(f"test set for task {j} is empty")
            routes, _ = bank.select_batch(feats[j])
            row.append(float((routes == ts.task_id).to(DTYPE).mean()))
        table.append(row)
    return table
