"""Indexing accuracy, Hits@k, continual-learning summaries and forgetting events."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


def indexing_accuracy(predictions: Sequence, gold: Sequence) -> float:
    """Fraction of top-1 predictions that equal the gold docid."""
    if len(predictions) != len(gold):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(gold)} gold")
    if not gold:
        return 0.0
    return sum(p == g for p, g in zip(predictions, gold)) / len(gold)


def hits_at_k(ranked: Sequence[Sequence], gold: Sequence, k: int) -> float:
    """Fraction of queries whose gold docid is among the first k entries.

    Entries of ``ranked`` may be bare docids or (docid, score) pairs.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ranked) != len(gold):
        raise ValueError(f"length mismatch: {len(ranked)} rankings vs {len(gold)} gold")
    if not gold:
        return 0.0
    hit = 0
    for r, g in zip(ranked, gold):
        top = [e[0] if isinstance(e, tuple) and len(e) == 2 and isinstance(e[1], float) else e
               for e in list(r)[:k]]
        hit += g in top
    return hit / len(gold)


class PerfMatrix:
    """Lower-triangular grid P[n][o]: metric on corpus o after training through corpus n."""

    def __init__(self, n_phases: int, name: str = ""):
        self.name = name
        self.rows: list[list[float | None]] = [[None] * (n + 1) for n in range(n_phases)]

    @property
    def n_phases(self) -> int:
        return len(self.rows)

    def set(self, n: int, o: int, value: float) -> None:
        if not 0 <= o <= n < self.n_phases:
            raise IndexError(f"P[{n}][{o}] is outside the lower triangle")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"performance value {value} outside [0, 1]")
        self.rows[n][o] = float(value)

    def get(self, n: int, o: int) -> float:
        if not 0 <= o <= n < self.n_phases:
            raise IndexError(f"P[{n}][{o}] is undefined")
        v = self.rows[n][o]
        if v is None:
            raise ValueError(f"P[{n}][{o}] not filled yet")
        return v

    def row_filled(self, n: int) -> bool:
        return all(v is not None for v in self.rows[n])

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], name: str = "") -> "PerfMatrix":
        pm = cls(len(rows), name)
        for n, row in enumerate(rows):
            if len(row) != n + 1:
                raise ValueError(f"row {n} must have {n + 1} entries")
            for o, v in enumerate(row):
                pm.set(n, o, v)
        return pm


@dataclass
class ClSummary:
    n: int
    A: float
    F: float | None
    LA: float | None


def cl_summary(P: PerfMatrix, n: int) -> ClSummary:
    """Average performance, forgetting and learning accuracy after phase n.

    Forgetting takes, for each old corpus o, the largest drop from any
    earlier row where P[.][o] is defined (rows o..n-1). F and LA are None at n=0.
    """
    if not 0 <= n < P.n_phases:
        raise IndexError(f"phase {n} outside matrix with {P.n_phases} rows")
    A = sum(P.get(n, o) for o in range(n + 1)) / (n + 1)
    if n == 0:
        return ClSummary(0, A, None, None)
    F = sum(max(P.get(j, o) - P.get(n, o) for j in range(o, n)) for o in range(n)) / n
    LA = sum(P.get(o, o) for o in range(1, n + 1)) / n
    return ClSummary(n, A, F, LA)


class ForgettingLog:
    """Per-document correct/incorrect history over evaluation checkpoints."""

    def __init__(self, n_docs: int | None = None):
        self.n_docs = n_docs
        self.checkpoints: list[np.ndarray] = []
        self.steps: list[int] = []

    def record(self, correct: Sequence[bool], step: int | None = None) -> None:
        bits = np.asarray(correct, dtype=bool)
        if self.n_docs is None:
            self.n_docs = len(bits)
        if len(bits) != self.n_docs:
            raise ValueError(f"checkpoint has {len(bits)} documents, expected {self.n_docs}")
        self.checkpoints.append(bits)
        self.steps.append(len(self.steps) if step is None else step)

    @property
    def histories(self) -> np.ndarray:
        """(n_docs, n_checkpoints) boolean matrix."""
        if not self.checkpoints:
            return np.zeros((self.n_docs or 0, 0), dtype=bool)
        return np.stack(self.checkpoints, axis=1)


@dataclass
class ForgettingStats:
    counts: np.ndarray  # per document
    histogram: np.ndarray  # H[j] = fraction of documents with <= j events

    @property
    def zero_event_fraction(self) -> float:
        return float(self.histogram[0]) if self.histogram.size else 0.0


def forgetting_events(log) -> ForgettingStats:
    """Count correct -> incorrect transitions per document."""
    if isinstance(log, ForgettingLog):
        hist = log.histories
    else:
        rows = [list(r) for r in log]
        if not rows:
            raise ValueError("no histories")
        if len({len(r) for r in rows}) != 1:
            raise ValueError("ragged histories: every document needs the same number of checkpoints")
        hist = np.asarray(rows, dtype=bool)
    if hist.size == 0:
        raise ValueError("empty histories")
    counts = (hist[:, :-1] & ~hist[:, 1:]).sum(axis=1)
    top = int(counts.max())
    histogram = np.array([(counts <= j).mean() for j in range(top + 1)])
    return ForgettingStats(counts, histogram)


# ----------------------------------------------------------------------------
# CSV export
# ----------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def perf_rows(matrices: dict[str, PerfMatrix]) -> list[tuple]:
    rows = []
    for metric, P in matrices.items():
        for n in range(P.n_phases):
            for o in range(n + 1):
                if P.rows[n][o] is not None:
                    rows.append((n, o, metric, P.rows[n][o]))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return rows


def summary_rows(matrices: dict[str, PerfMatrix]) -> list[tuple]:
    rows = []
    for metric, P in matrices.items():
        for n in range(P.n_phases):
            if P.row_filled(n):
                s = cl_summary(P, n)
                rows.append((n, s.A, s.F, s.LA, metric))
    rows.sort(key=lambda r: (r[0], r[4]))
    return rows


def write_perf_csv(path, matrices: dict[str, PerfMatrix]) -> None:
    write_csv(path, ("phase", "eval_corpus", "metric", "value"), perf_rows(matrices))


def write_summary_csv(path, matrices: dict[str, PerfMatrix]) -> None:
    write_csv(path, ("phase", "A", "F", "LA", "metric_name"), summary_rows(matrices))


def write_histogram_csv(path, stats: ForgettingStats) -> None:
    write_csv(path, ("events_leq", "fraction"), [(j, float(h)) for j, h in enumerate(stats.histogram)])


def read_perf_csv(path) -> dict[str, PerfMatrix]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    n_phases = 1 + max((int(r["phase"]) for r in rows), default=-1)
    out: dict[str, PerfMatrix] = {}
    for r in rows:
        P = out.setdefault(r["metric"], PerfMatrix(n_phases, r["metric"]))
        P.set(int(r["phase"]), int(r["eval_corpus"]), float(r["value"]))
    return out
