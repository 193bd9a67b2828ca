"""Greedy orthogonalization selection of estimable augmented-state entries."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


def cutoff_value(w_bar: float, v_bar: float) -> float:
    """Residual-norm cutoff ``3 sqrt(w^2 + v^2)`` from process/measurement noise levels."""
    if w_bar < 0 or v_bar < 0:
        raise ValueError("noise levels must be non-negative")
    return 3.0 * float(np.hypot(w_bar, v_bar))


@dataclass(frozen=True)
class SelectionResult:
    selected: tuple[int, ...]            # forced first, then greedy order
    residual_norms: tuple[float, ...]    # residual norm of each greedy pick
    alpha: float
    forced: tuple[int, ...]
    n_columns: int
    stop_norm: float = 0.0               # largest residual when the loop stopped
    labels: tuple[str, ...] = ()

    @property
    def unselected(self) -> tuple[int, ...]:
        chosen = set(self.selected)
        return tuple(j for j in range(self.n_columns) if j not in chosen)

    @property
    def greedy(self) -> tuple[int, ...]:
        return self.selected[len(self.forced):]

    def names(self, which: str = "selected") -> list[str]:
        labels = self.labels or tuple(str(j) for j in range(self.n_columns))
        return [labels[j] for j in getattr(self, which)]

    def to_dict(self) -> dict:
        d = {"selected": list(self.selected), "residual_norms": list(self.residual_norms),
             "alpha": self.alpha, "forced": list(self.forced), "unselected": list(self.unselected),
             "stop_norm": self.stop_norm, "n_columns": self.n_columns}
        if self.labels:
            d["selected_names"] = self.names()
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


def _deflate(Q: np.ndarray, c: np.ndarray) -> np.ndarray:
    # two passes of classical Gram-Schmidt keep the residual orthogonal to Q
    for _ in range(2):
        c = c - Q @ (Q.T @ c)
    return c


def orthogonalize_select(S, alpha: float, forced: Sequence[int] = (),
                         max_select: Optional[int] = None, labels: Sequence[str] = ()) -> SelectionResult:
    """Pick columns of ``S`` one at a time by largest residual norm.

    Forced columns seed the basis.  Each round projects the remaining columns
    onto the orthogonal complement of the chosen ones and takes the largest
    residual; the loop stops once that residual is ``<= alpha``.  Equal
    residual norms go to the lowest column index.
    """
    S = np.asarray(S, float)
    if S.ndim != 2:
        raise ValueError("S must be a matrix")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    m, n = S.shape
    forced = tuple(int(j) for j in forced)
    if len(set(forced)) != len(forced):
        raise ValueError("duplicate forced indices")
    if any(j < 0 or j >= n for j in forced):
        raise ValueError("forced index out of range")

    Q = np.zeros((m, 0))
    scale = np.linalg.norm(S) or 1.0
    for j in forced:
        r = _deflate(Q, S[:, j])
        nr = np.linalg.norm(r)
        if nr > 1e-13 * scale:
            Q = np.column_stack([Q, r / nr])

    remaining = [j for j in range(n) if j not in set(forced)]
    selected = list(forced)
    norms: list[float] = []
    stop = 0.0
    limit = len(remaining) if max_select is None else min(max_select, len(remaining))
    while remaining and len(norms) < limit:
        R = S[:, remaining]
        R = R - Q @ (Q.T @ R)
        R = R - Q @ (Q.T @ R)
        res = np.linalg.norm(R, axis=0)
        k = int(np.argmax(res))          # first maximum -> lowest index
        stop = float(res[k])
        if res[k] <= alpha or res[k] <= 1e-13 * scale:
            break
        j = remaining.pop(k)
        selected.append(j)
        norms.append(stop)
        Q = np.column_stack([Q, R[:, k] / res[k]])
    else:
        if remaining:
            R = S[:, remaining] - Q @ (Q.T @ S[:, remaining])
            stop = float(np.linalg.norm(R, axis=0).max())
        else:
            stop = 0.0
    return SelectionResult(tuple(selected), tuple(norms), float(alpha), forced, n, stop, tuple(labels))


@dataclass
class SelectionTally:
    names: tuple[str, ...]
    counts: np.ndarray
    total: int
    order: tuple[str, ...] = field(default=())

    def as_dict(self) -> dict[str, int]:
        return {n: int(c) for n, c in zip(self.names, self.counts)}

    def to_csv(self, path) -> Path:
        path = Path(path)
        d = self.as_dict()
        order = self.order or self.names
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variable", "count", "total"])
            for name in order:
                w.writerow([name, d[name], self.total])
        return path


def tally_selection(results: Sequence[SelectionResult], names: Sequence[str] = (),
                    order: Sequence[str] = ()) -> SelectionTally:
    """Count, per column, how many sampling times selected it."""
    if not results:
        raise ValueError("no selection results to tally")
    n = results[0].n_columns
    if any(r.n_columns != n for r in results):
        raise ValueError("selection results have inconsistent dimensions")
    names = tuple(names) or results[0].labels or tuple(str(j) for j in range(n))
    counts = np.zeros(n, dtype=int)
    for r in results:
        counts[list(r.selected)] += 1
    return SelectionTally(names, counts, len(results), tuple(order))
