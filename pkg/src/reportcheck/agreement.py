"""Evaluator-agreement statistics: correlations, pairwise agreement,
Krippendorff's alpha (interval) and two-way random-effects ICC.

These validate judge scores against human scores and judges against each
other. All functions are pure; matrices are raters x items with None for
missing cells (alpha tolerates missing, ICC does not).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DegenerateInputError(ValueError):
    """Zero variance where the statistic needs some."""


class InsufficientOverlapError(ValueError):
    """Alpha needs at least one item rated by two or more raters."""


class MissingCellsError(ValueError):
    """ICC requires a complete matrix."""


class NoPairsError(ValueError):
    """No preference pairs left after exclusions."""


@dataclass(frozen=True)
class ScoreMatrix:
    """Raters x items; ``values[r][i]`` is a number or None (missing)."""

    raters: tuple[str, ...]
    items: tuple[str, ...]
    values: tuple[tuple[float | None, ...], ...]

    def __post_init__(self) -> None:
        if len(self.values) != len(self.raters):
            raise ValueError("one row per rater required")
        for row in self.values:
            if len(row) != len(self.items):
                raise ValueError("one column per item required")

    @classmethod
    def from_rows(cls, raters: Sequence[str], items: Sequence[str], rows: Sequence[Sequence[float | None]]) -> "ScoreMatrix":
        return cls(
            raters=tuple(raters),
            items=tuple(items),
            values=tuple(tuple(row) for row in rows),
        )

    def complete(self) -> bool:
        return all(v is not None for row in self.values for v in row)


@dataclass(frozen=True)
class PreferencePair:
    """judge/human preference over an ordered report pair: first|second|tie."""

    judge: str
    human: str
    task: str = ""

    def __post_init__(self) -> None:
        for side, value in (("judge", self.judge), ("human", self.human)):
            if value not in ("first", "second", "tie"):
                raise ValueError(f"{side} preference must be first|second|tie, got {value!r}")


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y):
        raise ValueError("vectors must have equal length")
    if len(x) < 2:
        raise DegenerateInputError("need at least 2 observations")
    ax = np.asarray(x, dtype=float)
    ay = np.asarray(y, dtype=float)
    dx = ax - ax.mean()
    dy = ay - ay.mean()
    sx = float(np.sqrt((dx * dx).sum()))
    sy = float(np.sqrt((dy * dy).sum()))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError("zero variance input")
    return float((dx * dy).sum() / (sx * sy))


def average_ranks(x: Sequence[float]) -> list[float]:
    """1-based ranks; ties share the mean of their rank positions."""
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        mean_rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    return pearson(average_ranks(x), average_ranks(y))


def pairwise_agreement(pairs: Sequence[PreferencePair]) -> float:
    """Share of pairs where the judge picked the human's preference.

    Pairs where the human is tied are excluded from the denominator; a judge
    tie on a non-tied human pair counts as disagreement.
    """
    scored = [p for p in pairs if p.human != "tie"]
    if not scored:
        raise NoPairsError("no pairs with a human preference")
    return sum(1 for p in scored if p.judge == p.human) / len(scored)


def krippendorff_alpha(matrix: ScoreMatrix, metric: str = "interval") -> float:
    """1 - D_observed/D_expected with squared-difference (interval) distance.

    Missing cells are tolerated: only items with >= 2 ratings contribute,
    and expected disagreement is over all pairable values.
    """
    if metric != "interval":
        raise ValueError(f"only the interval metric is implemented, got {metric!r}")
    columns: list[list[float]] = []
    for i in range(len(matrix.items)):
        ratings = [row[i] for row in matrix.values if row[i] is not None]
        if len(ratings) >= 2:
            columns.append([float(v) for v in ratings])
    if not columns:
        raise InsufficientOverlapError("no item is rated by two or more raters")

    n_pairable = sum(len(col) for col in columns)
    observed = 0.0
    for col in columns:
        arr = np.asarray(col)
        diffs = (arr[:, None] - arr[None, :]) ** 2
        observed += diffs.sum() / (len(col) - 1)
    observed /= n_pairable

    pooled = np.asarray([v for col in columns for v in col])
    expected = float(((pooled[:, None] - pooled[None, :]) ** 2).sum()) / (n_pairable * (n_pairable - 1))

    if observed == 0.0:
        return 1.0
    if expected == 0.0:
        raise DegenerateInputError("all pairable values identical yet disagreement observed")
    return 1.0 - observed / expected


def _anova_mean_squares(matrix: ScoreMatrix) -> tuple[float, float, float, int, int]:
    if not matrix.complete():
        raise MissingCellsError("ICC requires a complete matrix")
    data = np.asarray(matrix.values, dtype=float).T  # items x raters
    n_items, n_raters = data.shape
    if n_items < 2 or n_raters < 2:
        raise ValueError("ICC needs >= 2 items and >= 2 raters")
    grand = data.mean()
    item_means = data.mean(axis=1)
    rater_means = data.mean(axis=0)
    ss_items = n_raters * float(((item_means - grand) ** 2).sum())
    ss_raters = n_items * float(((rater_means - grand) ** 2).sum())
    ss_total = float(((data - grand) ** 2).sum())
    ss_error = ss_total - ss_items - ss_raters
    ms_items = ss_items / (n_items - 1)
    ms_raters = ss_raters / (n_raters - 1)
    ms_error = ss_error / ((n_items - 1) * (n_raters - 1))
    return ms_items, ms_raters, ms_error, n_items, n_raters


def icc(matrix: ScoreMatrix, form: str = "two_way_random_single") -> float:
    """ICC(2,1) / ICC(2,k): two-way random effects, absolute agreement."""
    ms_items, ms_raters, ms_error, n_items, n_raters = _anova_mean_squares(matrix)
    if ms_items == 0.0:
        raise DegenerateInputError("zero between-item variance")
    if form == "two_way_random_single":
        denominator = ms_items + (n_raters - 1) * ms_error + n_raters * (ms_raters - ms_error) / n_items
    elif form == "two_way_random_mean":
        denominator = ms_items + (ms_raters - ms_error) / n_items
    else:
        raise ValueError(f"unknown ICC form {form!r}")
    if denominator == 0.0:
        raise DegenerateInputError("degenerate variance decomposition")
    return float((ms_items - ms_error) / denominator)


def correlation_by_pooling(
    records: Sequence[tuple[str, float, float]],
    pooling: str = "global",
) -> tuple[float, float]:
    """(pearson, spearman) over (task, judge, human) triples.

    ``global`` pools every record; ``per-task`` averages per-task statistics
    over tasks with computable values.
    """
    if pooling == "global":
        judges = [r[1] for r in records]
        humans = [r[2] for r in records]
        return pearson(judges, humans), spearman(judges, humans)
    if pooling != "per-task":
        raise ValueError(f"pooling must be global or per-task, got {pooling!r}")
    by_task: dict[str, list[tuple[float, float]]] = {}
    for task, judge, human in records:
        by_task.setdefault(task, []).append((judge, human))
    pearsons: list[float] = []
    spearmans: list[float] = []
    for values in by_task.values():
        judges = [v[0] for v in values]
        humans = [v[1] for v in values]
        try:
            pearsons.append(pearson(judges, humans))
            spearmans.append(spearman(judges, humans))
        except DegenerateInputError:
            continue
    if not pearsons:
        raise DegenerateInputError("no task yields a defined correlation")
    return sum(pearsons) / len(pearsons), sum(spearmans) / len(spearmans)
