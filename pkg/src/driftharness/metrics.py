"""Evaluation metrics over run ledgers.

All functions are pure and operate on plain mappings so they can be fed
either from in-memory ledgers or from ledgers reloaded off disk. Score
series are maps ``t -> Macro-F1``; backward scores are maps
``(t, lag) -> Macro-F1``. Gaps are simply absent keys, so every aggregate
is taken over defined entries only.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

RETENTION_LAGS = (1, 3, 5, 6)


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion counts with class 1 (vulnerable) as positive."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_pairs(cls, labels: Sequence[int], predictions: Sequence[int]) -> "ConfusionCounts":
        if len(labels) != len(predictions):
            raise ValueError("labels and predictions must have equal length")
        tp = fp = tn = fn = 0
        for y, p in zip(labels, predictions):
            if y == 1 and p == 1:
                tp += 1
            elif y == 0 and p == 1:
                fp += 1
            elif y == 0 and p == 0:
                tn += 1
            else:
                fn += 1
        return cls(tp, fp, tn, fn)


def _f1(tp: int, fp: int, fn: int) -> float:
    # Convention: precision/recall/F1 are 0 whenever their denominator is 0.
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def macro_f1(labels: Sequence[int], predictions: Sequence[int]) -> float:
    """Unweighted mean of the per-class F1 scores of a binary problem."""
    if not labels:
        raise ValueError("macro_f1 requires a nonempty sample")
    counts = ConfusionCounts.from_pairs(labels, predictions)
    f1_pos = _f1(counts.tp, counts.fp, counts.fn)
    f1_neg = _f1(counts.tn, counts.fn, counts.fp)
    return (f1_pos + f1_neg) / 2.0


def aggregate_mean(scores: Mapping[int, float] | Sequence[float]) -> tuple[float, int]:
    """Arithmetic mean over defined entries; returns ``(mean, n)``."""
    values = list(scores.values()) if isinstance(scores, Mapping) else list(scores)
    if not values:
        raise ValueError("cannot aggregate an all-gap series")
    return math.fsum(values) / len(values), len(values)


def backward_retention(backward_scores: Mapping[tuple[int, int], float], lag: int) -> float:
    """Mean backward Macro-F1 at one lag over every step where it is defined."""
    values = [f1 for (t, k), f1 in backward_scores.items() if k == lag]
    if not values:
        raise ValueError(f"no backward entries at lag {lag}")
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class RetentionCurve:
    """Mean backward retention per lag, keyed by lag in {1, 3, 5, 6}."""

    points: Mapping[int, float]

    def __post_init__(self):
        bad = set(self.points) - set(RETENTION_LAGS)
        if bad:
            raise ValueError(f"unexpected lags {sorted(bad)}")
        for lag, value in self.points.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"retention at lag {lag} outside [0, 1]: {value}")


def retention_curve(backward_scores: Mapping[tuple[int, int], float],
                    lags: Sequence[int] = RETENTION_LAGS) -> RetentionCurve:
    return RetentionCurve({lag: backward_retention(backward_scores, lag) for lag in lags})


def decay_rate(curve: RetentionCurve) -> float:
    """Relative retention drop from lag 1 to lag 6; negative means improvement."""
    if 1 not in curve.points or 6 not in curve.points:
        raise ValueError("decay_rate requires lags 1 and 6")
    first = curve.points[1]
    if first == 0.0:
        raise ValueError("decay_rate undefined when retention at lag 1 is 0")
    return (first - curve.points[6]) / first

def retention_auc(curve: RetentionCurve) -> float:
    """Normalized area under the retention curve over lags 1..6.

    Uses uniform weighting of the four measured lags (their arithmetic mean),
    so a constant curve maps to its constant value.
    """
    missing = [lag for lag in RETENTION_LAGS if lag not in curve.points]
    if missing:
        raise ValueError(f"retention_auc requires lags {RETENTION_LAGS}, missing {missing}")
    return math.fsum(curve.points[lag] for lag in RETENTION_LAGS) / len(RETENTION_LAGS)


def stability_index(scores: Mapping[int, float] | Sequence[float]) -> float:
    """Coefficient of variation (sample sd / mean) of a score series."""
    values = list(scores.values()) if isinstance(scores, Mapping) else list(scores)
    if len(values) < 2:
        raise ValueError("stability_index requires at least 2 entries")
    mean = math.fsum(values) / len(values)
    if mean <= 0.0:
        raise ValueError("stability_index undefined for non-positive mean")
    if all(v == values[0] for v in values):
        return 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return math.sqrt(var) / mean


def win_rate(forward_by_method: Mapping[str, Mapping[int, float]],
             mode: str = "shared_argmax") -> dict[str, float]:
    """Fraction of common windows each method leads.

    ``shared_argmax`` (default): in each common window every method tied for
    the maximum earns ``1 / #leaders``. ``pairwise``: mean over opponents of
    the fraction of windows won head-to-head, ties counting half.
    """
    if len(forward_by_method) < 2:
        raise ValueError("win_rate requires at least 2 methods")
    common: set[int] | None = None
    for series in forward_by_method.values():
        common = set(series) if common is None else common & set(series)
    if not common:
        raise ValueError("no common windows across methods")
    windows = sorted(common)
    methods = list(forward_by_method)

    if mode == "shared_argmax":
        earned = {m: 0.0 for m in methods}
        for t in windows:
            window_scores = {m: forward_by_method[m][t] for m in methods}
            best = max(window_scores.values())
            leaders = [m for m, v in window_scores.items() if v == best]
            for m in leaders:
                earned[m] += 1.0 / len(leaders)
        return {m: earned[m] / len(windows) for m in methods}
    if mode == "pairwise":
        rates = {}
        for m in methods:
            opponent_rates = []
            for other in methods:
                if other == m:
                    continue
                wins = 0.0
                for t in windows:
                    a, b = forward_by_method[m][t], forward_by_method[other][t]
                    wins += 1.0 if a > b else 0.5 if a == b else 0.0
                opponent_rates.append(wins / len(windows))
            rates[m] = math.fsum(opponent_rates) / len(opponent_rates)
        return rates
    raise ValueError(f"unknown win_rate mode {mode!r}")


@dataclass(frozen=True)
class EfficiencyReport:
    f1_per_min: float
    speedup: float
    efficiency_pct: float


def efficiency_from_means(mean_f1: float, mean_minutes: float,
                          baseline_f1: float, baseline_minutes: float) -> EfficiencyReport:
    """Efficiency triple from per-window means of F1 and training minutes."""
    if mean_minutes <= 0.0 or baseline_minutes <= 0.0:
        raise ValueError("training time must be positive")
    f1_per_min = mean_f1 / mean_minutes
    baseline_per_min = baseline_f1 / baseline_minutes
    return EfficiencyReport(
        f1_per_min=f1_per_min,
        speedup=baseline_minutes / mean_minutes,
        efficiency_pct=100.0 * f1_per_min / baseline_per_min,
    )


def efficiency_metrics(forward_scores: Mapping[int, float],
                       wall_times_s: Mapping[int, float],
                       baseline_forward: Mapping[int, float],
                       baseline_times_s: Mapping[int, float]) -> EfficiencyReport:
    """Efficiency triple of a method ledger against a baseline ledger."""
    mean_f1, _ = aggregate_mean(forward_scores)
    base_f1, _ = aggregate_mean(baseline_forward)
    mean_min, _ = aggregate_mean({t: s / 60.0 for t, s in wall_times_s.items()})
    base_min, _ = aggregate_mean({t: s / 60.0 for t, s in baseline_times_s.items()})
    return efficiency_from_means(mean_f1, mean_min, base_f1, base_min)


@dataclass(frozen=True)
class DeltaTable:
    windows: tuple[int, ...]
    baseline: Mapping[int, float]
    deltas: Mapping[str, Mapping[int, float]]  # method -> t -> F1 delta
    hard_windows: frozenset[int]  # bottom quartile of baseline F1


def delta_table(forward_by_method: Mapping[str, Mapping[int, float]],
                baseline_name: str) -> DeltaTable:
    """Per-window F1 improvement of each method over the named baseline."""
    if baseline_name not in forward_by_method:
        raise ValueError(f"baseline {baseline_name!r} not among methods")
    baseline = forward_by_method[baseline_name]
    common: set[int] = set(baseline)
    for series in forward_by_method.values():
        common &= set(series)
    if not common:
        raise ValueError("no common windows across methods")
    windows = tuple(sorted(common))
    base_values = np.array([baseline[t] for t in windows])
    hard_cut = float(np.quantile(base_values, 0.25))
    deltas = {
        method: {t: series[t] - baseline[t] for t in windows}
        for method, series in forward_by_method.items()
        if method != baseline_name
    }
    return DeltaTable(
        windows=windows,
        baseline={t: baseline[t] for t in windows},
        deltas=deltas,
        hard_windows=frozenset(t for t in windows if baseline[t] <= hard_cut),
    )
