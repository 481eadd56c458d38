"""Paired statistical comparison: Wilcoxon signed-rank test and Cliff's delta."""

from __future__ import annotations

import logging
import math
from bisect import bisect_left, bisect_right
from collections.abc import Sequence
from dataclasses import dataclass

log = logging.getLogger(__name__)

# Largest sample for which the exact null distribution is computed; above it
# a normal approximation with tie-corrected variance and continuity
# correction takes over.
EXACT_MAX_N = 12


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W = min(sum of positive ranks, sum of negative ranks)
    p_value: float  # two-sided
    n_effective: int  # nonzero differences
    method: str  # "exact" or "normal"


def _midranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        rank = (i + j + 2) / 2.0  # average of 1-based positions i+1..j+1
        for pos in range(i, j + 1):
            ranks[order[pos]] = rank
        i = j + 1
    return ranks


def _exact_two_sided_p(doubled_ranks: list[int], doubled_w: int) -> float:
    # Null distribution of the doubled positive-rank sum via subset-sum
    # counting; two-sided p = P(min(W+, W-) <= observed) over all 2^n
    # equally likely sign assignments.
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in doubled_ranks:
        for s in range(total - r, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
    favorable = sum(c for s, c in enumerate(counts) if min(s, total - s) <= doubled_w)
    return favorable / (1 << len(doubled_ranks))


def wilcoxon_signed_rank(diffs: Sequence[float]) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Zero differences are excluded. For n <= 12 the p-value is exact
    (enumeration of the sign-assignment null); beyond that a normal
    approximation with tie-corrected variance and continuity correction is
    used. All differences zero yields p = 1.0 with a warning.
    """
    nonzero = [d for d in diffs if d != 0.0]
    if not nonzero:
        log.warning("all differences are zero; no evidence either way")
        return WilcoxonResult(statistic=0.0, p_value=1.0, n_effective=0, method="exact")

    n = len(nonzero)
    ranks = _midranks([abs(d) for d in nonzero])
    w_pos = math.fsum(r for d, r in zip(nonzero, ranks) if d > 0)
    w_neg = math.fsum(r for d, r in zip(nonzero, ranks) if d < 0)
    w = min(w_pos, w_neg)

    if n <= EXACT_MAX_N:
        doubled = [round(2 * r) for r in ranks]  # midranks are multiples of 1/2
        p = _exact_two_sided_p(doubled, round(2 * w))
        return WilcoxonResult(statistic=w, p_value=p, n_effective=n, method="exact")

    mean = n * (n + 1) / 4.0
    tie_term = 0.0
    seen: dict[float, int] = {}
    for r in ranks:
        seen[r] = seen.get(r, 0) + 1
    for size in seen.values():
        tie_term += size**3 - size
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term / 48.0
    z = (w - mean + 0.5) / math.sqrt(variance)
    p = min(1.0, 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0)))
    return WilcoxonResult(statistic=w, p_value=p, n_effective=n, method="normal")


def cliffs_delta(a: Sequence[float], b: Sequence[float]) -> float:
    """Cliff's delta: P(a > b) - P(a < b) over all cross pairs, in [-1, 1]."""
    if not a or not b:
        raise ValueError("cliffs_delta requires two nonempty samples")
    sorted_b = sorted(b)
    greater = less = 0
    for x in a:
        greater += bisect_left(sorted_b, x)  # b values strictly below x
        less += len(sorted_b) - bisect_right(sorted_b, x)  # strictly above
    return (greater - less) / (len(a) * len(b))
