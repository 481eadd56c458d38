"""Synthetic corpora for exercising the harness end to end.

Generates labeled C-like function bodies whose token distribution drifts
gradually across calendar windows while the positive-class share oscillates,
the regime the replay strategies are built for. Also provides a
near-duplicate injector for testing the dedup pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from .corpus import DateRange, Instance
from .strategies import step_seed


@dataclass(frozen=True)
class DriftSpec:
    """Knobs of the generated stream."""

    n_windows: int = 20
    per_window: int = 110
    start: date = date(2020, 1, 1)
    granularity_months: int = 1
    tokens_per_snippet: int = 28
    signal_strength: float = 0.55  # share of tokens drawn from class vocab
    label_noise: float = 0.0  # probability of flipping the recorded label
    era_length: int = 5  # windows per vocabulary era; drift mixes neighbors
    base_prevalence: float = 0.45
    imbalance_amplitude: float = 0.22
    imbalance_period: float = 6.0


def _month_start(start: date, month_offset: int) -> date:
    idx = start.year * 12 + (start.month - 1) + month_offset
    return date(idx // 12, idx % 12 + 1, 1)


def date_range_for(spec: DriftSpec) -> DateRange:
    end_next = _month_start(spec.start, spec.n_windows * spec.granularity_months)
    return DateRange(spec.start, end_next - timedelta(days=1))


def _class_vocab(era: int, label: int) -> list[str]:
    stem = "risky" if label == 1 else "guarded"
    return [f"{stem}_e{era}_op{i}" for i in range(12)]


_STABLE_VULN = [f"unchecked_call{i}" for i in range(8)]
_STABLE_FIXED = [f"validated_path{i}" for i in range(8)]
_NOISE = [f"helper{i}" for i in range(60)]


def _snippet(rng: np.random.Generator, spec: DriftSpec, window: int,
             label: int, uid: str) -> str:
    era = window // spec.era_length
    into = (window % spec.era_length) / spec.era_length
    stable = _STABLE_VULN if label == 1 else _STABLE_FIXED
    tokens = []
    for _ in range(spec.tokens_per_snippet):
        if rng.random() < spec.signal_strength:
            pool_era = era + 1 if rng.random() < into else era
            pool = stable if rng.random() < 0.4 else _class_vocab(pool_era, label)
            tokens.append(pool[rng.integers(len(pool))])
        else:
            tokens.append(_NOISE[rng.integers(len(_NOISE))])
    body = "; ".join(f"{tok}(x)" for tok in tokens)
    return f"int fn_{uid}(int x) {{ {body}; return x; }}"


def generate_drift_corpus(spec: DriftSpec, seed: int) -> list[Instance]:
    """One instance stream with gradual drift and oscillating class balance."""
    instances: list[Instance] = []
    for w in range(spec.n_windows):
        rng = np.random.default_rng(step_seed(seed, w, stream=9))
        prevalence = spec.base_prevalence + spec.imbalance_amplitude * math.sin(
            2.0 * math.pi * w / spec.imbalance_period)
        w_start = _month_start(spec.start, w * spec.granularity_months)
        w_end = _month_start(spec.start, (w + 1) * spec.granularity_months) - timedelta(days=1)
        span = (w_end - w_start).days
        for i in range(spec.per_window):
            label = int(rng.random() < prevalence)
            uid = f"s{seed}w{w:02d}i{i:03d}"
            code = _snippet(rng, spec, w, label, uid)
            if spec.label_noise and rng.random() < spec.label_noise:
                label = 1 - label
            instances.append(Instance(
                id=uid,
                code=code,
                label=label,
                disclosure_date=w_start + timedelta(days=int(rng.integers(span + 1))),
                cve_id=None,
                language="c",
            ))
    return instances


def inject_near_duplicates(instances: list[Instance], fraction: float,
                           seed: int) -> tuple[list[Instance], int]:
    """Append whitespace/comment variants of random instances, dated later.

    The variants normalize to the same digest as their originals, so a
    correct dedup pass removes exactly the injected count.
    """
    rng = np.random.default_rng(seed)
    n_dup = int(len(instances) * fraction)
    picks = rng.choice(len(instances), size=n_dup, replace=False)
    out = list(instances)
    for j, pick in enumerate(picks):
        src = instances[int(pick)]
        variant_code = "  " + src.code.replace("; ", ";\n    ") + "  // backport\n"
        later = src.disclosure_date + timedelta(days=1)
        if later.month != src.disclosure_date.month:  # stay inside the corpus range
            later = src.disclosure_date
        out.append(Instance(
            id=f"{src.id}_dup{j}",
            code=variant_code,
            label=src.label,
            disclosure_date=later,
            cve_id=src.cve_id,
            language=src.language,
        ))
    return out, n_dup
