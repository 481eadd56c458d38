"""Corpus handling: loading, normalization-hash dedup, calendar windowing.

A corpus is a line-delimited UTF-8 file, one JSON object per line, with
exactly the fields of :class:`Instance` (dates as ISO ``YYYY-MM-DD``).
Instances are deduplicated timeline-wide by a digest of their comment- and
whitespace-stripped code, keeping the earliest occurrence, and then tiled
into calendar windows of 1, 2, 3, 6 or 12 months.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from datetime import date, timedelta
from functools import lru_cache
from hashlib import sha256
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorpusParseError, CorpusValidationError

log = logging.getLogger(__name__)

VALID_GRANULARITIES = (1, 2, 3, 6, 12)

# Version pin for the canonicalization + digest scheme. Recorded in every run
# header: ledgers are only comparable when produced under the same pin.
NORMALIZATION_VERSION = "normalize-v1+sha256"

REQUIRED_FIELDS = ("id", "code", "label", "disclosure_date")
OPTIONAL_FIELDS = ("cve_id", "language")

_BLOCK_COMMENT = re.compile(r"/\*.*?\*/", re.DOTALL)
_LINE_COMMENT = re.compile(r"//[^\n]*")
_HASH_LINE = re.compile(r"(?m)^[ \t]*#[^\n]*$")
_WHITESPACE = re.compile(r"\s+")


@dataclass(frozen=True)
class Instance:
    """One timestamped, labeled function body.

    ``label`` is 1 for the still-vulnerable pre-fix version and 0 for the
    fixed post-fix version.
    """

    id: str
    code: str
    label: int
    disclosure_date: date
    cve_id: str | None = None
    language: str | None = None


@dataclass(frozen=True)
class DateRange:
    start: date
    end: date

    def __post_init__(self):
        if self.end < self.start:
            raise ConfigError(f"date range end {self.end} precedes start {self.start}")

    def contains(self, d: date) -> bool:
        return self.start <= d <= self.end


@dataclass(frozen=True)
class Window:
    """A calendar-bounded slice of the corpus (bounds inclusive)."""

    index: int  # ordinal, starting at 1
    start_date: date
    end_date: date
    instances: tuple[Instance, ...]
    partial: bool = False  # final window shorter than the granularity

    @property
    def is_empty(self) -> bool:
        return not self.instances

    @property
    def count(self) -> int:
        return len(self.instances)

    @property
    def prevalence(self) -> float:
        """Positive-class share; 0.0 for an empty window."""
        if not self.instances:
            return 0.0
        return sum(i.label for i in self.instances) / len(self.instances)


def _strip_once(text: str) -> str:
    stripped = _BLOCK_COMMENT.sub("", text)
    open_at = stripped.find("/*")
    if open_at != -1:
        log.warning("unterminated block comment, stripping to end of input")
        stripped = stripped[:open_at]
    stripped = _LINE_COMMENT.sub("", stripped)
    stripped = _HASH_LINE.sub("", stripped)
    return _WHITESPACE.sub("", stripped)


def normalize(code: str) -> str:
    """Canonicalize code: drop ``//``, ``/*...*/`` and full-line ``#``
    comments plus all whitespace.

    Stripping runs to a fixpoint so that comment markers formed by the
    removal of interleaved whitespace are also eliminated; the result is
    idempotent by construction.
    """
    prev = None
    text = code
    while text != prev:
        prev = text
        text = _strip_once(text)
    return text


@lru_cache(maxsize=65536)
def normalized_key(code: str) -> str:
    """Stable digest of the canonicalized code body (hex sha256)."""
    return sha256(normalize(code).encode("utf-8")).hexdigest()


def _parse_record(obj, line_number: int, seen_ids: set[str],
                  date_range: DateRange | None) -> Instance:
    if not isinstance(obj, dict):
        raise CorpusParseError("record is not an object", line_number)
    unknown = set(obj) - set(REQUIRED_FIELDS) - set(OPTIONAL_FIELDS)
    if unknown:
        raise CorpusValidationError(f"unknown fields {sorted(unknown)}", line_number)
    missing = [f for f in REQUIRED_FIELDS if f not in obj]
    if missing:
        raise CorpusValidationError(f"missing fields {missing}", line_number)

    rid = obj["id"]
    if not isinstance(rid, str) or not rid:
        raise CorpusValidationError("id must be a nonempty string", line_number)
    if rid in seen_ids:
        raise CorpusValidationError(f"duplicate id {rid!r}", line_number)
    code = obj["code"]
    if not isinstance(code, str):
        raise CorpusValidationError("code must be a string", line_number)
    label = obj["label"]
    if isinstance(label, bool) or label not in (0, 1):
        raise CorpusValidationError(f"label must be 0 or 1, got {label!r}", line_number)
    try:
        disclosed = date.fromisoformat(obj["disclosure_date"])
    except (TypeError, ValueError) as exc:
        raise CorpusParseError(f"bad disclosure_date: {exc}", line_number) from exc
    if date_range is not None and not date_range.contains(disclosed):
        raise CorpusValidationError(
            f"disclosure_date {disclosed} outside corpus range "
            f"[{date_range.start}, {date_range.end}]", line_number)
    for opt in OPTIONAL_FIELDS:
        val = obj.get(opt)
        if val is not None and not isinstance(val, str):
            raise CorpusValidationError(f"{opt} must be a string or null", line_number)

    seen_ids.add(rid)
    return Instance(id=rid, code=code, label=label, disclosure_date=disclosed,
                    cve_id=obj.get("cve_id"), language=obj.get("language"))


def load_corpus(path: str | Path, date_range: DateRange | None = None) -> list[Instance]:
    """Parse a line-delimited corpus file, rejecting invalid records.

    Raises :class:`CorpusParseError` / :class:`CorpusValidationError` with the
    offending line number. Blank lines are skipped.
    """
    instances: list[Instance] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusParseError(f"invalid JSON: {exc.msg}", line_number) from exc
            instances.append(_parse_record(obj, line_number, seen_ids, date_range))
    return instances


def write_corpus(path: str | Path, instances: list[Instance]) -> None:
    """Write instances in the line-delimited corpus format."""
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps({
                "id": inst.id,
                "code": inst.code,
                "label": inst.label,
                "disclosure_date": inst.disclosure_date.isoformat(),
                "cve_id": inst.cve_id,
                "language": inst.language,
            }, ensure_ascii=False) + "\n")


def deduplicate(instances: list[Instance]) -> list[Instance]:
    """Keep one instance per normalized-code digest.

    The survivor is the earliest disclosure date, ties broken by the
    lexicographically smallest id. Input order is preserved among survivors,
    which makes the operation idempotent and guarantees that no digest can
    appear in two calendar windows after segmentation.
    """
    best: dict[str, Instance] = {}
    for inst in instances:
        key = normalized_key(inst.code)
        cur = best.get(key)
        if cur is None or (inst.disclosure_date, inst.id) < (cur.disclosure_date, cur.id):
            best[key] = inst
    return [inst for inst in instances if best[normalized_key(inst.code)] is inst]


def _add_months(d: date, months: int) -> date:
    month_index = d.year * 12 + (d.month - 1) + months
    return date(month_index // 12, month_index % 12 + 1, 1)


def segment(instances: list[Instance], date_range: DateRange,
            granularity_months: int) -> list[Window]:
    """Tile the date range into calendar windows and assign every instance.

    Windows partition the range with no gaps or overlaps; empty windows are
    retained, and a final window shorter than the granularity is kept and
    flagged ``partial``.
    """
    if granularity_months not in VALID_GRANULARITIES:
        raise ConfigError(
            f"granularity must be one of {VALID_GRANULARITIES}, got {granularity_months}")
    if date_range.start.day != 1:
        raise ConfigError(
            f"range must start on the first day of a month, got {date_range.start}")

    bounds: list[tuple[date, date, bool]] = []
    w_start = date_range.start
    while w_start <= date_range.end:
        w_next = _add_months(w_start, granularity_months)
        full_end = w_next - timedelta(days=1)
        w_end = min(full_end, date_range.end)
        bounds.append((w_start, w_end, w_end < full_end))
        w_start = w_next

    buckets: list[list[Instance]] = [[] for _ in bounds]
    start = date_range.start
    for inst in instances:
        d = inst.disclosure_date
        if not date_range.contains(d):
            raise CorpusValidationError(
                f"instance {inst.id!r} dated {d} outside range "
                f"[{date_range.start}, {date_range.end}]")
        offset = (d.year - start.year) * 12 + (d.month - start.month)
        buckets[offset // granularity_months].append(inst)

    windows = [Window(index=i + 1, start_date=s, end_date=e,
                      instances=tuple(buckets[i]), partial=p)
               for i, (s, e, p) in enumerate(bounds)]
    empties = sum(1 for w in windows if w.is_empty)
    if empties:
        log.warning("%d of %d windows are empty", empties, len(windows))
    if windows and windows[-1].partial:
        log.warning("final window %d is partial (%s..%s)",
                    windows[-1].index, windows[-1].start_date, windows[-1].end_date)
    return windows


@dataclass(frozen=True)
class WindowStats:
    index: int
    start_date: date
    end_date: date
    count: int
    prevalence: float


@dataclass(frozen=True)
class CorpusStats:
    rows: tuple[WindowStats, ...]
    count_median: float
    count_iqr: tuple[float, float]
    prevalence_median: float
    prevalence_iqr: tuple[float, float]


def corpus_stats(windows: list[Window]) -> CorpusStats:
    """Per-window counts and prevalences plus global median / IQR of both.

    Prevalence aggregates are computed over nonempty windows only; an
    all-empty corpus yields zeros and a warning.
    """
    if not windows:
        raise ConfigError("corpus_stats requires at least one window")
    rows = tuple(WindowStats(w.index, w.start_date, w.end_date, w.count, w.prevalence)
                 for w in windows)
    counts = np.array([w.count for w in windows], dtype=float)
    prevalences = np.array([w.prevalence for w in windows if not w.is_empty])
    if prevalences.size == 0:
        log.warning("all %d windows are empty; reporting zero statistics", len(windows))
        return CorpusStats(rows, 0.0, (0.0, 0.0), 0.0, (0.0, 0.0))
    cq1, cq3 = np.quantile(counts, [0.25, 0.75])
    pq1, pq3 = np.quantile(prevalences, [0.25, 0.75])
    return CorpusStats(
        rows=rows,
        count_median=float(np.median(counts)),
        count_iqr=(float(cq1), float(cq3)),
        prevalence_median=float(np.median(prevalences)),
        prevalence_iqr=(float(pq1), float(pq3)),
    )


STATS_CSV_HEADER = "window_index,start_date,end_date,count,prevalence"


def stats_to_csv(stats: CorpusStats) -> str:
    lines = [STATS_CSV_HEADER]
    for row in stats.rows:
        lines.append(f"{row.index},{row.start_date.isoformat()},"
                     f"{row.end_date.isoformat()},{row.count},{row.prevalence:.6f}")
    return "\n".join(lines) + "\n"
