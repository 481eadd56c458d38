"""Command-line orchestration: prepare, run, report, compare.

Configuration lives in one JSON file; every documented key can be overridden
on the command line. ``prepare`` turns a corpus file into a windowed
artifact, ``run`` produces one ledger per (strategy, seed), ``report``
aggregates ledgers into summary/series/delta CSVs and ``compare`` runs the
paired statistics for two ledgers. All outputs are rewritten byte-identically
on re-execution over unchanged inputs.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from . import corpus as corpus_mod
from . import metrics
from . import stats as stats_mod
from .backends import ReferenceBackend
from .errors import DriftHarnessError, ConfigError
from .model import TrainConfig
from .protocol import RunLedger, run_forward_chain
from .strategies import STRATEGY_KINDS, StrategySpec
from .wire import ExternalBackend

log = logging.getLogger(__name__)

WORKERS_ENV = "DRIFTHARNESS_WORKERS"

SUMMARY_COLUMNS = ("method,mean_f1,sd,min,max,win_rate,ibr@1,ibr@3,ibr@5,ibr@6,"
                   "decay,auc,stability,f1_per_min,speedup,efficiency_pct")
COMPARE_COLUMNS = "method_a,method_b,n,w_statistic,p_value,cliffs_delta,mean_delta"

ARTIFACT_NAME = "windows.json"
BASELINE_KIND = "window_only"


@dataclass
class RunConfig:
    corpus: Path
    date_start: date
    date_end: date
    granularity_months: int = 2
    strategies: list[str] = field(default_factory=lambda: ["window_only"])
    seeds: list[int] = field(default_factory=lambda: [1])
    out: Path = Path("artifacts")
    backend: str = "reference"  # or "external:<command>"
    workers: int = 1
    lags: tuple[int, ...] = (1, 3, 5, 6)
    train: dict = field(default_factory=dict)  # TrainConfig overrides (minus seed)
    model: dict = field(default_factory=dict)  # ReferenceBackend geometry overrides
    strategy_params: dict = field(default_factory=dict)  # StrategySpec overrides

    def validate(self) -> None:
        if not self.corpus.exists():
            raise ConfigError(f"corpus file not found: {self.corpus}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for kind in self.strategies:
            if kind not in STRATEGY_KINDS:
                raise ConfigError(f"unknown strategy {kind!r}; choose from {STRATEGY_KINDS}")
        if self.backend != "reference" and not self.backend.startswith("external:"):
            raise ConfigError("backend must be 'reference' or 'external:<command>'")

    def date_range(self) -> corpus_mod.DateRange:
        return corpus_mod.DateRange(self.date_start, self.date_end)

    def resolved(self) -> dict:
        return {
            "corpus": str(self.corpus),
            "date_start": self.date_start.isoformat(),
            "date_end": self.date_end.isoformat(),
            "granularity_months": self.granularity_months,
            "strategies": list(self.strategies),
            "seeds": list(self.seeds),
            "out": str(self.out),
            "backend": self.backend,
            "workers": self.workers,
            "lags": list(self.lags),
            "train": dict(self.train),
            "model": dict(self.model),
            "strategy_params": dict(self.strategy_params),
        }


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return RunConfig(
            corpus=Path(raw["corpus"]),
            date_start=date.fromisoformat(raw["date_start"]),
            date_end=date.fromisoformat(raw["date_end"]),
            granularity_months=raw.get("granularity_months", 2),
            strategies=list(raw.get("strategies", ["window_only"])),
            seeds=[int(s) for s in raw.get("seeds", [1])],
            out=Path(raw.get("out", "artifacts")),
            backend=raw.get("backend", "reference"),
            workers=int(raw.get("workers", 1)),
            lags=tuple(raw.get("lags", [1, 3, 5, 6])),
            train=dict(raw.get("train", {})),
            model=dict(raw.get("model", {})),
            strategy_params=dict(raw.get("strategy_params", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad config {path}: {exc}") from exc


def _parse_granularity(text: str) -> int:
    if not text.endswith("m"):
        raise ConfigError(f"granularity must look like '2m', got {text!r}")
    try:
        return int(text[:-1])
    except ValueError as exc:
        raise ConfigError(f"granularity must look like '2m', got {text!r}") from exc


def _apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    if getattr(args, "strategy", None):
        config.strategies = [s.strip() for s in args.strategy.split(",") if s.strip()]
    if getattr(args, "granularity", None):
        config.granularity_months = _parse_granularity(args.granularity)
    if getattr(args, "seed", None):
        config.seeds = [int(s) for s in args.seed.split(",") if s.strip()]
    if getattr(args, "out", None):
        config.out = Path(args.out)
    if getattr(args, "backend", None):
        config.backend = args.backend
    return config


def _worker_limit(config: RunConfig) -> int:
    cap = os.environ.get(WORKERS_ENV)
    workers = max(1, config.workers)
    if cap is not None:
        workers = min(workers, max(1, int(cap)))
    return workers


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def _artifact_path(config: RunConfig) -> Path:
    return config.out / ARTIFACT_NAME


def cmd_prepare(config: RunConfig) -> int:
    """Load, deduplicate and segment the corpus; write artifact + stats.csv."""
    config.validate()
    date_range = config.date_range()
    instances = corpus_mod.load_corpus(config.corpus, date_range=date_range)
    if not instances:
        raise ConfigError(f"corpus {config.corpus} contains no instances")
    survivors = corpus_mod.deduplicate(instances)
    removed = len(instances) - len(survivors)
    windows = corpus_mod.segment(survivors, date_range, config.granularity_months)
    stats = corpus_mod.corpus_stats(windows)

    config.out.mkdir(parents=True, exist_ok=True)
    artifact = {
        "format_version": 1,
        "normalization": corpus_mod.NORMALIZATION_VERSION,
        "date_start": config.date_start.isoformat(),
        "date_end": config.date_end.isoformat(),
        "granularity_months": config.granularity_months,
        "dedup_removed": removed,
        "windows": [
            {
                "index": w.index,
                "start_date": w.start_date.isoformat(),
                "end_date": w.end_date.isoformat(),
                "partial": w.partial,
                "instances": [
                    {
                        "id": i.id,
                        "code": i.code,
                        "label": i.label,
                        "disclosure_date": i.disclosure_date.isoformat(),
                        "cve_id": i.cve_id,
                        "language": i.language,
                    }
                    for i in w.instances
                ],
            }
            for w in windows
        ],
    }
    _artifact_path(config).write_text(json.dumps(artifact, sort_keys=True) + "\n")
    (config.out / "stats.csv").write_text(corpus_mod.stats_to_csv(stats))
    print(f"prepared {len(survivors)} instances into {len(windows)} windows "
          f"({removed} duplicates removed)")
    print(f"artifact: {_artifact_path(config)}")
    return 0


def load_windows(artifact_path: Path) -> list[corpus_mod.Window]:
    raw = json.loads(artifact_path.read_text())
    windows = []
    for w in raw["windows"]:
        instances = tuple(
            corpus_mod.Instance(
                id=i["id"], code=i["code"], label=i["label"],
                disclosure_date=date.fromisoformat(i["disclosure_date"]),
                cve_id=i.get("cve_id"), language=i.get("language"))
            for i in w["instances"])
        windows.append(corpus_mod.Window(
            index=w["index"], start_date=date.fromisoformat(w["start_date"]),
            end_date=date.fromisoformat(w["end_date"]), instances=instances,
            partial=w["partial"]))
    return windows


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _make_backend(config: RunConfig, seed: int):
    if config.backend == "reference":
        params = dict(config.model)
        params.setdefault("base_seed", seed)
        return ReferenceBackend(**params)
    return ExternalBackend(config.backend[len("external:"):])


def _ledger_dir(config: RunConfig, kind: str, seed: int) -> Path:
    return config.out / "ledgers" / f"{kind}-seed{seed}"


def _run_one(config: RunConfig, kind: str, seed: int) -> Path:
    spec = StrategySpec.for_kind(kind, **config.strategy_params)
    train_config = TrainConfig(seed=seed, **config.train)
    backend = _make_backend(config, seed)
    try:
        ledger = run_forward_chain(
            load_windows(_artifact_path(config)), spec, train_config,
            backend=backend, lags=config.lags,
            header_extra={"seed": seed, "resolved_config": config.resolved()})
    finally:
        backend.close()
    target = _ledger_dir(config, kind, seed)
    ledger.to_dir(target)
    return target


def cmd_run(config: RunConfig) -> int:
    """Execute the forward chain per (strategy, seed); one ledger each."""
    config.validate()
    artifact = _artifact_path(config)
    if not artifact.exists():
        raise ConfigError(f"no prepared artifact at {artifact}; run 'prepare' first")
    jobs = [(kind, seed) for kind in config.strategies for seed in config.seeds]
    failures = []
    workers = _worker_limit(config)
    if workers == 1:
        for kind, seed in jobs:
            try:
                target = _run_one(config, kind, seed)
                print(f"ledger written: {target}")
            except Exception as exc:
                failures.append((kind, seed, exc))
                log.error("run %s seed %d failed: %s", kind, seed, exc)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_one, config, kind, seed): (kind, seed)
                       for kind, seed in jobs}
            for future in concurrent.futures.as_completed(futures):
                kind, seed = futures[future]
                try:
                    print(f"ledger written: {future.result()}")
                except Exception as exc:
                    failures.append((kind, seed, exc))
                    log.error("run %s seed %d failed: %s", kind, seed, exc)
    for kind, seed, exc in failures:
        print(f"FAILED {kind} seed {seed}: {exc}", file=sys.stderr)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _discover_ledgers(root: Path) -> dict[str, RunLedger]:
    found = {}
    for header in sorted(root.glob("**/header.json")):
        ledger = RunLedger.from_dir(header.parent)
        kind = ledger.header.get("strategy", {}).get("kind", header.parent.name)
        seed = ledger.header.get("seed")
        label = kind if seed is None else f"{kind}@seed{seed}"
        found[label] = ledger
    # Collapse the seed suffix when every method appears exactly once.
    kinds = [lbl.split("@seed")[0] for lbl in found]
    if len(set(kinds)) == len(found):
        found = {lbl.split("@seed")[0]: led for lbl, led in found.items()}
    return found


def _fmt(value: float | None, digits: int = 6) -> str:
    if value is None:
        return ""
    return f"{value:.{digits}f}"


def cmd_report(ledger_root: Path, out_dir: Path) -> int:
    """Aggregate every ledger under ``ledger_root`` into CSV reports."""
    ledgers = _discover_ledgers(ledger_root)
    if not ledgers:
        raise ConfigError(f"no ledgers found under {ledger_root}")
    out_dir.mkdir(parents=True, exist_ok=True)

    forward_by_method = {name: led.forward_scores for name, led in ledgers.items()}
    common: set[int] | None = None
    for series in forward_by_method.values():
        common = set(series) if common is None else common & set(series)
    comparable = len(ledgers) >= 2 and bool(common)
    if len(ledgers) >= 2 and not comparable:
        log.warning("ledgers share no common windows; comparisons suppressed")

    win_rates = metrics.win_rate(forward_by_method) if comparable else {}
    baseline_name = next((n for n in ledgers if n.split("@seed")[0] == BASELINE_KIND), None)

    rows = [SUMMARY_COLUMNS]
    for name, ledger in ledgers.items():
        series = list(ledger.forward_scores.values())
        mean_f1, _ = metrics.aggregate_mean(series)
        sd = (math.sqrt(sum((v - mean_f1) ** 2 for v in series) / (len(series) - 1))
              if len(series) > 1 else 0.0)
        curve_vals: dict[int, float | None] = {}
        for lag in metrics.RETENTION_LAGS:
            try:
                curve_vals[lag] = metrics.backward_retention(ledger.backward_scores, lag)
            except ValueError:
                curve_vals[lag] = None
        decay = auc = None
        if all(curve_vals[lag] is not None for lag in metrics.RETENTION_LAGS):
            curve = metrics.RetentionCurve({k: v for k, v in curve_vals.items()})
            decay = metrics.decay_rate(curve)
            auc = metrics.retention_auc(curve)
        stability = metrics.stability_index(series) if len(series) > 1 else None
        efficiency = None
        if baseline_name is not None and ledgers[baseline_name].wall_times():
            base = ledgers[baseline_name]
            try:
                efficiency = metrics.efficiency_metrics(
                    ledger.forward_scores, ledger.wall_times(),
                    base.forward_scores, base.wall_times())
            except ValueError:
                efficiency = None
        rows.append(",".join([
            name,
            _fmt(mean_f1), _fmt(sd), _fmt(min(series)), _fmt(max(series)),
            _fmt(win_rates.get(name)),
            _fmt(curve_vals[1]), _fmt(curve_vals[3]), _fmt(curve_vals[5]),
            _fmt(curve_vals[6]),
            _fmt(decay), _fmt(auc), _fmt(stability),
            _fmt(efficiency.f1_per_min if efficiency else None),
            _fmt(efficiency.speedup if efficiency else None, 4),
            _fmt(efficiency.efficiency_pct if efficiency else None, 2),
        ]))
    (out_dir / "summary.csv").write_text("\n".join(rows) + "\n")

    series_dir = out_dir / "series"
    series_dir.mkdir(exist_ok=True)
    for name, ledger in ledgers.items():
        lines = ["t,f1"]
        for t in sorted(ledger.forward_scores):
            lines.append(f"{t},{repr(ledger.forward_scores[t])}")
        (series_dir / f"{name}.csv").write_text("\n".join(lines) + "\n")

    if comparable and baseline_name is not None and len(ledgers) > 1:
        table = metrics.delta_table(forward_by_method, baseline_name)
        methods = sorted(table.deltas)
        lines = ["t,baseline_f1," + ",".join(f"{m}_delta" for m in methods) + ",hard_window"]
        for t in table.windows:
            cells = [str(t), _fmt(table.baseline[t])]
            cells += [_fmt(table.deltas[m][t]) for m in methods]
            cells.append("1" if t in table.hard_windows else "0")
            lines.append(",".join(cells))
        (out_dir / "deltas.csv").write_text("\n".join(lines) + "\n")

    print(f"report written to {out_dir} ({len(ledgers)} ledgers)")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def cmd_compare(ledger_a: Path, ledger_b: Path, out_path: Path) -> int:
    """Paired Wilcoxon + Cliff's delta on two ledgers' forward scores."""
    led_a = RunLedger.from_dir(ledger_a)
    led_b = RunLedger.from_dir(ledger_b)
    name_a = led_a.header.get("strategy", {}).get("kind", ledger_a.name)
    name_b = led_b.header.get("strategy", {}).get("kind", ledger_b.name)
    common = sorted(set(led_a.forward_scores) & set(led_b.forward_scores))
    if not common:
        raise ConfigError("ledgers share no evaluation windows")
    a = [led_a.forward_scores[t] for t in common]
    b = [led_b.forward_scores[t] for t in common]
    diffs = [x - y for x, y in zip(a, b)]
    wilcoxon = stats_mod.wilcoxon_signed_rank(diffs)
    delta = stats_mod.cliffs_delta(a, b)
    mean_delta = sum(diffs) / len(diffs)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(
        COMPARE_COLUMNS + "\n" +
        f"{name_a},{name_b},{len(common)},{_fmt(wilcoxon.statistic, 1)},"
        f"{wilcoxon.p_value:.6g},{_fmt(delta)},{_fmt(mean_delta)}\n")
    print(f"compare written to {out_path} (p={wilcoxon.p_value:.4g}, delta={delta:.4f})")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftharness",
        description="Windowed continual-learning evaluation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--strategy", help="comma-separated strategy kinds")
        p.add_argument("--granularity", help="window size: 1m|2m|3m|6m|12m")
        p.add_argument("--seed", help="comma-separated seeds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--backend", help="reference | external:<command>")

    add_common(sub.add_parser("prepare", help="dedup + window the corpus"))
    add_common(sub.add_parser("run", help="run strategies over the prepared corpus"))

    report = sub.add_parser("report", help="aggregate ledgers into CSV reports")
    report.add_argument("ledgers", help="directory containing run ledgers")
    report.add_argument("--out", default=None, help="report output directory")

    compare = sub.add_parser("compare", help="paired statistics for two ledgers")
    compare.add_argument("ledger_a")
    compare.add_argument("ledger_b")
    compare.add_argument("--out", default="compare.csv")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "prepare":
            return cmd_prepare(_apply_overrides(load_config(args.config), args))
        if args.command == "run":
            return cmd_run(_apply_overrides(load_config(args.config), args))
        if args.command == "report":
            root = Path(args.ledgers)
            return cmd_report(root, Path(args.out) if args.out else root / "report")
        if args.command == "compare":
            return cmd_compare(Path(args.ledger_a), Path(args.ledger_b), Path(args.out))
        raise ConfigError(f"unknown command {args.command!r}")
    except DriftHarnessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
