"""Forward-chained training/evaluation with lagged backward scoring.

The chain walks windows in calendar order: at step t the strategy trains on
window t (timed and memory-sampled), the model is scored on window t+1
(one-step-ahead, with a leakage guard over normalized-code digests), and the
same snapshot is scored on windows t-k for the configured lags. Skipped or
failed steps become ledger gaps, never zeros, so every aggregate downstream
runs over defined entries only.

The leakage guard applies to forward evaluation: a window must never have
contributed to any training batch executed at or before the step that scores
it one-step-ahead. Backward scoring intentionally re-tests windows the model
may have trained on; that is what retention measures.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import psutil

from . import metrics
from . import model as mdl
from .corpus import Window, normalized_key
from .errors import ConfigError, LeakageError, TrainingDivergedError
from .strategies import StrategySpec, StrategyState, run_strategy_step

log = logging.getLogger(__name__)

DEFAULT_LAGS = (1, 3, 5, 6)

FORWARD_CSV_HEADER = "t,f1,time_s,peak_mem_mb,train_size,replay_size"
BACKWARD_CSV_HEADER = "t,k,f1"


@dataclass(frozen=True)
class ResourceTriple:
    wall_time_s: float
    peak_mem_mb: float  # best-effort resident-set delta, sampled at 100 ms
    forward_f1: float | None  # paired next-window score, when defined


@dataclass
class RunLedger:
    """Append-only record of one (strategy, seed) run."""

    header: dict
    forward_scores: dict[int, float] = field(default_factory=dict)
    backward_scores: dict[tuple[int, int], float] = field(default_factory=dict)
    resources: dict[int, ResourceTriple] = field(default_factory=dict)
    train_sizes: dict[int, int] = field(default_factory=dict)
    replay_sizes: dict[int, int] = field(default_factory=dict)
    gaps: list[dict] = field(default_factory=list)

    def wall_times(self) -> dict[int, float]:
        return {t: r.wall_time_s for t, r in self.resources.items()}

    def score_section_bytes(self) -> bytes:
        """Canonical serialization of the score data (no timings), byte-stable
        across reruns of an identical configuration."""
        payload = {
            "forward": [[t, self.forward_scores[t]] for t in sorted(self.forward_scores)],
            "backward": [[t, k, self.backward_scores[(t, k)]]
                         for t, k in sorted(self.backward_scores)],
            "gaps": sorted((g["t"], g["reason"]) for g in self.gaps),
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()

    def to_dir(self, path: str | Path) -> None:
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        header = dict(self.header)
        header["gaps"] = self.gaps
        (out / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")

        rows = [FORWARD_CSV_HEADER]
        for t in sorted(set(self.resources) | set(self.forward_scores)):
            res = self.resources.get(t, ResourceTriple(0.0, 0.0, None))
            f1 = self.forward_scores.get(t, res.forward_f1)
            f1_text = "" if f1 is None else repr(f1)
            rows.append(f"{t},{f1_text},{res.wall_time_s:.6f},{res.peak_mem_mb:.3f},"
                        f"{self.train_sizes.get(t, 0)},{self.replay_sizes.get(t, 0)}")
        (out / "forward.csv").write_text("\n".join(rows) + "\n")

        rows = [BACKWARD_CSV_HEADER]
        for t, k in sorted(self.backward_scores):
            rows.append(f"{t},{k},{repr(self.backward_scores[(t, k)])}")
        (out / "backward.csv").write_text("\n".join(rows) + "\n")

    @classmethod
    def from_dir(cls, path: str | Path) -> "RunLedger":
        root = Path(path)
        header = json.loads((root / "header.json").read_text())
        gaps = header.pop("gaps", [])
        ledger = cls(header=header, gaps=gaps)
        forward_lines = (root / "forward.csv").read_text().strip().splitlines()
        for line in forward_lines[1:]:
            t_s, f1_s, time_s, mem_s, train_s, replay_s = line.split(",")
            t = int(t_s)
            f1 = float(f1_s) if f1_s else None
            if f1 is not None:
                ledger.forward_scores[t] = f1
            ledger.resources[t] = ResourceTriple(float(time_s), float(mem_s), f1)
            ledger.train_sizes[t] = int(train_s)
            ledger.replay_sizes[t] = int(replay_s)
        backward_lines = (root / "backward.csv").read_text().strip().splitlines()
        for line in backward_lines[1:]:
            t_s, k_s, f1_s = line.split(",")
            ledger.backward_scores[(int(t_s), int(k_s))] = float(f1_s)
        return ledger


class _MemorySampler:
    """Samples the process tree's resident set every 100 ms; best-effort."""

    def __init__(self, interval_s: float = 0.1):
        self._interval = interval_s
        self._proc = psutil.Process()
        self._stop = threading.Event()
        self._peak = 0
        self._thread: threading.Thread | None = None

    def _rss(self) -> int:
        total = self._proc.memory_info().rss
        try:
            for child in self._proc.children(recursive=True):
                try:
                    total += child.memory_info().rss
                except psutil.Error:
                    pass
        except psutil.Error:
            pass
        return total

    def __enter__(self) -> "_MemorySampler":
        self.baseline = self._rss()
        self._peak = self.baseline

        def loop():
            while not self._stop.wait(self._interval):
                self._peak = max(self._peak, self._rss())

        self._thread = threading.Thread(target=loop, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self._peak = max(self._peak, self._rss())

    @property
    def peak_delta_mb(self) -> float:
        return max(0.0, (self._peak - self.baseline) / (1024.0 * 1024.0))


def _window_keys(window: Window) -> set[str]:
    return {normalized_key(inst.code) for inst in window.instances}


def _score_window(backend, window: Window) -> float:
    predictions = backend.predict(list(window.instances))
    return metrics.macro_f1([inst.label for inst in window.instances],
                            [p.predicted_label for p in predictions])


def _verify_checkpoint_reload(backend, window: Window) -> None:
    # In-memory snapshots drive backward scoring; spot-check once per run
    # that a checkpoint round-trip reproduces the same predictions.
    before = backend.predict(list(window.instances))
    fd, path = tempfile.mkstemp(suffix=".ckpt")
    os.close(fd)
    try:
        backend.checkpoint_save(path)
        backend.checkpoint_load(path)
    finally:
        os.unlink(path)
    after = backend.predict(list(window.instances))
    for a, b in zip(before, after):
        if a != b:
            raise RuntimeError("checkpoint reload changed predictions")


def run_forward_chain(windows: list[Window], spec: StrategySpec,
                      config: mdl.TrainConfig, backend=None,
                      lags: tuple[int, ...] = DEFAULT_LAGS,
                      header_extra: dict | None = None,
                      verify_checkpoint_reload: bool = True) -> RunLedger:
    """Run the full forward chain (and lagged backward scoring) for one spec.

    ``windows`` must be the complete segmentation in calendar order. Returns
    the populated ledger; the caller persists it.
    """
    if sum(1 for w in windows if not w.is_empty) < 2:
        raise ConfigError("the forward chain needs at least 2 nonempty windows")
    for i, window in enumerate(windows):
        if window.index != i + 1:
            raise ConfigError("windows must be the contiguous segmentation output")

    if backend is None:
        backend = _default_backend(config)
    state = StrategyState.create(spec, backend)

    header = {
        "strategy": asdict(spec),
        "train_config": asdict(config),
        "lags": list(lags),
        "windows": len(windows),
        "backend": getattr(backend, "name", "unknown"),
        "harness_version": _harness_version(),
        "normalization": _normalization_pin(),
    }
    if header_extra:
        header.update(header_extra)
    ledger = RunLedger(header=header)

    trained_keys: set[str] = set()
    reload_checked = False

    for t in range(1, len(windows)):
        window = windows[t - 1]
        with _MemorySampler() as sampler:
            started = time.perf_counter()
            try:
                step = run_strategy_step(spec, state, window, windows[:t], config)
            except TrainingDivergedError as exc:
                elapsed = time.perf_counter() - started
                log.warning("strategy failed at window %d: %s", t, exc)
                ledger.gaps.append({"t": t, "reason": f"training_failed: {exc}"})
                continue
            elapsed = time.perf_counter() - started

        if step.skipped_reason is not None:
            ledger.gaps.append({"t": t, "reason": step.skipped_reason})
            continue

        trained_keys.update(normalized_key(inst.code) for inst in step.train_instances)
        ledger.train_sizes[t] = len(step.train_instances)
        ledger.replay_sizes[t] = step.replay_count

        forward_f1 = None
        eval_window = windows[t]
        if not eval_window.is_empty:
            overlap = _window_keys(eval_window) & trained_keys
            if overlap:
                raise LeakageError(
                    f"{len(overlap)} evaluation instances of window {t + 1} "
                    f"appeared in training batches at or before step {t}")
            forward_f1 = _score_window(backend, eval_window)
            ledger.forward_scores[t] = forward_f1

        ledger.resources[t] = ResourceTriple(
            wall_time_s=elapsed, peak_mem_mb=sampler.peak_delta_mb, forward_f1=forward_f1)

        for k in lags:
            j = t - k
            if j >= 1 and not windows[j - 1].is_empty:
                ledger.backward_scores[(t, k)] = _score_window(backend, windows[j - 1])

        if verify_checkpoint_reload and step.trained and not reload_checked \
                and not eval_window.is_empty:
            _verify_checkpoint_reload(backend, eval_window)
            ledger.header["checkpoint_reload_verified_at"] = t
            reload_checked = True

    return ledger


def run_backward_evals(windows: list[Window], spec: StrategySpec,
                       config: mdl.TrainConfig, backend=None,
                       lags: tuple[int, ...] = DEFAULT_LAGS) -> dict[tuple[int, int], float]:
    """Backward scores only; runs the same chain and returns its lag map."""
    ledger = run_forward_chain(windows, spec, config, backend=backend, lags=lags)
    return ledger.backward_scores


def _default_backend(config: mdl.TrainConfig):
    from .backends import ReferenceBackend

    return ReferenceBackend(base_seed=config.seed)


def _harness_version() -> str:
    try:
        from importlib.metadata import version

        return version("driftharness")
    except Exception:
        return "unknown"


def _normalization_pin() -> str:
    from .corpus import NORMALIZATION_VERSION

    return NORMALIZATION_VERSION
