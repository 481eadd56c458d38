"""Training regimes over calendar windows.

Nine strategies share one interface: three baselines (zero_shot,
window_only, cumulative), four replay variants (replay_1p, replay_3p, casr,
hybrid_casr), class-weighted training (lb_cl) and orthogonality-regularized
adapter training (olora). Replay variants keep a persistent model and a
bounded buffer of scored past instances; selection policies decide both
which entries survive buffer updates and which are drawn into training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as mdl
from .backends import ReferenceBackend, require_ortho_support
from .corpus import Instance, Window
from .errors import ConfigError

log = logging.getLogger(__name__)

STRATEGY_KINDS = ("zero_shot", "window_only", "cumulative", "replay_1p", "replay_3p",
                  "casr", "hybrid_casr", "lb_cl", "olora")

# kind -> (buffer policy, window span); None span means unbounded history.
_BUFFER_POLICIES = {
    "replay_1p": ("fifo_uniform", 1),
    "replay_3p": ("fifo_uniform", 3),
    "casr": ("casr", None),
    "hybrid_casr": ("hybrid_casr", None),
}


@dataclass(frozen=True)
class BufferEntry:
    instance: Instance
    last_confidence: float  # max class probability at last scoring
    last_correct: bool
    inserted_at: int  # window index


@dataclass
class ReplayBuffer:
    capacity: int
    policy: str  # fifo_uniform | casr | hybrid_casr
    window_span: int | None  # how many past windows feed the buffer
    entries: list[BufferEntry] = field(default_factory=list)


@dataclass(frozen=True)
class StrategySpec:
    """Fully resolved strategy configuration; embedded in every ledger."""

    kind: str
    confidence_threshold: float = 0.7  # entries below it count as uncertain
    uncertainty_fraction: float = 0.7  # share of slots filled by uncertain picks
    replay_batch_fraction: float = 0.25  # buffer draw size relative to the window
    buffer_capacity: int = 512
    ortho_weight: float = 0.0
    refresh_confidences: bool = False  # re-score old buffer entries every window

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        if not 0.5 < self.confidence_threshold < 1.0:
            raise ConfigError("confidence_threshold must lie in (0.5, 1)")
        if not 0.0 <= self.uncertainty_fraction <= 1.0:
            raise ConfigError("uncertainty_fraction must lie in [0, 1]")
        if not 0.0 <= self.replay_batch_fraction <= 1.0:
            raise ConfigError("replay_batch_fraction must lie in [0, 1]")
        if self.buffer_capacity <= 0:
            raise ConfigError("buffer_capacity must be positive")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "StrategySpec":
        if kind == "olora":
            overrides.setdefault("ortho_weight", 0.1)
        return cls(kind=kind, **overrides)

    @property
    def uses_buffer(self) -> bool:
        return self.kind in _BUFFER_POLICIES

    @property
    def persistent_model(self) -> bool:
        return self.kind in ("replay_1p", "replay_3p", "casr", "hybrid_casr",
                             "lb_cl", "olora")


def _entry_sort_key(entry: BufferEntry):
    return (entry.last_confidence, entry.inserted_at, entry.instance.id)


def _canonical(entries: list[BufferEntry]) -> list[BufferEntry]:
    return sorted(entries, key=lambda e: (e.inserted_at, e.instance.id))


def _uniform_sample(pool: list[BufferEntry], k: int,
                    rng: np.random.Generator) -> list[BufferEntry]:
    if k >= len(pool):
        return list(pool)
    picks = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in picks]


def casr_select(candidates: list[BufferEntry], k: int, confidence_threshold: float,
                rng: np.random.Generator) -> list[BufferEntry]:
    """Confidence-aware selection of up to ``k`` entries.

    Entries scoring below the threshold or misclassified at their last
    scoring form the priority pool, taken in ascending-confidence order
    (ties: older insertion first, then smaller id). A shortfall is filled by
    seeded-uniform sampling from the remaining entries.
    """
    if k < 0:
        raise ConfigError("k must be >= 0")
    if k >= len(candidates):
        return list(candidates)
    priority = [e for e in candidates
                if e.last_confidence < confidence_threshold or not e.last_correct]
    priority.sort(key=_entry_sort_key)
    selected = priority[:k]
    if len(selected) < k:
        priority_ids = {id(e) for e in priority}
        rest = [e for e in candidates if id(e) not in priority_ids]
        selected = selected + _uniform_sample(rest, k - len(selected), rng)
    return selected


def hybrid_casr_compose(buffer: ReplayBuffer, k: int, confidence_threshold: float,
                        uncertainty_fraction: float,
                        rng: np.random.Generator) -> list[BufferEntry]:
    """Class-balanced confidence-aware composition of up to ``k`` entries.

    First a balanced candidate set is drawn: ``min(#vulnerable, #fixed)``
    seeded-uniform picks per class (one class only, with a warning, when the
    other is absent). ``floor(uncertainty_fraction * k)`` slots then go to
    :func:`casr_select` over those candidates and the remainder is drawn
    uniformly from the candidates not yet chosen. The returned list holds the
    uncertainty picks first and never contains duplicates.
    """
    if k < 0:
        raise ConfigError("k must be >= 0")
    vulnerable = _canonical([e for e in buffer.entries if e.instance.label == 1])
    fixed = _canonical([e for e in buffer.entries if e.instance.label == 0])
    if not vulnerable or not fixed:
        present = vulnerable or fixed
        if present:
            log.warning("replay buffer holds a single class; balancing skipped")
        candidates = list(present)
    else:
        per_class = min(len(vulnerable), len(fixed))
        candidates = (_uniform_sample(vulnerable, per_class, rng)
                      + _uniform_sample(fixed, per_class, rng))
    if k >= len(candidates):
        return list(candidates)
    uncertainty_slots = int(np.floor(uncertainty_fraction * k))
    selected = casr_select(candidates, uncertainty_slots, confidence_threshold, rng)
    chosen_ids = {e.instance.id for e in selected}
    remaining = [e for e in candidates if e.instance.id not in chosen_ids]
    selected = selected + _uniform_sample(remaining, k - len(selected), rng)
    return selected


def update_buffer(buffer: ReplayBuffer, finished_window: Window,
                  predictions: list[mdl.Prediction],
                  rng: np.random.Generator,
                  confidence_threshold: float = 0.7,
                  uncertainty_fraction: float = 0.7) -> ReplayBuffer:
    """Insert the just-trained window's scored instances and evict per policy.

    ``predictions`` must align with ``finished_window.instances`` and come
    from the model trained through that window. fifo_uniform drops entries
    older than the window span and then downsamples uniformly to capacity;
    the confidence-aware policies keep their selection result at capacity.
    """
    if len(predictions) != len(finished_window.instances):
        raise ValueError("predictions must align with the window's instances")
    new_entries = [
        BufferEntry(instance=inst, last_confidence=pred.confidence,
                    last_correct=pred.predicted_label == inst.label,
                    inserted_at=finished_window.index)
        for inst, pred in zip(finished_window.instances, predictions)
    ]
    pool = buffer.entries + new_entries
    if buffer.policy == "fifo_uniform":
        horizon = finished_window.index - buffer.window_span
        pool = [e for e in pool if e.inserted_at > horizon]
        if len(pool) > buffer.capacity:
            pool = _uniform_sample(pool, buffer.capacity, rng)
        survivors = pool
    elif buffer.policy == "casr":
        survivors = casr_select(pool, buffer.capacity, confidence_threshold, rng)
    elif buffer.policy == "hybrid_casr":
        staged = ReplayBuffer(capacity=buffer.capacity, policy=buffer.policy,
                              window_span=buffer.window_span, entries=pool)
        survivors = hybrid_casr_compose(staged, buffer.capacity, confidence_threshold,
                                        uncertainty_fraction, rng)
    else:
        raise ConfigError(f"unknown buffer policy {buffer.policy!r}")
    return ReplayBuffer(capacity=buffer.capacity, policy=buffer.policy,
                        window_span=buffer.window_span, entries=_canonical(survivors))


def draw_replay(buffer: ReplayBuffer, k: int, spec: StrategySpec,
                rng: np.random.Generator) -> list[BufferEntry]:
    """Pick up to ``k`` buffered entries for interleaving into training."""
    if buffer.policy == "fifo_uniform":
        return _uniform_sample(buffer.entries, k, rng)
    if buffer.policy == "casr":
        return casr_select(buffer.entries, k, spec.confidence_threshold, rng)
    if buffer.policy == "hybrid_casr":
        return hybrid_casr_compose(buffer, k, spec.confidence_threshold,
                                   spec.uncertainty_fraction, rng)
    raise ConfigError(f"unknown buffer policy {buffer.policy!r}")


def step_seed(seed: int, window_index: int, stream: int = 0) -> np.random.SeedSequence:
    """Deterministic per-window seed derivation for training and sampling."""
    return np.random.SeedSequence((seed, window_index, stream))


@dataclass
class StrategyState:
    """Strategy-private state threaded through a forward chain."""

    spec: StrategySpec
    backend: ReferenceBackend  # anything satisfying the backend surface
    buffer: ReplayBuffer | None = None
    ortho: mdl.OrthoState | None = None

    @classmethod
    def create(cls, spec: StrategySpec, backend, feature_dim: int | None = None) -> "StrategyState":
        buffer = None
        if spec.uses_buffer:
            policy, span = _BUFFER_POLICIES[spec.kind]
            buffer = ReplayBuffer(capacity=spec.buffer_capacity, policy=policy,
                                  window_span=span)
        ortho = None
        if spec.kind == "olora":
            require_ortho_support(backend)
            dim = feature_dim if feature_dim is not None else backend.model.feature_dim
            ortho = mdl.OrthoState.empty(dim, max_dim=backend.model.rank * 4)
        backend.reset()
        return cls(spec=spec, backend=backend, buffer=buffer, ortho=ortho)


@dataclass(frozen=True)
class StepResult:
    trained: bool
    train_instances: tuple[Instance, ...]  # everything that entered training batches
    replay_count: int
    report: mdl.TrainReport | None
    skipped_reason: str | None = None


def run_strategy_step(spec: StrategySpec, state: StrategyState, window: Window,
                      history: list[Window], config: mdl.TrainConfig) -> StepResult:
    """Advance one window: train (or not) per the strategy and update state.

    ``history`` must contain every window up to and including ``window``.
    Empty windows are skipped for training strategies and reported as such;
    zero_shot never trains at all.
    """
    if spec.kind == "zero_shot":
        return StepResult(trained=False, train_instances=(), replay_count=0, report=None)
    if window.is_empty:
        return StepResult(trained=False, train_instances=(), replay_count=0,
                          report=None, skipped_reason="empty_window")

    train_cfg = replace(config,
                        seed=int(step_seed(config.seed, window.index).generate_state(1)[0]),
                        loss_mode="class_weighted" if spec.kind == "lb_cl" else config.loss_mode,
                        ortho_weight=spec.ortho_weight if spec.kind == "olora" else 0.0)

    if spec.kind in ("window_only", "cumulative"):
        state.backend.reset()
        if spec.kind == "window_only":
            data = list(window.instances)
        else:
            data = [inst for w in history if w.index <= window.index for inst in w.instances]
        report = state.backend.train(data, [], train_cfg)
        return StepResult(trained=True, train_instances=tuple(data),
                          replay_count=0, report=report)

    if spec.kind == "lb_cl":
        report = state.backend.train(list(window.instances), [], train_cfg)
        return StepResult(trained=True, train_instances=tuple(window.instances),
                          replay_count=0, report=report)

    if spec.kind == "olora":
        report = state.backend.train(list(window.instances), [], train_cfg,
                                     ortho=state.ortho)
        state.ortho = mdl.absorb_adapter(state.ortho, state.backend.model)
        return StepResult(trained=True, train_instances=tuple(window.instances),
                          replay_count=0, report=report)

    # Replay family: draw from the buffer, train interleaved, then refresh
    # the buffer with the just-trained model's scores.
    rng = np.random.default_rng(step_seed(config.seed, window.index, stream=1))
    draw_size = int(np.floor(spec.replay_batch_fraction * window.count))
    drawn = draw_replay(state.buffer, draw_size, spec, rng) if draw_size else []
    replay_instances = [e.instance for e in drawn]
    report = state.backend.train(list(window.instances), replay_instances, train_cfg)

    if spec.refresh_confidences and state.buffer.entries:
        rescored = state.backend.predict([e.instance for e in state.buffer.entries])
        state.buffer.entries = [
            replace(entry, last_confidence=pred.confidence,
                    last_correct=pred.predicted_label == entry.instance.label)
            for entry, pred in zip(state.buffer.entries, rescored)
        ]
    predictions = state.backend.predict(list(window.instances))
    state.buffer = update_buffer(state.buffer, window, predictions, rng,
                                 confidence_threshold=spec.confidence_threshold,
                                 uncertainty_fraction=spec.uncertainty_fraction)
    return StepResult(trained=True,
                      train_instances=tuple(window.instances) + tuple(replay_instances),
                      replay_count=len(replay_instances), report=report)
