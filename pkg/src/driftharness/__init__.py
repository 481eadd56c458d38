"""Temporal evaluation harness for continual vulnerability classification."""

from .corpus import (DateRange, Instance, Window, corpus_stats, deduplicate,
                     load_corpus, normalize, normalized_key, segment)
from .errors import (ConfigError, CorpusParseError, CorpusValidationError,
                     DriftHarnessError, LeakageError, ProtocolError,
                     TrainingDivergedError)
from .metrics import (RetentionCurve, aggregate_mean, backward_retention,
                      decay_rate, delta_table, efficiency_from_means,
                      efficiency_metrics, macro_f1, retention_auc,
                      stability_index, win_rate)
from .model import (AdapterModel, OrthoState, Prediction, TrainConfig,
                    TrainReport, absorb_adapter, base_model, featurize,
                    load_checkpoint, predict, save_checkpoint, train)
from .protocol import ResourceTriple, RunLedger, run_backward_evals, run_forward_chain
from .stats import WilcoxonResult, cliffs_delta, wilcoxon_signed_rank
from .strategies import (BufferEntry, ReplayBuffer, StrategySpec, StrategyState,
                         casr_select, hybrid_casr_compose, run_strategy_step,
                         update_buffer)

__version__ = "0.1.0"
