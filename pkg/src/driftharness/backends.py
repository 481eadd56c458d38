"""Model backends: the uniform train/predict surface the harness drives.

The reference backend wraps the in-process low-rank-adapted model; external
backends (see :mod:`driftharness.wire`) speak the same surface over a
subprocess wire protocol. Strategies and the evaluation protocol only ever
touch this interface, so both kinds of model run through one code path.
"""

from __future__ import annotations

from pathlib import Path

from . import model as mdl
from .corpus import Instance
from .errors import ConfigError


class ReferenceBackend:
    """In-process backend around :class:`driftharness.model.AdapterModel`."""

    name = "reference"
    supports_ortho = True

    def __init__(self, feature_dim: int = 4096, rank: int = 16, alpha: float = 32.0,
                 dropout: float = 0.05, token_budget: int = 2048, base_seed: int = 0):
        self._base = mdl.base_model(feature_dim=feature_dim, rank=rank, alpha=alpha,
                                    dropout=dropout, token_budget=token_budget,
                                    base_seed=base_seed)
        self.model = self._base.copy()

    @property
    def token_budget(self) -> int:
        return self.model.token_budget

    def reset(self) -> None:
        """Restore the pristine base checkpoint (adapter back to zero)."""
        self.model = self._base.copy()

    def train(self, window_data: list[Instance], replay_data: list[Instance],
              config: mdl.TrainConfig, ortho: mdl.OrthoState | None = None) -> mdl.TrainReport:
        trained, report = mdl.train(self.model, window_data, replay_data, config, ortho=ortho)
        self.model = trained
        return report

    def predict(self, instances: list[Instance]) -> list[mdl.Prediction]:
        return mdl.predict(self.model, instances)

    def checkpoint_save(self, path: str | Path) -> None:
        mdl.save_checkpoint(self.model, path)

    def checkpoint_load(self, path: str | Path) -> None:
        self.model = mdl.load_checkpoint(path)

    def close(self) -> None:
        pass


def require_ortho_support(backend) -> None:
    if not getattr(backend, "supports_ortho", False):
        raise ConfigError(
            f"backend {getattr(backend, 'name', backend)!r} cannot run the "
            "orthogonality-regularized strategy; it needs gradient-level access")
