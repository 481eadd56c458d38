"""Reference classifier: a frozen linear base plus a trainable low-rank adapter.

The model mirrors the structure of adapter fine-tuning on a frozen backbone:
logits are ``W0 @ x + (alpha / rank) * lora_a @ lora_b @ x`` where ``W0``
(2 x d) is fixed by a seeded random draw and only the adapter factors
``lora_a`` (2 x rank, zero-initialized) and ``lora_b`` (rank x d, small
seeded Gaussian) receive gradient updates. Features are hashed token
n-grams of the truncated code, L2-normalized.

Everything here is deterministic given (inputs, seed) and operates in
float64. Training never mutates its input model; it returns a new one,
which makes pre-call state trivially recoverable on divergence.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, replace
from hashlib import blake2b, sha256
from pathlib import Path

import numpy as np

from .corpus import Instance
from .errors import ConfigError, TrainingDivergedError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

_W0_SCALE = 0.02
_LORA_B_SCALE = 0.02
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8

_TOKEN_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*|\d+|\S")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training call; ``seed`` is mandatory."""

    seed: int
    learning_rate: float = 2e-4
    epochs: int = 3
    batch_size: int = 32
    weight_decay: float = 0.0
    loss_mode: str = "plain"  # or "class_weighted"
    ortho_weight: float = 0.0  # coefficient of the subspace-overlap penalty

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("TrainConfig.seed is mandatory")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.loss_mode not in ("plain", "class_weighted"):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        if self.ortho_weight < 0:
            raise ConfigError("ortho_weight must be >= 0")


@dataclass
class AdapterModel:
    w0: np.ndarray  # (2, d) frozen base weights
    lora_a: np.ndarray  # (2, rank), trainable, zero at the pristine base
    lora_b: np.ndarray  # (rank, d), trainable
    rank: int
    alpha: float
    dropout: float
    feature_dim: int
    token_budget: int
    base_seed: int

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def effective_weights(self) -> np.ndarray:
        return self.w0 + self.scaling * (self.lora_a @ self.lora_b)

    def copy(self) -> "AdapterModel":
        return replace(self, lora_a=self.lora_a.copy(), lora_b=self.lora_b.copy())

    def w0_fingerprint(self) -> str:
        return sha256(self.w0.tobytes()).hexdigest()

    def adapter_bytes(self) -> bytes:
        return self.lora_a.tobytes() + self.lora_b.tobytes()


def base_model(feature_dim: int = 4096, rank: int = 16, alpha: float = 32.0,
               dropout: float = 0.05, token_budget: int = 2048,
               base_seed: int = 0) -> AdapterModel:
    """Build the pristine base checkpoint for a given seed and geometry.

    ``lora_a`` starts at zero so the fresh model's logits equal the frozen
    base's logits exactly.
    """
    if rank <= 0 or feature_dim <= 0 or token_budget <= 0:
        raise ConfigError("rank, feature_dim and token_budget must be positive")
    if not 0.0 <= dropout < 1.0:
        raise ConfigError("dropout must be in [0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence((base_seed, 0)))
    w0 = rng.normal(0.0, _W0_SCALE, size=(2, feature_dim))
    lora_b = rng.normal(0.0, _LORA_B_SCALE, size=(rank, feature_dim))
    return AdapterModel(
        w0=w0,
        lora_a=np.zeros((2, rank)),
        lora_b=lora_b,
        rank=rank,
        alpha=alpha,
        dropout=dropout,
        feature_dim=feature_dim,
        token_budget=token_budget,
        base_seed=base_seed,
    )


def _bucket_hash(ngram: str) -> int:
    return int.from_bytes(blake2b(ngram.encode("utf-8"), digest_size=8).digest(), "big")


def featurize(code: str, token_budget: int, feature_dim: int) -> np.ndarray:
    """Hash token unigrams and bigrams into signed buckets; L2-normalize.

    Tokens past the budget are dropped (truncation from the end). Empty code
    maps to the zero vector; anything else has unit norm.
    """
    if token_budget <= 0:
        raise ConfigError("token_budget must be positive")
    tokens = _TOKEN_RE.findall(code)[:token_budget]
    vec = np.zeros(feature_dim)
    for i, tok in enumerate(tokens):
        h = _bucket_hash(tok)
        vec[h % feature_dim] += 1.0 if h & (1 << 63) else -1.0
        if i + 1 < len(tokens):
            h2 = _bucket_hash(tok + "\x1f" + tokens[i + 1])
            vec[h2 % feature_dim] += 1.0 if h2 & (1 << 63) else -1.0
    norm = np.linalg.norm(vec)
    if norm > 0.0:
        vec /= norm
    return vec


def featurize_batch(instances: list[Instance], model: AdapterModel) -> np.ndarray:
    return np.stack([featurize(i.code, model.token_budget, model.feature_dim)
                     for i in instances]) if instances else np.zeros((0, model.feature_dim))


@dataclass(frozen=True)
class Prediction:
    prob_fixed: float
    prob_vulnerable: float
    predicted_label: int  # 1 iff prob_vulnerable >= 0.5
    confidence: float  # max of the two probabilities


@dataclass(frozen=True)
class OrthoState:
    """Orthonormal basis spanning previously absorbed adapter directions.

    Columns live in feature space; the count is capped at ``max_dim`` with
    oldest-first eviction.
    """

    basis: np.ndarray  # (d, m), orthonormal columns, m may be 0
    max_dim: int

    @classmethod
    def empty(cls, feature_dim: int, max_dim: int) -> "OrthoState":
        return cls(basis=np.zeros((feature_dim, 0)), max_dim=max_dim)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]


def ortho_penalty(columns: np.ndarray, basis: np.ndarray) -> float:
    """Squared Frobenius norm of the projection of ``columns`` onto ``basis``.

    Equals sum_j ||basis (basis^T c_j)||^2; exactly zero when every column is
    orthogonal to the spanned subspace.
    """
    if basis.shape[1] == 0:
        return 0.0
    proj = basis.T @ columns
    return float(np.sum(proj * proj))


def compute_class_weights(labels: np.ndarray) -> tuple[float, float]:
    """Inverse-frequency weights ``n / (2 * n_c)``; an absent class gets 0."""
    n = len(labels)
    weights = []
    for cls in (0, 1):
        n_c = int(np.sum(labels == cls))
        if n_c == 0:
            log.warning("class %d absent from training window; weight set to 0", cls)
            weights.append(0.0)
        else:
            weights.append(n / (2.0 * n_c))
    return weights[0], weights[1]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss(model: AdapterModel, features: np.ndarray, labels: np.ndarray,
         config: TrainConfig, ortho: OrthoState | None = None,
         class_weights: tuple[float, float] | None = None,
         dropout_mask: np.ndarray | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean (optionally class-weighted) cross-entropy plus the subspace
    penalty; returns ``(scalar, grad_lora_a, grad_lora_b)``.

    The penalty constrains the adapter's feature-space directions (the
    columns of ``lora_b`` transposed) against ``ortho.basis``. When
    ``loss_mode`` is ``class_weighted`` and no explicit weights are given,
    they are computed from this batch.
    """
    n = features.shape[0]
    if n == 0:
        raise ValueError("loss requires a nonempty batch")
    labels = np.asarray(labels, dtype=int)

    if config.loss_mode == "class_weighted":
        w0c, w1c = class_weights if class_weights is not None else compute_class_weights(labels)
        sample_w = np.where(labels == 1, w1c, w0c)
    else:
        sample_w = np.ones(n)

    adapter_in = features if dropout_mask is None else features * dropout_mask
    low = adapter_in @ model.lora_b.T  # (n, rank)
    logits = features @ model.w0.T + model.scaling * (low @ model.lora_a.T)

    log_probs = _log_softmax(logits)
    ce = -log_probs[np.arange(n), labels]
    scalar = float(np.dot(sample_w, ce) / n)

    probs = np.exp(log_probs)
    grad_logits = probs
    grad_logits[np.arange(n), labels] -= 1.0
    grad_logits *= sample_w[:, None] / n

    grad_a = model.scaling * (grad_logits.T @ low)
    grad_b = model.scaling * (model.lora_a.T @ grad_logits.T @ adapter_in)

    if config.ortho_weight > 0.0 and ortho is not None and ortho.dim > 0:
        scalar += config.ortho_weight * ortho_penalty(model.lora_b.T, ortho.basis)
        grad_b += 2.0 * config.ortho_weight * (model.lora_b @ ortho.basis) @ ortho.basis.T

    return scalar, grad_a, grad_b


@dataclass(frozen=True)
class TrainReport:
    wall_time_s: float
    steps: int
    final_loss: float


def train(model: AdapterModel, window_data: list[Instance], replay_data: list[Instance],
          config: TrainConfig, ortho: OrthoState | None = None) -> tuple[AdapterModel, TrainReport]:
    """AdamW fine-tuning of the adapter factors on window plus replay data.

    Runs ``config.epochs`` seeded-shuffled passes over the concatenation;
    only ``lora_a`` / ``lora_b`` are updated and the frozen base is untouched.
    Class weights (when enabled) come from the current window's labels, not
    the replay mix. A non-finite loss raises :class:`TrainingDivergedError`
    and leaves the input model unchanged.
    """
    if not window_data:
        raise ValueError("train requires a nonempty window")
    start = time.perf_counter()
    if config.epochs == 0:
        return model, TrainReport(wall_time_s=time.perf_counter() - start,
                                  steps=0, final_loss=float("nan"))

    data = list(window_data) + list(replay_data)
    features = featurize_batch(data, model)
    labels = np.array([i.label for i in data], dtype=int)
    class_weights = None
    if config.loss_mode == "class_weighted":
        class_weights = compute_class_weights(np.array([i.label for i in window_data]))

    out = model.copy()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    m_a = np.zeros_like(out.lora_a)
    v_a = np.zeros_like(out.lora_a)
    m_b = np.zeros_like(out.lora_b)
    v_b = np.zeros_like(out.lora_b)

    steps = 0
    last_loss = float("nan")
    n = len(data)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            batch = order[lo:lo + config.batch_size]
            mask = None
            if out.dropout > 0.0:
                keep = rng.random((len(batch), out.feature_dim)) >= out.dropout
                mask = keep / (1.0 - out.dropout)
            value, grad_a, grad_b = loss(out, features[batch], labels[batch], config,
                                         ortho=ortho, class_weights=class_weights,
                                         dropout_mask=mask)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at step {steps + 1} (lr={config.learning_rate})")
            steps += 1
            for theta, m, v, grad in ((out.lora_a, m_a, v_a, grad_a),
                                      (out.lora_b, m_b, v_b, grad_b)):
                m *= _ADAM_BETA1
                m += (1.0 - _ADAM_BETA1) * grad
                v *= _ADAM_BETA2
                v += (1.0 - _ADAM_BETA2) * grad * grad
                m_hat = m / (1.0 - _ADAM_BETA1**steps)
                v_hat = v / (1.0 - _ADAM_BETA2**steps)
                theta -= config.learning_rate * (m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
                                                 + config.weight_decay * theta)
            last_loss = value

    return out, TrainReport(wall_time_s=time.perf_counter() - start,
                            steps=steps, final_loss=last_loss)


def predict_features(model: AdapterModel, features: np.ndarray) -> np.ndarray:
    """Class probabilities (n, 2) with the adapter path active and dropout off."""
    logits = features @ model.effective_weights().T
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def predict(model: AdapterModel, instances: list[Instance]) -> list[Prediction]:
    if not instances:
        return []
    probs = predict_features(model, featurize_batch(instances, model))
    out = []
    for p_fixed, p_vuln in probs:
        out.append(Prediction(
            prob_fixed=float(p_fixed),
            prob_vulnerable=float(p_vuln),
            predicted_label=int(p_vuln >= 0.5),
            confidence=float(max(p_fixed, p_vuln)),
        ))
    return out


def absorb_adapter(ortho: OrthoState, model: AdapterModel,
                   residual_tol: float = 1e-6) -> OrthoState:
    """Fold the model's adapter directions into the orthonormal basis.

    Each feature-space column of the adapter is orthogonalized (twice, for
    stability) against the basis accumulated so far; columns with residual
    norm below ``residual_tol`` add nothing and are dropped. Oldest columns
    are evicted beyond ``max_dim``.
    """
    basis = ortho.basis.copy()
    columns = model.lora_b.T  # (d, rank): the adapter's feature-space directions
    kept = [basis[:, j] for j in range(basis.shape[1])]
    for j in range(columns.shape[1]):
        vec = columns[:, j].copy()
        for _ in range(2):
            for u in kept:
                vec -= np.dot(u, vec) * u
        norm = np.linalg.norm(vec)
        if norm >= residual_tol:
            kept.append(vec / norm)
    if len(kept) > ortho.max_dim:
        kept = kept[len(kept) - ortho.max_dim:]
    new_basis = np.stack(kept, axis=1) if kept else np.zeros((columns.shape[0], 0))
    return OrthoState(basis=new_basis, max_dim=ortho.max_dim)


def save_checkpoint(model: AdapterModel, path: str | Path) -> None:
    """Versioned dump sufficient for bit-exact restore.

    The frozen base is reproducible from ``base_seed`` but is stored as well
    so restores do not depend on the RNG stream of the installed numpy.
    """
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "rank": model.rank,
        "alpha": model.alpha,
        "dropout": model.dropout,
        "feature_dim": model.feature_dim,
        "token_budget": model.token_budget,
        "base_seed": model.base_seed,
    }
    with open(path, "wb") as fh:
        np.savez(fh, w0=model.w0, lora_a=model.lora_a, lora_b=model.lora_b,
                 meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))


def load_checkpoint(path: str | Path) -> AdapterModel:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta['format_version']}")
        return AdapterModel(
            w0=data["w0"].copy(),
            lora_a=data["lora_a"].copy(),
            lora_b=data["lora_b"].copy(),
            rank=meta["rank"],
            alpha=meta["alpha"],
            dropout=meta["dropout"],
            feature_dim=meta["feature_dim"],
            token_budget=meta["token_budget"],
            base_seed=meta["base_seed"],
        )
