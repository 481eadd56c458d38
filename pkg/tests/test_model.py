"""Reference model tests: features, loss gradients, training, adapter algebra."""

from __future__ import annotations

from datetime import date

import numpy as np
import pytest

from driftharness.corpus import Instance
from driftharness.errors import TrainingDivergedError
from driftharness.model import (AdapterModel, OrthoState, TrainConfig, absorb_adapter,
                                base_model, compute_class_weights, featurize,
                                featurize_batch, load_checkpoint, loss,
                                ortho_penalty, predict, predict_features,
                                save_checkpoint, train)

from conftest import random_snippet


def _instances_from_tokens(rng, n, signal=0.6, dim_tokens=20):
    vuln = [f"unsafe_token{i}" for i in range(6)]
    fixed = [f"safe_token{i}" for i in range(6)]
    noise = [f"noise{i}" for i in range(30)]
    out = []
    for idx in range(n):
        label = idx % 2
        pool = vuln if label else fixed
        toks = [pool[int(rng.integers(len(pool)))] if rng.random() < signal
                else noise[int(rng.integers(len(noise)))]
                for _ in range(dim_tokens)]
        body = "; ".join(f"{t}(x)" for t in toks)
        out.append(Instance(id=f"s{idx}", label=label,
                            code=f"int fn_{idx}(int x) {{ {body}; return x; }}",
                            disclosure_date=date(2020, 1, 1 + idx % 28)))
    return out


def _small_model(dim=64, rank=4, dropout=0.0, seed=3):
    return base_model(feature_dim=dim, rank=rank, alpha=2.0 * rank, dropout=dropout,
                      token_budget=64, base_seed=seed)


def _random_basis(rng, dim, cols):
    raw = rng.normal(size=(dim, cols))
    q, _ = np.linalg.qr(raw)
    return q[:, :cols]


# ---------------------------------------------------------------------------
# featurize
# ---------------------------------------------------------------------------

def test_featurize_deterministic():
    code = "int a = b + c; // comment"
    assert np.array_equal(featurize(code, 128, 256), featurize(code, 128, 256))


def test_featurize_empty_code_is_zero_vector():
    vec = featurize("", 128, 256)
    assert np.all(vec == 0.0)


def test_featurize_norms_over_1000_random_snippets(rng):
    for _ in range(1000):
        snippet = random_snippet(rng)
        vec = featurize(snippet, 128, 512)
        norm = np.linalg.norm(vec)
        if vec.any():
            assert abs(norm - 1.0) < 1e-9
        else:
            assert norm == 0.0


def test_featurize_respects_token_budget():
    head = "alpha beta gamma"
    tail = " delta epsilon zeta"
    assert np.array_equal(featurize(head + tail, 3, 128), featurize(head, 3, 128))
    assert not np.array_equal(featurize(head + tail, 6, 128), featurize(head, 3, 128))


# ---------------------------------------------------------------------------
# class weights and loss
# ---------------------------------------------------------------------------

def test_class_weights_balanced_are_one():
    assert compute_class_weights(np.array([0, 1, 0, 1])) == (1.0, 1.0)


def test_class_weights_inverse_frequency():
    w0, w1 = compute_class_weights(np.array([0, 0, 0, 1]))
    assert w0 == pytest.approx(4 / 6)
    assert w1 == pytest.approx(2.0)


def test_class_weights_absent_class_is_zero(caplog):
    w0, w1 = compute_class_weights(np.array([1, 1, 1]))
    assert w0 == 0.0
    assert w1 == pytest.approx(0.5)


def test_balanced_batch_weighted_equals_plain(rng):
    model = _small_model()
    features = rng.normal(size=(8, model.feature_dim))
    labels = np.array([0, 1] * 4)
    plain, _, _ = loss(model, features, labels, TrainConfig(seed=0, loss_mode="plain"))
    weighted, _, _ = loss(model, features, labels,
                          TrainConfig(seed=0, loss_mode="class_weighted"))
    assert weighted == plain


def test_ortho_penalty_zero_for_orthogonal_columns(rng):
    dim = 32
    basis = np.zeros((dim, 2))
    basis[0, 0] = 1.0
    basis[1, 1] = 1.0
    columns = np.zeros((dim, 3))
    columns[5:, :] = rng.normal(size=(dim - 5, 3))
    assert ortho_penalty(columns, basis) == 0.0


def test_ortho_penalty_matches_dense_projection_oracle(rng):
    for _ in range(50):
        dim = int(rng.integers(8, 40))
        basis = _random_basis(rng, dim, 3)
        columns = rng.normal(size=(dim, int(rng.integers(1, 6))))
        expected = sum(
            float(np.linalg.norm(basis @ (basis.T @ columns[:, j])) ** 2)
            for j in range(columns.shape[1]))
        assert ortho_penalty(columns, basis) == pytest.approx(expected, abs=1e-8)


def test_loss_regularizer_adds_nothing_when_adapter_orthogonal(rng):
    model = _small_model(dim=16, rank=2)
    basis = np.zeros((16, 2))
    basis[0, 0] = 1.0
    basis[1, 1] = 1.0
    model.lora_b[:, :2] = 0.0  # adapter directions orthogonal to the basis
    features = rng.normal(size=(6, 16))
    labels = np.array([0, 1, 0, 1, 1, 0])
    plain, _, _ = loss(model, features, labels, TrainConfig(seed=0))
    with_reg, _, _ = loss(model, features, labels,
                          TrainConfig(seed=0, ortho_weight=0.5),
                          ortho=OrthoState(basis=basis, max_dim=8))
    assert with_reg == pytest.approx(plain, abs=1e-15)


def test_gradient_check_20_random_configurations(rng):
    """Analytic gradients of the full objective vs central differences."""
    for trial in range(20):
        dim = int(rng.integers(8, 24))
        rank = int(rng.integers(2, 5))
        n = int(rng.integers(3, 12))
        model = base_model(feature_dim=dim, rank=rank, alpha=2.0 * rank,
                           dropout=0.0, token_budget=32, base_seed=trial)
        model.lora_a[:] = rng.normal(0, 0.3, size=model.lora_a.shape)
        model.lora_b[:] = rng.normal(0, 0.3, size=model.lora_b.shape)
        features = rng.normal(size=(n, dim))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        basis_cols = int(rng.integers(0, 4))
        ortho = (OrthoState(basis=_random_basis(rng, dim, basis_cols), max_dim=16)
                 if basis_cols else None)
        config = TrainConfig(
            seed=0,
            loss_mode="class_weighted" if trial % 2 else "plain",
            ortho_weight=float(rng.random()) if ortho is not None else 0.0)

        _, grad_a, grad_b = loss(model, features, labels, config, ortho=ortho)

        eps = 1e-6
        for matrix, grad in ((model.lora_a, grad_a), (model.lora_b, grad_b)):
            flat = matrix.ravel()
            for pos in range(flat.size):
                keep = flat[pos]
                flat[pos] = keep + eps
                up, _, _ = loss(model, features, labels, config, ortho=ortho)
                flat[pos] = keep - eps
                down, _, _ = loss(model, features, labels, config, ortho=ortho)
                flat[pos] = keep
                numeric = (up - down) / (2 * eps)
                analytic = grad.ravel()[pos]
                denom = max(1e-8, abs(numeric) + abs(analytic))
                assert abs(numeric - analytic) / denom < 1e-4


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_zero_epochs_leaves_model_bitwise_unchanged(rng):
    model = _small_model()
    data = _instances_from_tokens(rng, 8)
    before = model.adapter_bytes()
    trained, report = train(model, data, [], TrainConfig(seed=5, epochs=0))
    assert trained.adapter_bytes() == before
    assert report.steps == 0


def test_train_separable_set_reaches_99_percent(rng):
    data = _instances_from_tokens(rng, 200)
    model = base_model(feature_dim=1024, token_budget=256, base_seed=0)
    config = TrainConfig(seed=1, learning_rate=0.05, epochs=3, batch_size=32)
    trained, report = train(model, data, [], config)
    predictions = predict(trained, data)
    accuracy = np.mean([p.predicted_label == d.label
                        for p, d in zip(predictions, data)])
    assert accuracy >= 0.99
    assert report.steps == 21  # ceil(200/32) * 3


def test_train_same_seed_identical_parameters(rng):
    data = _instances_from_tokens(rng, 40)
    config = TrainConfig(seed=9, learning_rate=0.05, epochs=2, batch_size=16)
    first, _ = train(_small_model(dim=256), data, [], config)
    second, _ = train(_small_model(dim=256), data, [], config)
    assert first.adapter_bytes() == second.adapter_bytes()


def test_train_different_seed_differs(rng):
    data = _instances_from_tokens(rng, 40)
    base = _small_model(dim=256, dropout=0.05)
    first, _ = train(base, data, [], TrainConfig(seed=1, learning_rate=0.05))
    second, _ = train(base, data, [], TrainConfig(seed=2, learning_rate=0.05))
    assert first.adapter_bytes() != second.adapter_bytes()


def test_train_never_touches_frozen_base(rng):
    model = _small_model(dim=256, dropout=0.05)
    fingerprint = model.w0_fingerprint()
    data = _instances_from_tokens(rng, 40)
    trained, _ = train(model, data, data[:5], TrainConfig(seed=2, learning_rate=0.1))
    assert model.w0_fingerprint() == fingerprint
    assert trained.w0_fingerprint() == fingerprint
    assert trained.w0 is model.w0  # the base is shared, not copied


def test_train_rejects_empty_window(rng):
    with pytest.raises(ValueError):
        train(_small_model(), [], [], TrainConfig(seed=0))


def test_train_divergence_restores_and_raises(rng):
    model = _small_model(dim=128)
    data = _instances_from_tokens(rng, 30)
    before = model.adapter_bytes()
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(TrainingDivergedError):
            train(model, data, [], TrainConfig(seed=3, learning_rate=1e308,
                                               weight_decay=0.5, epochs=5))
    assert model.adapter_bytes() == before


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def test_adapter_zero_reproduces_base_logits(rng):
    model = _small_model(dim=128)
    assert np.all(model.lora_a == 0.0)
    data = _instances_from_tokens(rng, 10)
    features = featurize_batch(data, model)
    base_probs = predict_features(
        AdapterModel(w0=model.w0, lora_a=np.zeros_like(model.lora_a),
                     lora_b=np.zeros_like(model.lora_b), rank=model.rank,
                     alpha=model.alpha, dropout=model.dropout,
                     feature_dim=model.feature_dim, token_budget=model.token_budget,
                     base_seed=model.base_seed), features)
    model.lora_b[:] = rng.normal(size=model.lora_b.shape)  # arbitrary B, A = 0
    assert np.array_equal(predict_features(model, features), base_probs)


def test_probabilities_sum_to_one(rng):
    model = _small_model(dim=128)
    data = _instances_from_tokens(rng, 25)
    for p in predict(model, data):
        assert abs(p.prob_fixed + p.prob_vulnerable - 1.0) < 1e-9
        assert p.confidence == max(p.prob_fixed, p.prob_vulnerable)
        assert p.predicted_label == int(p.prob_vulnerable >= 0.5)


def test_fused_and_separate_logit_paths_agree(rng):
    model = _small_model(dim=64, rank=4)
    model.lora_a[:] = rng.normal(size=model.lora_a.shape)
    features = rng.normal(size=(12, 64))
    fused = features @ model.effective_weights().T
    separate = features @ model.w0.T + model.scaling * (
        (features @ model.lora_b.T) @ model.lora_a.T)
    assert np.max(np.abs(fused - separate)) < 1e-9


def test_predict_empty_list():
    assert predict(_small_model(), []) == []


# ---------------------------------------------------------------------------
# absorb_adapter
# ---------------------------------------------------------------------------

def test_first_absorption_spans_adapter_columns(rng):
    model = _small_model(dim=32, rank=4)
    model.lora_b[:] = rng.normal(size=model.lora_b.shape)
    state = absorb_adapter(OrthoState.empty(32, max_dim=16), model)
    assert state.dim == 4
    directions = model.lora_b.T
    residual = directions - state.basis @ (state.basis.T @ directions)
    assert np.max(np.abs(residual)) < 1e-8


def test_absorbing_same_adapter_twice_adds_nothing(rng):
    model = _small_model(dim=32, rank=4)
    model.lora_b[:] = rng.normal(size=model.lora_b.shape)
    once = absorb_adapter(OrthoState.empty(32, max_dim=16), model)
    twice = absorb_adapter(once, model)
    assert twice.dim == once.dim
    assert np.array_equal(twice.basis, once.basis)


def test_random_absorption_sequence_stays_orthonormal(rng):
    state = OrthoState.empty(48, max_dim=12)
    for step in range(8):
        model = _small_model(dim=48, rank=3, seed=step)
        model.lora_b[:] = rng.normal(size=model.lora_b.shape)
        state = absorb_adapter(state, model)
        gram = state.basis.T @ state.basis
        assert np.max(np.abs(gram - np.eye(state.dim))) < 1e-8
        assert state.dim <= 12


def test_absorption_evicts_oldest_columns(rng):
    state = OrthoState.empty(64, max_dim=4)
    first_model = _small_model(dim=64, rank=3, seed=0)
    first_model.lora_b[:] = rng.normal(size=first_model.lora_b.shape)
    state = absorb_adapter(state, first_model)
    oldest = state.basis[:, 0].copy()
    second_model = _small_model(dim=64, rank=3, seed=1)
    second_model.lora_b[:] = rng.normal(size=second_model.lora_b.shape)
    state = absorb_adapter(state, second_model)
    assert state.dim == 4
    # the very first direction fell off the front
    projections = np.abs(state.basis.T @ oldest)
    assert not np.isclose(projections.max(), 1.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    data = _instances_from_tokens(rng, 30)
    model, _ = train(_small_model(dim=256, dropout=0.05), data, [],
                     TrainConfig(seed=4, learning_rate=0.05))
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    restored = load_checkpoint(path)
    assert restored.adapter_bytes() == model.adapter_bytes()
    assert restored.w0.tobytes() == model.w0.tobytes()
    assert (restored.rank, restored.alpha, restored.feature_dim) == \
        (model.rank, model.alpha, model.feature_dim)
    features = featurize_batch(data, model)
    assert np.array_equal(predict_features(restored, features),
                          predict_features(model, features))
