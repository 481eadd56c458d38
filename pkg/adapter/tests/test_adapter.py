"""Adapter internals: frozen backbone, adapter-only training, determinism."""

from __future__ import annotations

import hashlib

import pytest
import torch

from driftadapter.model import (ModelConfig, build_model, encode_batch,
                                trainable_state)
from driftadapter.serve import AdapterService
from driftadapter.tokenizer import BOS_ID, PAD_ID, encode

CONFIG = ModelConfig(dim=32, heads=2, layers=2, max_len=64, rank=4, alpha=8.0,
                     dropout=0.0, seed=5)

CODES = [
    "void f() { strcpy(buf, user_input); }",
    "void g() { strncpy(buf, user_input, sizeof buf); }",
    "int h(int n) { return n * 2; }",
    "int k(char *p) { free(p); free(p); return 0; }",
]
LABELS = [1, 0, 0, 1]


def _instances():
    return [{"id": f"i{n}", "code": c, "label": y}
            for n, (c, y) in enumerate(zip(CODES, LABELS))]


def _train_request(epochs=2, seed=7, loss_mode="plain", class_weights=None):
    return {"instances": _instances(),
            "hyperparameters": {"learning_rate": 1e-3, "epochs": epochs,
                                "batch_size": 2, "loss_mode": loss_mode,
                                "class_weights": class_weights, "seed": seed}}


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

def test_encode_deterministic_and_bounded():
    ids = encode(CODES[0], vocab_size=512, budget=16)
    assert ids == encode(CODES[0], vocab_size=512, budget=16)
    assert ids[0] == BOS_ID
    assert len(ids) <= 16
    assert all(0 <= i < 512 for i in ids)
    assert PAD_ID not in ids


def test_encode_truncates_from_the_end():
    long_code = " ".join(f"tok{i}" for i in range(100))
    short = encode(long_code, vocab_size=512, budget=8)
    assert len(short) == 8
    full = encode(long_code, vocab_size=512, budget=256)
    assert full[:8] == short


def test_encode_batch_pads_to_width():
    ids = encode_batch(["a b c", "a"], CONFIG)
    assert ids.shape[0] == 2
    assert (ids[1] == PAD_ID).sum() > 0


# ---------------------------------------------------------------------------
# model structure
# ---------------------------------------------------------------------------

def _backbone_digest(model):
    sha = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        if not param.requires_grad:
            sha.update(param.detach().numpy().tobytes())
    return sha.hexdigest()


def test_only_adapter_and_head_are_trainable():
    model = build_model(CONFIG)
    trainable = {name for name, p in model.named_parameters() if p.requires_grad}
    assert trainable, "no trainable parameters"
    for name in trainable:
        assert "lora_" in name or name.startswith("head."), name
    frozen = {name for name, p in model.named_parameters() if not p.requires_grad}
    assert any("token_embedding" in name for name in frozen)
    assert any(".base." in name for name in frozen)


def test_zero_up_factor_matches_backbone_output():
    model = build_model(CONFIG)
    ids = encode_batch(CODES, CONFIG)
    with torch.no_grad():
        wrapped = model(ids)
    # lora_up starts at zero, so the adapter path contributes nothing
    plain = build_model(CONFIG)
    with torch.no_grad():
        for module in plain.modules():
            if hasattr(module, "lora_up"):
                assert torch.all(module.lora_up == 0)
        assert torch.equal(plain(ids), wrapped)


def test_training_never_touches_backbone():
    service = AdapterService(CONFIG)
    digest = _backbone_digest(service.model)
    service.train(_train_request(epochs=3))
    assert _backbone_digest(service.model) == digest


def test_training_updates_adapter_and_head():
    service = AdapterService(CONFIG)
    before = trainable_state(service.model)
    service.train(_train_request())
    after = trainable_state(service.model)
    changed = [name for name in before if not torch.equal(before[name], after[name])]
    assert any("lora_" in name for name in changed)


# ---------------------------------------------------------------------------
# service semantics
# ---------------------------------------------------------------------------

def test_epochs_zero_is_noop():
    service = AdapterService(CONFIG)
    before = service.predict({"instances": _instances()})
    result = service.train(_train_request(epochs=0))
    assert result["steps"] == 0
    assert service.predict({"instances": _instances()}) == before


def test_train_same_seed_is_deterministic():
    a = AdapterService(CONFIG)
    b = AdapterService(CONFIG)
    a.train(_train_request(seed=11))
    b.train(_train_request(seed=11))
    assert a.predict({"instances": _instances()}) == \
        b.predict({"instances": _instances()})


def test_train_different_seed_differs():
    a = AdapterService(CONFIG)
    b = AdapterService(CONFIG)
    a.train(_train_request(seed=11, epochs=4))
    b.train(_train_request(seed=12, epochs=4))
    assert a.predict({"instances": _instances()}) != \
        b.predict({"instances": _instances()})


def test_probabilities_normalized():
    service = AdapterService(CONFIG)
    for row in service.predict({"instances": _instances()})["predictions"]:
        assert abs(row["prob_fixed"] + row["prob_vulnerable"] - 1.0) < 1e-6


def test_shipped_class_weights_change_training():
    plain = AdapterService(CONFIG)
    weighted = AdapterService(CONFIG)
    plain.train(_train_request(seed=3, loss_mode="plain"))
    weighted.train(_train_request(seed=3, loss_mode="class_weighted",
                                  class_weights={"fixed": 0.6, "vulnerable": 3.0}))
    assert plain.predict({"instances": _instances()}) != \
        weighted.predict({"instances": _instances()})


def test_reset_restores_pristine_predictions():
    service = AdapterService(CONFIG)
    pristine = service.predict({"instances": _instances()})
    service.train(_train_request())
    service.reset({})
    assert service.predict({"instances": _instances()}) == pristine


def test_checkpoint_roundtrip_exact(tmp_path):
    service = AdapterService(CONFIG)
    service.train(_train_request())
    saved = service.predict({"instances": _instances()})
    path = tmp_path / "adapter.ckpt"
    service.checkpoint_save({"path": str(path)})
    service.train(_train_request(seed=99))
    assert service.predict({"instances": _instances()}) != saved
    service.checkpoint_load({"path": str(path)})
    assert service.predict({"instances": _instances()}) == saved


def test_checkpoint_rejects_unknown_version(tmp_path):
    service = AdapterService(CONFIG)
    path = tmp_path / "bad.ckpt"
    torch.save({"format_version": 99, "trainable": {}}, path)
    with pytest.raises(ValueError):
        service.checkpoint_load({"path": str(path)})


def test_hello_reports_budget_and_architecture():
    service = AdapterService(CONFIG)
    hello = service.hello({})
    assert hello["token_budget"] == CONFIG.max_len
    assert hello["name"] == "driftadapter"
    assert hello["metadata"]["pretrained_base"] is False
    assert hello["metadata"]["caveats"] == []


def test_hello_carries_caveat_with_pretrained_base(tmp_path):
    from driftadapter.model import TransformerClassifier

    raw = TransformerClassifier(CONFIG)
    path = tmp_path / "base.pt"
    torch.save(raw.state_dict(), path)
    service = AdapterService(CONFIG, base_checkpoint=str(path))
    hello = service.hello({})
    assert hello["metadata"]["pretrained_base"] is True
    assert hello["metadata"]["caveats"]
