"""Wire protocol tests against the mock adapter."""

from __future__ import annotations

import shlex
import sys
from datetime import date
from pathlib import Path

import pytest

from driftharness.corpus import Instance
from driftharness.errors import ProtocolError
from driftharness.model import TrainConfig
from driftharness.wire import AdapterClient, ExternalBackend, run_conformance

MOCK_COMMAND = f"{shlex.quote(sys.executable)} {shlex.quote(str(Path(__file__).parent / 'mock_adapter.py'))}"


def _instances():
    return [
        Instance(id="a", code="void f() { bad_call(); }", label=1,
                 disclosure_date=date(2021, 1, 5)),
        Instance(id="b", code="void g() { fine(); }", label=0,
                 disclosure_date=date(2021, 1, 9)),
    ]


def test_mock_adapter_passes_full_conformance_suite(tmp_path):
    results = run_conformance(MOCK_COMMAND, tmp_path)
    failed = [r for r in results if not r.passed]
    assert not failed, failed
    assert {r.name for r in results} == {
        "handshake", "request_id_ordering", "probability_normalization",
        "epochs_zero_noop", "checkpoint_roundtrip", "reset", "error_recovery",
        "clean_shutdown"}


def test_external_backend_hello_and_predict():
    backend = ExternalBackend(MOCK_COMMAND)
    try:
        assert backend.adapter_name == "mock-adapter"
        assert backend.token_budget == 512
        preds = backend.predict(_instances())
        assert preds[0].predicted_label == 1  # "bad" marker
        assert preds[1].predicted_label == 0
        assert abs(preds[0].prob_fixed + preds[0].prob_vulnerable - 1.0) < 1e-6
    finally:
        backend.close()


def test_external_backend_train_changes_predictions_and_reset_restores():
    backend = ExternalBackend(MOCK_COMMAND)
    try:
        instances = _instances()
        before = [(p.prob_fixed, p.prob_vulnerable) for p in backend.predict(instances)]
        backend.train(instances, [], TrainConfig(seed=0, epochs=2))
        after = [(p.prob_fixed, p.prob_vulnerable) for p in backend.predict(instances)]
        assert before != after
        backend.reset()
        restored = [(p.prob_fixed, p.prob_vulnerable) for p in backend.predict(instances)]
        assert restored == before
    finally:
        backend.close()


def test_external_backend_ships_class_weights():
    backend = ExternalBackend(MOCK_COMMAND)
    try:
        # skewed window: weight for class 1 should be n / (2 * n_1)
        instances = [_instances()[0]] + [_instances()[1]] * 0
        instances = [
            Instance(id=f"s{i}", code="void s() { fine(); }", label=0,
                     disclosure_date=date(2021, 2, 1)) for i in range(3)
        ] + [Instance(id="v", code="void v() { bad(); }", label=1,
                      disclosure_date=date(2021, 2, 2))]
        report = backend.train(instances, [],
                               TrainConfig(seed=0, epochs=1, loss_mode="class_weighted"))
        assert report.steps == 4
    finally:
        backend.close()


def test_mismatched_request_id_raises(monkeypatch):
    client = AdapterClient(MOCK_COMMAND)
    try:
        good = client.request("hello")
        assert good["name"] == "mock-adapter"
        # a raw request with an id the client never issued is a protocol error
        # when routed through request(): simulate by asking twice out of band
        reply = client.request_raw('{"request_id": "zz", "op": "hello"}')
        assert reply["request_id"] == "zz"
    finally:
        client.close()


def test_adapter_error_response_raises_protocol_error():
    backend = ExternalBackend(MOCK_COMMAND)
    try:
        with pytest.raises(ProtocolError, match="unknown op"):
            backend.client.request("no_such_op")
        # still alive afterwards
        assert backend.predict(_instances())
    finally:
        backend.close()


def test_clean_shutdown_exit_code_zero():
    backend = ExternalBackend(MOCK_COMMAND)
    assert backend.close() == 0
