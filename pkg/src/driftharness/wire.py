"""Wire protocol for external model adapters.

An adapter is a subprocess launched as ``<command> --serve`` that exchanges
one JSON object per line over stdin/stdout, UTF-8. Requests carry a
``request_id`` and an ``op`` from {hello, reset, train, predict,
checkpoint_save, checkpoint_load, shutdown}; every request line receives
exactly one response line with the matching ``request_id``. ``train``
payloads carry instances plus hyperparameters (learning_rate, epochs,
batch_size, loss_mode, class_weights, seed); ``predict`` returns per-instance
``prob_fixed`` / ``prob_vulnerable`` summing to 1 within 1e-6.

The conformance suite below is the contract test any adapter must pass; the
harness's own mock adapter and real external adapters run the same checks.
"""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
from dataclasses import dataclass
from datetime import date
from pathlib import Path

from . import model as mdl
from .corpus import Instance
from .errors import ConfigError, ProtocolError

log = logging.getLogger(__name__)

WIRE_OPS = ("hello", "reset", "train", "predict", "checkpoint_save",
            "checkpoint_load", "shutdown")

PROBABILITY_TOLERANCE = 1e-6


class AdapterClient:
    """Owns one adapter subprocess and its strictly serial request loop."""

    def __init__(self, command: str):
        self.command = command
        argv = shlex.split(command) + ["--serve"]
        self._proc = subprocess.Popen(argv, stdin=subprocess.PIPE,
                                      stdout=subprocess.PIPE, text=True,
                                      encoding="utf-8", bufsize=1)
        self._next_id = 0

    def request_raw(self, line: str) -> dict:
        """Send one raw line and read one response line (for fault testing)."""
        if self._proc.poll() is not None:
            raise ProtocolError("adapter process has exited")
        assert self._proc.stdin and self._proc.stdout
        self._proc.stdin.write(line + "\n")
        self._proc.stdin.flush()
        reply = self._proc.stdout.readline()
        if not reply:
            raise ProtocolError("adapter closed its output stream")
        try:
            return json.loads(reply)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"adapter sent invalid JSON: {reply!r}") from exc

    def request(self, op: str, **payload) -> dict:
        self._next_id += 1
        request_id = f"r{self._next_id}"
        message = {"request_id": request_id, "op": op, **payload}
        response = self.request_raw(json.dumps(message))
        if response.get("request_id") != request_id:
            raise ProtocolError(
                f"response id {response.get('request_id')!r} does not match {request_id!r}")
        if not response.get("ok", False):
            error = response.get("error", {})
            raise ProtocolError(f"adapter error on {op}: {error.get('message', error)}")
        return response

    def close(self) -> int:
        """Ask for a clean shutdown; returns the exit code."""
        try:
            if self._proc.poll() is None:
                self.request("shutdown")
        except ProtocolError:
            pass
        try:
            self._proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()
        return self._proc.returncode


def _instance_payload(inst: Instance, with_label: bool) -> dict:
    payload = {"id": inst.id, "code": inst.code}
    if with_label:
        payload["label"] = inst.label
    return payload


class ExternalBackend:
    """Backend surface over an adapter subprocess; one process per run."""

    supports_ortho = False

    def __init__(self, command: str):
        self.client = AdapterClient(command)
        hello = self.client.request("hello")
        self.adapter_name = hello.get("name", "unknown")
        self.adapter_version = hello.get("version", "unknown")
        self.token_budget = hello.get("token_budget")
        self.name = f"external:{self.adapter_name}"

    def reset(self) -> None:
        self.client.request("reset")

    def train(self, window_data: list[Instance], replay_data: list[Instance],
              config: mdl.TrainConfig, ortho=None) -> mdl.TrainReport:
        if ortho is not None:
            raise ConfigError("external adapters do not expose gradient-level access")
        class_weights = None
        if config.loss_mode == "class_weighted":
            import numpy as np

            w_fixed, w_vuln = mdl.compute_class_weights(
                np.array([i.label for i in window_data]))
            class_weights = {"fixed": w_fixed, "vulnerable": w_vuln}
        response = self.client.request(
            "train",
            instances=[_instance_payload(i, with_label=True)
                       for i in list(window_data) + list(replay_data)],
            hyperparameters={
                "learning_rate": config.learning_rate,
                "epochs": config.epochs,
                "batch_size": config.batch_size,
                "loss_mode": config.loss_mode,
                "class_weights": class_weights,
                "seed": config.seed,
            })
        final_loss = response.get("final_loss")
        return mdl.TrainReport(
            wall_time_s=float(response.get("time_s") or 0.0),
            steps=int(response.get("steps") or 0),
            final_loss=float("nan") if final_loss is None else float(final_loss))

    def predict(self, instances: list[Instance]) -> list[mdl.Prediction]:
        if not instances:
            return []
        response = self.client.request(
            "predict", instances=[_instance_payload(i, with_label=False)
                                  for i in instances])
        rows = response.get("predictions", [])
        if len(rows) != len(instances):
            raise ProtocolError(f"expected {len(instances)} predictions, got {len(rows)}")
        out = []
        for row in rows:
            p_fixed = float(row["prob_fixed"])
            p_vuln = float(row["prob_vulnerable"])
            if abs(p_fixed + p_vuln - 1.0) > PROBABILITY_TOLERANCE:
                raise ProtocolError(f"probabilities sum to {p_fixed + p_vuln}, not 1")
            out.append(mdl.Prediction(prob_fixed=p_fixed, prob_vulnerable=p_vuln,
                                      predicted_label=int(p_vuln >= 0.5),
                                      confidence=max(p_fixed, p_vuln)))
        return out

    def checkpoint_save(self, path) -> None:
        self.client.request("checkpoint_save", path=str(path))

    def checkpoint_load(self, path) -> None:
        self.client.request("checkpoint_load", path=str(path))

    def close(self) -> int:
        return self.client.close()


@dataclass(frozen=True)
class ConformanceCheck:
    name: str
    passed: bool
    detail: str = ""


def _probs(predictions: list[mdl.Prediction]) -> list[tuple[float, float]]:
    return [(p.prob_fixed, p.prob_vulnerable) for p in predictions]


def run_conformance(command: str, workdir) -> list[ConformanceCheck]:
    """Exercise an adapter command against the full protocol contract.

    Covers the handshake, request ordering, probability normalization, the
    epochs-0 no-op, reset, checkpoint round-trip, malformed-input recovery
    and clean shutdown. Returns one result per check; all must pass.
    """
    results: list[ConformanceCheck] = []
    instances = [
        Instance(id="c1", code="int alpha(int x) { return x + 1; }", label=0,
                 disclosure_date=date(2020, 1, 10)),
        Instance(id="c2", code="void beta() { memcpy(dst, src, n); }", label=1,
                 disclosure_date=date(2020, 1, 20)),
        Instance(id="c3", code="static long gamma(long v) { return v * 3; }", label=0,
                 disclosure_date=date(2020, 2, 5)),
    ]
    config = mdl.TrainConfig(seed=11, learning_rate=1e-3, epochs=1, batch_size=2)

    backend = ExternalBackend(command)

    def check(name: str, fn) -> None:
        try:
            fn()
            results.append(ConformanceCheck(name, True))
        except Exception as exc:  # record, keep going
            results.append(ConformanceCheck(name, False, f"{type(exc).__name__}: {exc}"))

    def handshake():
        if not isinstance(backend.adapter_name, str) or not backend.adapter_name:
            raise ProtocolError("hello returned no adapter name")
        if not isinstance(backend.adapter_version, str) or not backend.adapter_version:
            raise ProtocolError("hello returned no version")
        if not isinstance(backend.token_budget, int) or backend.token_budget <= 0:
            raise ProtocolError(f"bad token budget {backend.token_budget!r}")

    check("handshake", handshake)

    def ordering():
        for _ in range(5):
            backend.predict(instances)  # request() verifies the id echo

    check("request_id_ordering", ordering)

    pristine = _probs(backend.predict(instances))

    def normalization():
        for p_fixed, p_vuln in _probs(backend.predict(instances)):
            if abs(p_fixed + p_vuln - 1.0) > PROBABILITY_TOLERANCE:
                raise ProtocolError("probabilities do not sum to 1")
            if p_fixed < 0 or p_vuln < 0:
                raise ProtocolError("negative probability")

    check("probability_normalization", normalization)

    def epochs_zero_noop():
        before = _probs(backend.predict(instances))
        backend.train(instances, [], mdl.TrainConfig(seed=11, epochs=0))
        after = _probs(backend.predict(instances))
        if before != after:
            raise ProtocolError("train with epochs=0 changed predictions")

    check("epochs_zero_noop", epochs_zero_noop)

    def checkpoint_roundtrip():
        path = Path(workdir) / "adapter.ckpt"
        saved = _probs(backend.predict(instances))
        backend.checkpoint_save(path)
        backend.train(instances, [], config)
        backend.checkpoint_load(path)
        restored = _probs(backend.predict(instances))
        if restored != saved:
            raise ProtocolError("checkpoint_load did not restore saved predictions")

    check("checkpoint_roundtrip", checkpoint_roundtrip)

    def reset_restores_pristine():
        backend.train(instances, [], config)
        backend.reset()
        if _probs(backend.predict(instances)) != pristine:
            raise ProtocolError("reset did not restore the pristine adapter")

    check("reset", reset_restores_pristine)

    def error_recovery():
        reply = backend.client.request_raw("this is not json")
        if reply.get("ok", True) or "error" not in reply:
            raise ProtocolError(f"malformed input did not yield a structured error: {reply}")
        reply = backend.client.request_raw(json.dumps({"request_id": "x1", "op": "no_such_op"}))
        if reply.get("ok", True) or reply.get("request_id") != "x1":
            raise ProtocolError(f"unknown op not rejected cleanly: {reply}")
        backend.predict(instances)  # process must still be alive and sane

    check("error_recovery", error_recovery)

    def shutdown():
        code = backend.close()
        if code != 0:
            raise ProtocolError(f"adapter exited with status {code}")

    check("clean_shutdown", shutdown)
    return results
