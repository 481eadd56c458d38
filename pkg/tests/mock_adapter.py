#!/usr/bin/env python3
"""Deterministic mock model adapter speaking the line-delimited wire protocol.

The "model" scores an instance by marker tokens in its code and a trainable
bias: prob_vulnerable = clamp(base + bias). Training with epochs > 0 shifts
the bias by a fixed amount per epoch; epochs = 0 is a strict no-op. Used to
exercise the harness's external-backend path and the conformance suite
without any heavyweight dependency.
"""

from __future__ import annotations

import argparse
import json
import sys


class MockModel:
    def __init__(self):
        self.bias = 0.0

    def state(self) -> dict:
        return {"bias": self.bias}

    def restore(self, state: dict) -> None:
        self.bias = float(state["bias"])

    def prob_vulnerable(self, code: str) -> float:
        base = 0.9 if "bad" in code else 0.1
        return min(0.999999, max(0.000001, base + self.bias))

    def train(self, instances, hyperparameters) -> dict:
        epochs = int(hyperparameters.get("epochs", 0))
        if epochs > 0:
            self.bias += 0.05 * epochs
        return {"steps": epochs * max(1, len(instances)), "final_loss": 0.5 - self.bias}


def serve() -> int:
    model = MockModel()
    pristine = model.state()
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request is not an object")
        except (json.JSONDecodeError, ValueError) as exc:
            sys.stdout.write(json.dumps(
                {"request_id": None, "ok": False,
                 "error": {"message": f"malformed request: {exc}"}}) + "\n")
            sys.stdout.flush()
            continue

        request_id = request.get("request_id")
        op = request.get("op")
        response = {"request_id": request_id, "ok": True}
        try:
            if op == "hello":
                response.update({"name": "mock-adapter", "version": "1.0",
                                 "token_budget": 512})
            elif op == "reset":
                model.restore(pristine)
            elif op == "train":
                response.update(model.train(request.get("instances", []),
                                            request.get("hyperparameters", {})))
            elif op == "predict":
                predictions = []
                for inst in request.get("instances", []):
                    p_vuln = model.prob_vulnerable(inst["code"])
                    predictions.append({"prob_fixed": 1.0 - p_vuln,
                                        "prob_vulnerable": p_vuln})
                response["predictions"] = predictions
            elif op == "checkpoint_save":
                with open(request["path"], "w") as fh:
                    json.dump(model.state(), fh)
            elif op == "checkpoint_load":
                with open(request["path"]) as fh:
                    model.restore(json.load(fh))
            elif op == "shutdown":
                sys.stdout.write(json.dumps(response) + "\n")
                sys.stdout.flush()
                return 0
            else:
                response = {"request_id": request_id, "ok": False,
                            "error": {"message": f"unknown op {op!r}"}}
        except Exception as exc:  # keep serving after per-request failures
            response = {"request_id": request_id, "ok": False,
                        "error": {"message": f"{type(exc).__name__}: {exc}"}}
        sys.stdout.write(json.dumps(response) + "\n")
        sys.stdout.flush()
    return 0


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--serve", action="store_true")
    args = parser.parse_args()
    if not args.serve:
        parser.error("run with --serve")
    return serve()


if __name__ == "__main__":
    sys.exit(main())
