"""Request/response loop speaking the harness wire protocol over stdio.

One JSON object per line. Every request gets exactly one response with the
same request_id; malformed input yields a structured error and the process
keeps serving. Training touches only the adapter factors and the score head,
seeded per request for reproducibility; ``reset`` restores the pristine
adapter state and ``checkpoint_save``/``checkpoint_load`` round-trip it
exactly.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import torch

from . import __version__
from .model import (ModelConfig, build_model, encode_batch, load_trainable_state,
                    trainable_state)

CAVEATS = ("a pretrained backbone may have seen public code from the "
           "evaluation period during pretraining; scores on such periods "
           "can be optimistic")


class AdapterService:
    def __init__(self, config: ModelConfig, base_checkpoint: str | None = None):
        torch.set_num_threads(1)  # keep arithmetic independent of host cores
        self.config = config
        self.model = build_model(config, base_checkpoint)
        self.model.eval()
        self.pristine = trainable_state(self.model)
        self.pretrained = base_checkpoint is not None

    # -- ops ----------------------------------------------------------------

    def hello(self, _request: dict) -> dict:
        return {
            "name": "driftadapter",
            "version": __version__,
            "token_budget": self.config.max_len,
            "metadata": {
                "architecture": f"causal transformer d{self.config.dim}"
                                f"x{self.config.layers}, rank {self.config.rank}",
                "pretrained_base": self.pretrained,
                "caveats": [CAVEATS] if self.pretrained else [],
            },
        }

    def reset(self, _request: dict) -> dict:
        load_trainable_state(self.model, self.pristine)
        return {}

    def predict(self, request: dict) -> dict:
        instances = request.get("instances", [])
        if not instances:
            return {"predictions": []}
        ids = encode_batch([inst["code"] for inst in instances], self.config)
        self.model.eval()
        with torch.no_grad():
            probs = torch.softmax(self.model(ids).double(), dim=1)
        return {"predictions": [
            {"prob_fixed": float(p[0]), "prob_vulnerable": float(p[1])}
            for p in probs
        ]}

    def train(self, request: dict) -> dict:
        started = time.perf_counter()
        instances = request.get("instances", [])
        hp = request.get("hyperparameters", {})
        epochs = int(hp.get("epochs", 0))
        if epochs == 0 or not instances:
            return {"steps": 0, "final_loss": None,
                    "time_s": time.perf_counter() - started}

        learning_rate = float(hp.get("learning_rate", 2e-4))
        batch_size = max(1, int(hp.get("batch_size", 32)))
        seed = int(hp.get("seed", 0))
        labels = torch.tensor([int(inst["label"]) for inst in instances])
        ids = encode_batch([inst["code"] for inst in instances], self.config)

        weight = None
        class_weights = hp.get("class_weights")
        if hp.get("loss_mode") == "class_weighted":
            if class_weights is not None:
                weight = torch.tensor([float(class_weights["fixed"]),
                                       float(class_weights["vulnerable"])])
            else:
                counts = torch.bincount(labels, minlength=2).float()
                total = float(labels.numel())
                weight = torch.where(counts > 0, total / (2.0 * counts),
                                     torch.zeros(2))
        criterion = torch.nn.CrossEntropyLoss(weight=weight)

        torch.manual_seed(seed)
        optimizer = torch.optim.AdamW(
            (p for p in self.model.parameters() if p.requires_grad),
            lr=learning_rate, weight_decay=float(hp.get("weight_decay", 0.0)))
        self.model.train()
        generator = torch.Generator().manual_seed(seed)
        steps = 0
        final_loss = None
        for _ in range(epochs):
            order = torch.randperm(len(instances), generator=generator)
            for lo in range(0, len(instances), batch_size):
                batch = order[lo:lo + batch_size]
                optimizer.zero_grad()
                logits = self.model(ids[batch])
                loss = criterion(logits, labels[batch])
                loss.backward()
                optimizer.step()
                steps += 1
                final_loss = float(loss.detach())
        self.model.eval()
        return {"steps": steps, "final_loss": final_loss,
                "time_s": time.perf_counter() - started}

    def checkpoint_save(self, request: dict) -> dict:
        torch.save({"format_version": 1,
                    "config": self.config.__dict__,
                    "trainable": trainable_state(self.model)}, request["path"])
        return {}

    def checkpoint_load(self, request: dict) -> dict:
        payload = torch.load(request["path"], map_location="cpu")
        if payload.get("format_version") != 1:
            raise ValueError(f"unsupported checkpoint version "
                             f"{payload.get('format_version')!r}")
        load_trainable_state(self.model, payload["trainable"])
        return {}


def serve(config: ModelConfig, base_checkpoint: str | None = None) -> int:
    service = AdapterService(config, base_checkpoint)
    ops = {
        "hello": service.hello,
        "reset": service.reset,
        "train": service.train,
        "predict": service.predict,
        "checkpoint_save": service.checkpoint_save,
        "checkpoint_load": service.checkpoint_load,
    }
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request is not an object")
        except (json.JSONDecodeError, ValueError) as exc:
            _emit({"request_id": None, "ok": False,
                   "error": {"message": f"malformed request: {exc}"}})
            continue
        request_id = request.get("request_id")
        op = request.get("op")
        if op == "shutdown":
            _emit({"request_id": request_id, "ok": True})
            return 0
        handler = ops.get(op)
        if handler is None:
            _emit({"request_id": request_id, "ok": False,
                   "error": {"message": f"unknown op {op!r}"}})
            continue
        try:
            result = handler(request)
            _emit({"request_id": request_id, "ok": True, **result})
        except Exception as exc:  # stay alive across per-request failures
            _emit({"request_id": request_id, "ok": False,
                   "error": {"message": f"{type(exc).__name__}: {exc}"}})
    return 0


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="driftadapter",
        description="Low-rank-adapted transformer behind the harness wire protocol")
    parser.add_argument("--serve", action="store_true", help="start the stdio loop")
    parser.add_argument("--base-checkpoint", default=None,
                        help="optional state-dict file for a pretrained backbone")
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--heads", type=int, default=4)
    parser.add_argument("--rank", type=int, default=8)
    parser.add_argument("--max-len", type=int, default=256)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if not args.serve:
        parser.error("run with --serve")
    config = ModelConfig(dim=args.dim, layers=args.layers, heads=args.heads,
                         rank=args.rank, max_len=args.max_len, seed=args.seed)
    return serve(config, args.base_checkpoint)


if __name__ == "__main__":
    sys.exit(main())
