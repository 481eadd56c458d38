"""Decoder-style transformer classifier with low-rank adapter fine-tuning.

The backbone (embeddings, attention and MLP projections, layer norms) is
frozen after construction; every attention/MLP linear is wrapped so that a
pair of trainable low-rank factors is added to its output, and the binary
score head is trainable alongside them. Construction is seeded and fully
deterministic; a real pretrained backbone can be swapped in from a local
state-dict file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .tokenizer import PAD_ID, encode


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 4096
    dim: int = 64
    heads: int = 4
    layers: int = 2
    max_len: int = 256
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    seed: int = 0


class LoraLinear(nn.Module):
    """A frozen linear layer plus a trainable low-rank additive path."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float):
        super().__init__()
        self.base = base
        for param in self.base.parameters():
            param.requires_grad_(False)
        out_features, in_features = base.out_features, base.in_features
        self.lora_down = nn.Parameter(torch.empty(rank, in_features))
        self.lora_up = nn.Parameter(torch.zeros(out_features, rank))
        nn.init.normal_(self.lora_down, std=0.02)
        self.scaling = alpha / rank
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        low = self.dropout(x) @ self.lora_down.T
        return self.base(x) + self.scaling * (low @ self.lora_up.T)


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        dim = config.dim
        self.heads = config.heads
        self.norm_attn = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp_in = nn.Linear(dim, 4 * dim)
        self.mlp_out = nn.Linear(4 * dim, dim)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        batch, length, dim = x.shape
        head_dim = dim // self.heads
        h = self.norm_attn(x)

        def split(t):
            return t.view(batch, length, self.heads, head_dim).transpose(1, 2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(head_dim)
        causal = torch.triu(torch.ones(length, length, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(batch, length, dim)
        x = x + self.proj(out)
        h = self.norm_mlp(x)
        return x + self.mlp_out(torch.nn.functional.gelu(self.mlp_in(h)))


class TransformerClassifier(nn.Module):
    """Causal transformer over hashed tokens with a 2-logit head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        self.token_embedding = nn.Embedding(config.vocab_size, config.dim,
                                            padding_idx=PAD_ID)
        self.position_embedding = nn.Embedding(config.max_len, config.dim)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.layers))
        self.final_norm = nn.LayerNorm(config.dim)
        self.head = nn.Linear(config.dim, 2)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        pad_mask = ids == PAD_ID
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.token_embedding(ids) + self.position_embedding(positions)[None]
        for block in self.blocks:
            x = block(x, pad_mask)
        x = self.final_norm(x)
        keep = (~pad_mask).float().unsqueeze(-1)
        pooled = (x * keep).sum(dim=1) / keep.sum(dim=1).clamp(min=1.0)
        return self.head(pooled)


def build_model(config: ModelConfig,
                base_checkpoint: str | None = None) -> TransformerClassifier:
    """Construct the stack: backbone, optional pretrained weights, adapters.

    The backbone is frozen whole; attention and MLP projections are then
    wrapped with trainable low-rank factors, and the score head is trainable.
    """
    model = TransformerClassifier(config)
    if base_checkpoint:
        state = torch.load(base_checkpoint, map_location="cpu")
        model.load_state_dict(state, strict=True)
    for param in model.parameters():
        param.requires_grad_(False)
    torch.manual_seed(config.seed + 1)  # adapter init stream, separate from base
    for block in model.blocks:
        for name in ("q", "k", "v", "proj", "mlp_in", "mlp_out"):
            setattr(block, name, LoraLinear(getattr(block, name), config.rank,
                                            config.alpha, config.dropout))
    for param in model.head.parameters():
        param.requires_grad_(True)
    return model


def trainable_state(model: TransformerClassifier) -> dict[str, torch.Tensor]:
    return {name: param.detach().clone()
            for name, param in model.named_parameters() if param.requires_grad}


def load_trainable_state(model: TransformerClassifier,
                         state: dict[str, torch.Tensor]) -> None:
    params = dict(model.named_parameters())
    for name, tensor in state.items():
        with torch.no_grad():
            params[name].copy_(tensor)


def encode_batch(codes: list[str], config: ModelConfig) -> torch.Tensor:
    rows = [encode(code, config.vocab_size, config.max_len) for code in codes]
    width = max(len(r) for r in rows)
    ids = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
    return ids
