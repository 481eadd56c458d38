"""Deterministic hash tokenizer: no vocabulary files, no downloads.

Code is split into identifier / number / symbol tokens and each token is
hashed into a fixed id space. Ids 0 and 1 are reserved for padding and the
begin-of-sequence marker. Sequences beyond the budget are truncated from the
end.
"""

from __future__ import annotations

import re
from hashlib import blake2b

PAD_ID = 0
BOS_ID = 1
RESERVED = 2

_TOKEN_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*|\d+|\S")


def encode(code: str, vocab_size: int, budget: int) -> list[int]:
    ids = [BOS_ID]
    for token in _TOKEN_RE.findall(code)[: budget - 1]:
        digest = blake2b(token.encode("utf-8"), digest_size=8).digest()
        ids.append(RESERVED + int.from_bytes(digest, "big") % (vocab_size - RESERVED))
    return ids
