"""Shared test helpers: random code snippets and small corpora."""

from __future__ import annotations

import string
from datetime import date, timedelta

import numpy as np
import pytest

from driftharness.corpus import Instance

_FRAGMENTS = [
    "int x = {n};", "y += x * {n};", "// inline note {n}",
    "/* block\n comment {n} */", "# define-ish {n}", "if (x > {n}) {{ y--; }}",
    "call_site({n}, buf);", "memcpy(dst, src, {n});", "return x + {n};",
    "char *p = \"lit{n}\";", "while (i < {n}) i++;", "\t\t", "\n\n", "   ",
    "/* unterminated {n}", "for (;;) break;", "label_{n}:", "x /= {n};",
]


def random_snippet(rng: np.random.Generator, max_fragments: int = 12) -> str:
    n_frag = int(rng.integers(0, max_fragments))
    parts = []
    for _ in range(n_frag):
        frag = _FRAGMENTS[int(rng.integers(len(_FRAGMENTS)))]
        parts.append(frag.format(n=int(rng.integers(1000))))
        if rng.random() < 0.5:
            parts.append(" " * int(rng.integers(4)) + "\n" * int(rng.integers(3)))
    return "".join(parts)


def random_word(rng: np.random.Generator, length: int = 8) -> str:
    letters = string.ascii_lowercase
    return "".join(letters[int(rng.integers(26))] for _ in range(length))


def make_instance(rng: np.random.Generator, idx: int,
                  start: date = date(2020, 1, 1), span_days: int = 365,
                  code: str | None = None) -> Instance:
    if code is None:
        code = f"int fn_{idx}(int a) {{ return a + {idx}; }}"
    return Instance(
        id=f"i{idx:05d}",
        code=code,
        label=int(rng.integers(2)),
        disclosure_date=start + timedelta(days=int(rng.integers(span_days))),
        cve_id=f"CVE-2020-{1000 + idx}" if rng.random() < 0.5 else None,
        language="c" if rng.random() < 0.8 else None,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
