"""Shared fixtures: deterministic synthetic legal-ish corpora."""

from __future__ import annotations

import numpy as np
import pytest

from lexcorpus.records import CleanDocument

LEGAL_WORDS = (
    "court held that the defendant plaintiff statute section provides pursuant "
    "to judgment appeal motion granted denied evidence record trial jury verdict "
    "contract breach damages liability negligence duty care reasonable standard "
    "review district circuit supreme federal state law rule order opinion filed "
    "party parties counsel argued whether under therefore because however shall "
    "may must agreement clause provision hereby notice claim relief summary "
    "issue fact matter case against upon within without further wherefore"
).split()


def make_text(rng: np.random.Generator, n_words: int) -> str:
    """Sentence-shaped text over a small legal vocabulary."""
    words = []
    remaining = n_words
    while remaining > 0:
        k = int(rng.integers(6, 14))
        k = min(k, remaining)
        sentence = [str(w) for w in rng.choice(LEGAL_WORDS, size=k)]
        sentence[0] = sentence[0].capitalize()
        words.append(" ".join(sentence) + ".")
        remaining -= k
    return " ".join(words)


def make_docs(seed: int, count: int, words_per_doc: int = 80,
              source: str = "fixture") -> list:
    rng = np.random.default_rng(seed)
    return [CleanDocument(id=f"{source}-{i:05d}", source=source,
                          text=make_text(rng, words_per_doc))
            for i in range(count)]


@pytest.fixture(scope="session")
def small_corpus():
    return make_docs(seed=7, count=50)
