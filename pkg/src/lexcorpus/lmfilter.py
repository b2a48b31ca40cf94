"""Interpolated Kneser-Ney n-gram LM and perplexity-based document filtering.

A small model is trained on a carefully cleaned seed subset; documents whose
per-token perplexity exceeds the configured threshold (default 1500) are
rejected. Open vocabulary: unseen tokens fall into a dedicated unknown class
that receives real probability mass, so every document is scorable.
"""

from __future__ import annotations

import hashlib
import math
import pickle
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from .records import CleanDocument

# Sentinel for the unknown-token class. lm_tokenize can never emit a token
# containing NUL, so this cannot collide with corpus text.
UNK = "\x00unk"

_MODEL_MAGIC = b"LXLM1\n"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class TrainingError(Exception):
    """The LM could not be trained (e.g. empty seed corpus)."""


def lm_tokenize(text: str) -> List[str]:
    """Filter-LM tokenization: lowercased words and punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


def _estimate_discount(table: Dict[tuple, int]) -> float:
    """Absolute discount from counts-of-counts: n1 / (n1 + 2*n2).

    Falls back to 0.5 when the count-of-count statistics are degenerate
    (tiny corpora with no singletons or no doubletons).
    """
    n1 = sum(1 for c in table.values() if c == 1)
    n2 = sum(1 for c in table.values() if c == 2)
    if n1 == 0 or n2 == 0:
        return 0.5
    return n1 / (n1 + 2.0 * n2)


class NGramModel:
    """Interpolated Kneser-Ney model with one discount per order.

    The highest order uses raw counts; lower orders use continuation counts
    (number of distinct left contexts). Contexts never seen in training back
    off entirely to the next shorter context, which keeps every conditional
    distribution normalized.
    """

    def __init__(self, order: int):
        if order < 1:
            raise ValueError("order must be >= 1")
        self.order = order
        self.vocab: Dict[str, int] = {}
        # Per order k (1-based): gram table, context totals, context distinct
        # successor counts, and the discount.
        self.grams: List[Dict[tuple, int]] = [dict() for _ in range(order)]
        self.ctx_total: List[Dict[tuple, int]] = [dict() for _ in range(order)]
        self.ctx_distinct: List[Dict[tuple, int]] = [dict() for _ in range(order)]
        self.discounts: List[float] = [0.0] * order
        self._cache: Dict[tuple, float] = {}

    # -- training ----------------------------------------------------------

    @classmethod
    def train(cls, token_streams: Iterable[List[str]], order: int) -> "NGramModel":
        model = cls(order)
        raw: List[Dict[tuple, int]] = [dict() for _ in range(order)]
        n_tokens = 0
        for tokens in token_streams:
            n_tokens += len(tokens)
            for tok in tokens:
                if tok not in model.vocab:
                    model.vocab[tok] = len(model.vocab)
            for k in range(1, order + 1):
                table = raw[k - 1]
                for i in range(len(tokens) - k + 1):
                    gram = tuple(tokens[i:i + k])
                    table[gram] = table.get(gram, 0) + 1
        if n_tokens == 0:
            raise TrainingError("seed corpus is empty")

        # Highest order keeps raw counts; lower orders get continuation counts
        # derived from the distinct raw grams one order up.
        model.grams[order - 1] = raw[order - 1]
        for k in range(1, order):
            cont: Dict[tuple, int] = {}
            for gram in raw[k]:  # raw (k+1)-grams, distinct
                suffix = gram[1:]
                cont[suffix] = cont.get(suffix, 0) + 1
            model.grams[k - 1] = cont

        for k in range(1, order + 1):
            table = model.grams[k - 1]
            totals: Dict[tuple, int] = {}
            distinct: Dict[tuple, int] = {}
            for gram, c in table.items():
                ctx = gram[:-1]
                totals[ctx] = totals.get(ctx, 0) + c
                distinct[ctx] = distinct.get(ctx, 0) + 1
            model.ctx_total[k - 1] = totals
            model.ctx_distinct[k - 1] = distinct
            model.discounts[k - 1] = _estimate_discount(table)
        return model

    # -- probabilities -----------------------------------------------------

    def _prob(self, k: int, context: tuple, word: str) -> float:
        """p_k(word | context) with len(context) == k-1."""
        if k == 1:
            table = self.grams[0]
            tot = self.ctx_total[0].get((), 0)
            d = self.discounts[0]
            types = self.ctx_distinct[0].get((), 0)
            p_base = 1.0 / (len(self.vocab) + 1)  # uniform over vocab + unk
            if tot == 0:  # degenerate corpus with no bigrams at all
                return p_base
            c = table.get((word,), 0)
            return (max(c - d, 0.0) + d * types * p_base) / tot
        tot = self.ctx_total[k - 1].get(context)
        lower = self._prob(k - 1, context[1:], word) if k > 1 else 0.0
        if tot is None:
            return lower
        d = self.discounts[k - 1]
        c = self.grams[k - 1].get(context + (word,), 0)
        distinct = self.ctx_distinct[k - 1][context]
        return (max(c - d, 0.0) + d * distinct * lower) / tot

    def prob(self, context: Tuple[str, ...], word: str) -> float:
        """Conditional probability with whatever context length is available."""
        context = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        word = word if word in self.vocab else UNK
        context = tuple(t if t in self.vocab else UNK for t in context)
        key = (context, word)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        p = self._prob(len(context) + 1, context, word)
        if len(self._cache) > 2_000_000:
            self._cache.clear()
        self._cache[key] = p
        return p

    def log_prob(self, tokens: List[str]) -> float:
        """Total natural-log likelihood of a token sequence."""
        total = 0.0
        prob = self.prob
        for i, tok in enumerate(tokens):
            start = max(0, i - (self.order - 1))
            total += math.log(prob(tuple(tokens[start:i]), tok))
        return total

    # -- serialization -----------------------------------------------------

    def config_digest(self) -> str:
        spec = f"kn-interpolated;order={self.order};tokenizer=word-punct-lower"
        return hashlib.sha256(spec.encode()).hexdigest()

    def save(self, path) -> None:
        payload = {
            "order": self.order,
            "discounts": list(self.discounts),
            "vocab": sorted(self.vocab),
            "grams": [sorted(t.items()) for t in self.grams],
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            fh.write(_MODEL_MAGIC)
            fh.write(self.config_digest().encode() + b"\n")
            fh.write(pickle.dumps(payload, protocol=4))

    @classmethod
    def load(cls, path) -> "NGramModel":
        with Path(path).open("rb") as fh:
            magic = fh.read(len(_MODEL_MAGIC))
            if magic != _MODEL_MAGIC:
                raise ValueError(f"{path}: not a lexcorpus LM file")
            fh.readline()  # config digest line
            payload = pickle.loads(fh.read())
        model = cls(payload["order"])
        model.discounts = list(payload["discounts"])
        model.vocab = {w: i for i, w in enumerate(payload["vocab"])}
        model.grams = [dict(items) for items in payload["grams"]]
        for k in range(1, model.order + 1):
            totals: Dict[tuple, int] = {}
            distinct: Dict[tuple, int] = {}
            for gram, c in model.grams[k - 1].items():
                ctx = gram[:-1]
                totals[ctx] = totals.get(ctx, 0) + c
                distinct[ctx] = distinct.get(ctx, 0) + 1
            model.ctx_total[k - 1] = totals
            model.ctx_distinct[k - 1] = distinct
        return model


def train_ngram_lm(seed_texts: Iterable[str], order: int = 5) -> NGramModel:
    """Train the filter LM on seed documents (tokenized internally)."""
    return NGramModel.train((lm_tokenize(t) for t in seed_texts), order)


def perplexity_normalized(model: NGramModel, text: str) -> float:
    """Per-token perplexity exp(-mean log p); empty documents score +inf."""
    tokens = lm_tokenize(text)
    if not tokens:
        return math.inf
    return math.exp(-model.log_prob(tokens) / len(tokens))


@dataclass(frozen=True)
class PerplexityFilterConfig:
    threshold: float = 1500.0

    def __post_init__(self):
        if self.threshold <= 1:
            raise ValueError("perplexity threshold must be > 1")


def filter_by_perplexity(docs: Iterable[CleanDocument], model: NGramModel,
                         config: PerplexityFilterConfig = PerplexityFilterConfig(),
                         ) -> Tuple[List[CleanDocument], List[CleanDocument]]:
    """Partition documents into (kept, rejected) at the perplexity threshold.

    Kept iff perplexity <= threshold. Documents that fail scoring are
    rejected with reason "scoring-error" rather than aborting the stage.
    """
    kept, rejected = [], []
    for doc in docs:
        try:
            score = perplexity_normalized(model, doc.text)
        except (ValueError, OverflowError) as exc:
            rejected.append(doc.reject(f"scoring-error: {exc}"))
            continue
        scored = replace(doc.with_step("perplexity"), normalized_perplexity=score)
        if score <= config.threshold:
            kept.append(scored)
        else:
            rejected.append(scored.reject(f"perplexity:{score:.1f}"))
    return kept, rejected
