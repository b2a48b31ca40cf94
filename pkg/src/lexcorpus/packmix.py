"""Tokenization, chunking, fixed-length example packing, and mixture sampling.

Documents are tokenized (byte-level by default), chunked to the sequence
length, greedily packed into fixed 8192-token examples with a separator
between documents, and drawn from sources according to a mixture plan with
per-source token quotas. Packing conserves tokens exactly; sampling is a
deterministic function of (plan, shards, seed).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .records import SourceSpec

DEFAULT_SEQ_LEN = 8192


class PlanningError(Exception):
    """A mixture plan is infeasible as configured."""


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

class ByteTokenizer:
    """Byte-level tokenizer: one id per byte plus separator and pad specials.

    Total and exactly reversible, which makes packing-conservation checks
    trivial. Subword tokenizers can be plugged in through the same interface
    (encode / decode / sep_id / pad_id / digest).
    """

    sep_id = 256
    pad_id = 257
    vocab_size = 258

    def encode(self, text: str) -> np.ndarray:
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int32)

    def decode(self, ids: np.ndarray) -> str:
        content = ids[(ids >= 0) & (ids < 256)]
        return content.astype(np.uint8).tobytes().decode("utf-8", errors="replace")

    def digest(self) -> str:
        return hashlib.sha256(b"byte-level;sep=256;pad=257").hexdigest()


@dataclass(frozen=True)
class TokenSequence:
    doc_id: str
    tokens: np.ndarray
    tokenizer_digest: str
    source: str = ""


def tokenize(text: str, doc_id: str = "", source: str = "",
             tokenizer: Optional[ByteTokenizer] = None) -> TokenSequence:
    tokenizer = tokenizer or ByteTokenizer()
    return TokenSequence(doc_id=doc_id, tokens=tokenizer.encode(text),
                         tokenizer_digest=tokenizer.digest(), source=source)


def chunk_document(seq: TokenSequence, max_len: int = DEFAULT_SEQ_LEN) -> List[TokenSequence]:
    """Split into consecutive chunks of max_len; concatenation is the input."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    tokens = seq.tokens
    if len(tokens) <= max_len:
        return [seq]
    chunks = []
    for i, start in enumerate(range(0, len(tokens), max_len)):
        chunks.append(TokenSequence(doc_id=f"{seq.doc_id}#chunk{i}",
                                    tokens=tokens[start:start + max_len],
                                    tokenizer_digest=seq.tokenizer_digest,
                                    source=seq.source))
    return chunks


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    doc_id: str
    source: str
    begin: int  # position in the packed example
    end: int


@dataclass(frozen=True)
class PackedExample:
    tokens: np.ndarray  # exactly seq_len ids
    segments: Tuple[Segment, ...]
    pad_count: int


def pack_examples(seqs: Iterable[TokenSequence], seq_len: int = DEFAULT_SEQ_LEN,
                  sep_id: int = ByteTokenizer.sep_id,
                  pad_id: int = ByteTokenizer.pad_id) -> Iterator[PackedExample]:
    """Greedy packing in stream order.

    A document is appended (preceded by one separator if the example is
    nonempty) while it fits; otherwise the current example is padded out and
    emitted. Documents must be pre-chunked to <= seq_len.
    """
    buf: List[np.ndarray] = []
    segments: List[Segment] = []
    used = 0

    def flush() -> PackedExample:
        nonlocal buf, segments, used
        pad = seq_len - used
        parts = buf + ([np.full(pad, pad_id, dtype=np.int32)] if pad else [])
        example = PackedExample(tokens=np.concatenate(parts),
                                segments=tuple(segments), pad_count=pad)
        buf, segments, used = [], [], 0
        return example

    for seq in seqs:
        n = len(seq.tokens)
        if n > seq_len:
            raise ValueError(f"document {seq.doc_id} longer than seq_len; chunk it first")
        if n == 0:
            continue
        needed = n + (1 if buf else 0)
        if used + needed > seq_len:
            yield flush()
            needed = n
        if buf:
            buf.append(np.array([sep_id], dtype=np.int32))
            used += 1
        segments.append(Segment(seq.doc_id, seq.source, used, used + n))
        buf.append(seq.tokens.astype(np.int32))
        used += n
    if buf:
        yield flush()


# ---------------------------------------------------------------------------
# Shard files: fixed-length little-endian int32 records + sidecar index
# ---------------------------------------------------------------------------

def write_shard(path, examples: Iterable[PackedExample], seq_len: int = DEFAULT_SEQ_LEN) -> int:
    """Write packed examples to ``path`` (binary) and ``path + .idx`` (provenance)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("wb") as data, Path(str(path) + ".idx").open("w", encoding="utf-8") as idx:
        for ex in examples:
            if len(ex.tokens) != seq_len:
                raise ValueError("packed example has wrong length")
            data.write(ex.tokens.astype("<i4").tobytes())
            idx.write(json.dumps({
                "segments": [[s.doc_id, s.source, s.begin, s.end] for s in ex.segments],
                "pad_count": ex.pad_count,
            }, sort_keys=True, separators=(",", ":")) + "\n")
            count += 1
    return count


def read_shard(path, seq_len: int = DEFAULT_SEQ_LEN) -> List[PackedExample]:
    path = Path(path)
    raw = np.frombuffer(path.read_bytes(), dtype="<i4")
    if len(raw) % seq_len:
        raise ValueError(f"{path}: size is not a multiple of seq_len")
    examples = []
    with Path(str(path) + ".idx").open("r", encoding="utf-8") as idx:
        for i, line in enumerate(idx):
            meta = json.loads(line)
            tokens = raw[i * seq_len:(i + 1) * seq_len].astype(np.int32)
            segments = tuple(Segment(d, s, b, e) for d, s, b, e in meta["segments"])
            examples.append(PackedExample(tokens=tokens, segments=segments,
                                          pad_count=meta["pad_count"]))
    return examples


# ---------------------------------------------------------------------------
# Mixture recipes and sampling
# ---------------------------------------------------------------------------

@dataclass
class MixRecipe:
    """Named sources with relative budgets plus the replay/math/instruction mix.

    Source budgets are relative weights within their kind (corpus-size
    gigabytes or raw token counts both work). Fractions are token-level shares
    of the total budget; legal sources share whatever remains.
    """

    sources: List[SourceSpec]
    replay_fraction: float = 0.02
    math_fraction: float = 0.05
    instruction_fraction: float = 0.0
    phase: str = "pretrain"  # pretrain | anneal

    def __post_init__(self):
        for frac, name in ((self.replay_fraction, "replay"), (self.math_fraction, "math"),
                           (self.instruction_fraction, "instruction")):
            if not 0 <= frac <= 1:
                raise ValueError(f"{name}_fraction must be in [0, 1]")
        if self.replay_fraction + self.math_fraction + self.instruction_fraction > 1 + 1e-6:
            raise ValueError("replay + math + instruction fractions exceed 1")
        names = [s.name for s in self.sources]
        if len(names) != len(set(names)):
            raise ValueError("source names must be unique within a recipe")
        if self.phase not in ("pretrain", "anneal"):
            raise ValueError(f"unknown phase {self.phase!r}")

    def by_kind(self, kind: str) -> List[SourceSpec]:
        return [s for s in self.sources if s.kind == kind]

    def to_config(self) -> dict:
        return {"sources": [{"name": s.name, "token_budget": s.token_budget, "kind": s.kind}
                            for s in self.sources],
                "replay_fraction": self.replay_fraction,
                "math_fraction": self.math_fraction,
                "instruction_fraction": self.instruction_fraction,
                "phase": self.phase}

    @classmethod
    def from_config(cls, obj: dict) -> "MixRecipe":
        sources = [SourceSpec(name=s["name"], token_budget=float(s["token_budget"]),
                              kind=s.get("kind", "legal")) for s in obj["sources"]]
        return cls(sources=sources,
                   replay_fraction=float(obj.get("replay_fraction", 0.02)),
                   math_fraction=float(obj.get("math_fraction", 0.05)),
                   instruction_fraction=float(obj.get("instruction_fraction", 0.0)),
                   phase=obj.get("phase", "pretrain"))


@dataclass(frozen=True)
class SamplingPlan:
    quotas: Dict[str, int]  # source name -> token quota
    total_tokens: int
    allow_repetition: bool = False

    def proportions(self) -> Dict[str, float]:
        return {name: q / self.total_tokens for name, q in self.quotas.items()}


def _split(weighted: Sequence[SourceSpec], budget: float) -> Dict[str, float]:
    total = sum(s.token_budget for s in weighted)
    return {s.name: budget * s.token_budget / total for s in weighted}


def build_sampling_plan(recipe: MixRecipe, total_token_budget: int,
                        available_tokens: Optional[Dict[str, int]] = None,
                        allow_repetition: bool = False) -> SamplingPlan:
    """Turn a recipe into per-source token quotas.

    Pretrain phase: replay and math (and optionally instruction) sources get
    their configured fractions of the total; legal sources split the remainder
    proportionally to their budgets. Anneal phase: annealing sources split the
    whole budget.
    """
    quotas: Dict[str, float] = {}
    if recipe.phase == "anneal":
        anneal = recipe.by_kind("annealing")
        if not anneal:
            raise PlanningError("anneal phase requires annealing sources")
        quotas.update(_split(anneal, total_token_budget))
    else:
        legal = recipe.by_kind("legal")
        if not legal:
            raise PlanningError("pretrain phase requires legal sources")
        legal_share = 1.0 - recipe.replay_fraction - recipe.math_fraction \
            - recipe.instruction_fraction
        quotas.update(_split(legal, legal_share * total_token_budget))
        for kind, frac in (("replay", recipe.replay_fraction),
                           ("math", recipe.math_fraction),
                           ("instruction", recipe.instruction_fraction)):
            if frac == 0:
                continue
            sources = recipe.by_kind(kind)
            if not sources:
                raise PlanningError(f"recipe requests {frac:.2%} {kind} data "
                                    f"but has no {kind} sources")
            quotas.update(_split(sources, frac * total_token_budget))
    int_quotas = {name: int(round(q)) for name, q in quotas.items()}
    if available_tokens is not None and not allow_repetition:
        for name, quota in int_quotas.items():
            have = available_tokens.get(name, 0)
            if have < quota:
                raise PlanningError(f"source {name!r}: quota {quota} tokens exceeds "
                                    f"available {have} and repetition is disabled")
    return SamplingPlan(quotas=int_quotas, total_tokens=total_token_budget,
                        allow_repetition=allow_repetition)


def sample_mix(plan: SamplingPlan, shards: Dict[str, List[TokenSequence]], seed: int,
               seq_len: int = DEFAULT_SEQ_LEN) -> Iterator[PackedExample]:
    """Deterministic weighted interleave of source documents, then packing.

    Each step draws from the source with the highest remaining quota fraction
    (ties by name), so realized proportions track the plan to within one
    document length per source. Same (plan, shards, seed) gives an identical
    example stream.
    """
    order: Dict[str, List[TokenSequence]] = {}
    cursor: Dict[str, int] = {}
    for name in sorted(plan.quotas):
        docs = list(shards.get(name, []))
        rng = np.random.default_rng((seed, hash_name(name)))
        rng.shuffle(docs)
        chunked: List[TokenSequence] = []
        for doc in docs:
            chunked.extend(chunk_document(doc, seq_len))
        order[name] = chunked
        cursor[name] = 0

    remaining = {name: float(q) for name, q in plan.quotas.items()}

    def draws() -> Iterator[TokenSequence]:
        while True:
            live = [(remaining[n] / plan.quotas[n], n) for n in remaining
                    if remaining[n] > 0 and plan.quotas[n] > 0]
            if not live:
                return
            _, name = max(live, key=lambda t: (t[0], t[1]))
            docs = order[name]
            if cursor[name] >= len(docs):
                if plan.allow_repetition and docs:
                    cursor[name] = 0
                else:
                    raise PlanningError(f"source {name!r} exhausted with "
                                        f"{int(remaining[name])} tokens still owed")
            doc = docs[cursor[name]]
            cursor[name] += 1
            remaining[name] -= len(doc.tokens)
            yield doc

    yield from pack_examples(draws(), seq_len=seq_len)


def hash_name(name: str) -> int:
    """Stable 64-bit hash of a source name (process-hash independent)."""
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "big")


def realized_proportions(examples: Iterable[PackedExample]) -> Dict[str, float]:
    """Per-source share of content tokens across packed examples."""
    counts: Dict[str, int] = {}
    for ex in examples:
        for seg in ex.segments:
            counts[seg.source] = counts.get(seg.source, 0) + (seg.end - seg.begin)
    total = sum(counts.values())
    return {name: c / total for name, c in counts.items()} if total else {}
