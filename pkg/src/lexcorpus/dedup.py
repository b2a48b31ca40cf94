"""Exact and near-duplicate removal: content hashing, MinHash, and LSH banding.

Near-duplicate detection estimates word-shingle Jaccard similarity with
128-permutation MinHash signatures; LSH banding proposes candidate pairs and
union-find merges them into clusters at the configured similarity threshold
(default 0.5). The canonical-order-first member of each cluster survives, so
the result is independent of sharding and worker count.
"""

from __future__ import annotations

import hashlib
import unicodedata
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .records import CleanDocument, canonical_key, canonical_sort

_PRIME = (1 << 31) - 1  # Mersenne prime; keeps a*h+b inside uint64


@dataclass(frozen=True)
class DedupConfig:
    shingle_len: int = 5
    num_permutations: int = 128
    similarity_threshold: float = 0.5
    bands: int = 16
    rows: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.similarity_threshold < 1:
            raise ValueError("similarity threshold must be in (0, 1)")
        if self.bands * self.rows != self.num_permutations:
            raise ValueError(f"bands*rows must equal num_permutations "
                             f"({self.bands}*{self.rows} != {self.num_permutations})")

    def to_config(self) -> dict:
        return {"shingle_len": self.shingle_len, "num_permutations": self.num_permutations,
                "similarity_threshold": self.similarity_threshold,
                "bands": self.bands, "rows": self.rows, "seed": self.seed}


@dataclass(frozen=True)
class MinHashSignature:
    doc_id: str
    values: np.ndarray  # uint64, length num_permutations


@dataclass(frozen=True)
class ClusterEntry:
    representative_id: str
    member_id: str
    estimated_jaccard: float


# ---------------------------------------------------------------------------
# Exact dedup
# ---------------------------------------------------------------------------

def content_hash(text: str) -> str:
    """Hash of the NFKC-normalized text, so compatibility variants collide."""
    normalized = unicodedata.normalize("NFKC", text)
    return hashlib.sha256(normalized.encode("utf-8")).hexdigest()


def exact_dedup(docs: Iterable[CleanDocument]) -> Tuple[List[CleanDocument], List[CleanDocument]]:
    """Keep the canonical-order-first document of each identical-content group."""
    docs = canonical_sort(docs)
    kept, rejected = [], []
    first_by_hash: Dict[str, str] = {}
    for doc in docs:
        h = content_hash(doc.text)
        rep = first_by_hash.get(h)
        if rep is None:
            first_by_hash[h] = doc.id
            kept.append(doc)
        else:
            rejected.append(doc.reject(f"exact-dup:{rep}"))
    return kept, rejected


# ---------------------------------------------------------------------------
# MinHash
# ---------------------------------------------------------------------------

def shingle(text: str, k: int) -> Set[str]:
    """Word k-gram shingle set; a document shorter than k words is its own shingle."""
    if k < 1:
        raise ValueError("shingle length must be >= 1")
    words = text.split()
    if len(words) < k:
        return {text}
    return {" ".join(words[i:i + k]) for i in range(len(words) - k + 1)}


def _shingle_hashes(shingles: Set[str]) -> np.ndarray:
    out = np.empty(len(shingles), dtype=np.uint64)
    for i, s in enumerate(sorted(shingles)):
        out[i] = int.from_bytes(hashlib.blake2b(s.encode("utf-8"), digest_size=4).digest(), "big")
    return out


class PermutationSet:
    """Fixed universal-hash permutations shared across one corpus snapshot."""

    def __init__(self, num_permutations: int, seed: int):
        rng = np.random.default_rng(seed)
        self.a = rng.integers(1, _PRIME, size=num_permutations, dtype=np.uint64)
        self.b = rng.integers(0, _PRIME, size=num_permutations, dtype=np.uint64)
        self.num_permutations = num_permutations


def minhash_signature(shingles: Set[str], perms: PermutationSet,
                      doc_id: str = "") -> MinHashSignature:
    """Per-permutation minimum of a*h+b mod p over all shingle hashes."""
    h = _shingle_hashes(shingles)
    # (n_shingles, n_perm) table; inputs are < 2^32 and a < 2^31, no overflow.
    vals = (h[:, None] * perms.a[None, :] + perms.b[None, :]) % _PRIME
    return MinHashSignature(doc_id=doc_id, values=vals.min(axis=0))


def estimate_jaccard(sig_a: MinHashSignature, sig_b: MinHashSignature) -> float:
    """Fraction of agreeing signature positions (unbiased Jaccard estimator)."""
    if sig_a.values.shape != sig_b.values.shape:
        raise ValueError("signature length mismatch")
    return float(np.mean(sig_a.values == sig_b.values))


# ---------------------------------------------------------------------------
# LSH + clustering
# ---------------------------------------------------------------------------

def _lsh_candidate_pairs(signatures: Sequence[MinHashSignature],
                         config: DedupConfig) -> Set[Tuple[int, int]]:
    pairs: Set[Tuple[int, int]] = set()
    for band in range(config.bands):
        lo, hi = band * config.rows, (band + 1) * config.rows
        buckets: Dict[bytes, List[int]] = {}
        for idx, sig in enumerate(signatures):
            buckets.setdefault(sig.values[lo:hi].tobytes(), []).append(idx)
        for members in buckets.values():
            if len(members) > 1:
                for i in range(len(members)):
                    for j in range(i + 1, len(members)):
                        pairs.add((members[i], members[j]))
    return pairs


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


@dataclass
class NearDedupResult:
    kept: List[CleanDocument]
    rejected: List[CleanDocument]
    clusters: List[ClusterEntry] = field(default_factory=list)


def near_dedup(docs: Iterable[CleanDocument], config: DedupConfig = DedupConfig(),
               perms: Optional[PermutationSet] = None) -> NearDedupResult:
    """Cluster near-duplicates and keep one representative per cluster.

    Candidate pairs come from LSH banding; a pair joins a cluster when its
    estimated Jaccard reaches the similarity threshold. The representative is
    the canonical-order-first member, and every rejection records it.
    """
    docs = canonical_sort(docs)  # index order == canonical order
    if perms is None:
        perms = PermutationSet(config.num_permutations, config.seed)
    signatures = [minhash_signature(shingle(d.text, config.shingle_len), perms, d.id)
                  for d in docs]

    uf = _UnionFind(len(docs))
    for i, j in _lsh_candidate_pairs(signatures, config):
        if estimate_jaccard(signatures[i], signatures[j]) >= config.similarity_threshold:
            uf.union(i, j)

    members_by_root: Dict[int, List[int]] = {}
    for idx in range(len(docs)):
        members_by_root.setdefault(uf.find(idx), []).append(idx)

    result = NearDedupResult(kept=[], rejected=[])
    for root in sorted(members_by_root):
        members = sorted(members_by_root[root])
        rep = members[0]  # canonical-order-first
        result.kept.append(docs[rep])
        for idx in members[1:]:
            est = estimate_jaccard(signatures[rep], signatures[idx])
            result.rejected.append(docs[idx].reject(f"near-dup:{docs[rep].id}"))
            result.clusters.append(ClusterEntry(docs[rep].id, docs[idx].id, est))
    return result


def write_cluster_report(path, clusters: Sequence[ClusterEntry]) -> None:
    from pathlib import Path
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for entry in clusters:
            fh.write(f"{entry.representative_id}\t{entry.member_id}\t"
                     f"{entry.estimated_jaccard:.4f}\n")


def exact_jaccard(a: Set[str], b: Set[str]) -> float:
    """Exact set Jaccard similarity (used for reporting and verification)."""
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)
