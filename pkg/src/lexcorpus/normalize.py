"""Text extraction, Unicode normalization, line repair, and rule-based filters.

PDF extraction is delegated to an external command (the corpus is mostly
scraped or pre-extracted text); HTML gets a lightweight tag strip. All
per-document transforms are pure, so they parallelize trivially once the
corpus-global repeated-n-gram counts exist.
"""

from __future__ import annotations

import html
import re
import subprocess
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .records import CleanDocument


class ExtractionFailed(Exception):
    """External text extractor exited nonzero."""


class RuleConfigError(Exception):
    """A filter rule failed to compile at config load time."""


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

_TAG_RE = re.compile(r"<[^>]*>")


def extract_text(data: bytes, format: str = "plain",
                 external_command: Optional[list] = None) -> str:
    """Turn raw input bytes into plain text.

    ``plain`` decodes UTF-8 (invalid bytes replaced); ``html`` additionally
    strips tags and resolves entities; ``external`` pipes the bytes through a
    configured extractor command and captures stdout.
    """
    if format == "plain":
        return data.decode("utf-8", errors="replace")
    if format == "html":
        text = data.decode("utf-8", errors="replace")
        return html.unescape(_TAG_RE.sub(" ", text))
    if format == "external":
        if not external_command:
            raise ExtractionFailed("no external extractor command configured")
        proc = subprocess.run(external_command, input=data,
                              capture_output=True, check=False)
        if proc.returncode != 0:
            excerpt = proc.stderr.decode("utf-8", errors="replace")[:500]
            raise ExtractionFailed(
                f"extractor {external_command[0]!r} exited {proc.returncode}: {excerpt}")
        return proc.stdout.decode("utf-8", errors="replace")
    raise ValueError(f"unknown extraction format {format!r}")


# ---------------------------------------------------------------------------
# Normalization and line repair
# ---------------------------------------------------------------------------

def normalize_nfkc(text: str) -> str:
    """Unicode NFKC normalization (total and idempotent)."""
    return unicodedata.normalize("NFKC", text)


_SENTENCE_END = (".", "!", "?", ":", ";", '"', "'", "”", "’", ")")


def repair_lines(text: str) -> str:
    """Rejoin hard-wrapped lines.

    A newline becomes a space when the preceding line does not end with
    sentence-final punctuation and the next line starts with a lowercase
    letter. Blank lines (paragraph breaks) are preserved.
    """
    lines = text.split("\n")
    out = []
    for line in lines:
        prev = out[-1] if out else None
        if (prev is not None and prev.strip() and line[:1].islower()
                and not prev.rstrip().endswith(_SENTENCE_END)):
            out[-1] = prev.rstrip() + " " + line
        else:
            out.append(line)
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Rule-based filtering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rule:
    name: str
    pattern: str
    action: str = "remove"  # remove | reject

    def compiled(self) -> "re.Pattern":
        try:
            return re.compile(self.pattern, re.MULTILINE)
        except re.error as exc:
            raise RuleConfigError(f"rule {self.name!r}: bad pattern: {exc}") from exc


@dataclass
class RuleSet:
    """Ordered, named regex rules plus the repeated-10-gram removal config."""

    removal_patterns: list = field(default_factory=list)
    reject_patterns: list = field(default_factory=list)
    repeated_ngram_len: int = 10
    repeated_ngram_min_count: int = 100

    def __post_init__(self):
        names = [r.name for r in self.removal_patterns + self.reject_patterns]
        if len(names) != len(set(names)):
            raise RuleConfigError("rule names must be unique")
        # Compile eagerly so bad patterns fail at config load, never at runtime.
        self._removal = [(r.name, r.compiled()) for r in self.removal_patterns]
        self._reject = [(r.name, r.compiled()) for r in self.reject_patterns]

    def to_config(self) -> dict:
        return {
            "removal_patterns": [vars(r) for r in self.removal_patterns],
            "reject_patterns": [vars(r) for r in self.reject_patterns],
            "repeated_ngram_len": self.repeated_ngram_len,
            "repeated_ngram_min_count": self.repeated_ngram_min_count,
        }

    @classmethod
    def from_config(cls, obj: dict) -> "RuleSet":
        def build(entries, default_action):
            return [Rule(name=e["name"], pattern=e["pattern"],
                         action=e.get("action", default_action)) for e in entries]
        return cls(
            removal_patterns=build(obj.get("removal_patterns", []), "remove"),
            reject_patterns=build(obj.get("reject_patterns", []), "reject"),
            repeated_ngram_len=int(obj.get("repeated_ngram_len", 10)),
            repeated_ngram_min_count=int(obj.get("repeated_ngram_min_count", 100)),
        )


def default_ruleset(repeated_ngram_min_count: int = 100) -> RuleSet:
    """The shipped defaults: page/line-number artifacts and HTML leftovers.

    Legal PDFs leave page numbers and line numbers stranded mid-text;
    scraped HTML leaves tags and entities. All rules are overridable.
    """
    return RuleSet(
        removal_patterns=[
            Rule("page-number-line", r"^\s*(?:Page|PAGE|page)\s+\d+(?:\s+of\s+\d+)?\s*$"),
            Rule("bare-number-line", r"^\s*\d{1,4}\s*$"),
            Rule("line-number-margin", r"^\s*\d{1,3}\s{2,}(?=\S)"),
            Rule("html-tag", r"<[^>\n]{1,200}>"),
            Rule("html-entity", r"&(?:[a-zA-Z]{2,10}|#\d{1,7});"),
        ],
        reject_patterns=[],
        repeated_ngram_min_count=repeated_ngram_min_count,
    )


def count_repeated_ngrams(texts: Iterable[str], n: int = 10) -> Counter:
    """First pass: corpus-global counts of length-n runs of one repeated character.

    Runs longer than n contribute every overlapping occurrence, so a 20-char
    dash rule line counts 11 times. Only same-character runs are considered;
    they cover the dominant artifact classes (rules, dot leaders, whitespace).
    """
    counts: Counter = Counter()
    run_re = re.compile(r"(.)\1{%d,}" % (n - 1), re.DOTALL)
    for text in texts:
        for m in run_re.finditer(text):
            ch = m.group(1)
            length = m.end() - m.start()
            counts[ch * n] += length - n + 1
    return counts


@dataclass(frozen=True)
class FilterOutcome:
    doc: CleanDocument
    rejected: bool

    @property
    def reason(self) -> Optional[str]:
        return self.doc.rejected


def apply_rule_filters(doc: CleanDocument, rules: RuleSet,
                       ngram_stats: Optional[Counter] = None) -> FilterOutcome:
    """Apply removal rules in order, drop frequent repeated n-grams, then
    reject the document if any reject rule still matches."""
    text = doc.text
    for _name, pattern in rules._removal:
        text = pattern.sub("", text)
    if ngram_stats:
        n = rules.repeated_ngram_len
        frequent = [g for g, c in ngram_stats.items()
                    if c > rules.repeated_ngram_min_count and len(g) == n]
        for gram in sorted(frequent):
            text = text.replace(gram, "")
    for name, pattern in rules._reject:
        if pattern.search(text):
            return FilterOutcome(doc.reject(name), rejected=True)
    return FilterOutcome(doc.with_step("rule-filter", text), rejected=False)
