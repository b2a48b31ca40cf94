"""Instruction curation, synthetic legal dialogues, preference pairs, and
training-stage configuration.

Dialogue synthesis follows a fixed opening: the user asks about a document,
the assistant reformulates the question while weaving in document metadata
(type, issue date), and the user asks for the reasoning behind it; further
turns alternate and deepen the analysis. Preference pairs are ranked by a
judge on factual accuracy, relevance, and logical coherence.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .clients import JUDGE_CRITERIA, ClientError, GeneratorClient, JudgeClient
from .dedup import DedupConfig, exact_dedup, near_dedup
from .records import CleanDocument

log = logging.getLogger(__name__)


class MalformedRecord(ValueError):
    """An instruction record violates the turn-structure invariants."""


@dataclass(frozen=True)
class Turn:
    role: str  # user | assistant
    text: str


@dataclass(frozen=True)
class InstructionRecord:
    id: str
    origin: str
    turns: Tuple[Turn, ...]

    def validate(self) -> None:
        if not self.turns:
            raise MalformedRecord(f"{self.id}: no turns")
        for i, turn in enumerate(self.turns):
            expected = "user" if i % 2 == 0 else "assistant"
            if turn.role != expected:
                raise MalformedRecord(f"{self.id}: turn {i} role {turn.role!r}, "
                                      f"expected {expected!r}")
            if not turn.text:
                raise MalformedRecord(f"{self.id}: turn {i} is empty")

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "origin": self.origin,
                           "turns": [[t.role, t.text] for t in self.turns]},
                          ensure_ascii=False, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_obj(cls, obj: dict) -> "InstructionRecord":
        return cls(id=str(obj["id"]), origin=str(obj.get("origin", "unknown")),
                   turns=tuple(Turn(role=r, text=t) for r, t in obj["turns"]))


@dataclass(frozen=True)
class PreferencePair:
    prompt: str
    chosen: str
    rejected: str
    judge_scores: Dict[str, Dict[str, float]]  # {"chosen": {...}, "rejected": {...}}

    def to_json(self) -> str:
        return json.dumps({"prompt": self.prompt, "chosen": self.chosen,
                           "rejected": self.rejected, "judge_scores": self.judge_scores},
                          ensure_ascii=False, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Curation
# ---------------------------------------------------------------------------

@dataclass
class CurationReport:
    retained_by_origin: Dict[str, int] = field(default_factory=dict)
    dropped_malformed: int = 0
    dropped_duplicates: int = 0

    @property
    def retained_total(self) -> int:
        return sum(self.retained_by_origin.values())


def curate_instructions(records: Iterable[InstructionRecord],
                        dedup_config: Optional[DedupConfig] = None,
                        ) -> Tuple[List[InstructionRecord], CurationReport]:
    """Drop malformed records and exact/near duplicates; report retention.

    Near-dedup reuses the corpus deduplicator over the concatenated turn text.
    """
    report = CurationReport()
    well_formed: List[InstructionRecord] = []
    for rec in records:
        try:
            rec.validate()
        except MalformedRecord as exc:
            log.debug("dropping malformed record: %s", exc)
            report.dropped_malformed += 1
            continue
        well_formed.append(rec)

    by_id = {r.id: r for r in well_formed}
    pseudo = [CleanDocument(id=r.id, source=r.origin,
                            text="\n".join(t.text for t in r.turns))
              for r in well_formed]
    kept_docs, rejected = exact_dedup(pseudo)
    if dedup_config is not None:
        result = near_dedup(kept_docs, dedup_config)
        kept_docs = result.kept
        rejected.extend(result.rejected)
    report.dropped_duplicates = len(rejected)

    kept = [by_id[d.id] for d in kept_docs]
    for rec in kept:
        report.retained_by_origin[rec.origin] = report.retained_by_origin.get(rec.origin, 0) + 1
    return kept, report


# ---------------------------------------------------------------------------
# Synthetic legal dialogues
# ---------------------------------------------------------------------------

def synth_legal_dialogue(doc: CleanDocument, depth: int,
                         generator: GeneratorClient) -> Optional[InstructionRecord]:
    """Build an alternating dialogue of ``depth`` turns grounded in a document.

    Turn 1: the user inquires about the document. Turn 2: the assistant
    reformulates the inquiry integrating metadata (document type, issue date).
    Turn 3: the user asks for the reasoning. Later turns keep alternating and
    deepen the analysis. Returns None (with a logged reason) if the generator
    fails.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    doc_type = doc.metadata.get("document_type", "legal document")
    issue_date = doc.metadata.get("issue_date", "an unspecified date")
    excerpt = doc.text[:400]
    turns: List[Turn] = []
    try:
        for i in range(depth):
            if i == 0:
                text = generator.generate(
                    f"As a user, ask a question about this legal document:\n{excerpt}")
            elif i == 1:
                text = generator.generate(
                    f"As a legal assistant, reformulate and answer the inquiry about this "
                    f"{doc_type} issued on {issue_date}, grounding the answer in the text:\n"
                    f"{turns[0].text}")
            elif i == 2:
                text = generator.generate(
                    "As the user, ask the assistant to further explain the reasoning "
                    f"behind: {turns[1].text}")
            elif i % 2 == 1:
                text = generator.generate(
                    f"As the assistant, deepen the legal analysis in response to: {turns[-1].text}")
            else:
                text = generator.generate(
                    f"As the user, ask a more nuanced follow-up question about: {turns[-1].text}")
            turns.append(Turn(role="user" if i % 2 == 0 else "assistant", text=text))
    except ClientError as exc:
        log.warning("skipping dialogue for %s: %s", doc.id, exc)
        return None
    record = InstructionRecord(id=f"dialogue-{doc.id}", origin="synthetic-legal",
                               turns=tuple(turns))
    record.validate()
    return record


# ---------------------------------------------------------------------------
# Preference pairs
# ---------------------------------------------------------------------------

def build_preference_pair(prompt: str, candidates: Sequence[str],
                          judge: JudgeClient) -> Optional[PreferencePair]:
    """Score candidates on the judge criteria; argmax becomes chosen, argmin
    rejected. Ties break toward earlier candidates. None if the judge fails."""
    if len(candidates) < 2:
        raise ValueError("need at least 2 candidate responses")
    try:
        scored = [(judge.score(prompt, c), c) for c in candidates]
    except ClientError as exc:
        log.warning("skipping preference pair: %s", exc)
        return None
    means = [sum(s.values()) / len(JUDGE_CRITERIA) for s, _ in scored]
    best = max(range(len(means)), key=lambda i: (means[i], -i))
    worst = min(range(len(means)), key=lambda i: (means[i], -i))
    if best == worst:  # all candidates tied; first vs last by canonical order
        best, worst = 0, len(candidates) - 1
    return PreferencePair(prompt=prompt, chosen=candidates[best],
                          rejected=candidates[worst],
                          judge_scores={"chosen": scored[best][0],
                                        "rejected": scored[worst][0]})


# ---------------------------------------------------------------------------
# Reference DPO objective
# ---------------------------------------------------------------------------

def dpo_objective(logp_policy_chosen: float, logp_policy_rejected: float,
                  logp_ref_chosen: float, logp_ref_rejected: float,
                  beta: float = 0.1) -> Tuple[float, Tuple[float, float, float, float]]:
    """DPO loss and its four analytic partial derivatives.

    loss = -log sigmoid(beta * ((pc - rc) - (pr - rr))) with the policy/
    reference log-probabilities of the chosen and rejected responses. The
    partials are returned in argument order.
    """
    if beta <= 0:
        raise ValueError("beta must be > 0")
    margin = beta * ((logp_policy_chosen - logp_ref_chosen)
                     - (logp_policy_rejected - logp_ref_rejected))
    # -log sigmoid(m) = log(1 + exp(-m)), computed stably
    loss = math.log1p(math.exp(-abs(margin))) + max(-margin, 0.0)
    sig = 1.0 / (1.0 + math.exp(-margin))
    g = beta * (1.0 - sig)  # -d loss / d margin * beta
    grads = (-g, g, g, -g)
    return loss, grads


# ---------------------------------------------------------------------------
# Training-stage configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    stage: str
    optimizer: str
    beta1: float
    beta2: float
    learning_rate: float
    grad_accumulation: int
    batch_size: int
    epochs: float

    def to_dict(self) -> dict:
        return {"stage": self.stage, "optimizer": self.optimizer,
                "beta1": self.beta1, "beta2": self.beta2,
                "learning_rate": self.learning_rate,
                "grad_accumulation": self.grad_accumulation,
                "batch_size": self.batch_size, "epochs": self.epochs}


def emit_stage_config(stage: str, profile: str = "medium") -> StageConfig:
    """Hyperparameters for each training stage.

    The AdamW betas are emitted as configured upstream (beta1=0.99,
    beta2=0.90), even though the ordering is unusual. ``profile`` selects the
    batch size (medium: 8, large: 4).
    """
    if profile not in ("medium", "large"):
        raise ValueError(f"unknown profile {profile!r}")
    batch = 8 if profile == "medium" else 4
    common = dict(optimizer="adamw", beta1=0.99, beta2=0.90,
                  grad_accumulation=4, batch_size=batch)
    if stage == "pretrain":
        return StageConfig(stage="pretrain", learning_rate=2e-5, epochs=1, **common)
    if stage == "ift":
        return StageConfig(stage="ift", learning_rate=1e-5, epochs=1, **common)
    if stage == "dpo":
        return StageConfig(stage="dpo", learning_rate=1e-6, epochs=1, **common)
    raise ValueError(f"unknown stage {stage!r}; expected pretrain, ift, or dpo")


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def read_instruction_jsonl(path) -> List[InstructionRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(InstructionRecord.from_obj(json.loads(line)))
    return records


def write_instruction_jsonl(path, records: Iterable[InstructionRecord]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
            count += 1
    return count


def write_preference_jsonl(path, pairs: Iterable[PreferencePair]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(pair.to_json() + "\n")
            count += 1
    return count
