"""Legal benchmark scoring: answer parsing, balanced accuracy, category
aggregation, and per-category improvement/regression tables.

Tasks carry one of six legal reasoning categories. The parser is deliberately
forgiving because verbose model outputs are the dominant failure mode; when no
label can be found the prediction counts as wrong, never as a crash.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

log = logging.getLogger(__name__)

CATEGORIES = (
    "issue-spotting",
    "rule-recall",
    "rule-application",
    "rule-conclusion",
    "interpretation",
    "rhetorical-understanding",
)


class EvalError(Exception):
    """Invalid evaluation input (empty task, mismatched task sets, ...)."""


@dataclass(frozen=True)
class ParseFailure:
    """No label could be recovered from the raw model output."""
    raw_excerpt: str = ""


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    category: str
    labels: Tuple[str, ...]
    items: Tuple[Tuple[str, str], ...]  # (prompt, gold label)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise EvalError(f"task {self.task_id}: unknown category {self.category!r}")
        if len(self.labels) < 2:
            raise EvalError(f"task {self.task_id}: need at least 2 labels")
        for _, gold in self.items:
            if gold not in self.labels:
                raise EvalError(f"task {self.task_id}: gold label {gold!r} not in label set")


@dataclass(frozen=True)
class TaskScore:
    task_id: str
    category: str
    balanced_accuracy: float
    parse_failure_rate: float


@dataclass
class CategoryReport:
    category_means: Dict[str, float]
    overall_mean: float
    task_scores: List[TaskScore] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"category_means": self.category_means, "overall_mean": self.overall_mean,
                "tasks": [{"task_id": t.task_id, "category": t.category,
                           "balanced_accuracy": t.balanced_accuracy,
                           "parse_failure_rate": t.parse_failure_rate}
                          for t in self.task_scores]}


# ---------------------------------------------------------------------------
# Answer parsing
# ---------------------------------------------------------------------------

def _label_pattern(label: str) -> "re.Pattern":
    escaped = re.escape(label)
    prefix = r"\b" if label[:1].isalnum() else ""
    suffix = r"\b" if label[-1:].isalnum() else ""
    return re.compile(prefix + escaped + suffix, re.IGNORECASE)

_ANSWER_LINE = re.compile(r"^\s*answer\s*:\s*(.*)$", re.IGNORECASE | re.MULTILINE)


def parse_answer(raw_output: str, labels: Sequence[str]) -> Union[str, ParseFailure]:
    """Recover a label from free-form model output.

    An "Answer:"-prefixed line takes priority; otherwise a case-insensitive
    search over the whole output returns the first-occurring label by
    position. No occurrence at all is a ParseFailure value.
    """
    if not labels:
        raise EvalError("label set is empty")
    patterns = [(label, _label_pattern(label)) for label in labels]

    def first_match(text: str) -> Optional[str]:
        best: Tuple[int, int, Optional[str]] = (len(text) + 1, 0, None)
        for order, (label, pat) in enumerate(patterns):
            m = pat.search(text)
            if m and (m.start(), order) < (best[0], best[1]):
                best = (m.start(), order, label)
        return best[2]

    answer_line = _ANSWER_LINE.search(raw_output)
    if answer_line:
        found = first_match(answer_line.group(1))
        if found is not None:
            return found
    found = first_match(raw_output)
    if found is not None:
        return found
    return ParseFailure(raw_excerpt=raw_output[:120])


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def balanced_accuracy(predictions: Sequence, golds: Sequence[str],
                      labels: Sequence[str]) -> float:
    """Mean per-label recall over labels present in the golds.

    ParseFailure predictions count as wrong for every label.
    """
    if not golds:
        raise EvalError("empty gold list")
    if len(predictions) != len(golds):
        raise EvalError(f"{len(predictions)} predictions for {len(golds)} golds")
    label_set = set(labels)
    for gold in golds:
        if gold not in label_set:
            raise EvalError(f"gold label {gold!r} not in label set")
    recalls = []
    for label in labels:
        support = sum(1 for g in golds if g == label)
        if support == 0:
            continue
        hits = sum(1 for p, g in zip(predictions, golds)
                   if g == label and isinstance(p, str) and p == label)
        recalls.append(hits / support)
    return sum(recalls) / len(recalls)


def score_task(task: TaskSpec, raw_outputs: Sequence[str]) -> TaskScore:
    """Parse raw outputs for every item and compute the task score."""
    if len(raw_outputs) != len(task.items):
        raise EvalError(f"task {task.task_id}: {len(raw_outputs)} outputs "
                        f"for {len(task.items)} items")
    preds = [parse_answer(raw, task.labels) for raw in raw_outputs]
    golds = [gold for _, gold in task.items]
    failures = sum(1 for p in preds if isinstance(p, ParseFailure))
    return TaskScore(task_id=task.task_id, category=task.category,
                     balanced_accuracy=balanced_accuracy(preds, golds, task.labels),
                     parse_failure_rate=failures / len(preds))


def aggregate_categories(task_scores: Sequence[TaskScore]) -> CategoryReport:
    """Unweighted per-category means plus the overall per-task mean."""
    if not task_scores:
        raise EvalError("no task scores to aggregate")
    by_cat: Dict[str, List[float]] = {}
    for score in task_scores:
        by_cat.setdefault(score.category, []).append(score.balanced_accuracy)
    means = {cat: sum(v) / len(v) for cat, v in sorted(by_cat.items())}
    overall = sum(s.balanced_accuracy for s in task_scores) / len(task_scores)
    return CategoryReport(category_means=means, overall_mean=overall,
                          task_scores=list(task_scores))


# ---------------------------------------------------------------------------
# Delta tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CategoryDelta:
    category: str
    pct_nonnegative: float
    pct_nonpositive: float

    def rendered(self) -> str:
        def fmt(p: float) -> str:
            return "—" if p == 0 else f"{p:.1f}%"
        return f"{fmt(self.pct_nonnegative)} / {fmt(self.pct_nonpositive)}"


def delta_table(scores_a: Sequence[TaskScore],
                scores_b: Sequence[TaskScore]) -> List[CategoryDelta]:
    """Per-category share of tasks improved/regressed between two runs.

    Delta = score_a - score_b per task. A task with delta exactly 0 counts in
    both columns, so the two percentages can each stay individually meaningful.
    """
    a_by_id = {s.task_id: s for s in scores_a}
    b_by_id = {s.task_id: s for s in scores_b}
    if set(a_by_id) != set(b_by_id):
        diff = sorted(set(a_by_id) ^ set(b_by_id))
        raise EvalError(f"task sets differ: {diff}")
    by_cat: Dict[str, List[float]] = {}
    for task_id, sa in a_by_id.items():
        by_cat.setdefault(sa.category, []).append(
            sa.balanced_accuracy - b_by_id[task_id].balanced_accuracy)
    out = []
    for cat in sorted(by_cat):
        deltas = by_cat[cat]
        ge = 100.0 * sum(1 for d in deltas if d >= 0) / len(deltas)
        le = 100.0 * sum(1 for d in deltas if d <= 0) / len(deltas)
        out.append(CategoryDelta(category=cat, pct_nonnegative=ge, pct_nonpositive=le))
    return out


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def read_tasks(path) -> List[TaskSpec]:
    """Task file: JSONL, one task per line with id/category/labels/items.

    MMLU-style multiple-choice subsets load through the same shape.
    """
    tasks = []
    skipped = 0
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            items = tuple((it["prompt"], it["gold"]) for it in obj["items"])
            distinct_golds = {gold for _, gold in items}
            if len(distinct_golds) < 2:
                log.warning("skipping task %s: fewer than 2 distinct gold labels",
                            obj["task_id"])
                skipped += 1
                continue
            tasks.append(TaskSpec(task_id=obj["task_id"], category=obj["category"],
                                  labels=tuple(obj["labels"]), items=items))
    if skipped:
        log.warning("%d degenerate tasks skipped", skipped)
    return tasks


def read_predictions(path) -> Dict[str, List[str]]:
    """Predictions file: JSONL of {task_id, outputs: [raw model output, ...]}."""
    preds = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                preds[obj["task_id"]] = list(obj["outputs"])
    return preds


def write_report(path, report: CategoryReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def render_report(report: CategoryReport) -> str:
    lines = ["category                      balanced_accuracy",
             "-" * 48]
    for cat, mean in report.category_means.items():
        lines.append(f"{cat:<30}{mean:.4f}")
    lines.append("-" * 48)
    lines.append(f"{'overall':<30}{report.overall_mean:.4f}")
    return "\n".join(lines)


def render_delta_table(deltas: Sequence[CategoryDelta]) -> str:
    lines = ["category                      d>=0 / d<=0"]
    for d in deltas:
        lines.append(f"{d.category:<30}{d.rendered()}")
    return "\n".join(lines)
