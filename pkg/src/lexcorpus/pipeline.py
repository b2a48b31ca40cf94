"""Stage wiring: dry-run planning, execution, manifests, and resume.

Stages run sequentially in the fixed chain order. Each stage's manifest
digest folds in the stage config, the global seed, and the upstream output
hash, so a change anywhere reruns exactly the affected suffix of the chain
on --resume. Outputs are written in canonical record order, which makes
reruns byte-identical.
"""

from __future__ import annotations

import hashlib
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from . import dedup as dedup_mod
from . import lmfilter, normalize, packmix
from .config import ConfigError, PipelineConfig, STAGE_CHAIN
from .records import (CleanDocument, Manifest, canonical_sort, config_digest,
                      hash_outputs, read_clean_jsonl, read_manifest,
                      read_raw_jsonl, verify_manifest, write_jsonl)

log = logging.getLogger(__name__)


class StageFailure(Exception):
    """A stage raised during execution; partial outputs were quarantined."""


@dataclass
class StagePlan:
    name: str
    input_path: Optional[Path]
    output_path: Path
    manifest_path: Path
    config: dict


@dataclass
class RunSummary:
    executed: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    manifests: Dict[str, Manifest] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

def _effective_stage_config(cfg: PipelineConfig, stage: str) -> dict:
    raw = dict(cfg.stage_config(stage))
    if stage == "rule-filter":
        min_count = int(raw.pop("repeated_ngram_min_count", 100))
        if "rules" in raw:
            ruleset = normalize.RuleSet.from_config(raw.pop("rules"))
        else:
            ruleset = normalize.default_ruleset(repeated_ngram_min_count=min_count)
        raw["rules"] = ruleset.to_config()
    return raw


def plan(cfg: PipelineConfig) -> List[StagePlan]:
    """Resolve the ordered stage plan with input/output paths; touches nothing."""
    plans: List[StagePlan] = []
    prev_docs: Optional[Path] = None
    for stage in cfg.stages:
        stage_dir = cfg.workspace / stage
        stage_cfg = _effective_stage_config(cfg, stage)
        if stage == "ingest":
            source = stage_cfg.get("input")
            if not source:
                raise ConfigError("ingest stage requires an 'input' path")
            input_path = Path(source)
            output_path = stage_dir / "docs.jsonl"
        elif stage in ("pack", "mix"):
            if prev_docs is None:
                raise ConfigError(f"stage {stage!r} has no upstream document stage")
            input_path = prev_docs
            output_path = stage_dir / "examples.bin"
        else:
            if prev_docs is None:
                raise ConfigError(f"stage {stage!r} has no upstream document stage")
            input_path = prev_docs
            output_path = stage_dir / "docs.jsonl"
        plans.append(StagePlan(name=stage, input_path=input_path,
                               output_path=output_path,
                               manifest_path=stage_dir / "manifest.json",
                               config=stage_cfg))
        if output_path.name == "docs.jsonl":
            prev_docs = output_path
    return plans


def render_plan(plans: List[StagePlan]) -> str:
    lines = [f"{len(plans)}-stage plan:"]
    for i, p in enumerate(plans, 1):
        lines.append(f"  {i}. {p.name:<12} {p.input_path} -> {p.output_path}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def _stage_ingest(docs_path: Path, stage_cfg: dict,
                  cfg: PipelineConfig) -> Tuple[List[CleanDocument], List[CleanDocument]]:
    seen = set()
    kept, rejected = [], []
    raw_docs = canonical_sort(read_raw_jsonl(docs_path))
    for raw in raw_docs:
        doc = CleanDocument.from_raw(raw)
        if doc.id in seen:
            rejected.append(doc.reject("duplicate-id"))
        elif not doc.text.strip():
            rejected.append(doc.reject("empty"))
        else:
            seen.add(doc.id)
            kept.append(doc)
    return kept, rejected


def _normalize_text(text: str) -> str:
    return normalize.repair_lines(normalize.normalize_nfkc(text))


def _stage_normalize(docs: List[CleanDocument], stage_cfg: dict,
                     cfg: PipelineConfig) -> Tuple[List[CleanDocument], List[CleanDocument]]:
    # Pure per-document transform; order-preserving map keeps determinism
    # regardless of worker count.
    if cfg.workers > 1:
        from multiprocessing import Pool
        with Pool(cfg.workers) as pool:
            texts = pool.map(_normalize_text, [d.text for d in docs], chunksize=64)
    else:
        texts = [_normalize_text(d.text) for d in docs]
    return [d.with_step("normalize", t) for d, t in zip(docs, texts)], []


def _stage_rule_filter(docs: List[CleanDocument], stage_cfg: dict,
                       cfg: PipelineConfig) -> Tuple[List[CleanDocument], List[CleanDocument]]:
    rules = normalize.RuleSet.from_config(stage_cfg["rules"])
    # Pass 1 is corpus-global by design: frequency decides what gets removed.
    stats = normalize.count_repeated_ngrams((d.text for d in docs),
                                            n=rules.repeated_ngram_len)
    kept, rejected = [], []
    for doc in docs:
        outcome = normalize.apply_rule_filters(doc, rules, stats)
        (rejected if outcome.rejected else kept).append(outcome.doc)
    return kept, rejected


def _stage_perplexity(docs: List[CleanDocument], stage_cfg: dict,
                      cfg: PipelineConfig) -> Tuple[List[CleanDocument], List[CleanDocument]]:
    order = int(stage_cfg.get("order", 5))
    threshold = float(stage_cfg.get("threshold", 1500))
    seed_path = stage_cfg.get("seed_corpus")
    if seed_path:
        seed_texts = [d.text for d in read_clean_jsonl(seed_path)]
    else:
        n_seed = int(stage_cfg.get("seed_docs", 100))
        seed_texts = [d.text for d in docs[:n_seed]]
    model = lmfilter.train_ngram_lm(seed_texts, order=order)
    model_path = cfg.workspace / "perplexity" / "model.lxlm"
    model.save(model_path)
    return lmfilter.filter_by_perplexity(
        docs, model, lmfilter.PerplexityFilterConfig(threshold=threshold))


def _stage_dedup(docs: List[CleanDocument], stage_cfg: dict,
                 cfg: PipelineConfig) -> Tuple[List[CleanDocument], List[CleanDocument]]:
    dconf = dedup_mod.DedupConfig(
        shingle_len=int(stage_cfg.get("shingle_len", 5)),
        num_permutations=int(stage_cfg.get("num_permutations", 128)),
        similarity_threshold=float(stage_cfg.get("similarity_threshold", 0.5)),
        bands=int(stage_cfg.get("bands", 16)),
        rows=int(stage_cfg.get("rows", 8)),
        seed=cfg.seed,
    )
    scope = stage_cfg.get("scope", "global")
    kept, rejected = dedup_mod.exact_dedup(docs)
    clusters = []
    groups: Dict[str, List[CleanDocument]]
    if scope == "per-source":
        groups = {}
        for doc in kept:
            groups.setdefault(doc.source, []).append(doc)
    elif scope == "global":
        groups = {"": kept}
    else:
        raise ConfigError(f"dedup scope must be 'global' or 'per-source', not {scope!r}")
    kept = []
    for _name in sorted(groups):
        result = dedup_mod.near_dedup(groups[_name], dconf)
        kept.extend(result.kept)
        rejected.extend(result.rejected)
        clusters.extend(result.clusters)
    dedup_mod.write_cluster_report(cfg.workspace / "dedup" / "clusters.tsv", clusters)
    kept = [d.with_step("dedup") for d in canonical_sort(kept)]
    return kept, rejected


def _shard_outputs(path: Path, seq_len: int) -> List[bytes]:
    data = path.read_bytes()
    rec = seq_len * 4
    return [data[i:i + rec] for i in range(0, len(data), rec)]


def _run_pack(plan_entry: StagePlan, cfg: PipelineConfig) -> Tuple[int, int, List[bytes]]:
    seq_len = int(plan_entry.config.get("seq_len", packmix.DEFAULT_SEQ_LEN))
    docs = [d for d in read_clean_jsonl(plan_entry.input_path) if not d.rejected]
    tokenizer = packmix.ByteTokenizer()
    seqs = []
    for doc in docs:
        seqs.extend(packmix.chunk_document(
            packmix.tokenize(doc.text, doc.id, doc.source, tokenizer), seq_len))
    count = packmix.write_shard(plan_entry.output_path,
                                packmix.pack_examples(seqs, seq_len=seq_len), seq_len)
    return len(docs), count, _shard_outputs(plan_entry.output_path, seq_len)


def _run_mix(plan_entry: StagePlan, cfg: PipelineConfig) -> Tuple[int, int, List[bytes]]:
    seq_len = int(plan_entry.config.get("seq_len", packmix.DEFAULT_SEQ_LEN))
    total = int(plan_entry.config.get("total_tokens", 0))
    if total <= 0:
        raise ConfigError("mix stage requires a positive 'total_tokens'")
    recipe = packmix.MixRecipe.from_config(plan_entry.config["recipe"])
    allow_rep = bool(plan_entry.config.get("allow_repetition", False))
    docs = [d for d in read_clean_jsonl(plan_entry.input_path) if not d.rejected]
    tokenizer = packmix.ByteTokenizer()
    shards: Dict[str, List[packmix.TokenSequence]] = {}
    for doc in docs:
        shards.setdefault(doc.source, []).append(
            packmix.tokenize(doc.text, doc.id, doc.source, tokenizer))
    available = {name: sum(len(s.tokens) for s in seqs) for name, seqs in shards.items()}
    sampling_plan = packmix.build_sampling_plan(recipe, total, available_tokens=available,
                                                allow_repetition=allow_rep)
    examples = packmix.sample_mix(sampling_plan, shards, cfg.seed, seq_len=seq_len)
    count = packmix.write_shard(plan_entry.output_path, examples, seq_len)
    return len(docs), count, _shard_outputs(plan_entry.output_path, seq_len)


_DOC_STAGES: Dict[str, Callable] = {
    "ingest": _stage_ingest,
    "normalize": _stage_normalize,
    "rule-filter": _stage_rule_filter,
    "perplexity": _stage_perplexity,
    "dedup": _stage_dedup,
}


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def _doc_outputs(path: Path) -> List[bytes]:
    with path.open("rb") as fh:
        return [line for line in fh]


def _stage_digest_payload(plan_entry: StagePlan, cfg: PipelineConfig,
                          input_hash: str) -> dict:
    return {"stage": plan_entry.name, "seed": cfg.seed,
            "config": plan_entry.config, "input_hash": input_hash}


def _existing_outputs(plan_entry: StagePlan) -> Optional[List[bytes]]:
    if not plan_entry.output_path.exists():
        return None
    if plan_entry.output_path.suffix == ".bin":
        seq_len = int(plan_entry.config.get("seq_len", packmix.DEFAULT_SEQ_LEN))
        return _shard_outputs(plan_entry.output_path, seq_len)
    return _doc_outputs(plan_entry.output_path)


def _quarantine(stage_dir: Path, workspace: Path) -> None:
    if not stage_dir.exists():
        return
    failed = workspace / "failed" / stage_dir.name
    if failed.exists():
        shutil.rmtree(failed)
    failed.parent.mkdir(parents=True, exist_ok=True)
    shutil.move(str(stage_dir), str(failed))


def run(cfg: PipelineConfig, resume: bool = False) -> RunSummary:
    """Execute the planned stages; with resume, skip verified-complete ones."""
    plans = plan(cfg)
    summary = RunSummary()
    input_hash = ""
    for plan_entry in plans:
        stage_dir = plan_entry.manifest_path.parent
        if plan_entry.name == "ingest":
            input_hash = hashlib.sha256(Path(plan_entry.input_path).read_bytes()).hexdigest()
        digest = config_digest(_stage_digest_payload(plan_entry, cfg, input_hash))

        if resume and plan_entry.manifest_path.exists():
            manifest = read_manifest(plan_entry.manifest_path)
            outputs = _existing_outputs(plan_entry)
            if (manifest.config_digest == digest and outputs is not None
                    and verify_manifest(manifest, outputs)):
                log.info("stage %s: manifest verified, skipping", plan_entry.name)
                summary.skipped.append(plan_entry.name)
                summary.manifests[plan_entry.name] = manifest
                input_hash = manifest.output_hash
                continue

        try:
            if plan_entry.name in _DOC_STAGES:
                if plan_entry.name == "ingest":
                    kept, rejected = _stage_ingest(plan_entry.input_path,
                                                   plan_entry.config, cfg)
                    in_count = len(kept) + len(rejected)
                else:
                    docs = [d for d in read_clean_jsonl(plan_entry.input_path)
                            if not d.rejected]
                    in_count = len(docs)
                    kept, rejected = _DOC_STAGES[plan_entry.name](docs, plan_entry.config, cfg)
                write_jsonl(plan_entry.output_path, kept)
                write_jsonl(stage_dir / "rejected.jsonl", rejected)
                outputs = _doc_outputs(plan_entry.output_path)
                rejected_count = len(rejected)
            elif plan_entry.name == "pack":
                in_count, _out, outputs = _run_pack(plan_entry, cfg)
                rejected_count = 0
            elif plan_entry.name == "mix":
                in_count, _out, outputs = _run_mix(plan_entry, cfg)
                rejected_count = 0
            else:
                raise ConfigError(f"no runner for stage {plan_entry.name!r}")
        except Exception as exc:
            _quarantine(stage_dir, cfg.workspace)
            raise StageFailure(f"stage {plan_entry.name} failed: {exc}") from exc

        output_hash, record_digests = hash_outputs(outputs)
        manifest = Manifest(stage=plan_entry.name, config_digest=digest,
                            input_count=in_count, output_count=len(outputs),
                            rejected_count=rejected_count, output_hash=output_hash,
                            seed=cfg.seed, record_digests=record_digests)
        _persist_manifest(manifest, plan_entry.manifest_path)
        summary.executed.append(plan_entry.name)
        summary.manifests[plan_entry.name] = manifest
        input_hash = manifest.output_hash
    return summary


def _persist_manifest(manifest: Manifest, path: Path) -> None:
    import json
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")
