"""Command-line entry point: one subcommand per pipeline stage, plus ``run``
to compose them into a resumable, manifest-verified pipeline.

Exit codes: 0 success, 1 stage failure, 2 configuration error.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import evalharness, instruct as instruct_mod, lmfilter, pipeline
from .clients import (ClientConfig, HttpGeneratorClient, HttpJudgeClient,
                      StubGenerator, StubJudge)
from .config import ConfigError, load_config
from .dedup import DedupConfig, exact_dedup, near_dedup, write_cluster_report
from .records import CorpusError, read_clean_jsonl, read_raw_jsonl, validate_corpus

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load(config_path, seed, workers):
    try:
        return load_config(config_path, seed=seed, workers=workers)
    except ConfigError as exc:
        _fail(EXIT_CONFIG_ERROR, str(exc))


config_option = click.option("--config", "config_path", required=True,
                             type=click.Path(exists=True), help="Pipeline config file.")
seed_option = click.option("--seed", type=int, default=None, help="Override the global seed.")
workers_option = click.option("--workers", type=int, default=None,
                              help="Stage-internal worker count.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable debug logging.")
def main(verbose):
    """Legal-domain corpus curation and training-data construction pipeline."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@config_option
def validate(config_path):
    """Check the raw input corpus for structural issues."""
    cfg = _load(config_path, None, None)
    source = cfg.stage_config("ingest").get("input")
    if not source:
        _fail(EXIT_CONFIG_ERROR, "config has no ingest.input")
    try:
        report = validate_corpus(read_raw_jsonl(source))
    except CorpusError as exc:
        _fail(EXIT_STAGE_FAILURE, str(exc))
    click.echo(json.dumps(report.to_dict(), indent=2))


@main.command("plan")
@config_option
@seed_option
def plan_cmd(config_path, seed):
    """Print the resolved stage plan without touching any files."""
    cfg = _load(config_path, seed, None)
    try:
        plans = pipeline.plan(cfg)
    except ConfigError as exc:
        _fail(EXIT_CONFIG_ERROR, str(exc))
    click.echo(pipeline.render_plan(plans))


@main.command("run")
@config_option
@seed_option
@workers_option
@click.option("--resume", is_flag=True, help="Skip stages whose manifest verifies.")
@click.option("--dry-run", is_flag=True, help="Plan only; execute nothing.")
def run_cmd(config_path, seed, workers, resume, dry_run):
    """Execute the pipeline stages in order, writing a manifest per stage."""
    cfg = _load(config_path, seed, workers)
    if dry_run:
        click.echo(pipeline.render_plan(pipeline.plan(cfg)))
        return
    try:
        summary = pipeline.run(cfg, resume=resume)
    except ConfigError as exc:
        _fail(EXIT_CONFIG_ERROR, str(exc))
    except (pipeline.StageFailure, CorpusError) as exc:
        _fail(EXIT_STAGE_FAILURE, str(exc))
    click.echo(f"executed: {summary.executed or 'none'}")
    click.echo(f"skipped:  {summary.skipped or 'none'}")


@main.command("score-lm")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
def score_lm(model_path, input_path):
    """Print per-document normalized perplexity as tab-separated (id, score)."""
    model = lmfilter.NGramModel.load(model_path)
    for doc in read_clean_jsonl(input_path):
        score = lmfilter.perplexity_normalized(model, doc.text)
        click.echo(f"{doc.id}\t{score:.6g}")


@main.command("dedup-report")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0)
@click.option("--output", "output_path", type=click.Path(), default=None,
              help="Also write the cluster report to this path.")
def dedup_report(input_path, threshold, seed, output_path):
    """Run exact + near dedup and print (representative, member, est_jaccard)."""
    docs = [d for d in read_clean_jsonl(input_path) if not d.rejected]
    kept, _ = exact_dedup(docs)
    result = near_dedup(kept, DedupConfig(similarity_threshold=threshold, seed=seed))
    for entry in result.clusters:
        click.echo(f"{entry.representative_id}\t{entry.member_id}\t"
                   f"{entry.estimated_jaccard:.4f}")
    if output_path:
        write_cluster_report(output_path, result.clusters)


@main.command("mix")
@config_option
@seed_option
def mix_cmd(config_path, seed):
    """Run only the mixture-sampling stage (upstream outputs must exist)."""
    cfg = _load(config_path, seed, None)
    try:
        entry = next(p for p in pipeline.plan(cfg) if p.name == "mix")
    except (ConfigError, StopIteration):
        _fail(EXIT_CONFIG_ERROR, "config does not include a mix stage")
    try:
        in_count, out_count, _ = pipeline._run_mix(entry, cfg)
    except Exception as exc:
        _fail(EXIT_STAGE_FAILURE, f"mix failed: {exc}")
    click.echo(f"mixed {in_count} documents into {out_count} examples "
               f"-> {entry.output_path}")


def _generator(cfg):
    conf = cfg.clients.get("generator", {})
    if conf.get("endpoint"):
        return HttpGeneratorClient(ClientConfig.from_config(conf))
    return StubGenerator()


def _judge(cfg):
    conf = cfg.clients.get("judge", {})
    if conf.get("endpoint"):
        return HttpJudgeClient(ClientConfig.from_config(conf))
    return StubJudge()


@main.command("instruct")
@config_option
def instruct_cmd(config_path):
    """Synthesize legal dialogues from clean documents and curate them."""
    cfg = _load(config_path, None, None)
    settings = cfg.instruct
    input_path = settings.get("input")
    output_path = settings.get("output")
    if not input_path or not output_path:
        _fail(EXIT_CONFIG_ERROR, "instruct config needs 'input' and 'output' paths")
    depth = int(settings.get("depth", 3))
    generator = _generator(cfg)
    records = []
    for doc in read_clean_jsonl(input_path):
        if doc.rejected:
            continue
        record = instruct_mod.synth_legal_dialogue(doc, depth, generator)
        if record is not None:
            records.append(record)
    curated, report = instruct_mod.curate_instructions(records)
    n = instruct_mod.write_instruction_jsonl(output_path, curated)
    click.echo(f"wrote {n} instruction records to {output_path} "
               f"(dropped {report.dropped_malformed} malformed, "
               f"{report.dropped_duplicates} duplicates)")


@main.command("prefs")
@config_option
def prefs_cmd(config_path):
    """Build preference pairs from candidate responses via the judge client."""
    cfg = _load(config_path, None, None)
    settings = cfg.prefs
    candidates_path = settings.get("candidates")
    output_path = settings.get("output")
    if not candidates_path or not output_path:
        _fail(EXIT_CONFIG_ERROR, "prefs config needs 'candidates' and 'output' paths")
    judge = _judge(cfg)
    pairs = []
    with Path(candidates_path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            pair = instruct_mod.build_preference_pair(obj["prompt"], obj["candidates"], judge)
            if pair is not None:
                pairs.append(pair)
    n = instruct_mod.write_preference_jsonl(output_path, pairs)
    click.echo(f"wrote {n} preference pairs to {output_path}")


@main.command("eval")
@click.option("--tasks", "tasks_path", required=True, type=click.Path(exists=True))
@click.option("--predictions", "preds_path", required=True, type=click.Path(exists=True))
@click.option("--output", "output_path", type=click.Path(), default=None,
              help="Write the machine-readable report here.")
def eval_cmd(tasks_path, preds_path, output_path):
    """Score model outputs against a task file and aggregate by category."""
    tasks = evalharness.read_tasks(tasks_path)
    preds = evalharness.read_predictions(preds_path)
    scores = []
    for task in tasks:
        if task.task_id not in preds:
            _fail(EXIT_STAGE_FAILURE, f"no predictions for task {task.task_id}")
        scores.append(evalharness.score_task(task, preds[task.task_id]))
    try:
        report = evalharness.aggregate_categories(scores)
    except evalharness.EvalError as exc:
        _fail(EXIT_STAGE_FAILURE, str(exc))
    click.echo(evalharness.render_report(report))
    if output_path:
        evalharness.write_report(output_path, report)


def _scores_from_report(path):
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return [evalharness.TaskScore(task_id=t["task_id"], category=t["category"],
                                  balanced_accuracy=t["balanced_accuracy"],
                                  parse_failure_rate=t["parse_failure_rate"])
            for t in obj["tasks"]]


@main.command("report")
@click.option("--a", "path_a", required=True, type=click.Path(exists=True),
              help="Eval report for run A.")
@click.option("--b", "path_b", required=True, type=click.Path(exists=True),
              help="Eval report for run B.")
def report_cmd(path_a, path_b):
    """Per-category improvement/regression table between two eval reports."""
    try:
        deltas = evalharness.delta_table(_scores_from_report(path_a),
                                         _scores_from_report(path_b))
    except evalharness.EvalError as exc:
        _fail(EXIT_STAGE_FAILURE, str(exc))
    click.echo(evalharness.render_delta_table(deltas))


if __name__ == "__main__":
    main()
