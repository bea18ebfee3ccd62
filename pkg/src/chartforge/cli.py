"""Command-line entry point: generate, render, instruct, build, stats,
split, eval, ablate, and themes.

Configuration comes from an optional key=value file plus flags; flags win.
Every command supports --help without touching any backend.
"""

from __future__ import annotations

import json
import logging
import sys
import tempfile
from pathlib import Path

import click

from . import __version__
from .config import RunConfig, load_config, load_doc_catalog
from .errors import ChartforgeError
from .figgen import DocCatalog, ExemplarPool, Stage2PromptVariant, run_ablation
from .gateway import ChatRequest, LlmGateway
from .metrics import (
    QAPrediction,
    build_rubric_prompt,
    parse_rubric_scores,
    relaxed_accuracy,
    table_similarity,
    table_to_triples,
)
from .model import ChartRecord, ChartSeed, TableData, TaskKind
from .pipeline import FilterStats, build_dataset, run_stage1, run_stage2, run_stage3
from .sandboxclient import StubSandbox, SubprocessSandbox
from .store import read_jsonl, split as split_dataset, stats as dataset_stats, write_jsonl
from .tabgen import ThemePool, bootstrap_themes

log = logging.getLogger("chartforge")


def _setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _make_config(config_path, **overrides) -> RunConfig:
    return load_config(config_path, overrides={k: v for k, v in overrides.items() if v is not None})


def _make_gateway(config: RunConfig) -> LlmGateway:
    return LlmGateway(mode=config.backend, cache_dir=config.cache_dir)


def _make_sandbox(config: RunConfig, kind: str):
    if kind == "stub":
        return StubSandbox()
    command = config.sandbox_cmd.split() if config.sandbox_cmd else None
    return SubprocessSandbox(command)


def _load_themes(path: str | None) -> ThemePool | None:
    if not path:
        return None
    phrases = [
        line.strip().lower()
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    return ThemePool(themes=tuple(phrases), source="bootstrapped")


@click.group()
@click.version_option(version=__version__, prog_name="chartforge")
@click.option("--verbose", is_flag=True, help="Debug-level run logs.")
def main(verbose):
    """Chart instruction-tuning data pipeline and evaluation harness."""
    _setup_logging(verbose)


_shared = [
    click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                 help="key = value config file; flags override it."),
    click.option("--backend", type=click.Choice(["live", "replay"]), default=None),
    click.option("--model", "model_id", default=None, help="Model id for the backend."),
    click.option("--seed", "rng_seed", type=int, default=None, help="Base rng seed."),
    click.option("--cache-dir", default=None, help="Exchange cache directory."),
]


def shared_options(fn):
    for option in reversed(_shared):
        fn = option(fn)
    return fn


@main.command()
@shared_options
@click.option("--n", "count", type=int, required=True, help="Seeds to generate.")
@click.option("--chart-types", default=None, help="Comma list, e.g. pie,line or pie:2,line:1.")
@click.option("--themes", "themes_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
def generate(config_path, backend, model_id, rng_seed, cache_dir, count,
             chart_types, themes_path, out_path):
    """Stage 1: generate validated chart seeds into a JSONL file."""
    config = _make_config(
        config_path, backend=backend, model_id=model_id, rng_seed=rng_seed,
        cache_dir=cache_dir, chart_type_weights=chart_types,
    )
    stats = FilterStats()
    seeds = run_stage1(config, _make_gateway(config), count,
                       themes=_load_themes(themes_path), stats=stats)
    write_jsonl(out_path, [seed.to_json_dict() for seed in seeds])
    click.echo(f"wrote {len(seeds)} seeds to {out_path} "
               f"(filtered: {stats.total})")
    if not seeds:
        sys.exit(2)


@main.command()
@shared_options
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--timeout", "render_timeout_s", type=int, default=None)
@click.option("--icl", "icl_k", type=int, default=None, help="In-context examples per prompt.")
@click.option("--sandbox", type=click.Choice(["runner", "stub"]), default="runner")
def render(config_path, backend, model_id, rng_seed, cache_dir, in_path,
           out_dir, render_timeout_s, icl_k, sandbox):
    """Stage 2: render seeds into charts under OUT/charts/."""
    config = _make_config(
        config_path, backend=backend, model_id=model_id, rng_seed=rng_seed,
        cache_dir=cache_dir, render_timeout_s=render_timeout_s, icl_k=icl_k,
    )
    seeds = [ChartSeed.from_json_dict(d) for d in read_jsonl(in_path)]
    out = Path(out_dir)
    stats = FilterStats()
    with tempfile.TemporaryDirectory(prefix="chartforge-render-") as scratch:
        ok_records, failed = run_stage2(
            config, _make_gateway(config), _make_sandbox(config, sandbox),
            seeds, charts_dir=out / "charts", scratch_dir=scratch, stats=stats,
        )
    write_jsonl(out / "render_results.jsonl", [r.to_json_dict() for r in ok_records])
    summary = {"ok": len(ok_records), "failed": failed,
               "success_rate": 100.0 * len(ok_records) / len(seeds) if seeds else 0.0}
    (out / "render_summary.json").write_text(json.dumps(summary, indent=1))
    click.echo(f"rendered {len(ok_records)}/{len(seeds)} charts ok -> {out}")
    if not ok_records:
        sys.exit(2)


@main.command()
@shared_options
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True),
              help="Directory produced by render.")
@click.option("--tasks", default=None, help="Comma list of task kinds.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--sandbox", type=click.Choice(["runner", "stub"]), default="runner")
def instruct(config_path, backend, model_id, rng_seed, cache_dir, in_dir,
             tasks, out_path, sandbox):
    """Stage 3: build instruction records from rendered charts."""
    config = _make_config(
        config_path, backend=backend, model_id=model_id, rng_seed=rng_seed,
        cache_dir=cache_dir, tasks=tasks,
    )
    records = [
        ChartRecord.from_json_dict(d)
        for d in read_jsonl(Path(in_dir) / "render_results.jsonl")
    ]
    stats = FilterStats()
    with tempfile.TemporaryDirectory(prefix="chartforge-instruct-") as scratch:
        out_records = run_stage3(
            config, _make_gateway(config), _make_sandbox(config, sandbox),
            records, scratch_dir=scratch, stats=stats,
        )
    write_jsonl(out_path, [r.to_json_dict() for r in out_records])
    click.echo(f"wrote {len(out_records)} instruction records to {out_path} "
               f"(filtered: {stats.total})")
    if not out_records:
        sys.exit(2)


@main.command()
@shared_options
@click.option("--n", "count", type=int, required=True, help="Seeds to generate.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--themes", "themes_path", type=click.Path(exists=True), default=None)
@click.option("--sandbox", type=click.Choice(["runner", "stub"]), default="runner")
@click.option("--force", is_flag=True, help="Overwrite an existing dataset.")
def build(config_path, backend, model_id, rng_seed, cache_dir, count, out_dir,
          themes_path, sandbox, force):
    """End to end: stage 1 -> stage 2 -> stage 3 -> dataset + stats."""
    config = _make_config(
        config_path, backend=backend, model_id=model_id, rng_seed=rng_seed,
        cache_dir=cache_dir,
    )
    try:
        outcome = build_dataset(
            config, _make_gateway(config), _make_sandbox(config, sandbox),
            count, out_dir, themes=_load_themes(themes_path), force=force,
        )
    except ChartforgeError as exc:
        click.echo(f"build aborted: {exc}", err=True)
        sys.exit(2)
    report = dataset_stats(out_dir)
    click.echo(report.to_text())
    click.echo("")
    click.echo(
        f"seeds {outcome.seeds}  charts {outcome.ok_charts}  "
        f"records {outcome.records}  filtered {outcome.filter_stats.total}  "
        f"digest {outcome.manifest.dataset_digest[:16]}"
    )
    sys.exit(0 if outcome.records > 0 else 1)


@main.command()
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text")
@click.option("--figures-out", type=click.Path(), default=None,
              help="Also render distribution figures into this directory.")
def stats(dataset_dir, fmt, figures_out):
    """Distribution report for a completed dataset."""
    report = dataset_stats(dataset_dir)
    if fmt == "json":
        click.echo(json.dumps(report.to_json_dict(), indent=1, sort_keys=True))
    else:
        click.echo(report.to_text())
    if figures_out:
        from .reporting import render_stats_figures

        for path in render_stats_figures(report, figures_out):
            click.echo(f"figure: {path}", err=True)


@main.command(name="split")
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.option("--fractions", default="train=0.8,test=0.2",
              help="name=fraction comma list summing to 1.")
@click.option("--seed", "rng_seed", type=int, default=0)
def split_cmd(dataset_dir, fractions, rng_seed):
    """Split records by chart id into per-split JSONL files."""
    parsed = {}
    for part in fractions.split(","):
        name, frac = part.split("=", 1)
        parsed[name.strip()] = float(frac)
    paths = split_dataset(dataset_dir, parsed, seed=rng_seed)
    for name, path in paths.items():
        click.echo(f"{name}: {path}")


@main.group(name="eval")
def eval_group():
    """Metric evaluation commands."""


@eval_group.command(name="qa")
@click.option("--pred", "pred_path", required=True, type=click.Path(exists=True))
@click.option("--gold", "gold_path", required=True, type=click.Path(exists=True))
@click.option("--tol", type=float, default=0.05)
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text")
def eval_qa(pred_path, gold_path, tol, fmt):
    """Relaxed accuracy of predictions against gold answers (join on id)."""
    preds = {d["id"]: str(d["answer"]) for d in read_jsonl(pred_path)}
    golds = {d["id"]: str(d["answer"]) for d in read_jsonl(gold_path)}
    pairs = [
        QAPrediction(question_id=qid, predicted=preds.get(qid, ""), gold=answer)
        for qid, answer in golds.items()
    ]
    accuracy = relaxed_accuracy(pairs, tol=tol)
    payload = {"n": len(pairs), "tolerance": tol, "relaxed_accuracy": round(accuracy, 2)}
    if fmt == "json":
        click.echo(json.dumps(payload, indent=1))
    else:
        click.echo(f"relaxed accuracy: {accuracy:.2f} over {len(pairs)} questions (tol {tol})")


@eval_group.command(name="extraction")
@click.option("--pred", "pred_dir", required=True, type=click.Path(exists=True))
@click.option("--gold", "gold_dir", required=True, type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text")
def eval_extraction(pred_dir, gold_dir, fmt):
    """Table similarity (P/R/F1) for csv files matched by filename."""
    gold_files = sorted(Path(gold_dir).glob("*.csv"))
    if not gold_files:
        raise click.ClickException(f"no gold csv files in {gold_dir}")
    rows = []
    for gold_file in gold_files:
        gold = table_to_triples(TableData.from_csv(gold_file.read_text(encoding="utf-8")))
        pred_file = Path(pred_dir) / gold_file.name
        if pred_file.exists():
            try:
                pred = table_to_triples(
                    TableData.from_csv(pred_file.read_text(encoding="utf-8"))
                )
                p, r, f1 = table_similarity(pred, gold)
            except ValueError:
                p = r = f1 = 0.0
        else:
            p = r = f1 = 0.0
        rows.append({"name": gold_file.name, "precision": p, "recall": r, "f1": f1})
    mean = {
        key: sum(row[key] for row in rows) / len(rows)
        for key in ("precision", "recall", "f1")
    }
    if fmt == "json":
        click.echo(json.dumps({"files": rows, "mean": mean}, indent=1))
    else:
        click.echo(f"{'File':<28} {'P':>7} {'R':>7} {'F1':>7}")
        for row in rows:
            click.echo(
                f"{row['name']:<28} {row['precision']:>7.4f} "
                f"{row['recall']:>7.4f} {row['f1']:>7.4f}"
            )
        click.echo(
            f"{'mean':<28} {mean['precision']:>7.4f} "
            f"{mean['recall']:>7.4f} {mean['f1']:>7.4f}"
        )


@eval_group.command(name="rubric")
@shared_options
@click.option("--task", "task_name", required=True,
              type=click.Choice([t.value for t in TaskKind if t is not TaskKind.QA
                                 and t is not TaskKind.CHART_EXTRACTION]))
@click.option("--pred", "runs_dir", required=True, type=click.Path(exists=True),
              help="Directory of per-sample JSON files with a conditions object.")
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text")
def eval_rubric(config_path, backend, model_id, rng_seed, cache_dir, task_name,
                runs_dir, fmt):
    """LLM-judged rubric scores, normalized to 0-100 and averaged."""
    config = _make_config(
        config_path, backend=backend, model_id=model_id, rng_seed=rng_seed,
        cache_dir=cache_dir,
    )
    gateway = _make_gateway(config)
    task = TaskKind(task_name)
    sample_files = sorted(Path(runs_dir).glob("*.json"))
    if not sample_files:
        raise click.ClickException(f"no sample JSON files in {runs_dir}")
    rows = []
    for sample_file in sample_files:
        sample = json.loads(sample_file.read_text(encoding="utf-8"))
        prompt = build_rubric_prompt(task, sample["conditions"])
        exchange = gateway.complete(
            ChatRequest(
                system_text=prompt.system_text,
                user_text=prompt.user_text,
                temperature=config.temperature_eval,
                max_tokens=config.max_tokens,
                model_id=config.model_id,
            )
        )
        result = parse_rubric_scores(exchange.response_text, task)
        rows.append(
            {
                "id": sample.get("id", sample_file.stem),
                "normalized": result.normalized,
                "scores": result.criterion_scores,
            }
        )
    mean = sum(row["normalized"] for row in rows) / len(rows)
    if fmt == "json":
        click.echo(json.dumps({"task": task.value, "samples": rows,
                               "mean_normalized": mean}, indent=1))
    else:
        for row in rows:
            click.echo(f"{row['id']:<28} {row['normalized']:>7.1f}")
        click.echo(f"{'mean':<28} {mean:>7.1f}")


@main.group(name="ablate")
def ablate_group():
    """Prompt-ablation harnesses."""


@ablate_group.command(name="stage2")
@shared_options
@click.option("--variants", default="full,no_icl,no_doc,no_both")
@click.option("--n", "count", type=int, default=20, help="Seeds per variant.")
@click.option("--in", "seeds_path", type=click.Path(exists=True), default=None,
              help="Reuse existing seeds instead of generating.")
@click.option("--sandbox", type=click.Choice(["runner", "stub"]), default="runner")
@click.option("--figure-out", type=click.Path(), default=None)
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text")
def ablate_stage2(config_path, backend, model_id, rng_seed, cache_dir, variants,
                  count, seeds_path, sandbox, figure_out, fmt):
    """Success-rate ablation over the stage-2 prompt variants."""
    config = _make_config(
        config_path, backend=backend, model_id=model_id, rng_seed=rng_seed,
        cache_dir=cache_dir,
    )
    gateway = _make_gateway(config)
    variant_list = [Stage2PromptVariant(v.strip()) for v in variants.split(",") if v.strip()]
    if seeds_path:
        seeds = [ChartSeed.from_json_dict(d) for d in read_jsonl(seeds_path)][:count]
    else:
        seeds = run_stage1(config, gateway, count)
    with tempfile.TemporaryDirectory(prefix="chartforge-ablate-") as scratch:
        report = run_ablation(
            seeds, variant_list, gateway, _make_sandbox(config, sandbox),
            DocCatalog(load_doc_catalog()), ExemplarPool(rng_seed=config.rng_seed),
            scratch_dir=scratch, k=config.icl_k,
            timeout_s=config.render_timeout_s,
            temperature=config.temperature_generate, model_id=config.model_id,
        )
    if fmt == "json":
        click.echo(json.dumps(report.to_json_dict(), indent=1))
    else:
        click.echo(report.to_text())
    if figure_out:
        from .reporting import render_ablation_figure

        click.echo(f"figure: {render_ablation_figure(report, figure_out)}", err=True)


@main.group(name="themes")
def themes_group():
    """Theme pool management."""


@themes_group.command(name="bootstrap")
@shared_options
@click.option("--count", type=int, default=300)
@click.option("--out", "out_path", required=True, type=click.Path())
def themes_bootstrap(config_path, backend, model_id, rng_seed, cache_dir, count, out_path):
    """Ask the backend for theme phrases and merge with the builtin list."""
    config = _make_config(
        config_path, backend=backend, model_id=model_id, rng_seed=rng_seed,
        cache_dir=cache_dir,
    )
    pool = bootstrap_themes(count, _make_gateway(config), model_id=config.model_id)
    Path(out_path).write_text("\n".join(pool.themes) + "\n", encoding="utf-8")
    click.echo(f"wrote {len(pool.themes)} themes to {out_path}")


if __name__ == "__main__":
    main()
