"""End-to-end pipeline orchestration: stage 1 -> stage 2 -> stage 3 ->
dataset, with first-class filter statistics.

Determinism contract: given the same config and a warm replay cache, the
pipeline emits a byte-identical dataset. Stage 2 processes seeds in sorted
order in batches; prompts are built sequentially against the exemplar-pool
state left by previous batches, renders run in parallel, and pool updates
are applied in seed order, so worker count never changes the output.
"""

from __future__ import annotations

import logging
import random
import re
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .config import RunConfig, load_doc_catalog
from .errors import BackendError, DatasetError, FormatError, GenerationFailedError
from .figgen import (
    DocCatalog,
    ExemplarPool,
    Stage2Prompt,
    build_stage2_prompt,
    extract_script,
    render_chart,
    update_pool,
)
from .gateway import ChatRequest, LlmGateway
from .instructgen import synthesize
from .model import ChartRecord, ChartSeed, InstructionRecord, RenderStatus
from .store import DatasetManifest, write_dataset
from .tabgen import ThemePool, builtin_theme_pool, generate_seed, sample_spec

log = logging.getLogger(__name__)

# Stage-2 seeds are processed in fixed-size batches: prompts see the
# exemplar pool as of the previous batch, so prompt content (and thus
# cache keys) never depends on the worker count.
STAGE2_BATCH_SIZE = 16


@dataclass
class FilterStats:
    """Counters for everything the filtering mechanism rejected."""

    counters: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self._lock = threading.Lock()

    def add(self, reason: str, n: int = 1) -> None:
        if n:
            with self._lock:
                self.counters[reason] = self.counters.get(reason, 0) + n

    def merge(self, other: dict[str, int]) -> None:
        for reason, n in other.items():
            self.add(reason, n)

    @property
    def total(self) -> int:
        return sum(self.counters.values())

    def as_dict(self) -> dict[str, int]:
        return dict(sorted(self.counters.items()))


def _chunks(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i : i + size]


_REASON_KIND_RE = re.compile(r"attempt \d+ (\w+):")


def _classify_failure(exc: GenerationFailedError) -> str:
    match = _REASON_KIND_RE.match(exc.reasons[-1]) if exc.reasons else None
    kind = match.group(1) if match else "unknown"
    return f"stage1_{kind}_error"


def run_stage1(
    config: RunConfig,
    gateway: LlmGateway,
    n: int,
    themes: ThemePool | None = None,
    stats: FilterStats | None = None,
) -> list[ChartSeed]:
    """Sample n specs and generate validated seeds; failed specs are
    dropped and counted. Output is sorted by seed id."""
    stats = stats if stats is not None else FilterStats()
    rng = random.Random(config.rng_seed)
    pool = themes or builtin_theme_pool()
    specs = [sample_spec(config, rng, themes=pool) for _ in range(n)]

    def one(spec):
        try:
            return generate_seed(
                spec,
                gateway,
                max_attempts=config.max_attempts,
                enforce_trends=config.enforce_trends,
                temperature=config.temperature_generate,
                max_tokens=config.max_tokens,
                model_id=config.model_id,
            )
        except GenerationFailedError as exc:
            stats.add(_classify_failure(exc))
            log.warning("stage1 dropped a %s spec: %s", spec.chart_type.value,
                        exc.reasons[-1] if exc.reasons else exc)
            return None

    with ThreadPoolExecutor(max_workers=config.workers) as pool_exec:
        results = list(pool_exec.map(one, specs))
    seeds = [r.seed for r in results if r is not None]
    seeds.sort(key=lambda s: s.id)
    return seeds


def run_stage2(
    config: RunConfig,
    gateway: LlmGateway,
    sandbox,
    seeds: list[ChartSeed],
    charts_dir: str | Path,
    scratch_dir: str | Path,
    pool: ExemplarPool | None = None,
    docs: DocCatalog | None = None,
    stats: FilterStats | None = None,
) -> tuple[list[ChartRecord], dict[str, int]]:
    """Render every seed; returns ok records plus failure counts by reason."""
    stats = stats if stats is not None else FilterStats()
    pool = pool if pool is not None else ExemplarPool(rng_seed=config.rng_seed)
    docs = docs or DocCatalog(load_doc_catalog())
    ordered = sorted(seeds, key=lambda s: s.id)
    ok_records: list[ChartRecord] = []
    failed: dict[str, int] = {}

    def fail(reason: str):
        failed[reason] = failed.get(reason, 0) + 1
        stats.add(f"stage2_{reason}")

    def render_one(seed: ChartSeed, prompt: Stage2Prompt):
        request = ChatRequest(
            system_text=prompt.system_text,
            user_text=prompt.user_text,
            temperature=config.temperature_generate,
            max_tokens=config.max_tokens,
            model_id=config.model_id,
        )
        exchange = gateway.complete(request)
        script = extract_script(exchange.response_text)
        return render_chart(
            seed,
            script,
            sandbox,
            charts_dir=charts_dir,
            scratch_dir=scratch_dir,
            timeout_s=config.render_timeout_s,
        )

    for batch in _chunks(ordered, STAGE2_BATCH_SIZE):
        # Prompts are built sequentially so exemplar sampling stays
        # deterministic; only the render work is parallel.
        prompts = [
            build_stage2_prompt(seed, docs, pool, k=config.icl_k) for seed in batch
        ]

        def attempt(pair):
            seed, prompt = pair
            try:
                return render_one(seed, prompt)
            except FormatError:
                return "no_code_fence"
            except BackendError as exc:
                log.warning("stage2 backend failure for %s: %s", seed.id, exc)
                return "backend_error"

        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            outcomes = list(executor.map(attempt, zip(batch, prompts)))
        for seed, outcome in zip(batch, outcomes):
            if isinstance(outcome, str):
                fail(outcome)
            elif outcome.render_status is RenderStatus.OK:
                ok_records.append(outcome)
                update_pool(pool, outcome)
            else:
                fail(outcome.render_status.value)
    return ok_records, failed


def run_stage3(
    config: RunConfig,
    gateway: LlmGateway,
    sandbox,
    records: list[ChartRecord],
    scratch_dir: str | Path,
    stats: FilterStats | None = None,
) -> list[InstructionRecord]:
    """Generate instruction records for every ok chart across the enabled
    tasks; per-task failures are counted, never fatal."""
    stats = stats if stats is not None else FilterStats()
    ordered = sorted(records, key=lambda r: r.seed.id)

    def one(record: ChartRecord):
        return synthesize(
            record,
            tasks=list(config.tasks),
            gateway=gateway,
            sandbox=sandbox,
            scratch_dir=str(scratch_dir),
            qa_pairs=config.qa_pairs,
            records_per_task=config.records_per_task,
            icl_k=min(config.icl_k, 1),
            timeout_s=config.render_timeout_s,
            temperature=config.temperature_generate,
            max_tokens=config.max_tokens,
            model_id=config.model_id,
        )

    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        results = list(executor.map(one, ordered))
    out: list[InstructionRecord] = []
    for result in results:
        out.extend(result.records)
        stats.merge(result.filtered)
    return out


@dataclass
class BuildOutcome:
    manifest: DatasetManifest
    seeds: int
    ok_charts: int
    records: int
    filter_stats: FilterStats


def build_dataset(
    config: RunConfig,
    gateway: LlmGateway,
    sandbox,
    n_seeds: int,
    out_dir: str | Path,
    themes: ThemePool | None = None,
    force: bool = False,
) -> BuildOutcome:
    """The full run: generate, render, instruct, persist."""
    config.validate()
    out = Path(out_dir)
    if (out / "manifest.json").exists() and not force:
        raise DatasetError(f"{out} already holds a dataset; pass --force to overwrite")
    stats = FilterStats()
    seeds = run_stage1(config, gateway, n_seeds, themes=themes, stats=stats)
    log.info("stage1: %d/%d seeds survived", len(seeds), n_seeds)

    with tempfile.TemporaryDirectory(prefix="chartforge-scratch-") as scratch:
        ok_records, failed = run_stage2(
            config,
            gateway,
            sandbox,
            seeds,
            charts_dir=out / "charts",
            scratch_dir=scratch,
            stats=stats,
        )
        log.info("stage2: %d/%d charts rendered ok", len(ok_records), len(seeds))
        instruction_records = run_stage3(
            config, gateway, sandbox, ok_records, scratch_dir=scratch, stats=stats
        )
    log.info("stage3: %d instruction records", len(instruction_records))

    manifest = write_dataset(
        instruction_records,
        ok_records,
        out,
        config_digest=config.digest(),
        base_rng_seed=config.rng_seed,
        failed_by_reason=failed,
        filter_stats=stats.as_dict(),
        tool_version=__version__,
        force=force,
    )
    return BuildOutcome(
        manifest=manifest,
        seeds=len(seeds),
        ok_charts=len(ok_records),
        records=len(instruction_records),
        filter_stats=stats,
    )
