"""Stage 2: prompt for plotting code, execute it in the sandbox, filter
failures, and grow the in-context exemplar pool from successful scripts.

Also hosts the prompt-ablation harness that measures render success rates
with the documentation and/or in-context examples removed.
"""

from __future__ import annotations

import logging
import random
import re
import shutil
import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .errors import BackendError, ContractError, FormatError
from .gateway import ChatRequest, LlmGateway
from .model import ChartRecord, ChartSeed, ChartType, RenderStatus
from .sandboxclient import FIGURE_FILENAME, SandboxRequest

log = logging.getLogger(__name__)

POOL_CAP_PER_TYPE = 200
DEFAULT_ICL_K = 2

_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)

STAGE2_SYSTEM = (
    "You write Python plotting scripts with matplotlib. Scripts must run "
    "unattended and save their output."
)

REQUIREMENTS_BLOCK = """Requirements for the script:
- It must be fully self-contained: list the data inline in the code and do
  not read any external files or URLs.
- Set a meaningful title, axis labels where applicable, and a legend.
- Add text annotations so key values can be read off the figure.
- Vary the visual style: pick interesting color schemes and line types.
- Save the figure to the relative path "figure.png" and do not call show().
- Reply with exactly one fenced python code block."""


class Stage2PromptVariant(str, Enum):
    FULL = "full"
    NO_ICL = "no_icl"
    NO_DOC = "no_doc"
    NO_BOTH = "no_both"

    @property
    def wants_docs(self) -> bool:
        return self in (Stage2PromptVariant.FULL, Stage2PromptVariant.NO_ICL)

    @property
    def wants_exemplars(self) -> bool:
        return self in (Stage2PromptVariant.FULL, Stage2PromptVariant.NO_DOC)


VARIANT_LABELS = {
    Stage2PromptVariant.FULL: "Original",
    Stage2PromptVariant.NO_ICL: "w/o In-context",
    Stage2PromptVariant.NO_DOC: "w/o Documentation",
    Stage2PromptVariant.NO_BOTH: "w/o Both",
}

# Reported success rates for the original pipeline; context only, never
# asserted by any test.
REFERENCE_SUCCESS_RATES = {
    Stage2PromptVariant.FULL: 85.0,
    Stage2PromptVariant.NO_ICL: 43.0,
    Stage2PromptVariant.NO_DOC: 65.0,
    Stage2PromptVariant.NO_BOTH: 28.0,
}


@dataclass(frozen=True)
class PoolEntry:
    chart_type: ChartType
    script: str
    quality_ok: bool = True


class ExemplarPool:
    """Scripts that rendered successfully, sampled as in-context examples.

    Capped per chart type with oldest-first eviction. Reads take a
    snapshot under the lock so prompt building never blocks writers.
    """

    def __init__(self, rng_seed: int = 0):
        self._entries: dict[ChartType, deque[PoolEntry]] = {}
        self._rng = random.Random(rng_seed)
        self._lock = threading.Lock()

    def __len__(self):
        with self._lock:
            return sum(len(q) for q in self._entries.values())

    def count(self, chart_type: ChartType) -> int:
        with self._lock:
            return len(self._entries.get(chart_type, ()))

    def add(self, entry: PoolEntry) -> None:
        with self._lock:
            queue = self._entries.setdefault(entry.chart_type, deque(maxlen=POOL_CAP_PER_TYPE))
            queue.append(entry)

    def sample(self, chart_type: ChartType, k: int) -> list[PoolEntry]:
        """Up to k exemplars of the given type, falling back to any type
        when there are no same-type entries."""
        if k <= 0:
            return []
        with self._lock:
            same = list(self._entries.get(chart_type, ()))
            candidates = same or [e for q in self._entries.values() for e in q]
            if not candidates:
                return []
            if len(candidates) <= k:
                return list(candidates)
            return self._rng.sample(candidates, k)


def update_pool(pool: ExemplarPool, record: ChartRecord) -> ExemplarPool:
    """Append a successful render's script; failed records are a caller bug."""
    if record.render_status is not RenderStatus.OK:
        raise ContractError(
            f"only ok records enter the exemplar pool, got {record.render_status.value}"
        )
    pool.add(PoolEntry(chart_type=record.chart_type, script=record.script))
    return pool


class DocCatalog:
    """Per-chart-type documentation excerpts for the plotting functions."""

    def __init__(self, excerpts: dict[ChartType, str]):
        missing = [ct.value for ct in ChartType if not excerpts.get(ct)]
        if missing:
            raise ContractError(f"doc catalog missing chart type(s): {', '.join(missing)}")
        self._excerpts = dict(excerpts)

    def excerpt(self, chart_type: ChartType) -> str:
        return self._excerpts[chart_type]


@dataclass(frozen=True)
class Stage2Prompt:
    system_text: str
    user_text: str
    variant: Stage2PromptVariant
    exemplars_used: int


def build_stage2_prompt(
    seed: ChartSeed,
    docs: DocCatalog,
    pool: ExemplarPool,
    k: int = DEFAULT_ICL_K,
    variant: Stage2PromptVariant = Stage2PromptVariant.FULL,
) -> Stage2Prompt:
    """Assemble data + docs + exemplars + the fixed requirements block,
    with docs/exemplars dropped according to the variant."""
    if k < 0:
        raise ContractError("k must be >= 0")
    chart_type = seed.spec.chart_type
    lines = [
        f"Write a Python script that draws a {chart_type.value} chart for "
        f"this dataset about {seed.spec.theme}.",
        "",
        "The data (must appear inline in the script):",
        "```csv",
        seed.table.to_csv().rstrip("\n"),
        "```",
        "",
        f"Intended look: {seed.figure_description}" if seed.figure_description else "",
    ]
    if variant.wants_docs:
        lines += [
            "",
            "Relevant function documentation:",
            "```text",
            docs.excerpt(chart_type).rstrip("\n"),
            "```",
        ]
    exemplars = pool.sample(chart_type, k) if variant.wants_exemplars else []
    for i, entry in enumerate(exemplars, 1):
        lines += [
            "",
            f"Example {i} of previously successful code:",
            "```python",
            entry.script.rstrip("\n"),
            "```",
        ]
    lines += ["", REQUIREMENTS_BLOCK]
    user_text = "\n".join(line for line in lines if line is not None)
    return Stage2Prompt(
        system_text=STAGE2_SYSTEM,
        user_text=user_text,
        variant=variant,
        exemplars_used=len(exemplars),
    )


def extract_script(llm_text: str) -> str:
    """Content of the first fenced code block; no block means the response
    is filtered out."""
    blocks = _FENCE_RE.findall(llm_text)
    if not blocks:
        raise FormatError("response contains no fenced code block")
    if len(blocks) > 1:
        log.warning("response contains %d fenced blocks; using the first", len(blocks))
    return blocks[0].strip("\n")


def render_chart(
    seed: ChartSeed,
    script: str,
    sandbox,
    charts_dir: str | Path,
    scratch_dir: str | Path,
    timeout_s: int = 30,
) -> ChartRecord:
    """Execute the script in the sandbox and fold the outcome into a record.

    Failures become render statuses, never exceptions. On success the
    figure is moved into the dataset tree and the scratch workdir is wiped.
    """
    scratch = Path(scratch_dir) / seed.id
    request = SandboxRequest(script=script, timeout_s=timeout_s, workdir=str(scratch))
    result = sandbox.execute(request)

    figure_path = ""
    if result.status is RenderStatus.OK:
        target_dir = Path(charts_dir) / seed.id
        target_dir.mkdir(parents=True, exist_ok=True)
        target = target_dir / FIGURE_FILENAME
        shutil.move(result.figure_file, target)
        figure_path = str(Path("charts") / seed.id / FIGURE_FILENAME)
    elif result.stderr_tail:
        log.info("render %s failed (%s): %s", seed.id, result.status.value,
                 result.stderr_tail[-200:])
    shutil.rmtree(scratch, ignore_errors=True)

    return ChartRecord(
        seed=seed,
        script=script,
        figure_path=figure_path,
        render_status=result.status,
    )


@dataclass(frozen=True)
class AblationRow:
    variant: Stage2PromptVariant
    label: str
    ok: int
    attempts: int

    @property
    def rate(self) -> float:
        return 100.0 * self.ok / self.attempts if self.attempts else 0.0


@dataclass(frozen=True)
class AblationReport:
    rows: tuple[AblationRow, ...]

    def to_json_dict(self) -> dict:
        return {
            "rows": [
                {
                    "variant": row.variant.value,
                    "label": row.label,
                    "ok": row.ok,
                    "attempts": row.attempts,
                    "success_rate": row.rate,
                }
                for row in self.rows
            ],
            "reference_success_rates": {
                VARIANT_LABELS[v]: rate for v, rate in REFERENCE_SUCCESS_RATES.items()
            },
        }

    def to_text(self) -> str:
        width = max(len(row.label) for row in self.rows)
        lines = [f"{'Variant':<{width}}  {'Ok':>4}  {'Attempts':>8}  {'Success Rate':>12}"]
        for row in self.rows:
            lines.append(
                f"{row.label:<{width}}  {row.ok:>4}  {row.attempts:>8}  {row.rate:>11.1f}%"
            )
        refs = ", ".join(
            f"{VARIANT_LABELS[v]} {rate:.0f}%" for v, rate in REFERENCE_SUCCESS_RATES.items()
        )
        lines.append("")
        lines.append(f"Context (previously reported rates, not asserted): {refs}")
        return "\n".join(lines)


def run_ablation(
    seeds: list[ChartSeed],
    variants: list[Stage2PromptVariant],
    gateway: LlmGateway,
    sandbox,
    docs: DocCatalog,
    pool: ExemplarPool,
    scratch_dir: str | Path,
    k: int = DEFAULT_ICL_K,
    timeout_s: int = 30,
    temperature: float | None = None,
    model_id: str | None = None,
) -> AblationReport:
    """Measure render success per prompt variant over the given seeds.

    Backend and format failures count as failed attempts; the exemplar
    pool is read but never updated, so variants see the same pool.
    """
    if not seeds:
        raise ContractError("ablation needs at least one seed")
    extra = {}
    if temperature is not None:
        extra["temperature"] = temperature
    if model_id is not None:
        extra["model_id"] = model_id

    rows = []
    for variant in variants:
        ok = 0
        for i, seed in enumerate(seeds):
            prompt = build_stage2_prompt(seed, docs, pool, k=k, variant=variant)
            try:
                exchange = gateway.complete(
                    ChatRequest(
                        system_text=prompt.system_text,
                        user_text=prompt.user_text,
                        **extra,
                    )
                )
                script = extract_script(exchange.response_text)
            except (BackendError, FormatError) as exc:
                log.info("ablation %s seed %s: %s", variant.value, seed.id, exc)
                continue
            workdir = Path(scratch_dir) / f"ablate-{variant.value}-{i}"
            result = sandbox.execute(
                SandboxRequest(script=script, timeout_s=timeout_s, workdir=str(workdir))
            )
            shutil.rmtree(workdir, ignore_errors=True)
            ok += result.status is RenderStatus.OK
        rows.append(
            AblationRow(
                variant=variant,
                label=VARIANT_LABELS[variant],
                ok=ok,
                attempts=len(seeds),
            )
        )
    return AblationReport(rows=tuple(rows))
