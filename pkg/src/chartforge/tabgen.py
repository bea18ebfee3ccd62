"""Stage 1: sample generation specs, prompt for tabular data, parse and
validate the response into chart seeds.

The response contract is three fenced, labeled sections in fixed order: a
``csv`` data block, a ``description`` block about the data, and a
``figure`` block stating how the chart should look. Responses that do not
follow the contract are rejected and retried.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from dataclasses import dataclass

from .config import SAMPLING_VALUE_COLS, RunConfig, load_builtin_themes, load_trend_vocabulary
from .errors import ConfigError, FormatError, GenerationFailedError
from .gateway import ChatRequest, LlmGateway
from .model import (
    ChartSeed,
    GenerationSpec,
    TableData,
    check_trend,
    constraint_profile,
    validate_table,
)

log = logging.getLogger(__name__)

MAX_THEME_WORDS = 8
SECTION_ORDER = ("csv", "description", "figure")

_FENCE_RE = re.compile(r"```([^\n`]*)\n(.*?)```", re.DOTALL)

STAGE1_SYSTEM = (
    "You generate realistic tabular datasets that will be rendered as charts. "
    "Follow the requested structure exactly."
)


@dataclass(frozen=True)
class ThemePool:
    themes: tuple[str, ...]
    source: str  # builtin | bootstrapped

    def __post_init__(self):
        if not self.themes:
            raise ValueError("theme pool must be non-empty")
        for theme in self.themes:
            if len(theme.split()) > MAX_THEME_WORDS:
                raise ValueError(f"theme too long: {theme!r}")


def builtin_theme_pool() -> ThemePool:
    return ThemePool(themes=tuple(load_builtin_themes()), source="builtin")


def bootstrap_themes(count: int, gateway: LlmGateway, model_id: str = "gpt-4") -> ThemePool:
    """Ask the backend for ``count`` theme phrases and merge them with the
    builtin fallback list, deduplicating case-insensitively."""
    if count < 1:
        raise ConfigError("theme count must be >= 1")
    request = ChatRequest(
        system_text="You propose dataset themes.",
        user_text=(
            f"List {count} distinct themes for tabular datasets, one per line. "
            "Each theme is a short phrase of at most "
            f"{MAX_THEME_WORDS} words. No numbering, no punctuation."
        ),
        model_id=model_id,
    )
    exchange = gateway.complete(request)
    fetched = []
    for line in exchange.response_text.splitlines():
        phrase = re.sub(r"^\s*(?:[-*•]|\d+[.)])\s*", "", line).strip().lower()
        if not phrase:
            continue
        if len(phrase.split()) > MAX_THEME_WORDS:
            log.warning("dropping overlong theme %r", phrase)
            continue
        fetched.append(phrase)
    if not fetched:
        raise FormatError("theme bootstrap response contained no usable lines")
    merged: list[str] = []
    seen: set[str] = set()
    for phrase in fetched + load_builtin_themes():
        if phrase not in seen:
            seen.add(phrase)
            merged.append(phrase)
    return ThemePool(themes=tuple(merged), source="bootstrapped")


def sample_spec(
    config: RunConfig,
    rng: random.Random,
    themes: ThemePool | None = None,
    trend_vocab: list | None = None,
) -> GenerationSpec:
    """Draw one controlled spec: theme, trends, sizes, and chart type."""
    pool = themes or builtin_theme_pool()
    vocab = trend_vocab or load_trend_vocabulary()
    if not pool.themes:
        raise ConfigError("empty theme pool")

    enabled = config.enabled_chart_types()
    weights = [config.chart_type_weights[ct] for ct in enabled]
    chart_type = rng.choices(enabled, weights=weights, k=1)[0]

    cols_lo, cols_hi = SAMPLING_VALUE_COLS.get(chart_type, config.value_cols_range)
    value_cols = rng.randint(cols_lo, cols_hi)
    n_rows = rng.randint(*config.n_rows_range)
    theme = pool.themes[rng.randrange(len(pool.themes))]
    trends = tuple(vocab[rng.randrange(len(vocab))] for _ in range(value_cols))

    return GenerationSpec(
        theme=theme,
        trends=trends,
        n_rows=n_rows,
        n_cols=value_cols + 1,
        chart_type=chart_type,
        rng_seed=rng.getrandbits(63),
    )


@dataclass(frozen=True)
class Stage1Prompt:
    system_text: str
    user_text: str


def build_stage1_prompt(spec: GenerationSpec) -> Stage1Prompt:
    """Render the data-generation prompt; every control value of the spec
    appears verbatim in the text."""
    trend_lines = "\n".join(
        f"- value column {i + 1}: {t.label}" for i, t in enumerate(spec.trends)
    )
    lines = [
        f"Create a tabular dataset about: {spec.theme}",
        "",
        "Controls:",
        f"- chart type: {spec.chart_type.value}",
        f"- rows: {spec.n_rows}",
        f"- columns: {spec.n_cols} (first column holds the row labels)",
    ]
    if trend_lines:
        lines += ["- trends per value column:", trend_lines]
    clause = constraint_profile(spec.chart_type).prompt_clause
    if clause:
        lines += ["", f"Chart-type constraint: {clause}"]
    if spec.reference_table is not None:
        lines += [
            "",
            "Here is reference data; generate data of a similar shape but "
            "with different content:",
            "```csv",
            spec.reference_table.to_csv().rstrip("\n"),
            "```",
        ]
    lines += [
        "",
        "Respond with exactly three fenced sections, in this order and "
        "nothing else:",
        "1. ```csv  -- the table, header row first, row label in the first column",
        "2. ```description  -- a paragraph describing the data itself",
        "3. ```figure  -- a paragraph describing how the chart should look",
    ]
    return Stage1Prompt(system_text=STAGE1_SYSTEM, user_text="\n".join(lines))


def _labeled_sections(text: str) -> list[tuple[str, str]]:
    return [(m.group(1).strip().lower(), m.group(2)) for m in _FENCE_RE.finditer(text)]


def parse_stage1_output(text: str) -> tuple[TableData, str, str]:
    """Extract and parse the three contracted sections.

    Raises FormatError on missing/extra sections or a ragged csv block;
    such responses are filtered, not repaired.
    """
    sections = _labeled_sections(text)
    labels = [label for label, _ in sections]
    if labels != list(SECTION_ORDER):
        raise FormatError(
            f"expected fenced sections {list(SECTION_ORDER)}, got {labels}"
        )
    body = dict(sections)
    try:
        table = TableData.from_csv(body["csv"])
    except ValueError as exc:
        raise FormatError(f"bad csv section: {exc}") from exc
    data_description = body["description"].strip()
    figure_description = body["figure"].strip()
    if not data_description or not figure_description:
        raise FormatError("description sections must be non-empty")
    return table, data_description, figure_description


def seed_id_for(spec: GenerationSpec) -> str:
    digest = hashlib.sha256(
        json.dumps(spec.to_json_dict(), sort_keys=True).encode("utf-8")
    ).hexdigest()
    return f"c{digest[:12]}"


@dataclass(frozen=True)
class SeedResult:
    seed: ChartSeed
    attempts_used: int
    trend_warnings: tuple[str, ...] = ()


def _trend_violations(table: TableData, spec: GenerationSpec) -> list[str]:
    issues = []
    numeric = set(table.numeric_column_indices())
    for i, trend in enumerate(spec.trends):
        if i >= len(table.value_headers):
            break
        if i not in numeric:
            issues.append(f"column {i + 1} not numeric, cannot check {trend.label!r}")
            continue
        series = [cell.value for cell in table.column(i)]
        if len(series) >= 2 and not check_trend(series, trend):
            issues.append(f"column {i + 1} does not follow trend {trend.label!r}")
    return issues


def generate_seed(
    spec: GenerationSpec,
    gateway: LlmGateway,
    max_attempts: int = 3,
    enforce_trends: bool = False,
    temperature: float | None = None,
    max_tokens: int | None = None,
    model_id: str | None = None,
) -> SeedResult:
    """Loop complete -> parse -> validate until a seed passes or attempts
    run out. Every emitted seed passes validate_table for its chart type."""
    if max_attempts < 1:
        raise ConfigError("max_attempts must be >= 1")
    prompt = build_stage1_prompt(spec)
    reasons: list[str] = []
    extra = {}
    if temperature is not None:
        extra["temperature"] = temperature
    if max_tokens is not None:
        extra["max_tokens"] = max_tokens
    if model_id is not None:
        extra["model_id"] = model_id

    for attempt in range(1, max_attempts + 1):
        user_text = prompt.user_text
        if attempt > 1:
            user_text += (
                f"\n\nAttempt {attempt}: the previous output was rejected "
                f"({reasons[-1]}). Produce a corrected response."
            )
        request = ChatRequest(system_text=prompt.system_text, user_text=user_text, **extra)
        exchange = gateway.complete(request)
        try:
            table, data_description, figure_description = parse_stage1_output(
                exchange.response_text
            )
        except FormatError as exc:
            reasons.append(f"attempt {attempt} format: {exc}")
            continue
        violations = validate_table(table, spec.chart_type)
        if violations:
            reasons.append(f"attempt {attempt} validation: " + "; ".join(violations))
            continue
        trend_issues = _trend_violations(table, spec)
        if trend_issues and enforce_trends:
            reasons.append(f"attempt {attempt} trend: " + "; ".join(trend_issues))
            continue
        for issue in trend_issues:
            log.warning("seed %s: %s", seed_id_for(spec), issue)
        seed = ChartSeed(
            id=seed_id_for(spec),
            spec=spec,
            table=table,
            data_description=data_description,
            figure_description=figure_description,
        )
        return SeedResult(seed=seed, attempts_used=attempt, trend_warnings=tuple(trend_issues))

    raise GenerationFailedError(
        f"seed generation failed after {max_attempts} attempt(s)", reasons=reasons
    )
