"""Core domain types and data validators for the chart pipeline.

Everything here is immutable after construction and all validators are pure
functions, so the types are safe to share across worker threads.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError


class ChartType(str, Enum):
    """Supported chart families.

    The default set has ten members; six of them (funnel through
    candlestick) are the "special" types that plain bar/line/pie corpora
    do not cover. The enabled subset is configurable per run.
    """

    BAR = "bar"
    LINE = "line"
    PIE = "pie"
    FUNNEL = "funnel"
    GANTT = "gantt"
    HEATMAP = "heatmap"
    SCATTER = "scatter"
    BOX = "box"
    CANDLESTICK = "candlestick"
    AREA = "area"


SPECIAL_CHART_TYPES = (
    ChartType.FUNNEL,
    ChartType.GANTT,
    ChartType.HEATMAP,
    ChartType.SCATTER,
    ChartType.BOX,
    ChartType.CANDLESTICK,
)

PIE_SUM_TARGET = 100.0
PIE_SUM_TOLERANCE = 1.0  # absolute, so rounded percentages like 33.3*3 pass


@dataclass(frozen=True)
class ConstraintProfile:
    """Structural constraints one chart type imposes on its table.

    ``prompt_clause`` is the human-readable restatement injected into
    generation prompts so the model is told the rule up front.
    """

    fixed_value_cols: int | None = None
    min_value_cols: int = 1
    all_numeric: bool = False
    prompt_clause: str = ""


CONSTRAINT_PROFILES: dict[ChartType, ConstraintProfile] = {
    ChartType.PIE: ConstraintProfile(
        fixed_value_cols=1,
        prompt_clause=(
            "Pie chart data must have exactly one value column whose values "
            "are percentages summing to 100."
        ),
    ),
    ChartType.CANDLESTICK: ConstraintProfile(
        fixed_value_cols=4,
        all_numeric=True,
        prompt_clause=(
            "Candlestick data needs four numeric columns named open, high, "
            "low, close; per row, low must not exceed open/close and high "
            "must not be below open/close."
        ),
    ),
    ChartType.HEATMAP: ConstraintProfile(
        all_numeric=True,
        prompt_clause="Heatmap data must be an all-numeric grid.",
    ),
    ChartType.GANTT: ConstraintProfile(
        prompt_clause=(
            "Gantt data should include numeric start and finish columns "
            "with start <= finish per row."
        ),
    ),
}
_GENERIC_PROFILE = ConstraintProfile(
    prompt_clause="At least one column must be fully numeric."
)


def constraint_profile(chart_type: ChartType) -> ConstraintProfile:
    return CONSTRAINT_PROFILES.get(chart_type, _GENERIC_PROFILE)


class TrendKind(str, Enum):
    """Programmatic conformance rules standing in for free-text trend phrases."""

    MONOTONE_UP = "monotone-up"
    MONOTONE_DOWN = "monotone-down"
    SPIKE = "spike"
    DIP = "dip"
    FLAT = "flat"
    OSCILLATING = "oscillating"


@dataclass(frozen=True)
class TrendSpec:
    """A trend phrase plus the rule used to check a series against it."""

    label: str
    kind: TrendKind
    tolerance: float = 0.1

    def __post_init__(self):
        if not self.label.strip():
            raise ValueError("trend label must be non-empty")
        if not 0.0 <= self.tolerance < 1.0:
            raise ValueError(f"trend tolerance {self.tolerance} outside [0, 1)")

    def to_json_dict(self) -> dict:
        return {"label": self.label, "kind": self.kind.value, "tolerance": self.tolerance}

    @classmethod
    def from_json_dict(cls, d: dict) -> TrendSpec:
        return cls(label=d["label"], kind=TrendKind(d["kind"]), tolerance=d["tolerance"])


def _format_number(value: float) -> str:
    if math.isnan(value) or math.isinf(value):
        raise ValueError(f"non-finite cell value {value!r}")
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


@dataclass(frozen=True)
class Cell:
    """One table cell: source text plus the parsed double when numeric.

    The raw text is what prompts and CSV files carry; metric math uses the
    parsed value. Non-finite parses are demoted to text cells so a table
    can never hold NaN/inf numerics.
    """

    raw: str
    value: float | None = None

    @classmethod
    def from_raw(cls, text: str) -> Cell:
        text = text.strip()
        try:
            parsed = float(text.replace(",", "")) if text else None
        except ValueError:
            parsed = None
        if parsed is not None and not math.isfinite(parsed):
            parsed = None
        return cls(raw=text, value=parsed)

    @classmethod
    def from_number(cls, value: float) -> Cell:
        return cls(raw=_format_number(float(value)), value=float(value))

    @property
    def is_numeric(self) -> bool:
        return self.value is not None

    def __eq__(self, other):
        if not isinstance(other, Cell):
            return NotImplemented
        if self.value is not None and other.value is not None:
            return self.value == other.value
        return self.raw == other.raw and self.value == other.value

    def __hash__(self):
        return hash(self.value) if self.value is not None else hash(self.raw)


@dataclass(frozen=True)
class TableData:
    """Rectangular table: one key column plus one or more value columns.

    ``column_headers[0]`` labels the key column; ``values`` is row-major
    with one entry per value column.
    """

    column_headers: tuple[str, ...]
    row_keys: tuple[str, ...]
    values: tuple[tuple[Cell, ...], ...]

    def __post_init__(self):
        if len(self.column_headers) < 2:
            raise ValueError("table needs a key column and at least one value column")
        if len(set(self.column_headers)) != len(self.column_headers):
            raise ValueError("column headers must be unique")
        if any(not h.strip() for h in self.column_headers):
            raise ValueError("column headers must be non-empty")
        if len(self.values) != len(self.row_keys):
            raise ValueError(
                f"{len(self.values)} value rows for {len(self.row_keys)} row keys"
            )
        width = len(self.column_headers) - 1
        for i, row in enumerate(self.values):
            if len(row) != width:
                raise ValueError(f"row {i} has {len(row)} cells, expected {width}")

    @classmethod
    def build(
        cls,
        column_headers: list[str],
        row_keys: list[str],
        values: list[list],
    ) -> TableData:
        """Build from plain text/number cells, parsing numerics from text."""
        rows = []
        for row in values:
            cells = []
            for v in row:
                if isinstance(v, Cell):
                    cells.append(v)
                elif isinstance(v, (int, float)):
                    cells.append(Cell.from_number(v))
                else:
                    cells.append(Cell.from_raw(str(v)))
            rows.append(tuple(cells))
        return cls(
            column_headers=tuple(column_headers),
            row_keys=tuple(row_keys),
            values=tuple(rows),
        )

    @property
    def n_rows(self) -> int:
        return len(self.row_keys)

    @property
    def n_cols(self) -> int:
        return len(self.column_headers)

    @property
    def value_headers(self) -> tuple[str, ...]:
        return self.column_headers[1:]

    def column(self, value_col: int) -> list[Cell]:
        return [row[value_col] for row in self.values]

    def numeric_column_indices(self) -> list[int]:
        """Indices of value columns whose cells are all numeric."""
        return [
            c
            for c in range(len(self.value_headers))
            if all(cell.is_numeric for cell in self.column(c))
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.column_headers)
        for key, row in zip(self.row_keys, self.values):
            writer.writerow([key] + [cell.raw for cell in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> TableData:
        """Parse the delimited wire format; raises ValueError on ragged rows."""
        rows = [r for r in csv.reader(io.StringIO(text)) if any(f.strip() for f in r)]
        if len(rows) < 2:
            raise ValueError("csv table needs a header row and at least one data row")
        headers = [h.strip() for h in rows[0]]
        row_keys = []
        values = []
        for i, row in enumerate(rows[1:]):
            if len(row) != len(headers):
                raise ValueError(
                    f"row {i} has {len(row)} cells but the header has {len(headers)}"
                )
            row_keys.append(row[0].strip())
            values.append(tuple(Cell.from_raw(c) for c in row[1:]))
        return cls(
            column_headers=tuple(headers),
            row_keys=tuple(row_keys),
            values=tuple(values),
        )

    def to_json_dict(self) -> dict:
        return {
            "column_headers": list(self.column_headers),
            "row_keys": list(self.row_keys),
            "values": [[cell.raw for cell in row] for row in self.values],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> TableData:
        return cls(
            column_headers=tuple(d["column_headers"]),
            row_keys=tuple(d["row_keys"]),
            values=tuple(
                tuple(Cell.from_raw(c) for c in row) for row in d["values"]
            ),
        )


@dataclass(frozen=True)
class GenerationSpec:
    """Controlled characteristics of one chart seed."""

    theme: str
    trends: tuple[TrendSpec, ...]
    n_rows: int
    n_cols: int
    chart_type: ChartType
    rng_seed: int
    reference_table: TableData | None = None

    def __post_init__(self):
        if self.n_rows < 1:
            raise ValueError("n_rows must be >= 1")
        if self.n_cols < 2:
            raise ValueError("n_cols must be >= 2 (key column plus values)")
        if len(self.trends) > self.n_cols - 1:
            raise ValueError(
                f"{len(self.trends)} trends for {self.n_cols - 1} value columns"
            )
        if not -(2**63) <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must fit in 64 bits")

    def to_json_dict(self) -> dict:
        return {
            "theme": self.theme,
            "trends": [t.to_json_dict() for t in self.trends],
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "chart_type": self.chart_type.value,
            "rng_seed": self.rng_seed,
            "reference_table": (
                self.reference_table.to_json_dict() if self.reference_table else None
            ),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> GenerationSpec:
        ref = d.get("reference_table")
        return cls(
            theme=d["theme"],
            trends=tuple(TrendSpec.from_json_dict(t) for t in d["trends"]),
            n_rows=d["n_rows"],
            n_cols=d["n_cols"],
            chart_type=ChartType(d["chart_type"]),
            rng_seed=d["rng_seed"],
            reference_table=TableData.from_json_dict(ref) if ref else None,
        )


@dataclass(frozen=True)
class ChartSeed:
    """Stage-1 output: validated table plus its two descriptions."""

    id: str
    spec: GenerationSpec
    table: TableData
    data_description: str
    figure_description: str = ""

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "spec": self.spec.to_json_dict(),
            "table": self.table.to_json_dict(),
            "data_description": self.data_description,
            "figure_description": self.figure_description,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> ChartSeed:
        return cls(
            id=d["id"],
            spec=GenerationSpec.from_json_dict(d["spec"]),
            table=TableData.from_json_dict(d["table"]),
            data_description=d["data_description"],
            figure_description=d.get("figure_description", ""),
        )


class RenderStatus(str, Enum):
    OK = "ok"
    EXEC_ERROR = "exec_error"
    TIMEOUT = "timeout"
    NO_FIGURE = "no_figure"


@dataclass(frozen=True)
class ChartRecord:
    """Stage-2 output: a seed plus its plotting script and render outcome.

    Records whose status is not ``ok`` never reach the training set; the
    figure path is only set for successful renders.
    """

    seed: ChartSeed
    script: str
    figure_path: str
    render_status: RenderStatus

    def __post_init__(self):
        has_figure = bool(self.figure_path)
        if has_figure != (self.render_status is RenderStatus.OK):
            raise ValueError(
                f"figure_path {'set' if has_figure else 'empty'} conflicts with "
                f"render_status {self.render_status.value}"
            )

    @property
    def chart_type(self) -> ChartType:
        return self.seed.spec.chart_type

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed.to_json_dict(),
            "script": self.script,
            "figure_path": self.figure_path,
            "render_status": self.render_status.value,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> ChartRecord:
        return cls(
            seed=ChartSeed.from_json_dict(d["seed"]),
            script=d["script"],
            figure_path=d["figure_path"],
            render_status=RenderStatus(d["render_status"]),
        )


class TaskKind(str, Enum):
    """The seven instruction-tuning task families."""

    QA = "qa"
    CHART_TO_TEXT = "chart_to_text"
    CHART_EXTRACTION = "chart_extraction"
    DETAILED_DESCRIPTION = "detailed_description"
    CHART_TO_CHART = "chart_to_chart"
    TEXT_TO_CHART = "text_to_chart"
    CHART_EDITING = "chart_editing"


CODE_TASKS = frozenset(
    {TaskKind.CHART_TO_CHART, TaskKind.TEXT_TO_CHART, TaskKind.CHART_EDITING}
)

HUMAN = "human"
ASSISTANT = "assistant"

_FENCED_BLOCK_RE = re.compile(r"```[^\n]*\n.*?```", re.DOTALL)


def contains_fenced_block(text: str) -> bool:
    return _FENCED_BLOCK_RE.search(text) is not None


@dataclass(frozen=True)
class Provenance:
    backend: str
    prompt_digest: str

    def to_json_dict(self) -> dict:
        return {"backend": self.backend, "prompt_digest": self.prompt_digest}

    @classmethod
    def from_json_dict(cls, d: dict) -> Provenance:
        return cls(backend=d["backend"], prompt_digest=d["prompt_digest"])


@dataclass(frozen=True)
class InstructionRecord:
    """One multi-turn training sample tied to a chart and a task kind."""

    id: str
    chart_id: str
    task: TaskKind
    conversations: tuple[tuple[str, str], ...]
    provenance: Provenance

    def __post_init__(self):
        if len(self.conversations) < 2:
            raise ValueError("need at least one human/assistant pair")
        for i, (role, _) in enumerate(self.conversations):
            expected = HUMAN if i % 2 == 0 else ASSISTANT
            if role != expected:
                raise ValueError(
                    f"turn {i} has role {role!r}, expected {expected!r}"
                )
        if len(self.conversations) % 2 != 0:
            raise ValueError("conversation must end on an assistant turn")
        if self.task in CODE_TASKS:
            final = self.conversations[-1][1]
            if not contains_fenced_block(final):
                raise ValueError(
                    f"{self.task.value} answer must contain a fenced code block"
                )

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "chart_id": self.chart_id,
            "task": self.task.value,
            "conversations": [
                {"from": role, "value": text} for role, text in self.conversations
            ],
            "provenance": self.provenance.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> InstructionRecord:
        return cls(
            id=d["id"],
            chart_id=d["chart_id"],
            task=TaskKind(d["task"]),
            conversations=tuple(
                (turn["from"], turn["value"]) for turn in d["conversations"]
            ),
            provenance=Provenance.from_json_dict(d["provenance"]),
        )

    def to_json_line(self) -> str:
        return json.dumps(self.to_json_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> InstructionRecord:
        return cls.from_json_dict(json.loads(line))


# ---------------------------------------------------------------------------
# Validators


def validate_table(table: TableData, chart_type: ChartType) -> list[str]:
    """Check a table against a chart type's constraint profile.

    Returns every violation found (empty list means the table is valid);
    bad data is reported, never raised.
    """
    violations: list[str] = []
    profile = constraint_profile(chart_type)
    numeric_cols = table.numeric_column_indices()
    n_value_cols = len(table.value_headers)

    if profile.fixed_value_cols is not None and n_value_cols != profile.fixed_value_cols:
        violations.append(
            f"{chart_type.value} expects exactly {profile.fixed_value_cols} "
            f"value column(s), got {n_value_cols}"
        )
    if n_value_cols < profile.min_value_cols:
        violations.append(
            f"{chart_type.value} needs at least {profile.min_value_cols} "
            f"value column(s), got {n_value_cols}"
        )
    if profile.all_numeric and len(numeric_cols) != n_value_cols:
        bad = [
            table.value_headers[c]
            for c in range(n_value_cols)
            if c not in numeric_cols
        ]
        violations.append(
            f"{chart_type.value} requires an all-numeric grid; "
            f"non-numeric column(s): {', '.join(bad)}"
        )

    if chart_type is ChartType.PIE:
        if numeric_cols:
            total = sum(c.value for c in table.column(numeric_cols[0]))
            if abs(total - PIE_SUM_TARGET) > PIE_SUM_TOLERANCE:
                violations.append(
                    f"pie sum {total:g} outside {PIE_SUM_TARGET:g}"
                    f"±{PIE_SUM_TOLERANCE:g}"
                )
        else:
            violations.append("pie needs one numeric value column")
    elif chart_type is ChartType.CANDLESTICK:
        violations.extend(_check_candlestick_rows(table, numeric_cols))
    elif chart_type is not ChartType.HEATMAP:
        if not numeric_cols:
            violations.append(
                f"{chart_type.value} needs at least one fully numeric column"
            )
    return violations


_OHLC_NAMES = ("open", "high", "low", "close")


def _check_candlestick_rows(table: TableData, numeric_cols: list[int]) -> list[str]:
    if len(numeric_cols) < 4:
        return [f"candlestick needs >=4 numeric columns, got {len(numeric_cols)}"]
    # Prefer header names; fall back to the first four numeric columns in order.
    lowered = [h.lower() for h in table.value_headers]
    if all(name in lowered for name in _OHLC_NAMES):
        cols = {name: lowered.index(name) for name in _OHLC_NAMES}
    else:
        cols = dict(zip(_OHLC_NAMES, numeric_cols[:4]))
    violations = []
    for i in range(table.n_rows):
        row = table.values[i]
        o, h, lo, c = (row[cols[name]].value for name in _OHLC_NAMES)
        body_hi, body_lo = max(o, c), min(o, c)
        if h < body_hi:
            worse = "open" if o >= c else "close"
            violations.append(f"row {i}: high {h:g} < {worse} {body_hi:g}")
        if lo > body_lo:
            better = "open" if o <= c else "close"
            violations.append(f"row {i}: low {lo:g} > {better} {body_lo:g}")
    return violations


def check_trend(series: list[float], trend: TrendSpec) -> bool:
    """True iff the series conforms to the trend's rule.

    Monotone checks allow counter-moves up to ``tolerance * range``; spike
    and dip demand exactly one point beyond 2 IQR of the median; flat
    bounds the range relative to the median magnitude.
    """
    if len(series) < 2:
        raise ContractError("trend check needs a series of length >= 2")
    values = [float(v) for v in series]
    span = max(values) - min(values)
    deltas = [b - a for a, b in zip(values, values[1:])]
    tol = trend.tolerance

    if trend.kind is TrendKind.MONOTONE_UP:
        return all(d >= -tol * span for d in deltas)
    if trend.kind is TrendKind.MONOTONE_DOWN:
        return all(d <= tol * span for d in deltas)
    if trend.kind in (TrendKind.SPIKE, TrendKind.DIP):
        median = float(np.median(values))
        q1, q3 = np.percentile(values, [25, 75])
        threshold = 2.0 * (q3 - q1)
        if trend.kind is TrendKind.SPIKE:
            outliers = [v for v in values if v - median > threshold]
        else:
            outliers = [v for v in values if median - v > threshold]
        return len(outliers) == 1
    if trend.kind is TrendKind.FLAT:
        median = float(np.median(values))
        limit = tol * abs(median) if median != 0 else tol
        return span <= limit
    if trend.kind is TrendKind.OSCILLATING:
        significant = [d for d in deltas if abs(d) > tol * span]
        if len(significant) < 2:
            return False
        return all(
            (a > 0) != (b > 0) for a, b in zip(significant, significant[1:])
        )
    raise ContractError(f"unknown trend kind {trend.kind!r}")
