"""Run configuration and shipped config assets.

The config file is a flat ``key = value`` text format (documented in the
README); command-line flags override file values. A validated config
canonicalizes to JSON whose digest is recorded in the dataset manifest.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .model import ChartType, TaskKind, TrendKind, TrendSpec

DEFAULT_QA_PAIRS = 5
DEFAULT_ROWS_RANGE = (3, 12)
DEFAULT_VALUE_COLS_RANGE = (1, 4)

# Chart types whose constraint profile pins the value-column count for
# sampling (validation itself lives in model.validate_table).
SAMPLING_VALUE_COLS: dict[ChartType, tuple[int, int]] = {
    ChartType.PIE: (1, 1),
    ChartType.CANDLESTICK: (4, 4),
    ChartType.GANTT: (2, 2),
    ChartType.HEATMAP: (2, 4),
}


def _assets_root():
    return resources.files("chartforge") / "assets"


def load_builtin_themes() -> list[str]:
    text = (_assets_root() / "themes.txt").read_text(encoding="utf-8")
    return [line.strip().lower() for line in text.splitlines() if line.strip()]


def load_trend_vocabulary() -> list[TrendSpec]:
    text = (_assets_root() / "trends.txt").read_text(encoding="utf-8")
    specs = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        label, kind, tolerance = (part.strip() for part in line.split("|"))
        specs.append(TrendSpec(label=label, kind=TrendKind(kind), tolerance=float(tolerance)))
    return specs


def load_characteristic_tags() -> list[str]:
    text = (_assets_root() / "characteristics.txt").read_text(encoding="utf-8")
    tags = [line.strip() for line in text.splitlines() if line.strip()]
    if len(set(tags)) != len(tags):
        raise ConfigError("characteristic tags must be unique")
    return tags


def load_doc_catalog() -> dict[ChartType, str]:
    docs = {}
    root = _assets_root() / "docs"
    for chart_type in ChartType:
        docs[chart_type] = (root / f"{chart_type.value}.txt").read_text(encoding="utf-8")
    return docs


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run needs, validated up front."""

    backend: str = "replay"
    model_id: str = "gpt-4"
    rng_seed: int = 0
    chart_type_weights: dict = field(
        default_factory=lambda: {ct: 1.0 for ct in ChartType}
    )
    tasks: tuple[TaskKind, ...] = tuple(TaskKind)
    n_rows_range: tuple[int, int] = DEFAULT_ROWS_RANGE
    value_cols_range: tuple[int, int] = DEFAULT_VALUE_COLS_RANGE
    qa_pairs: int = DEFAULT_QA_PAIRS
    records_per_task: int = 1
    icl_k: int = 2
    render_timeout_s: int = 30
    workers: int = max(1, os.cpu_count() or 1)
    enforce_trends: bool = False
    max_attempts: int = 3
    temperature_generate: float = 0.7
    temperature_eval: float = 0.0
    max_tokens: int = 2048
    requests_per_minute: int = 60
    cache_dir: str = "cache"
    sandbox_cmd: str = ""

    def validate(self) -> None:
        if self.backend not in ("live", "replay", "scripted"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        enabled = [ct for ct, w in self.chart_type_weights.items() if w > 0]
        if not enabled:
            raise ConfigError("all chart types are disabled")
        if any(w < 0 for w in self.chart_type_weights.values()):
            raise ConfigError("chart type weights must be >= 0")
        if not self.tasks:
            raise ConfigError("no tasks enabled")
        lo, hi = self.n_rows_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad row range {self.n_rows_range}")
        lo, hi = self.value_cols_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad value-column range {self.value_cols_range}")
        if self.qa_pairs < 1 or self.records_per_task < 1:
            raise ConfigError("per-task multiplicities must be >= 1")
        if self.icl_k < 0:
            raise ConfigError("icl_k must be >= 0")
        if self.render_timeout_s < 1 or self.workers < 1 or self.max_attempts < 1:
            raise ConfigError("timeouts, workers, and attempts must be >= 1")

    def enabled_chart_types(self) -> list[ChartType]:
        return [ct for ct in ChartType if self.chart_type_weights.get(ct, 0.0) > 0]

    def to_canonical_dict(self) -> dict:
        # Backend mode is an execution detail: replaying a recorded run
        # must yield the same digest the original run had.
        return {
            "model_id": self.model_id,
            "rng_seed": self.rng_seed,
            "chart_type_weights": {
                ct.value: w for ct, w in sorted(self.chart_type_weights.items())
            },
            "tasks": [t.value for t in self.tasks],
            "n_rows_range": list(self.n_rows_range),
            "value_cols_range": list(self.value_cols_range),
            "qa_pairs": self.qa_pairs,
            "records_per_task": self.records_per_task,
            "icl_k": self.icl_k,
            "render_timeout_s": self.render_timeout_s,
            "enforce_trends": self.enforce_trends,
            "max_attempts": self.max_attempts,
            "temperature_generate": self.temperature_generate,
            "temperature_eval": self.temperature_eval,
            "max_tokens": self.max_tokens,
        }

    def digest(self) -> str:
        """Digest of the run-shaping fields; worker counts and paths are
        execution details that must not change dataset identity."""
        canonical = json.dumps(self.to_canonical_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_BOOL_VALUES = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _parse_weights(value: str) -> dict:
    weights = {ct: 0.0 for ct in ChartType}
    for part in value.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            name, w = part.split(":", 1)
            weights[ChartType(name.strip())] = float(w)
        else:
            weights[ChartType(part)] = 1.0
    return weights


def _parse_tasks(value: str) -> tuple[TaskKind, ...]:
    return tuple(TaskKind(part.strip()) for part in value.split(",") if part.strip())


def _parse_range(value: str) -> tuple[int, int]:
    lo, hi = value.split("-", 1) if "-" in value else (value, value)
    return (int(lo), int(hi))


_FIELD_PARSERS = {
    "backend": str,
    "model_id": str,
    "rng_seed": int,
    "chart_type_weights": _parse_weights,
    "tasks": _parse_tasks,
    "n_rows_range": _parse_range,
    "value_cols_range": _parse_range,
    "qa_pairs": int,
    "records_per_task": int,
    "icl_k": int,
    "render_timeout_s": int,
    "workers": int,
    "enforce_trends": lambda v: _BOOL_VALUES[v.lower()],
    "max_attempts": int,
    "temperature_generate": float,
    "temperature_eval": float,
    "max_tokens": int,
    "requests_per_minute": int,
    "cache_dir": str,
    "sandbox_cmd": str,
}


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read the key=value config file, apply overrides (flags win), validate."""
    values: dict = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_PARSERS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = _FIELD_PARSERS[key](raw)
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_PARSERS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _FIELD_PARSERS[key](value) if isinstance(value, str) else value
    config = replace(RunConfig(), **values)
    config.validate()
    return config
