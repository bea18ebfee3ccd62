"""Dataset persistence and reporting.

A dataset directory is a write-once artifact:

    <dir>/manifest.json            written last, acts as the commit marker
    <dir>/records.jsonl            one instruction record per line
    <dir>/charts/<id>/figure.png   the rendered figure
    <dir>/charts/<id>/table.csv    the chart's table in the wire format
    <dir>/charts/<id>/script       the plotting code
    <dir>/charts/<id>/seed.json    full seed metadata (spec, descriptions)

The manifest's ``dataset_digest`` covers records, tables, scripts, and the
config digest, but not timestamps or figure bytes, so a replayed run
reproduces it bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .errors import ConfigError, DatasetError
from .model import ChartRecord, InstructionRecord, TaskKind

MANIFEST_NAME = "manifest.json"
RECORDS_NAME = "records.jsonl"
CHARTS_DIRNAME = "charts"
RENDER_RESULTS_NAME = "render_results.jsonl"
LOCK_NAME = ".lock"


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class DatasetManifest:
    created_at: str
    tool_version: str
    config_digest: str
    base_rng_seed: int
    counts: dict
    filter_stats: dict
    dataset_digest: str

    def to_json_dict(self) -> dict:
        return {
            "created_at": self.created_at,
            "tool_version": self.tool_version,
            "config_digest": self.config_digest,
            "base_rng_seed": self.base_rng_seed,
            "counts": self.counts,
            "filter_stats": self.filter_stats,
            "dataset_digest": self.dataset_digest,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> DatasetManifest:
        return cls(
            created_at=d["created_at"],
            tool_version=d["tool_version"],
            config_digest=d["config_digest"],
            base_rng_seed=d["base_rng_seed"],
            counts=d["counts"],
            filter_stats=d.get("filter_stats", {}),
            dataset_digest=d["dataset_digest"],
        )


def _build_counts(
    records: list[InstructionRecord],
    ok_charts: list[ChartRecord],
    failed_by_reason: dict[str, int],
) -> dict:
    per_task = {task.value: 0 for task in TaskKind}
    for record in records:
        per_task[record.task.value] += 1
    per_type: dict[str, int] = {}
    for chart in ok_charts:
        per_type[chart.chart_type.value] = per_type.get(chart.chart_type.value, 0) + 1
    failed_total = sum(failed_by_reason.values())
    return {
        "seeds": len(ok_charts) + failed_total,
        "rendered_ok": len(ok_charts),
        "rendered_failed": dict(sorted(failed_by_reason.items())),
        "records_total": len(records),
        "records_per_task": per_task,
        "charts_per_type": dict(sorted(per_type.items())),
    }


def _dataset_digest(
    config_digest: str,
    base_rng_seed: int,
    records: list[InstructionRecord],
    ok_charts: list[ChartRecord],
) -> str:
    h = hashlib.sha256()
    h.update(config_digest.encode())
    h.update(str(base_rng_seed).encode())
    for record in records:
        h.update(record.to_json_line().encode("utf-8"))
        h.update(b"\n")
    for chart in sorted(ok_charts, key=lambda c: c.seed.id):
        h.update(chart.seed.id.encode())
        h.update(chart.chart_type.value.encode())
        h.update(chart.seed.table.to_csv().encode("utf-8"))
        h.update(chart.script.encode("utf-8"))
    return h.hexdigest()


def write_dataset(
    records: list[InstructionRecord],
    ok_charts: list[ChartRecord],
    out_dir: str | Path,
    config_digest: str,
    base_rng_seed: int,
    failed_by_reason: dict[str, int] | None = None,
    filter_stats: dict[str, int] | None = None,
    tool_version: str = "0.1.0",
    force: bool = False,
) -> DatasetManifest:
    """Persist a completed run. Refuses to overwrite a committed dataset
    unless forced; the manifest is written last so a crash leaves an
    obviously incomplete directory."""
    out = Path(out_dir)
    manifest_path = out / MANIFEST_NAME
    if manifest_path.exists() and not force:
        raise DatasetError(f"{out} already holds a dataset; pass force to overwrite")
    out.mkdir(parents=True, exist_ok=True)

    lock_path = out / LOCK_NAME
    try:
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DatasetError(f"{out} is being written by another process ({LOCK_NAME} exists)")
    try:
        os.close(lock_fd)
        if manifest_path.exists():
            manifest_path.unlink()

        for chart in ok_charts:
            chart_dir = out / CHARTS_DIRNAME / chart.seed.id
            figure = out / chart.figure_path
            if not figure.exists():
                raise DatasetError(f"missing figure for chart {chart.seed.id}: {figure}")
            _atomic_write_text(chart_dir / "table.csv", chart.seed.table.to_csv())
            _atomic_write_text(chart_dir / "script", chart.script)
            _atomic_write_text(
                chart_dir / "seed.json",
                json.dumps(chart.to_json_dict(), ensure_ascii=False, indent=1, sort_keys=True),
            )

        _atomic_write_text(
            out / RECORDS_NAME,
            "".join(record.to_json_line() + "\n" for record in records),
        )

        manifest = DatasetManifest(
            created_at=datetime.now(timezone.utc).isoformat(),
            tool_version=tool_version,
            config_digest=config_digest,
            base_rng_seed=base_rng_seed,
            counts=_build_counts(records, ok_charts, failed_by_reason or {}),
            filter_stats=dict(sorted((filter_stats or {}).items())),
            dataset_digest=_dataset_digest(
                config_digest, base_rng_seed, records, ok_charts
            ),
        )
        _atomic_write_text(
            manifest_path,
            json.dumps(manifest.to_json_dict(), ensure_ascii=False, indent=1, sort_keys=True),
        )
        return manifest
    finally:
        lock_path.unlink(missing_ok=True)


def load_manifest(dataset_dir: str | Path) -> DatasetManifest:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(
            f"{dataset_dir} has no {MANIFEST_NAME}; the dataset is incomplete"
        )
    return DatasetManifest.from_json_dict(json.loads(path.read_text(encoding="utf-8")))


def load_records(dataset_dir: str | Path) -> list[InstructionRecord]:
    path = Path(dataset_dir) / RECORDS_NAME
    if not path.exists():
        raise DatasetError(f"{dataset_dir} has no {RECORDS_NAME}")
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(InstructionRecord.from_json_line(line))
    return records


def load_charts(dataset_dir: str | Path) -> list[ChartRecord]:
    charts_dir = Path(dataset_dir) / CHARTS_DIRNAME
    charts = []
    if charts_dir.exists():
        for seed_file in sorted(charts_dir.glob("*/seed.json")):
            charts.append(
                ChartRecord.from_json_dict(json.loads(seed_file.read_text(encoding="utf-8")))
            )
    return charts


def audit(dataset_dir: str | Path) -> DatasetManifest:
    """Self-audit: recompute counts from the directory and compare with the
    manifest. Raises DatasetError on any mismatch."""
    manifest = load_manifest(dataset_dir)
    records = load_records(dataset_dir)
    charts = load_charts(dataset_dir)
    recomputed = _build_counts(records, charts, manifest.counts.get("rendered_failed", {}))
    problems = []
    for key, value in recomputed.items():
        if manifest.counts.get(key) != value:
            problems.append(f"{key}: manifest {manifest.counts.get(key)!r} != rescan {value!r}")
    per_task = manifest.counts.get("records_per_task", {})
    if sum(per_task.values()) != manifest.counts.get("records_total"):
        problems.append("records_per_task does not sum to records_total")
    for chart in charts:
        figure = Path(dataset_dir) / chart.figure_path
        if not figure.exists() or figure.stat().st_size == 0:
            problems.append(f"chart {chart.seed.id}: missing or empty figure")
    if problems:
        raise DatasetError("dataset audit failed: " + "; ".join(problems))
    return manifest


# ---------------------------------------------------------------------------
# Statistics report


@dataclass
class StatsReport:
    task_counts: dict[str, int]
    chart_type_counts: dict[str, int]
    records_total: int
    charts_total: int

    @property
    def records_per_chart(self) -> float:
        return self.records_total / self.charts_total if self.charts_total else 0.0

    def task_percentages(self) -> dict[str, float]:
        return {
            k: 100.0 * v / self.records_total for k, v in self.task_counts.items()
        }

    def chart_type_percentages(self) -> dict[str, float]:
        return {
            k: 100.0 * v / self.charts_total for k, v in self.chart_type_counts.items()
        }

    def to_json_dict(self) -> dict:
        return {
            "records_total": self.records_total,
            "charts_total": self.charts_total,
            "records_per_chart": round(self.records_per_chart, 2),
            "tasks": {
                k: {"count": v, "percent": round(p, 2)}
                for (k, v), p in zip(
                    self.task_counts.items(), self.task_percentages().values()
                )
            },
            "chart_types": {
                k: {"count": v, "percent": round(p, 2)}
                for (k, v), p in zip(
                    self.chart_type_counts.items(), self.chart_type_percentages().values()
                )
            },
        }

    def to_text(self) -> str:
        lines = [
            f"records: {self.records_total}   charts: {self.charts_total}   "
            f"records_per_chart: {self.records_per_chart:.2f}",
            "",
            f"{'Task':<22} {'Count':>7} {'Percent':>8}",
        ]
        for name, count in self.task_counts.items():
            pct = 100.0 * count / self.records_total
            lines.append(f"{name:<22} {count:>7} {pct:>7.1f}%")
        lines += ["", f"{'Chart type':<22} {'Count':>7} {'Percent':>8}"]
        for name, count in self.chart_type_counts.items():
            pct = 100.0 * count / self.charts_total
            lines.append(f"{name:<22} {count:>7} {pct:>7.1f}%")
        return "\n".join(lines)


def stats(dataset_dir: str | Path) -> StatsReport:
    """Distribution report over a complete dataset; pure function of the
    directory contents."""
    audit(dataset_dir)
    records = load_records(dataset_dir)
    charts = load_charts(dataset_dir)
    if not records or not charts:
        raise DatasetError("stats needs a dataset with records and charts")
    task_counts: dict[str, int] = {}
    for record in records:
        task_counts[record.task.value] = task_counts.get(record.task.value, 0) + 1
    type_counts: dict[str, int] = {}
    for chart in charts:
        type_counts[chart.chart_type.value] = type_counts.get(chart.chart_type.value, 0) + 1
    return StatsReport(
        task_counts=dict(sorted(task_counts.items(), key=lambda kv: -kv[1])),
        chart_type_counts=dict(sorted(type_counts.items(), key=lambda kv: -kv[1])),
        records_total=len(records),
        charts_total=len(charts),
    )


# ---------------------------------------------------------------------------
# Splits


def split(
    dataset_dir: str | Path,
    fractions: dict[str, float],
    seed: int,
) -> dict[str, Path]:
    """Partition records by chart id so no chart leaks across splits.

    Writes ``records.<name>.jsonl`` per split and returns the paths;
    deterministic for a given seed.
    """
    total = sum(fractions.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"split fractions sum to {total:g}, expected 1")
    if any(f < 0 for f in fractions.values()):
        raise ConfigError("split fractions must be >= 0")
    records = load_records(dataset_dir)
    if not records:
        raise DatasetError("nothing to split")

    by_chart: dict[str, list[InstructionRecord]] = {}
    for record in records:
        by_chart.setdefault(record.chart_id, []).append(record)
    chart_ids = sorted(by_chart)
    random.Random(seed).shuffle(chart_ids)

    names = list(fractions)
    sizes = [int(len(chart_ids) * fractions[name]) for name in names]
    for i in range(len(chart_ids) - sum(sizes)):
        sizes[i % len(sizes)] += 1

    out_paths: dict[str, Path] = {}
    cursor = 0
    for name, size in zip(names, sizes):
        chunk = chart_ids[cursor : cursor + size]
        cursor += size
        path = Path(dataset_dir) / f"records.{name}.jsonl"
        lines = [
            record.to_json_line() + "\n"
            for chart_id in sorted(chunk)
            for record in by_chart[chart_id]
        ]
        _atomic_write_text(path, "".join(lines))
        out_paths[name] = path
    return out_paths


# ---------------------------------------------------------------------------
# Seed / render-result handoff files between CLI stages


def write_jsonl(path: str | Path, dicts: list[dict]) -> None:
    _atomic_write_text(
        Path(path),
        "".join(json.dumps(d, ensure_ascii=False, sort_keys=True) + "\n" for d in dicts),
    )


def read_jsonl(path: str | Path) -> list[dict]:
    return [
        json.loads(line)
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
