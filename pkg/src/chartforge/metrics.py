"""Evaluation metrics for the seven chart tasks.

Covers relaxed accuracy for Q&A, table-extraction precision/recall/F1 over
optimally matched triples, BLEU-4 for summaries, the rubric-prompt builder
and score parser used for LLM-judged tasks, and render success rates.
All functions here are pure and thread-safe.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, RubricParseError
from .model import Cell, ChartRecord, RenderStatus, TableData, TaskKind

DEFAULT_RELAXED_TOLERANCE = 0.05
DEFAULT_KEY_DISTANCE_CUTOFF = 0.5  # edit distances at/above this count as total mismatch


# ---------------------------------------------------------------------------
# Relaxed accuracy


@dataclass(frozen=True)
class QAPrediction:
    question_id: str
    predicted: str
    gold: str

    def __post_init__(self):
        if not self.gold:
            raise ValueError("gold answer must be non-empty")


def _normalize_answer(text: str) -> str:
    s = text.strip().lower()
    if s.endswith("%"):
        s = s[:-1].strip()
    return s.replace(",", "")


def _try_float(text: str) -> float | None:
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def relaxed_match(predicted: str, gold: str, tol: float = DEFAULT_RELAXED_TOLERANCE) -> bool:
    """Numeric answers match within ``tol`` relative to the gold value;
    everything else needs normalized string equality.

    Both sides are trimmed, lowercased, and stripped of percent signs and
    thousands separators first. The tolerance is relative to gold only, so
    the check is deliberately asymmetric.
    """
    if tol < 0:
        raise ContractError("tolerance must be >= 0")
    p_text, g_text = _normalize_answer(predicted), _normalize_answer(gold)
    p_num, g_num = _try_float(p_text), _try_float(g_text)
    if p_num is not None and g_num is not None:
        if g_num == 0:
            return p_num == 0
        return abs(p_num - g_num) <= tol * abs(g_num)
    return p_text == g_text


def relaxed_accuracy(
    preds: list[QAPrediction], tol: float = DEFAULT_RELAXED_TOLERANCE
) -> float:
    """Percentage of predictions that relaxed-match their gold answers."""
    if not preds:
        raise ContractError("relaxed_accuracy needs at least one prediction")
    matches = sum(1 for p in preds if relaxed_match(p.predicted, p.gold, tol))
    return 100.0 * matches / len(preds)


# ---------------------------------------------------------------------------
# Table-extraction similarity


@dataclass(frozen=True)
class TripleEntry:
    row_key: str
    col_key: str
    value: Cell


@dataclass(frozen=True)
class TableTriples:
    entries: tuple[TripleEntry, ...]

    def __len__(self):
        return len(self.entries)


def table_to_triples(table: TableData) -> TableTriples:
    """Flatten a table into (row key, column key, value) entries, row-major."""
    entries = []
    for r, row_key in enumerate(table.row_keys):
        for c, col_key in enumerate(table.value_headers):
            entries.append(TripleEntry(row_key, col_key, table.values[r][c]))
    return TableTriples(tuple(entries))


def levenshtein(a: str, b: str) -> int:
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _clipped_distance(a: str, b: str, cutoff: float) -> float:
    if not a and not b:
        return 0.0
    dist = levenshtein(a, b) / max(len(a), len(b))
    return 1.0 if dist >= cutoff else dist


def entry_similarity(
    pred: TripleEntry, gold: TripleEntry, cutoff: float = DEFAULT_KEY_DISTANCE_CUTOFF
) -> float:
    """Key similarity times value similarity for one candidate pairing.

    Keys compare by normalized edit distance over the concatenated row and
    column keys; numeric values by relative distance capped at 1; text
    values by the same edit-distance rule as keys.
    """
    key_sim = 1.0 - _clipped_distance(
        f"{pred.row_key}|{pred.col_key}", f"{gold.row_key}|{gold.col_key}", cutoff
    )
    pv, gv = pred.value, gold.value
    if pv.is_numeric and gv.is_numeric:
        if gv.value == 0:
            val_sim = 1.0 if pv.value == 0 else 0.0
        else:
            val_sim = 1.0 - min(1.0, abs(pv.value - gv.value) / abs(gv.value))
    else:
        val_sim = 1.0 - _clipped_distance(pv.raw, gv.raw, cutoff)
    return key_sim * val_sim


def table_similarity(
    pred: TableTriples,
    gold: TableTriples,
    cutoff: float = DEFAULT_KEY_DISTANCE_CUTOFF,
) -> tuple[float, float, float]:
    """(precision, recall, f1) under the best one-to-one entry assignment."""
    if not pred.entries and not gold.entries:
        return (1.0, 1.0, 1.0)
    if not pred.entries or not gold.entries:
        return (0.0, 0.0, 0.0)
    sim = np.zeros((len(pred.entries), len(gold.entries)))
    for i, p in enumerate(pred.entries):
        for j, g in enumerate(gold.entries):
            sim[i, j] = entry_similarity(p, g, cutoff)
    rows, cols = linear_sum_assignment(sim, maximize=True)
    total = float(sim[rows, cols].sum())
    precision = total / len(pred.entries)
    recall = total / len(gold.entries)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return (precision, recall, f1)


# ---------------------------------------------------------------------------
# BLEU-4


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: str, references: list[str], max_n: int = 4) -> float:
    """Sentence BLEU with modified n-gram precisions, geometric mean, and
    brevity penalty; no smoothing, so any zero precision gives 0."""
    if not references:
        raise ContractError("bleu4 needs at least one reference")
    cand = candidate.split()
    refs = [r.split() for r in references]
    if not cand:
        return 0.0

    log_sum = 0.0
    for n in range(1, max_n + 1):
        counts = _ngram_counts(cand, n)
        if not counts:
            return 0.0
        max_ref: Counter = Counter()
        for ref in refs:
            for ngram, count in _ngram_counts(ref, n).items():
                if count > max_ref[ngram]:
                    max_ref[ngram] = count
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        if clipped == 0:
            return 0.0
        log_sum += (1.0 / max_n) * math.log(clipped / sum(counts.values()))

    c = len(cand)
    r = min((len(ref) for ref in refs), key=lambda rl: (abs(rl - c), rl))
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_sum)


# ---------------------------------------------------------------------------
# Rubric (LLM-judged) evaluation


@dataclass(frozen=True)
class RubricSpec:
    criteria: tuple[str, ...]
    scale: tuple[int, int]
    target: str  # what the evaluator is judging, for the prompt header


RUBRICS: dict[TaskKind, RubricSpec] = {
    TaskKind.CHART_TO_CHART: RubricSpec(
        criteria=("data", "axes", "colors", "chart_type", "title"),
        scale=(0, 5),
        target="a plotting script meant to reproduce the reference chart",
    ),
    TaskKind.TEXT_TO_CHART: RubricSpec(
        criteria=("visual_similarity", "completeness", "accuracy", "aesthetics"),
        scale=(1, 5),
        target="a plotting script generated from tabular data and an instruction",
    ),
    TaskKind.CHART_EDITING: RubricSpec(
        criteria=("data_accuracy", "completeness", "aesthetics", "instruction_following"),
        scale=(0, 5),
        target="a plotting script edited according to an instruction",
    ),
    TaskKind.DETAILED_DESCRIPTION: RubricSpec(
        criteria=("data_characteristics", "visual_attributes", "completeness", "accuracy"),
        scale=(0, 5),
        target="a detailed description of a chart figure",
    ),
    TaskKind.CHART_TO_TEXT: RubricSpec(
        criteria=("accuracy", "completeness", "fluency"),
        scale=(0, 5),
        target="a summary of a chart figure",
    ),
}

RUBRIC_CONDITIONS: dict[TaskKind, tuple[str, ...]] = {
    TaskKind.CHART_TO_CHART: ("gold_script", "predicted_script"),
    TaskKind.TEXT_TO_CHART: ("table", "instruction", "reference_script", "predicted_script"),
    TaskKind.CHART_EDITING: ("original_script", "edit_instruction", "predicted_script"),
    TaskKind.CHART_TO_TEXT: ("gold_description", "table", "predicted_description"),
    TaskKind.DETAILED_DESCRIPTION: ("gold_description", "table", "predicted_description"),
}

_CRITERION_HINTS = {
    "data": "plotted values match the reference data",
    "axes": "axis types, ranges, and labels match",
    "colors": "color choices match or are equivalent",
    "chart_type": "the chart family is the same",
    "title": "the title conveys the same content",
    "visual_similarity": "the rendered figure would look like what was asked for",
    "completeness": "nothing requested or present in the reference is missing",
    "accuracy": "values and statements are correct with respect to the data",
    "aesthetics": "the figure is legible and well composed",
    "data_accuracy": "data values remain correct after the edit",
    "instruction_following": "the requested edit was applied and nothing else broke",
    "data_characteristics": "trends, extrema, and proportions in the data are covered",
    "visual_attributes": "chart type, colors, axes, and annotations are covered",
    "fluency": "the text reads naturally and coherently",
}


@dataclass(frozen=True)
class RubricPrompt:
    task: TaskKind
    system_text: str
    user_text: str


@dataclass(frozen=True)
class RubricResult:
    task: TaskKind
    criterion_scores: dict[str, int]
    scale: tuple[int, int]
    normalized: float
    rationale: str


SCORE_LINE_TEMPLATE = "CRITERION: {name} SCORE: {score}"
_SCORE_LINE_RE = re.compile(
    r"^\s*CRITERION:\s*([A-Za-z_][\w-]*)\s+SCORE:\s*(-?\d+)\s*$", re.MULTILINE
)


def build_rubric_prompt(task: TaskKind, conditions: dict[str, str]) -> RubricPrompt:
    """Render the evaluator prompt for one prediction.

    ``conditions`` must supply every reference field the task's rubric
    needs; a missing field is a caller bug, not bad data.
    """
    if task not in RUBRICS:
        raise ContractError(f"no rubric defined for task {task.value}")
    required = RUBRIC_CONDITIONS[task]
    missing = [name for name in required if not conditions.get(name)]
    if missing:
        raise ContractError(
            f"rubric for {task.value} is missing condition(s): {', '.join(missing)}"
        )
    spec = RUBRICS[task]
    lo, hi = spec.scale

    lines = [
        f"You are grading {spec.target}.",
        "Score each criterion independently on the integer scale "
        f"{lo} (worst) to {hi} (best):",
    ]
    for name in spec.criteria:
        lines.append(f"- {name}: {_CRITERION_HINTS[name]}")
    lines.append("")
    lines.append("Reference conditions and the prediction follow.")
    for name in required:
        lines.append("")
        lines.append(f"[{name}]")
        lines.append(conditions[name])
    lines.append("")
    lines.append(
        "First write a short rationale paragraph. Then output one line per "
        "criterion, exactly in this form and nothing else on the line:"
    )
    lines.append(SCORE_LINE_TEMPLATE.format(name="<name>", score="<integer>"))
    return RubricPrompt(
        task=task,
        system_text="You are a strict, consistent grader of chart-related outputs.",
        user_text="\n".join(lines),
    )


def parse_rubric_scores(evaluator_text: str, task: TaskKind) -> RubricResult:
    """Extract one integer per expected criterion and normalize to 0-100."""
    spec = RUBRICS[task]
    lo, hi = spec.scale
    found: dict[str, int] = {}
    offending: list[str] = []
    for match in _SCORE_LINE_RE.finditer(evaluator_text):
        name, score = match.group(1), int(match.group(2))
        if name in found:
            continue
        if name in spec.criteria and not lo <= score <= hi:
            offending.append(match.group(0).strip())
            continue
        found[name] = score
    missing = [c for c in spec.criteria if c not in found]
    if missing or offending:
        parts = []
        if missing:
            parts.append(f"missing criterion line(s): {', '.join(missing)}")
        if offending:
            parts.append(f"out-of-range score(s): {'; '.join(offending)}")
        raise RubricParseError(
            f"rubric parse failed for {task.value}: " + "; ".join(parts),
            offending_lines=offending,
        )
    scores = {c: found[c] for c in spec.criteria}
    normalized = sum(scores.values()) * 100.0 / (len(scores) * hi)
    rationale = _SCORE_LINE_RE.sub("", evaluator_text).strip()
    return RubricResult(
        task=task,
        criterion_scores=scores,
        scale=spec.scale,
        normalized=normalized,
        rationale=rationale,
    )


def render_score_lines(result: RubricResult) -> str:
    """Inverse of parse_rubric_scores for round-trip checks and reports."""
    lines = [result.rationale, ""] if result.rationale else []
    lines += [
        SCORE_LINE_TEMPLATE.format(name=name, score=score)
        for name, score in result.criterion_scores.items()
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Success rate


def success_rate(records: list) -> float:
    """Percentage of render attempts with status ok.

    Accepts ChartRecords, RenderStatus values, or their string tags.
    """
    if not records:
        raise ContractError("success_rate needs at least one attempt")
    ok = 0
    for item in records:
        if isinstance(item, ChartRecord):
            status = item.render_status
        elif isinstance(item, RenderStatus):
            status = item
        else:
            status = RenderStatus(str(item))
        ok += status is RenderStatus.OK
    return 100.0 * ok / len(records)
