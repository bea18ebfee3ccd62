"""Stage 3: turn each rendered chart into instruction/answer records for
the seven task kinds.

Response contracts are fenced, labeled sections (like stage 1) so format
checking stays mechanical. Ground truth is reused wherever it exists:
extraction answers are serialized straight from the table and text-to-chart
answers are the verified stage-2 script, so those labels are correct by
construction. Code answers from the model are execution-verified before a
record is kept.
"""

from __future__ import annotations

import logging
import random
import re
import shutil
from dataclasses import dataclass, field

from .config import load_characteristic_tags
from .errors import BackendError, ContractError, FormatError
from .figgen import extract_script
from .gateway import ChatRequest, LlmGateway
from .model import (
    ASSISTANT,
    HUMAN,
    ChartRecord,
    InstructionRecord,
    Provenance,
    RenderStatus,
    TableData,
    TaskKind,
)
from .sandboxclient import SandboxRequest

log = logging.getLogger(__name__)

DEFAULT_QA_PAIRS = 5

_SECTION_RE = re.compile(r"```([^\n`]*)\n(.*?)```", re.DOTALL)

STAGE3_SYSTEM = (
    "You create instruction-tuning data about charts. Follow the requested "
    "output structure exactly."
)


@dataclass(frozen=True)
class CharacteristicTag:
    """One aspect a question can target (extremum, trend, proportion, ...)."""

    tag: str

    def __post_init__(self):
        if not self.tag.strip():
            raise ValueError("characteristic tag must be non-empty")


def characteristic_vocabulary() -> list[CharacteristicTag]:
    return [CharacteristicTag(t) for t in load_characteristic_tags()]


def sample_tags(chart_id: str, count: int, vocab: list[CharacteristicTag] | None = None):
    """Deterministically sample distinct tags for one chart's Q&A prompt."""
    vocab = vocab or characteristic_vocabulary()
    rng = random.Random(f"tags:{chart_id}")
    count = min(count, len(vocab))
    return rng.sample(vocab, count)


# One canned example response per task, embedded as in-context guidance so
# the model sees the exact section format expected back.
_FORMAT_EXEMPLARS: dict[TaskKind, str] = {
    TaskKind.QA: (
        "```qa1\nQ: Which month has the highest revenue?\nA: March, at 42.\n```\n"
        "```qa2\nQ: What is the total across all months?\nA: 96\n```"
    ),
    TaskKind.CHART_TO_TEXT: (
        "```answer\nRevenue grows steadily from January to March, peaking at 42.\n```"
    ),
    TaskKind.DETAILED_DESCRIPTION: (
        "```answer\nThe bar chart shows monthly revenue for one quarter. January "
        "starts at 24, February rises to 30, and March peaks at 42, so the "
        "overall movement is upward. Bars are steel blue with value labels.\n```"
    ),
    TaskKind.CHART_EXTRACTION: (
        "```question\nRead the exact values from this chart and return them as "
        "CSV with the original headers.\n```"
    ),
    TaskKind.CHART_TO_CHART: (
        "```python\nimport matplotlib.pyplot as plt\nmonths = ['Jan', 'Feb', 'Mar']\n"
        "revenue = [24, 30, 42]\nplt.bar(months, revenue, color='steelblue')\n"
        "plt.title('Monthly Revenue')\nplt.savefig('figure.png')\n```"
    ),
    TaskKind.TEXT_TO_CHART: (
        "```request\nPlot this data as a bar chart with steel blue bars, value "
        "labels above each bar, and the title 'Monthly Revenue'.\n```"
    ),
    TaskKind.CHART_EDITING: (
        "```request\nChange the bars to horizontal orientation and color them "
        "dark green.\n```\n"
        "```python\nimport matplotlib.pyplot as plt\nmonths = ['Jan', 'Feb', 'Mar']\n"
        "revenue = [24, 30, 42]\nplt.barh(months, revenue, color='darkgreen')\n"
        "plt.title('Monthly Revenue')\nplt.savefig('figure.png')\n```"
    ),
}


class Stage3ExemplarPool:
    """Format exemplars per task; ships with one builtin example each."""

    def __init__(self, extra: dict[TaskKind, list[str]] | None = None):
        self._entries: dict[TaskKind, list[str]] = {
            task: [text] for task, text in _FORMAT_EXEMPLARS.items()
        }
        for task, texts in (extra or {}).items():
            self._entries.setdefault(task, []).extend(texts)

    def sample(self, task: TaskKind, k: int) -> list[str]:
        return self._entries.get(task, [])[: max(k, 0)]


_TASK_CONTRACTS = {
    TaskKind.QA: (
        "Write {n} question/answer pairs about the chart. Each pair targets a "
        "different one of these characteristics: {tags}. Respond with {n} "
        "fenced sections labeled qa1..qa{n}; each section holds exactly two "
        "lines, 'Q: <question>' then 'A: <answer>'."
    ),
    TaskKind.CHART_TO_TEXT: (
        "Write a short summary of the chart (2-4 sentences). Respond with one "
        "fenced section labeled answer."
    ),
    TaskKind.DETAILED_DESCRIPTION: (
        "Write a thorough description of the chart covering the data "
        "characteristics (trends, extrema, proportions) and the visual "
        "attributes (chart type, colors, axes, annotations). Respond with one "
        "fenced section labeled answer."
    ),
    TaskKind.CHART_EXTRACTION: (
        "Write the human request for a data-extraction exercise: ask the "
        "reader to recover this chart's underlying values and return them in "
        "comma-separated CSV form with the original column headers. Respond "
        "with one fenced section labeled question."
    ),
    TaskKind.CHART_TO_CHART: (
        "Write a new self-contained matplotlib script that reproduces this "
        "chart: same data, same chart type, equivalent look. It must save to "
        "'figure.png'. Respond with one fenced code block labeled python."
    ),
    TaskKind.TEXT_TO_CHART: (
        "Write the human request for a chart-generation exercise: a styled "
        "instruction asking for exactly the figure described above (mention "
        "chart type and styling). Respond with one fenced section labeled "
        "request."
    ),
    TaskKind.CHART_EDITING: (
        "Invent one concrete edit request for this chart (change of color, "
        "orientation, labels, scale, ...) and write the edited script. The "
        "script must stay self-contained and save to 'figure.png'. Respond "
        "with a fenced section labeled request holding the edit instruction, "
        "then one fenced code block labeled python holding the full edited "
        "script."
    ),
}

_SCRIPT_TASKS = frozenset({TaskKind.CHART_TO_CHART, TaskKind.CHART_EDITING})


@dataclass(frozen=True)
class Stage3Prompt:
    task: TaskKind
    system_text: str
    user_text: str


def build_stage3_prompt(
    record: ChartRecord,
    task: TaskKind,
    tags: list[CharacteristicTag] | None = None,
    pool: Stage3ExemplarPool | None = None,
    k: int = 1,
    qa_pairs: int = DEFAULT_QA_PAIRS,
) -> Stage3Prompt:
    """Render the per-task generation prompt from a successful render."""
    if record.render_status is not RenderStatus.OK:
        raise ContractError("stage 3 needs a record with render_status ok")
    if task in _SCRIPT_TASKS and not record.script:
        raise ContractError(f"{task.value} needs the record's plotting script")
    seed = record.seed
    contract = _TASK_CONTRACTS[task]
    if task is TaskKind.QA:
        tag_names = ", ".join(t.tag for t in (tags or []))
        contract = contract.format(n=qa_pairs, tags=tag_names or "any")

    lines = [
        f"Chart {seed.id}: a {seed.spec.chart_type.value} chart about {seed.spec.theme}.",
        "",
        f"Data description: {seed.data_description}",
        f"Figure description: {seed.figure_description}",
        "",
        "Raw data:",
        "```csv",
        seed.table.to_csv().rstrip("\n"),
        "```",
    ]
    if task in _SCRIPT_TASKS:
        lines += ["", "The chart's plotting script:", "```python", record.script, "```"]
    lines += ["", contract]
    for i, example in enumerate((pool or Stage3ExemplarPool()).sample(task, k), 1):
        lines += ["", f"Format example {i}:", example]
    return Stage3Prompt(task=task, system_text=STAGE3_SYSTEM, user_text="\n".join(lines))


@dataclass
class Stage3Parse:
    """Parsed fragments plus the reasons for anything dropped."""

    fragments: list
    dropped: list[str] = field(default_factory=list)


def _sections(text: str) -> dict[str, str]:
    found: dict[str, str] = {}
    for match in _SECTION_RE.finditer(text):
        label = match.group(1).strip().lower()
        if label not in found:
            found[label] = match.group(2).strip()
    return found


def parse_stage3_output(text: str, task: TaskKind) -> Stage3Parse:
    """Parse one task's response (or answer candidate) into fragments.

    Malformed QA sections are dropped and reported; single-fragment tasks
    raise FormatError so the caller can count the filtered response.
    """
    if task is TaskKind.QA:
        fragments, dropped = [], []
        matches = [
            (m.group(1).strip().lower(), m.group(2).strip())
            for m in _SECTION_RE.finditer(text)
        ]
        qa_sections = [(label, body) for label, body in matches if re.fullmatch(r"qa\d+", label)]
        if not qa_sections:
            raise FormatError("qa response has no qaN sections")
        for label, body in qa_sections:
            qm = re.search(r"^Q:\s*(.+)$", body, re.MULTILINE)
            am = re.search(r"^A:\s*(.+?)\s*$", body, re.MULTILINE | re.DOTALL)
            if not qm or not am:
                dropped.append(f"section {label} lacks Q:/A: lines")
                continue
            fragments.append((qm.group(1).strip(), am.group(1).strip()))
        return Stage3Parse(fragments=fragments, dropped=dropped)

    if task in (TaskKind.CHART_TO_TEXT, TaskKind.DETAILED_DESCRIPTION):
        answer = _sections(text).get("answer", "").strip()
        if not answer:
            raise FormatError(f"{task.value} response lacks an answer section")
        return Stage3Parse(fragments=[answer])

    if task is TaskKind.CHART_EXTRACTION:
        body = _sections(text).get("csv") or text
        try:
            table = TableData.from_csv(body)
        except ValueError as exc:
            raise FormatError(f"extraction answer is not a well-formed table: {exc}") from exc
        return Stage3Parse(fragments=[table])

    if task is TaskKind.CHART_TO_CHART:
        script = extract_script(text)
        return Stage3Parse(fragments=[script])

    if task is TaskKind.TEXT_TO_CHART:
        request = _sections(text).get("request", "").strip()
        if not request:
            raise FormatError("text_to_chart response lacks a request section")
        return Stage3Parse(fragments=[request])

    if task is TaskKind.CHART_EDITING:
        sections = _sections(text)
        request = sections.get("request", "").strip()
        script = sections.get("python", "").strip()
        if not request or not script:
            raise FormatError("chart_editing response needs request and python sections")
        return Stage3Parse(fragments=[(request, script)])

    raise ContractError(f"unknown task {task!r}")


def parse_extraction_question(text: str) -> str:
    question = _sections(text).get("question", "").strip()
    if not question:
        raise FormatError("extraction response lacks a question section")
    return question


_SUMMARY_REQUESTS = (
    "Summarize what this chart shows.",
    "Give a brief summary of the chart.",
    "What story does this chart tell? Answer in a few sentences.",
)
_DESCRIPTION_REQUESTS = (
    "Describe this chart in detail, covering both the data and how it is drawn.",
    "Give a thorough description of the chart: values, trends, and visual style.",
)
_RECONSTRUCT_REQUESTS = (
    "Write a matplotlib script that reproduces this chart.",
    "Recreate this chart: produce a self-contained plotting script for it.",
)


def _pick(options: tuple[str, ...], chart_id: str, salt: str) -> str:
    rng = random.Random(f"{salt}:{chart_id}")
    return options[rng.randrange(len(options))]


def _fenced(script: str) -> str:
    return f"```python\n{script.rstrip()}\n```"


@dataclass
class SynthesisResult:
    records: list[InstructionRecord]
    filtered: dict[str, int] = field(default_factory=dict)

    def count_filtered(self, reason: str, n: int = 1):
        self.filtered[reason] = self.filtered.get(reason, 0) + n


def synthesize(
    record: ChartRecord,
    tasks: list[TaskKind],
    gateway: LlmGateway,
    sandbox,
    scratch_dir,
    qa_pairs: int = DEFAULT_QA_PAIRS,
    records_per_task: int = 1,
    icl_k: int = 1,
    timeout_s: int = 30,
    temperature: float | None = None,
    max_tokens: int | None = None,
    model_id: str | None = None,
    tag_vocab: list[CharacteristicTag] | None = None,
) -> SynthesisResult:
    """Generate instruction records for one chart across the given tasks.

    Per-task failures are dropped and counted; model-written code answers
    must render ok before their record is kept.
    """
    if record.render_status is not RenderStatus.OK:
        raise ContractError("synthesis needs a record with render_status ok")
    result = SynthesisResult(records=[])
    extra = {}
    if temperature is not None:
        extra["temperature"] = temperature
    if max_tokens is not None:
        extra["max_tokens"] = max_tokens
    if model_id is not None:
        extra["model_id"] = model_id

    for task in tasks:
        for copy in range(records_per_task):
            try:
                _synthesize_one(
                    record, task, copy, gateway, sandbox, scratch_dir, result,
                    qa_pairs, icl_k, timeout_s, extra, tag_vocab,
                )
            except (FormatError, BackendError) as exc:
                log.info("chart %s task %s dropped: %s", record.seed.id, task.value, exc)
                result.count_filtered(f"stage3_{task.value}_format")
    return result


def _synthesize_one(
    record, task, copy, gateway, sandbox, scratch_dir, result,
    qa_pairs, icl_k, timeout_s, extra, tag_vocab,
):
    chart_id = record.seed.id
    tags = sample_tags(f"{chart_id}:{copy}", qa_pairs, tag_vocab) if task is TaskKind.QA else None
    prompt = build_stage3_prompt(record, task, tags=tags, k=icl_k, qa_pairs=qa_pairs)
    user_text = prompt.user_text if copy == 0 else f"{prompt.user_text}\n\nVariation {copy + 1}."
    exchange = gateway.complete(
        ChatRequest(system_text=prompt.system_text, user_text=user_text, **extra)
    )
    provenance = Provenance(
        backend=f"{exchange.backend}:{exchange.request.model_id}",
        prompt_digest=exchange.cache_key,
    )

    def emit(index: int, human: str, assistant: str):
        result.records.append(
            InstructionRecord(
                id=f"{chart_id}-{task.value}-{copy}-{index}",
                chart_id=chart_id,
                task=task,
                conversations=((HUMAN, human), (ASSISTANT, assistant)),
                provenance=provenance,
            )
        )

    def verify_script(script: str) -> bool:
        workdir = f"{scratch_dir}/verify-{chart_id}-{task.value}-{copy}"
        res = sandbox.execute(
            SandboxRequest(script=script, timeout_s=timeout_s, workdir=workdir)
        )
        shutil.rmtree(workdir, ignore_errors=True)
        return res.status is RenderStatus.OK

    if task is TaskKind.QA:
        parse = parse_stage3_output(exchange.response_text, task)
        if parse.dropped:
            result.count_filtered("stage3_qa_fragment", len(parse.dropped))
        for i, (question, answer) in enumerate(parse.fragments):
            emit(i, question, answer)
        return

    if task in (TaskKind.CHART_TO_TEXT, TaskKind.DETAILED_DESCRIPTION):
        parse = parse_stage3_output(exchange.response_text, task)
        request_pool = (
            _SUMMARY_REQUESTS if task is TaskKind.CHART_TO_TEXT else _DESCRIPTION_REQUESTS
        )
        emit(0, _pick(request_pool, chart_id, task.value), parse.fragments[0])
        return

    if task is TaskKind.CHART_EXTRACTION:
        question = parse_extraction_question(exchange.response_text)
        answer_csv = record.seed.table.to_csv().rstrip("\n")
        # Self-consistency: the generated answer must parse back losslessly.
        parse_stage3_output(answer_csv, task)
        emit(0, question, answer_csv)
        return

    if task is TaskKind.CHART_TO_CHART:
        script = parse_stage3_output(exchange.response_text, task).fragments[0]
        if not verify_script(script):
            result.count_filtered("stage3_chart_to_chart_render")
            return
        emit(0, _pick(_RECONSTRUCT_REQUESTS, chart_id, "reconstruct"), _fenced(script))
        return

    if task is TaskKind.TEXT_TO_CHART:
        request = parse_stage3_output(exchange.response_text, task).fragments[0]
        if not verify_script(record.script):
            result.count_filtered("stage3_text_to_chart_render")
            return
        human = (
            f"{request}\n\nThe data:\n```csv\n{record.seed.table.to_csv().rstrip()}\n```"
        )
        emit(0, human, _fenced(record.script))
        return

    if task is TaskKind.CHART_EDITING:
        request, script = parse_stage3_output(exchange.response_text, task).fragments[0]
        if not verify_script(script):
            result.count_filtered("stage3_chart_editing_render")
            return
        emit(0, request, _fenced(script))
        return

    raise ContractError(f"unknown task {task!r}")
