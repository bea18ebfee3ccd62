"""Stage 2: prompt variants, script extraction, rendering, exemplar pool,
and the ablation harness."""

import logging

import pytest

from chartforge.config import load_doc_catalog
from chartforge.errors import ContractError, FormatError
from chartforge.figgen import (
    POOL_CAP_PER_TYPE,
    DocCatalog,
    ExemplarPool,
    PoolEntry,
    Stage2PromptVariant,
    build_stage2_prompt,
    extract_script,
    render_chart,
    run_ablation,
    update_pool,
)
from chartforge.gateway import LlmGateway, ScriptedBackend
from chartforge.model import (
    ChartRecord,
    ChartSeed,
    ChartType,
    GenerationSpec,
    RenderStatus,
    TableData,
    TrendKind,
    TrendSpec,
)
from chartforge.sandboxclient import StubSandbox

OK_SCRIPT = "import matplotlib.pyplot as plt\nplt.plot([1, 2])\nplt.savefig('figure.png')\n"
BAD_SCRIPT = "raise RuntimeError('nope')\n"


def make_seed(chart_type=ChartType.LINE, seed_id="c000000000001"):
    table = TableData.build(
        ["Year", "Solar", "Wind"], ["2020", "2021"], [[10, 20], [15, 25]]
    )
    spec = GenerationSpec(
        theme="renewable energy",
        trends=(TrendSpec("up", TrendKind.MONOTONE_UP, 0.1),) * 2,
        n_rows=2,
        n_cols=3,
        chart_type=chart_type,
        rng_seed=11,
    )
    return ChartSeed(
        id=seed_id,
        spec=spec,
        table=table,
        data_description="solar and wind capacity",
        figure_description="two rising lines",
    )


@pytest.fixture
def docs():
    return DocCatalog(load_doc_catalog())


def pool_with_line_exemplars(n):
    pool = ExemplarPool(rng_seed=5)
    for i in range(n):
        pool.add(PoolEntry(ChartType.LINE, f"# exemplar-{i}\n{OK_SCRIPT}"))
    return pool


class TestPromptBuilding:
    def test_k_exemplars_sampled(self, docs):
        prompt = build_stage2_prompt(make_seed(), docs, pool_with_line_exemplars(3), k=2)
        assert prompt.exemplars_used == 2
        assert prompt.user_text.count("# exemplar-") == 2

    def test_no_both_keeps_requirements_only(self, docs):
        prompt = build_stage2_prompt(
            make_seed(), docs, pool_with_line_exemplars(3),
            k=2, variant=Stage2PromptVariant.NO_BOTH,
        )
        assert prompt.exemplars_used == 0
        assert "function documentation" not in prompt.user_text
        assert "previously successful code" not in prompt.user_text
        assert "self-contained" in prompt.user_text
        assert "figure.png" in prompt.user_text

    @pytest.mark.parametrize("variant", list(Stage2PromptVariant))
    def test_every_variant_embeds_table_and_self_containment(self, docs, variant):
        prompt = build_stage2_prompt(
            make_seed(), docs, ExemplarPool(), k=2, variant=variant
        )
        assert "2020,10,20" in prompt.user_text
        assert "self-contained" in prompt.user_text

    def test_fallback_to_any_type_when_no_match(self, docs):
        pool = ExemplarPool(rng_seed=3)
        pool.add(PoolEntry(ChartType.BAR, "# bar exemplar\n" + OK_SCRIPT))
        prompt = build_stage2_prompt(make_seed(ChartType.LINE), docs, pool, k=2)
        assert prompt.exemplars_used == 1
        assert "# bar exemplar" in prompt.user_text

    def test_exactly_four_variants(self):
        assert len(list(Stage2PromptVariant)) == 4


class TestExtractScript:
    def test_single_block(self):
        assert extract_script(f"Here:\n```python\n{OK_SCRIPT}```") == OK_SCRIPT.strip("\n")

    def test_prose_only_rejected(self):
        with pytest.raises(FormatError):
            extract_script("No code, sorry.")

    def test_two_blocks_takes_first_with_warning(self, caplog):
        text = "```python\nfirst = 1\n```\nthen\n```python\nsecond = 2\n```"
        with caplog.at_level(logging.WARNING):
            assert extract_script(text) == "first = 1"
        assert any("2 fenced blocks" in r.message for r in caplog.records)


class TestRenderChart:
    def test_ok_moves_figure_into_dataset_tree(self, tmp_path):
        record = render_chart(
            make_seed(), OK_SCRIPT, StubSandbox(),
            charts_dir=tmp_path / "charts", scratch_dir=tmp_path / "scratch",
        )
        assert record.render_status is RenderStatus.OK
        figure = tmp_path / record.figure_path
        assert figure.exists()
        assert figure.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        # scratch workdir wiped
        assert not (tmp_path / "scratch" / record.seed.id).exists()

    def test_exec_error_keeps_no_figure(self, tmp_path):
        record = render_chart(
            make_seed(), BAD_SCRIPT, StubSandbox(),
            charts_dir=tmp_path / "charts", scratch_dir=tmp_path / "scratch",
        )
        assert record.render_status is RenderStatus.EXEC_ERROR
        assert record.figure_path == ""
        assert not (tmp_path / "charts" / record.seed.id).exists()


class TestUpdatePool:
    def ok_record(self, script="# s"):
        return ChartRecord(
            make_seed(), script + "\nplt.savefig('figure.png')",
            "charts/c000000000001/figure.png", RenderStatus.OK,
        )

    def test_ok_record_added(self):
        pool = ExemplarPool()
        update_pool(pool, self.ok_record())
        assert pool.count(ChartType.LINE) == 1

    def test_failed_record_rejected(self):
        record = ChartRecord(make_seed(), "x", "", RenderStatus.TIMEOUT)
        with pytest.raises(ContractError):
            update_pool(ExemplarPool(), record)

    def test_cap_evicts_oldest(self):
        pool = ExemplarPool(rng_seed=1)
        for i in range(POOL_CAP_PER_TYPE + 1):
            pool.add(PoolEntry(ChartType.LINE, f"# script-{i}"))
        assert pool.count(ChartType.LINE) == POOL_CAP_PER_TYPE
        scripts = [e.script for e in pool.sample(ChartType.LINE, POOL_CAP_PER_TYPE + 10)]
        assert "# script-0" not in scripts
        assert f"# script-{POOL_CAP_PER_TYPE}" in scripts


def fenced(script):
    return f"```python\n{script}```"


class TestAblation:
    def run_fixture(self, tmp_path, docs, ok_per_variant, n=20):
        responses = []
        for variant in Stage2PromptVariant:
            ok = ok_per_variant[variant]
            responses += [fenced(OK_SCRIPT)] * ok + [fenced(BAD_SCRIPT)] * (n - ok)
        gateway = LlmGateway(mode="scripted", scripted=ScriptedBackend(script=responses))
        seeds = [make_seed(seed_id=f"c{i:012d}") for i in range(n)]
        return run_ablation(
            seeds, list(Stage2PromptVariant), gateway, StubSandbox(),
            docs, ExemplarPool(rng_seed=0), scratch_dir=tmp_path,
        )

    def test_rates_match_fixture_arithmetic(self, tmp_path, docs):
        report = self.run_fixture(
            tmp_path, docs,
            {
                Stage2PromptVariant.FULL: 17,
                Stage2PromptVariant.NO_ICL: 9,
                Stage2PromptVariant.NO_DOC: 13,
                Stage2PromptVariant.NO_BOTH: 5,
            },
        )
        rates = {row.variant: row.rate for row in report.rows}
        assert rates[Stage2PromptVariant.FULL] == 85.0
        assert rates[Stage2PromptVariant.NO_ICL] == 45.0
        assert rates[Stage2PromptVariant.NO_DOC] == 65.0
        assert rates[Stage2PromptVariant.NO_BOTH] == 25.0

    def test_row_labels(self, tmp_path, docs):
        report = self.run_fixture(
            tmp_path, docs,
            {v: 1 for v in Stage2PromptVariant}, n=1,
        )
        assert [row.label for row in report.rows] == [
            "Original", "w/o In-context", "w/o Documentation", "w/o Both",
        ]

    def test_full_at_least_no_both_under_encoded_ordering(self, tmp_path, docs):
        report = self.run_fixture(
            tmp_path, docs,
            {
                Stage2PromptVariant.FULL: 18,
                Stage2PromptVariant.NO_ICL: 8,
                Stage2PromptVariant.NO_DOC: 12,
                Stage2PromptVariant.NO_BOTH: 6,
            },
        )
        rates = {row.variant: row.rate for row in report.rows}
        assert rates[Stage2PromptVariant.FULL] >= rates[Stage2PromptVariant.NO_BOTH]

    def test_reference_rates_in_footer_not_asserted(self, tmp_path, docs):
        report = self.run_fixture(tmp_path, docs, {v: 0 for v in Stage2PromptVariant}, n=1)
        text = report.to_text()
        assert "not asserted" in text
        assert "Original 85%" in text
        assert "w/o In-context 43%" in text
        assert "w/o Documentation 65%" in text
        assert "w/o Both 28%" in text

    def test_zero_seeds_rejected(self, tmp_path, docs):
        gateway = LlmGateway(mode="scripted", scripted=ScriptedBackend(script=[]))
        with pytest.raises(ContractError):
            run_ablation([], list(Stage2PromptVariant), gateway, StubSandbox(),
                         docs, ExemplarPool(), scratch_dir=tmp_path)
