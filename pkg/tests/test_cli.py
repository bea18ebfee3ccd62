"""CLI surface: helps, staged pipeline, build, stats, split, eval, ablate."""

import json
import socket
from pathlib import Path

import pytest
from click.testing import CliRunner

from fake_llm import respond

from chartforge.cli import main
from chartforge.config import load_config, load_doc_catalog
from chartforge.figgen import DocCatalog, ExemplarPool, Stage2PromptVariant, run_ablation
from chartforge.gateway import ChatRequest, LlmGateway, ScriptedBackend
from chartforge.metrics import build_rubric_prompt
from chartforge.model import TaskKind
from chartforge.pipeline import run_stage1
from chartforge.sandboxclient import StubSandbox
from chartforge.store import read_jsonl

FIXTURES = Path(__file__).parent / "fixtures"
REPLAY_CACHE = FIXTURES / "replay_cache"
REPLAY_CFG = FIXTURES / "replay.cfg"


@pytest.fixture
def runner():
    return CliRunner()


def build_args(out_dir, extra=()):
    return [
        "build", "--config", str(REPLAY_CFG), "--cache-dir", str(REPLAY_CACHE),
        "--n", "30", "--sandbox", "stub", "--out", str(out_dir), *extra,
    ]


def all_commands(group, prefix=()):
    yield prefix
    for name, command in getattr(group, "commands", {}).items():
        yield from all_commands(command, prefix + (name,))


class TestHelp:
    def test_every_command_help_exits_zero(self, runner):
        for path in all_commands(main):
            result = runner.invoke(main, [*path, "--help"])
            assert result.exit_code == 0, (path, result.output)

    def test_version(self, runner):
        result = runner.invoke(main, ["--version"])
        assert result.exit_code == 0


class TestBuildCommand:
    def test_replay_build_succeeds_offline(self, runner, tmp_path, monkeypatch):
        def deny(*args, **kwargs):
            raise AssertionError("network operation attempted in replay mode")

        monkeypatch.setattr(socket, "socket", deny)
        monkeypatch.setattr(socket, "create_connection", deny)
        result = runner.invoke(main, build_args(tmp_path / "ds"))
        assert result.exit_code == 0, result.output
        assert "records 330" in result.output.replace("  ", " ")

    def test_two_replay_builds_identical_digest(self, runner, tmp_path):
        first = runner.invoke(main, build_args(tmp_path / "a"))
        second = runner.invoke(main, build_args(tmp_path / "b"))
        assert first.exit_code == 0 and second.exit_code == 0
        digest_a = json.loads((tmp_path / "a" / "manifest.json").read_text())["dataset_digest"]
        digest_b = json.loads((tmp_path / "b" / "manifest.json").read_text())["dataset_digest"]
        assert digest_a == digest_b

    def test_refuses_existing_dataset(self, runner, tmp_path):
        assert runner.invoke(main, build_args(tmp_path / "ds")).exit_code == 0
        rerun = runner.invoke(main, build_args(tmp_path / "ds"))
        assert rerun.exit_code == 2
        assert "force" in rerun.output


class TestStagedPipeline:
    def test_generate_render_instruct_flow(self, runner, tmp_path):
        seeds_path = tmp_path / "seeds.jsonl"
        result = runner.invoke(main, [
            "generate", "--config", str(REPLAY_CFG), "--cache-dir", str(REPLAY_CACHE),
            "--n", "30", "--out", str(seeds_path),
        ])
        assert result.exit_code == 0, result.output
        assert len(read_jsonl(seeds_path)) == 30

        charts_dir = tmp_path / "charts_out"
        result = runner.invoke(main, [
            "render", "--config", str(REPLAY_CFG), "--cache-dir", str(REPLAY_CACHE),
            "--in", str(seeds_path), "--out", str(charts_dir), "--sandbox", "stub",
        ])
        assert result.exit_code == 0, result.output
        assert "rendered 30/30" in result.output

        records_path = tmp_path / "records.jsonl"
        result = runner.invoke(main, [
            "instruct", "--config", str(REPLAY_CFG), "--cache-dir", str(REPLAY_CACHE),
            "--in", str(charts_dir), "--out", str(records_path), "--sandbox", "stub",
        ])
        assert result.exit_code == 0, result.output
        assert len(read_jsonl(records_path)) == 330


class TestStatsCommand:
    @pytest.fixture
    def dataset(self, runner, tmp_path):
        out = tmp_path / "ds"
        assert runner.invoke(main, build_args(out)).exit_code == 0
        return out

    def test_text_format(self, runner, dataset):
        result = runner.invoke(main, ["stats", str(dataset)])
        assert result.exit_code == 0
        assert "records_per_chart" in result.output
        assert "qa" in result.output

    def test_json_format(self, runner, dataset):
        result = runner.invoke(main, ["stats", str(dataset), "--format", "json"])
        payload = json.loads(result.output)
        assert payload["records_total"] == 330
        assert len(payload["chart_types"]) == 10
        assert len(payload["tasks"]) == 7

    def test_distribution_figures_written(self, runner, dataset, tmp_path):
        figures = tmp_path / "figs"
        result = runner.invoke(
            main, ["stats", str(dataset), "--figures-out", str(figures)]
        )
        assert result.exit_code == 0
        for name in ("task_distribution.png", "chart_type_distribution.png"):
            data = (figures / name).read_bytes()
            assert data[:8] == b"\x89PNG\r\n\x1a\n"

    def test_split_by_chart(self, runner, dataset):
        result = runner.invoke(main, [
            "split", str(dataset), "--fractions", "train=0.8,test=0.2", "--seed", "7",
        ])
        assert result.exit_code == 0
        train = read_jsonl(dataset / "records.train.jsonl")
        test = read_jsonl(dataset / "records.test.jsonl")
        train_charts = {r["chart_id"] for r in train}
        test_charts = {r["chart_id"] for r in test}
        assert len(train_charts) == 24 and len(test_charts) == 6
        assert train_charts.isdisjoint(test_charts)


class TestEvalCommands:
    def test_eval_qa(self, runner, tmp_path):
        gold = tmp_path / "gold.jsonl"
        pred = tmp_path / "pred.jsonl"
        gold.write_text(
            "\n".join(json.dumps({"id": f"q{i}", "answer": a})
                      for i, a in enumerate(["25", "100", "paris", "7"])) + "\n"
        )
        pred.write_text(
            "\n".join(json.dumps({"id": f"q{i}", "answer": a})
                      for i, a in enumerate(["26", "200", "Paris", "9"])) + "\n"
        )
        result = runner.invoke(main, [
            "eval", "qa", "--pred", str(pred), "--gold", str(gold),
            "--tol", "0.05", "--format", "json",
        ])
        payload = json.loads(result.output)
        assert payload["relaxed_accuracy"] == 50.0

    def test_eval_extraction(self, runner, tmp_path):
        gold_dir, pred_dir = tmp_path / "gold", tmp_path / "pred"
        gold_dir.mkdir(), pred_dir.mkdir()
        (gold_dir / "a.csv").write_text("k,v\nQ1,100\n")
        (pred_dir / "a.csv").write_text("k,v\nQ1,90\n")
        (gold_dir / "b.csv").write_text("k,v\nQ1,50\n")  # no prediction
        result = runner.invoke(main, [
            "eval", "extraction", "--pred", str(pred_dir), "--gold", str(gold_dir),
            "--format", "json",
        ])
        payload = json.loads(result.output)
        by_name = {row["name"]: row for row in payload["files"]}
        assert by_name["a.csv"]["f1"] == pytest.approx(0.9)
        assert by_name["b.csv"]["f1"] == 0.0
        assert payload["mean"]["f1"] == pytest.approx(0.45)

    def test_eval_rubric_replay(self, runner, tmp_path):
        cache_dir = tmp_path / "cache"
        runs_dir = tmp_path / "runs"
        runs_dir.mkdir()
        conditions = {"gold_script": "plt.bar(x, y)", "predicted_script": "plt.bar(x, z)"}
        (runs_dir / "s1.json").write_text(json.dumps({"id": "s1", "conditions": conditions}))

        # Prime the cache with the fake evaluator's response.
        config = load_config(REPLAY_CFG)
        prompt = build_rubric_prompt(TaskKind.CHART_TO_CHART, conditions)
        recorder = LlmGateway(
            mode="scripted", cache_dir=cache_dir,
            scripted=ScriptedBackend(responder=respond),
        )
        recorder.complete(ChatRequest(
            system_text=prompt.system_text, user_text=prompt.user_text,
            temperature=config.temperature_eval, max_tokens=config.max_tokens,
            model_id=config.model_id,
        ))

        result = runner.invoke(main, [
            "eval", "rubric", "--task", "chart_to_chart",
            "--config", str(REPLAY_CFG), "--cache-dir", str(cache_dir),
            "--pred", str(runs_dir), "--format", "json",
        ])
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        assert 0.0 <= payload["mean_normalized"] <= 100.0
        assert set(payload["samples"][0]["scores"]) == {
            "data", "axes", "colors", "chart_type", "title",
        }


class TestAblateCommand:
    def test_ablate_replay_with_seeds_file(self, runner, tmp_path):
        cache_dir = tmp_path / "cache"
        config = load_config(REPLAY_CFG, overrides={"backend": "scripted"})
        recorder = LlmGateway(
            mode="scripted", cache_dir=cache_dir,
            scripted=ScriptedBackend(responder=respond),
        )
        seeds = run_stage1(config, recorder, 4)
        seeds_path = tmp_path / "seeds.jsonl"
        seeds_path.write_text(
            "\n".join(json.dumps(s.to_json_dict(), sort_keys=True) for s in seeds) + "\n"
        )
        # Prime stage-2 variant prompts into the cache.
        run_ablation(
            seeds, list(Stage2PromptVariant), recorder, StubSandbox(),
            DocCatalog(load_doc_catalog()), ExemplarPool(rng_seed=config.rng_seed),
            scratch_dir=tmp_path / "scratch", k=config.icl_k,
            timeout_s=config.render_timeout_s,
            temperature=config.temperature_generate, model_id=config.model_id,
        )
        result = runner.invoke(main, [
            "ablate", "stage2", "--config", str(REPLAY_CFG),
            "--cache-dir", str(cache_dir), "--in", str(seeds_path),
            "--n", "4", "--sandbox", "stub", "--format", "json",
        ])
        assert result.exit_code == 0, result.output
        payload = json.loads(result.output)
        labels = [row["label"] for row in payload["rows"]]
        assert labels == ["Original", "w/o In-context", "w/o Documentation", "w/o Both"]
        assert all(row["success_rate"] == 100.0 for row in payload["rows"])


class TestThemesCommand:
    def test_bootstrap_writes_pool(self, runner, tmp_path):
        cache_dir = tmp_path / "cache"
        recorder = LlmGateway(
            mode="scripted", cache_dir=cache_dir,
            scripted=ScriptedBackend(responder=respond),
        )
        from chartforge.tabgen import bootstrap_themes

        bootstrap_themes(12, recorder, model_id="gpt-4")
        out = tmp_path / "themes.txt"
        result = runner.invoke(main, [
            "themes", "bootstrap", "--config", str(REPLAY_CFG),
            "--cache-dir", str(cache_dir), "--count", "12", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        assert len(out.read_text().splitlines()) >= 12
