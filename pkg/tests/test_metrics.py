"""Evaluation metrics against hand-computed and brute-force oracles."""

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chartforge.errors import ContractError, RubricParseError
from chartforge.metrics import (
    QAPrediction,
    RubricResult,
    TableTriples,
    TripleEntry,
    bleu4,
    build_rubric_prompt,
    levenshtein,
    parse_rubric_scores,
    relaxed_accuracy,
    relaxed_match,
    render_score_lines,
    success_rate,
    table_similarity,
    table_to_triples,
)
from chartforge.model import Cell, RenderStatus, TableData, TaskKind

from oracles import brute_force_similarity, random_triples


class TestRelaxedMatch:
    def test_four_percent_deviation_matches(self):
        # |26 - 25| / 25 = 0.04 <= 0.05
        assert relaxed_match("26", "25", 0.05) is True

    def test_identity(self):
        assert relaxed_match("25", "25", 0.05) is True

    def test_percent_sign_stripped(self):
        assert relaxed_match("12.5%", "12.5", 0.05) is True

    def test_thousands_separators_stripped(self):
        assert relaxed_match("1,250", "1250", 0.05) is True

    def test_six_percent_deviation_fails(self):
        assert relaxed_match("106", "100", 0.05) is False

    def test_zero_gold_requires_zero_pred(self):
        assert relaxed_match("0.0", "0", 0.05) is True
        assert relaxed_match("3", "0", 0.05) is False

    def test_string_answers_normalized_equality(self):
        assert relaxed_match("  Paris ", "paris", 0.05) is True
        assert relaxed_match("London", "paris", 0.05) is False

    def test_tolerance_relative_to_gold_is_asymmetric(self):
        # 5 <= 0.05*100 but 5 > 0.05*95.
        assert relaxed_match("95", "100", 0.05) is True
        assert relaxed_match("100", "95", 0.05) is False


class TestRelaxedAccuracy:
    def test_all_correct(self):
        preds = [QAPrediction("q1", "5", "5"), QAPrediction("q2", "a", "a")]
        assert relaxed_accuracy(preds) == 100.0

    def test_one_of_four(self):
        preds = [
            QAPrediction("q1", "5", "5"),
            QAPrediction("q2", "1", "9"),
            QAPrediction("q3", "bad", "good"),
            QAPrediction("q4", "200", "100"),
        ]
        assert relaxed_accuracy(preds) == 25.0

    def test_two_decimal_report_format(self):
        # Reported percentages format to two decimals (e.g. "48.96").
        preds = [QAPrediction(f"q{i}", "1" if i < 47 else "2", "1") for i in range(96)]
        assert f"{relaxed_accuracy(preds):.2f}" == "48.96"

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            relaxed_accuracy([])


class TestTriples:
    def test_counting(self):
        table = TableData.build(
            ["k", "a", "b"], ["r1", "r2"], [[1, 2], [3, 4]]
        )
        triples = table_to_triples(table)
        assert len(triples) == 4
        assert triples.entries[0] == TripleEntry("r1", "a", Cell.from_number(1))

    def test_single_cell(self):
        table = TableData.build(["k", "v"], ["rk"], [[100]])
        triples = table_to_triples(table)
        assert triples.entries == (TripleEntry("rk", "v", Cell.from_number(100)),)


def triples_of(*rows) -> TableTriples:
    entries = []
    for row_key, col_key, value in rows:
        cell = Cell.from_number(value) if isinstance(value, (int, float)) else Cell.from_raw(value)
        entries.append(TripleEntry(row_key, col_key, cell))
    return TableTriples(tuple(entries))


class TestTableSimilarity:
    def test_identical_tables_perfect(self):
        t = triples_of(("Q1", "sales", 90), ("Q2", "sales", 100))
        assert table_similarity(t, t) == (1.0, 1.0, 1.0)

    def test_value_off_by_ten_percent(self):
        pred = triples_of(("Q1", "sales", 90))
        gold = triples_of(("Q1", "sales", 100))
        p, r, f1 = table_similarity(pred, gold)
        assert p == pytest.approx(0.9)
        assert r == pytest.approx(0.9)
        assert f1 == pytest.approx(0.9)

    def test_extra_prediction_halves_precision(self):
        pred = triples_of(("Q1", "s", 100), ("Q2", "s", 50))
        gold = triples_of(("Q1", "s", 100))
        p, r, f1 = table_similarity(pred, gold)
        assert p == pytest.approx(0.5)
        assert r == pytest.approx(1.0)
        assert f1 == pytest.approx(2 / 3)

    def test_empty_sets(self):
        empty = TableTriples(())
        one = triples_of(("a", "b", 1))
        assert table_similarity(empty, empty) == (1.0, 1.0, 1.0)
        assert table_similarity(empty, one) == (0.0, 0.0, 0.0)
        assert table_similarity(one, empty) == (0.0, 0.0, 0.0)

    def test_key_mismatch_beyond_cutoff_scores_zero(self):
        pred = triples_of(("completely different", "thing", 100))
        gold = triples_of(("Q1", "sales", 100))
        p, r, f1 = table_similarity(pred, gold)
        assert (p, r, f1) == (0.0, 0.0, 0.0)

    def test_swap_exchanges_precision_recall(self):
        # Numeric value similarity is normalized by the gold value, so the
        # swap identity only holds where entry similarity is symmetric;
        # text values (edit-distance rule) are.
        def text_triples(rng):
            words = ["high", "low", "medium", "n/a", "flat"]
            keys = ["Q1", "Q2", "north", "south"]
            return TableTriples(tuple(
                TripleEntry(rng.choice(keys), rng.choice(keys), Cell.from_raw(rng.choice(words)))
                for _ in range(rng.randint(0, 4))
            ))

        rng = random.Random(99)
        for _ in range(50):
            a, b = text_triples(rng), text_triples(rng)
            pa, ra, fa = table_similarity(a, b)
            pb, rb, fb = table_similarity(b, a)
            assert pa == pytest.approx(rb, abs=1e-12)
            assert ra == pytest.approx(pb, abs=1e-12)
            assert fa == pytest.approx(fb, abs=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = random.Random(4242)
        for _ in range(100):
            pred, gold = random_triples(rng), random_triples(rng)
            fast = table_similarity(pred, gold)
            slow = brute_force_similarity(pred, gold)
            for got, want in zip(fast, slow):
                assert got == pytest.approx(want, abs=1e-9)


class TestLevenshtein:
    def test_known_distances(self):
        assert levenshtein("kitten", "sitting") == 3
        assert levenshtein("", "abc") == 3
        assert levenshtein("same", "same") == 0


class TestBleu4:
    def test_identical_pair_is_exactly_one(self):
        text = "the quick brown fox jumps"
        assert bleu4(text, [text]) == 1.0

    def test_three_token_candidate_zero(self):
        assert bleu4("one two three", ["one two three"]) == 0.0

    def test_disjoint_vocabulary_zero(self):
        assert bleu4("aa bb cc dd", ["ww xx yy zz"]) == 0.0

    def test_empty_candidate_zero(self):
        assert bleu4("", ["a b c d"]) == 0.0

    def test_brevity_penalty_applied(self):
        reference = "a b c d e f g h"
        candidate = "a b c d"
        score = bleu4(candidate, [reference])
        assert score == pytest.approx(math.exp(1 - 8 / 4))

    def test_prefix_lengthening_monotone(self):
        reference = "w1 w2 w3 w4 w5 w6 w7 w8 w9 w10"
        tokens = reference.split()
        scores = [
            bleu4(" ".join(tokens[:k]), [reference]) for k in range(4, 11)
        ]
        assert all(a <= b + 1e-12 for a, b in zip(scores, scores[1:]))
        assert scores[-1] == 1.0

    @given(st.text(alphabet="abcd ", min_size=0, max_size=60),
           st.text(alphabet="abcd ", min_size=1, max_size=60))
    @settings(max_examples=200, deadline=None)
    def test_range(self, candidate, reference):
        score = bleu4(candidate, [reference])
        assert 0.0 <= score <= 1.0


class TestRubricPrompts:
    def test_chart_to_chart_names_five_criteria(self):
        prompt = build_rubric_prompt(
            TaskKind.CHART_TO_CHART,
            {"gold_script": "g", "predicted_script": "p"},
        )
        for criterion in ("data", "axes", "colors", "chart_type", "title"):
            assert f"- {criterion}:" in prompt.user_text
        assert "0 (worst) to 5 (best)" in prompt.user_text

    def test_text_to_chart_four_criteria_scale_1_5(self):
        prompt = build_rubric_prompt(
            TaskKind.TEXT_TO_CHART,
            {"table": "t", "instruction": "i", "reference_script": "r",
             "predicted_script": "p"},
        )
        for criterion in ("visual_similarity", "completeness", "accuracy", "aesthetics"):
            assert f"- {criterion}:" in prompt.user_text
        assert "1 (worst) to 5 (best)" in prompt.user_text

    def test_missing_condition_named(self):
        with pytest.raises(ContractError, match="edit_instruction"):
            build_rubric_prompt(
                TaskKind.CHART_EDITING,
                {"original_script": "o", "predicted_script": "p"},
            )

    def test_conditions_embedded(self):
        prompt = build_rubric_prompt(
            TaskKind.CHART_TO_TEXT,
            {"gold_description": "GOLD-DESC", "table": "T-CSV",
             "predicted_description": "PRED-DESC"},
        )
        assert "GOLD-DESC" in prompt.user_text
        assert "T-CSV" in prompt.user_text
        assert "PRED-DESC" in prompt.user_text


def evaluator_text(scores: dict, preamble="Looks close overall."):
    lines = [preamble, ""]
    lines += [f"CRITERION: {name} SCORE: {value}" for name, value in scores.items()]
    return "\n".join(lines)


class TestRubricParsing:
    def test_chart_to_chart_example_normalizes_to_84(self):
        text = evaluator_text(
            {"data": 4, "axes": 5, "colors": 3, "chart_type": 5, "title": 4}
        )
        result = parse_rubric_scores(text, TaskKind.CHART_TO_CHART)
        assert result.normalized == pytest.approx(84.0, abs=1e-9)
        assert result.rationale == "Looks close overall."

    def test_all_max_is_100(self):
        text = evaluator_text({c: 5 for c in ("data", "axes", "colors", "chart_type", "title")})
        result = parse_rubric_scores(text, TaskKind.CHART_TO_CHART)
        assert result.normalized == 100.0

    def test_missing_colors_line_fails(self):
        text = evaluator_text({"data": 4, "axes": 5, "chart_type": 5, "title": 4})
        with pytest.raises(RubricParseError, match="colors"):
            parse_rubric_scores(text, TaskKind.CHART_TO_CHART)

    def test_out_of_range_score_fails(self):
        text = evaluator_text(
            {"data": 9, "axes": 5, "colors": 3, "chart_type": 5, "title": 4}
        )
        with pytest.raises(RubricParseError):
            parse_rubric_scores(text, TaskKind.CHART_TO_CHART)

    def test_render_parse_round_trip(self):
        result = RubricResult(
            task=TaskKind.CHART_EDITING,
            criterion_scores={"data_accuracy": 3, "completeness": 4,
                              "aesthetics": 5, "instruction_following": 2},
            scale=(0, 5),
            normalized=70.0,
            rationale="Edit applied but colors drifted.",
        )
        reparsed = parse_rubric_scores(render_score_lines(result), TaskKind.CHART_EDITING)
        assert reparsed.criterion_scores == result.criterion_scores
        assert reparsed.normalized == pytest.approx(result.normalized)
        assert reparsed.rationale == result.rationale


class TestSuccessRate:
    def test_73_of_100(self):
        attempts = [RenderStatus.OK] * 73 + [RenderStatus.EXEC_ERROR] * 27
        assert success_rate(attempts) == 73.0

    def test_all_and_none(self):
        assert success_rate([RenderStatus.OK, "ok"]) == 100.0
        assert success_rate(["timeout", "no_figure"]) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            success_rate([])
