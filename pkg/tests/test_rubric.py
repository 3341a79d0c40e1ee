from __future__ import annotations

import json
import random

import pytest

from fakes import FakeModel
from oracles import aggregate_oracle
from reportcheck.gateway import Gateway, ReplayStore
from reportcheck.jsonio import dumps_canonical
from reportcheck.rubric import (
    AggregateScores,
    CountMismatchError,
    FactorScore,
    IncompleteScoresError,
    JudgeInput,
    SchemaViolationError,
    Taxonomy,
    UnknownFactorIdError,
    aggregate,
    build_judge_request,
    judge_report,
    load_taxonomy,
)


def _write_taxonomy(tmp_path, payload):
    path = tmp_path / "taxonomy.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def _tiny_taxonomy_payload():
    return {
        "counts": {"dimensions": 1, "criteria": 1, "elements": 1, "factors": 2},
        "dimensions": [
            {
                "id": "1",
                "name": "Dim",
                "judged": True,
                "criteria": [
                    {
                        "id": "1.1",
                        "name": "Crit",
                        "elements": [
                            {
                                "id": "1.1.1",
                                "statement": "s",
                                "factors": [
                                    {"id": "1.1.1.1", "aspect": "Coverage", "prompt_text": "c"},
                                    {"id": "1.1.1.2", "aspect": "Quality", "prompt_text": "q"},
                                ],
                            }
                        ],
                    }
                ],
            }
        ],
    }


class TestLoadTaxonomy:
    def test_default_taxonomy_counts(self):
        taxonomy = load_taxonomy()
        counts = taxonomy.counts()
        assert counts["dimensions"] == 7
        assert counts["factors"] == 130
        assert counts["criteria"] == 26
        assert counts["elements"] == 40

    def test_default_judged_split(self):
        taxonomy = load_taxonomy()
        judged = [d.name for d in taxonomy.judged_dimensions()]
        assert judged == [
            "Request Completeness",
            "Evidence Validity",
            "Structure Consistency",
            "Narration Style",
            "Ethics Compliance",
        ]

    def test_count_mismatch_names_offender(self, tmp_path):
        payload = _tiny_taxonomy_payload()
        payload["counts"]["factors"] = 3
        path = _write_taxonomy(tmp_path, payload)
        with pytest.raises(CountMismatchError, match="declared 3 factors but found 2"):
            load_taxonomy(path)

    def test_bad_aspect_rejected(self, tmp_path):
        payload = _tiny_taxonomy_payload()
        payload["dimensions"][0]["criteria"][0]["elements"][0]["factors"][0]["aspect"] = "Both"
        path = _write_taxonomy(tmp_path, payload)
        with pytest.raises(SchemaViolationError, match="1.1.1.1"):
            load_taxonomy(path)

    def test_duplicate_factor_ids_rejected(self, tmp_path):
        payload = _tiny_taxonomy_payload()
        payload["dimensions"][0]["criteria"][0]["elements"][0]["factors"][1]["id"] = "1.1.1.1"
        path = _write_taxonomy(tmp_path, payload)
        with pytest.raises(SchemaViolationError, match="duplicate factor id"):
            load_taxonomy(path)

    def test_element_without_factors_rejected(self, tmp_path):
        payload = _tiny_taxonomy_payload()
        payload["dimensions"][0]["criteria"][0]["elements"][0]["factors"] = []
        path = _write_taxonomy(tmp_path, payload)
        with pytest.raises(SchemaViolationError, match="1.1.1"):
            load_taxonomy(path)


def _judge_input(taxonomy, guidance="Expert guidance body."):
    return JudgeInput(
        task_query="Assess the report.",
        report="# Report\n\nBody of the report.",
        taxonomy=taxonomy,
        judge_model_id="judge-1",
        expert_guidance=guidance,
    )


class TestJudgeReport:
    def test_scores_every_judged_factor(self, tmp_path):
        taxonomy = load_taxonomy()
        fake = FakeModel(judge_score=lambda fid: 7)
        gw = Gateway(mode="record", store=ReplayStore(tmp_path / "s.jsonl"), transport=fake)
        scores = judge_report(_judge_input(taxonomy), gw)
        expected = set(taxonomy.judged_factor_ids())
        assert {s.factor_id for s in scores} == expected
        assert all(s.score == 7 and s.rationale for s in scores)
        assert fake.calls == ["judge"] * 5

    def test_na_scores_preserved(self, tmp_path):
        taxonomy = load_taxonomy()
        fake = FakeModel(judge_score=lambda fid: "NA" if fid == "2.2.5.1" else 6)
        gw = Gateway(mode="record", store=ReplayStore(tmp_path / "s.jsonl"), transport=fake)
        scores = {s.factor_id: s for s in judge_report(_judge_input(taxonomy), gw)}
        assert scores["2.2.5.1"].score is None
        assert scores["2.2.5.2"].score == 6

    def test_guidance_absent_mode_omits_block(self):
        taxonomy = load_taxonomy()
        with_guidance = build_judge_request(_judge_input(taxonomy), taxonomy.dimensions[0])
        without = build_judge_request(_judge_input(taxonomy, guidance=""), taxonomy.dimensions[0])
        assert "# Expert Evaluation Guidance" in with_guidance.user_text
        assert "# Expert Evaluation Guidance" not in without.user_text
        stripped = with_guidance.user_text.replace(
            "# Expert Evaluation Guidance\nExpert guidance body.\n\n", ""
        )
        assert stripped == without.user_text

    def test_band_anchors_in_system_prompt(self):
        taxonomy = load_taxonomy()
        request = build_judge_request(_judge_input(taxonomy), taxonomy.dimensions[0])
        assert "Top-tier international journal level" in request.system_text

    def test_missing_factors_reasked_then_error(self, tmp_path):
        taxonomy = load_taxonomy(None)
        target = taxonomy.judged_dimensions()[0]
        keep = {f.id for c in target.criteria for e in c.elements for f in e.factors}
        dropped = sorted(keep)[0]

        def transport(request):
            rows = []
            for line in request.user_text.splitlines():
                if line.strip().startswith("- ") and "[" in line:
                    fid = line.strip().split()[1]
                    if fid != dropped:
                        rows.append({"factor_id": fid, "score": 5, "rationale": "r"})
            return json.dumps(rows), 1, 1, 1

        gw = Gateway(mode="record", store=ReplayStore(tmp_path / "s.jsonl"), transport=transport)
        single_dim = Taxonomy(dimensions=(target,))
        judge_input = JudgeInput(
            task_query="q", report="r", taxonomy=single_dim, judge_model_id="j", expert_guidance=""
        )
        with pytest.raises(IncompleteScoresError) as err:
            judge_report(judge_input, gw, reask_budget=1)
        assert dropped in err.value.missing

    def test_out_of_range_score_treated_as_malformed(self, tmp_path):
        taxonomy = load_taxonomy()
        target = taxonomy.judged_dimensions()[0]
        attempts = []

        def transport(request):
            attempts.append(1)
            score = 12 if len(attempts) == 1 else 8
            rows = []
            for line in request.user_text.splitlines():
                if line.strip().startswith("- ") and "[" in line:
                    fid = line.strip().split()[1]
                    rows.append({"factor_id": fid, "score": score, "rationale": "r"})
            return json.dumps(rows), 1, 1, 1

        gw = Gateway(mode="record", store=ReplayStore(tmp_path / "s.jsonl"), transport=transport)
        single_dim = Taxonomy(dimensions=(target,))
        judge_input = JudgeInput(task_query="q", report="r", taxonomy=single_dim, judge_model_id="j", expert_guidance="")
        scores = judge_report(judge_input, gw, reask_budget=2)
        assert len(attempts) == 2
        assert all(s.score == 8 for s in scores)


def _taxonomy_as_tree(taxonomy: Taxonomy) -> dict:
    return {
        d.id: {c.id: {e.id: [(f.id, f.aspect) for f in e.factors] for e in c.elements} for c in d.criteria}
        for d in taxonomy.dimensions
    }


def _random_taxonomy(rng: random.Random) -> Taxonomy:
    from reportcheck.rubric import Criterion, Dimension, Element, Factor

    dimensions = []
    factor_counter = 0
    for d in range(1, rng.randint(2, 4) + 1):
        criteria = []
        for c in range(1, rng.randint(1, 3) + 1):
            elements = []
            for e in range(1, rng.randint(1, 3) + 1):
                factors = []
                for _ in range(rng.randint(1, 4)):
                    factor_counter += 1
                    factors.append(
                        Factor(
                            id=f"{d}.{c}.{e}.{factor_counter}",
                            aspect=rng.choice(["Coverage", "Quality"]),
                            prompt_text="p",
                        )
                    )
                elements.append(Element(id=f"{d}.{c}.{e}", statement="s", factors=tuple(factors)))
            criteria.append(Criterion(id=f"{d}.{c}", name="c", elements=tuple(elements)))
        dimensions.append(Dimension(id=str(d), name=f"D{d}", judged=True, criteria=tuple(criteria)))
    return Taxonomy(dimensions=tuple(dimensions))


class TestAggregate:
    def test_all_sevens(self):
        taxonomy = load_taxonomy()
        scores = [FactorScore(factor_id=f.id, score=7, rationale="r") for f in taxonomy.all_factors()]
        result = aggregate(scores, taxonomy)
        assert result.overall == pytest.approx(7.0)
        for value in result.per_dimension.values():
            assert value == pytest.approx(7.0)
        for value in result.per_criterion.values():
            assert value == pytest.approx(7.0)

    def test_element_aspect_combination(self, tmp_path):
        payload = {
            "dimensions": [
                {
                    "id": "1",
                    "name": "D",
                    "criteria": [
                        {
                            "id": "1.1",
                            "name": "C",
                            "elements": [
                                {
                                    "id": "1.1.1",
                                    "statement": "s",
                                    "factors": [
                                        {"id": "f1", "aspect": "Coverage", "prompt_text": "c1"},
                                        {"id": "f2", "aspect": "Coverage", "prompt_text": "c2"},
                                        {"id": "f3", "aspect": "Quality", "prompt_text": "q1"},
                                    ],
                                }
                            ],
                        }
                    ],
                }
            ]
        }
        taxonomy = load_taxonomy(_write_taxonomy(tmp_path, payload))
        scores = [
            FactorScore("f1", 8, "r"),
            FactorScore("f2", None, ""),
            FactorScore("f3", 6, "r"),
        ]
        result = aggregate(scores, taxonomy)
        element = result.per_element["1.1.1"]
        assert element["coverage"] == pytest.approx(8.0)
        assert element["quality"] == pytest.approx(6.0)
        assert element["combined"] == pytest.approx(7.0)

    def test_all_na_criterion_excluded_from_dimension(self, tmp_path):
        payload = {
            "dimensions": [
                {
                    "id": "1",
                    "name": "D",
                    "criteria": [
                        {
                            "id": "1.1",
                            "name": "C1",
                            "elements": [
                                {"id": "1.1.1", "statement": "s", "factors": [{"id": "f1", "aspect": "Coverage", "prompt_text": "p"}]}
                            ],
                        },
                        {
                            "id": "1.2",
                            "name": "C2",
                            "elements": [
                                {"id": "1.2.1", "statement": "s", "factors": [{"id": "f2", "aspect": "Quality", "prompt_text": "p"}]}
                            ],
                        },
                    ],
                }
            ]
        }
        taxonomy = load_taxonomy(_write_taxonomy(tmp_path, payload))
        scores = [FactorScore("f1", None, ""), FactorScore("f2", 9, "r")]
        result = aggregate(scores, taxonomy)
        assert result.per_criterion["1.1"] is None
        assert result.per_dimension["1"] == pytest.approx(9.0)

    def test_unknown_factor_id_rejected(self):
        taxonomy = load_taxonomy()
        with pytest.raises(UnknownFactorIdError):
            aggregate([FactorScore("9.9.9.9", 5, "r")], taxonomy)

    def test_permutation_invariance(self):
        rng = random.Random(5)
        taxonomy = load_taxonomy()
        scores = [
            FactorScore(f.id, rng.choice([None, *range(1, 11)]), "r")
            for f in taxonomy.all_factors()
        ]
        result = aggregate(scores, taxonomy)
        shuffled = scores[:]
        rng.shuffle(shuffled)
        assert aggregate(shuffled, taxonomy).to_dict() == result.to_dict()

    def test_monotonicity_raising_one_score(self):
        rng = random.Random(8)
        taxonomy = load_taxonomy()
        factors = taxonomy.all_factors()
        scores = {f.id: rng.choice([None, *range(1, 10)]) for f in factors}
        base = aggregate([FactorScore(fid, s, "r") for fid, s in scores.items()], taxonomy)
        target = rng.choice([f.id for f in factors])
        bumped = dict(scores)
        bumped[target] = 10 if bumped[target] is None else bumped[target] + 1
        improved = aggregate([FactorScore(fid, s, "r") for fid, s in bumped.items()], taxonomy)
        for dim_id, value in base.per_dimension.items():
            new = improved.per_dimension[dim_id]
            if value is not None and new is not None:
                assert new >= value - 1e-12
        if base.overall is not None and improved.overall is not None:
            assert improved.overall >= base.overall - 1e-12

    def test_info_dimension_injection(self):
        taxonomy = load_taxonomy()
        judged_scores = [
            FactorScore(fid, 8, "r") for fid in taxonomy.judged_factor_ids()
        ]
        result = aggregate(judged_scores, taxonomy, info_dimensions={"6": 4.0, "7": 6.0})
        assert result.per_dimension["6"] == pytest.approx(4.0)
        assert result.per_dimension["7"] == pytest.approx(6.0)
        assert result.overall == pytest.approx((8 * 5 + 4 + 6) / 7)

    def test_dimension_weights(self):
        taxonomy = load_taxonomy()
        scores = [FactorScore(f.id, 6, "r") for f in taxonomy.all_factors()]
        weighted = aggregate(scores, taxonomy, dimension_weights={"1": 2.0})
        assert weighted.overall == pytest.approx(6.0)  # all dims equal, weights moot

    def test_random_instances_match_recursive_oracle(self):
        rng = random.Random(1234)
        for _ in range(150):
            taxonomy = _random_taxonomy(rng)
            scores = [
                FactorScore(f.id, rng.choice([None, *range(1, 11)]), "r")
                for f in taxonomy.all_factors()
                if rng.random() > 0.1  # some factors unsubmitted entirely
            ]
            result = aggregate(scores, taxonomy)
            expected = aggregate_oracle(_taxonomy_as_tree(taxonomy), {s.factor_id: s.score for s in scores})
            for level in ("per_criterion", "per_dimension"):
                for key, value in expected[level].items():
                    actual = getattr(result, level)[key]
                    if value is None:
                        assert actual is None
                    else:
                        assert actual == pytest.approx(value, abs=1e-12)
            if expected["overall"] is None:
                assert result.overall is None
            else:
                assert result.overall == pytest.approx(expected["overall"], abs=1e-12)

    def test_bounds_hold(self):
        rng = random.Random(77)
        taxonomy = load_taxonomy()
        scores = [FactorScore(f.id, rng.randint(1, 10), "r") for f in taxonomy.all_factors()]
        result = aggregate(scores, taxonomy)
        for value in list(result.per_criterion.values()) + list(result.per_dimension.values()):
            if value is not None:
                assert 1.0 <= value <= 10.0

    def test_aggregate_serialization_stable(self):
        taxonomy = load_taxonomy()
        scores = [FactorScore(f.id, 5, "r") for f in taxonomy.all_factors()]
        a = aggregate(scores, taxonomy)
        b = aggregate(scores, taxonomy)
        assert dumps_canonical(a.to_dict()) == dumps_canonical(b.to_dict())


class TestFactorScore:
    def test_score_range_enforced(self):
        with pytest.raises(ValueError):
            FactorScore("f", 0, "r")
        with pytest.raises(ValueError):
            FactorScore("f", 11, "r")

    def test_na_round_trip(self):
        score = FactorScore("f", None, "")
        assert FactorScore.from_dict(score.to_dict()) == score
        assert FactorScore.from_dict({"factor_id": "f", "score": "N/A"}).score is None

    def test_fractional_score_rejected(self):
        with pytest.raises(ValueError):
            FactorScore.from_dict({"factor_id": "f", "score": 7.5, "rationale": "r"})
        assert FactorScore.from_dict({"factor_id": "f", "score": "7", "rationale": "r"}).score == 7
