"""Rubric taxonomy, judge orchestration and hierarchical score aggregation.

The taxonomy is a 4-level hierarchy (dimensions -> criteria -> elements ->
factors); each factor checks one aspect, Coverage (is the element present
and complete everywhere it should be) or Quality (how well the present
material is executed). Factors are scored 1-10 or NA by an LLM judge for
the judged dimensions; the two information dimensions are injected from
the verification metrics. Aggregation averages upward with NA excluded at
every level.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from . import jsonio
from .gateway import (
    Gateway,
    MalformedOutputError,
    ModelRequest,
    parse_model_json,
    reask_request,
)

JUDGE_PROMPT_VERSION = "judge-v1"
DEFAULT_REASK_BUDGET = 2

ASPECTS = ("Coverage", "Quality")

SCORE_BAND_ANCHORS = """\
Score bands (apply to both Coverage and Quality factors):
- 9-10 (Perfect). Coverage: fully meets all requirements; no omissions; no revision needed. Quality: excellent quality in all relevant aspects; no revision needed — Top-tier international journal level, or high-end professional report meeting or exceeding standards in specific technical/industrial contexts.
- 7-8 (Excellent). Coverage: meets almost all requirements; only 1-2 minor omissions, minimal impact. Quality: high quality; meets most academic/professional standards, only minor improvements possible — solid peer-reviewed journal, excellent doctoral research, high-quality industry report level.
- 5-6 (Good). Coverage: meets more than half; meets most key requirements, minor elements missing. Quality: meets essential professional standards; clear structure and competent analysis but room for improvement — well-written master's thesis or standard professional report level.
- 3-4 (Inadequate). Coverage: partially meets; several key omissions. Quality: noticeable flaws in several aspects; significant revision needed — undergraduate thesis or entry-level professional report level.
- 1-2 (Poor). Coverage: most requirements are missing or treated only superficially. Quality: fails to meet basic professional standards; lacks depth, rigor, accuracy — below undergraduate level; unsuitable for publication or professional use."""

JUDGE_SYSTEM_TEXT = (
    "You are an expert evaluator of long-form research reports. Score each rubric factor on a "
    "1-10 integer scale, or \"NA\" when the factor does not apply to this report, and justify "
    "every score with a rationale.\n\n" + SCORE_BAND_ANCHORS
)


class SchemaViolationError(ValueError):
    """The taxonomy file violates the schema; the message names the node."""


class CountMismatchError(ValueError):
    """Hierarchy counts disagree with the file's declared totals."""


class UnknownFactorIdError(ValueError):
    pass


class IncompleteScoresError(Exception):
    """The judge never produced scores for some factors."""

    def __init__(self, missing: list[str]):
        super().__init__(f"missing factor scores: {', '.join(missing)}")
        self.missing = missing


@dataclass(frozen=True)
class Factor:
    id: str
    aspect: str
    prompt_text: str


@dataclass(frozen=True)
class Element:
    id: str
    statement: str
    factors: tuple[Factor, ...]


@dataclass(frozen=True)
class Criterion:
    id: str
    name: str
    elements: tuple[Element, ...]


@dataclass(frozen=True)
class Dimension:
    id: str
    name: str
    judged: bool
    criteria: tuple[Criterion, ...]


@dataclass(frozen=True)
class Taxonomy:
    dimensions: tuple[Dimension, ...]

    def all_factors(self) -> list[Factor]:
        return [f for d in self.dimensions for c in d.criteria for e in c.elements for f in e.factors]

    def judged_dimensions(self) -> list[Dimension]:
        return [d for d in self.dimensions if d.judged]

    def judged_factor_ids(self) -> list[str]:
        return [f.id for d in self.judged_dimensions() for c in d.criteria for e in c.elements for f in e.factors]

    def counts(self) -> dict[str, int]:
        return {
            "dimensions": len(self.dimensions),
            "criteria": sum(len(d.criteria) for d in self.dimensions),
            "elements": sum(len(c.elements) for d in self.dimensions for c in d.criteria),
            "factors": len(self.all_factors()),
        }


@dataclass(frozen=True)
class FactorScore:
    factor_id: str
    score: int | None  # None encodes NA
    rationale: str = ""

    def __post_init__(self) -> None:
        if self.score is not None and not (1 <= self.score <= 10):
            raise ValueError(f"factor {self.factor_id}: score {self.score} outside 1-10")

    def to_dict(self) -> dict:
        return {"factor_id": self.factor_id, "score": self.score if self.score is not None else "NA", "rationale": self.rationale}

    @classmethod
    def from_dict(cls, payload: dict) -> "FactorScore":
        raw = payload["score"]
        if isinstance(raw, str) and raw.strip().upper() in ("NA", "N/A"):
            score = None
        else:
            value = float(raw)
            if not value.is_integer():
                raise ValueError(f"score must be an integer 1-10 or NA, got {raw!r}")
            score = int(value)
        return cls(factor_id=str(payload["factor_id"]), score=score, rationale=str(payload.get("rationale", "")))


@dataclass(frozen=True)
class JudgeInput:
    task_query: str
    report: str
    taxonomy: Taxonomy
    judge_model_id: str
    expert_guidance: str = ""
    rationale_style: str = "short"  # "short" | "detailed"


@dataclass(frozen=True)
class AggregateScores:
    per_element: dict[str, dict[str, float | None]]
    per_criterion: dict[str, float | None]
    per_dimension: dict[str, float | None]
    overall: float | None

    def to_dict(self) -> dict:
        return {
            "per_element": {k: dict(v) for k, v in self.per_element.items()},
            "per_criterion": dict(self.per_criterion),
            "per_dimension": dict(self.per_dimension),
            "overall": self.overall,
        }


def default_taxonomy_path() -> Path:
    return Path(str(resources.files("reportcheck").joinpath("data/taxonomy.json")))


def load_taxonomy(path: str | Path | None = None) -> Taxonomy:
    """Load and validate the 4-level hierarchy against its declared counts."""
    payload = jsonio.load(Path(path) if path else default_taxonomy_path())
    if not isinstance(payload, dict) or "dimensions" not in payload:
        raise SchemaViolationError("taxonomy root must be an object with a 'dimensions' array")

    dimensions: list[Dimension] = []
    seen_factor_ids: set[str] = set()
    for d in payload["dimensions"]:
        criteria: list[Criterion] = []
        for c in d.get("criteria", []):
            elements: list[Element] = []
            for e in c.get("elements", []):
                factors: list[Factor] = []
                for f in e.get("factors", []):
                    if f.get("aspect") not in ASPECTS:
                        raise SchemaViolationError(
                            f"factor {f.get('id', '?')}: aspect must be one of {ASPECTS}, got {f.get('aspect')!r}"
                        )
                    if not f.get("id") or not f.get("prompt_text"):
                        raise SchemaViolationError(f"factor under element {e.get('id', '?')} missing id or prompt_text")
                    if f["id"] in seen_factor_ids:
                        raise SchemaViolationError(f"duplicate factor id {f['id']}")
                    seen_factor_ids.add(f["id"])
                    factors.append(Factor(id=f["id"], aspect=f["aspect"], prompt_text=f["prompt_text"]))
                if not factors:
                    raise SchemaViolationError(f"element {e.get('id', '?')} has no factors")
                if not e.get("id"):
                    raise SchemaViolationError(f"element under criterion {c.get('id', '?')} missing id")
                elements.append(Element(id=e["id"], statement=e.get("statement", ""), factors=tuple(factors)))
            if not c.get("id"):
                raise SchemaViolationError(f"criterion under dimension {d.get('id', '?')} missing id")
            criteria.append(Criterion(id=c["id"], name=c.get("name", c["id"]), elements=tuple(elements)))
        if not d.get("id"):
            raise SchemaViolationError("dimension missing id")
        dimensions.append(
            Dimension(id=d["id"], name=d.get("name", d["id"]), judged=bool(d.get("judged", True)), criteria=tuple(criteria))
        )

    taxonomy = Taxonomy(dimensions=tuple(dimensions))
    declared = payload.get("counts", {})
    actual = taxonomy.counts()
    for level, expected in declared.items():
        if level not in actual:
            raise SchemaViolationError(f"unknown count key {level!r}")
        if actual[level] != expected:
            offender = _locate_count_offender(taxonomy, level)
            raise CountMismatchError(
                f"declared {expected} {level} but found {actual[level]}{offender}"
            )
    return taxonomy


def _locate_count_offender(taxonomy: Taxonomy, level: str) -> str:
    # Best-effort hint: name the smallest node subtree (criterion/element) sizes.
    if level == "factors":
        thin = [
            e.id
            for d in taxonomy.dimensions
            for c in d.criteria
            for e in c.elements
            if len(e.factors) < 2
        ]
        if thin:
            return f" (elements with fewest factors: {', '.join(thin[:5])})"
    return ""


def build_judge_request(input: JudgeInput, dimension: Dimension) -> ModelRequest:
    lines = []
    for criterion in dimension.criteria:
        for element in criterion.elements:
            lines.append(f"Element {element.id}: {element.statement}")
            for factor in element.factors:
                lines.append(f"- {factor.id} [{factor.aspect}] {factor.prompt_text}")
    rationale_hint = (
        "one or two sentences" if input.rationale_style == "short" else "a detailed paragraph citing report passages"
    )
    guidance_block = (
        f"# Expert Evaluation Guidance\n{input.expert_guidance}\n\n" if input.expert_guidance else ""
    )
    user_text = (
        f"# Task Query\n{input.task_query}\n\n"
        f"{guidance_block}"
        f"# Report to Evaluate\n{input.report}\n\n"
        f"# Rubric Factors — Dimension: {dimension.name}\n" + "\n".join(lines) + "\n\n"
        "# Output\n"
        f"Score every factor listed above. Rationale: {rationale_hint}. Return only a JSON array: "
        '[{"factor_id": "...", "rationale": "...", "score": 1-10 integer or "NA"}, ...]'
    )
    return ModelRequest(
        system_text=JUDGE_SYSTEM_TEXT,
        user_text=user_text,
        model_id=input.judge_model_id,
        expected_schema=JUDGE_PROMPT_VERSION,
    )


def _parse_judge_response(text: str, expected_ids: set[str]) -> dict[str, FactorScore]:
    payload = parse_model_json(text)
    if not isinstance(payload, list):
        raise MalformedOutputError("expected a JSON array of factor scores")
    out: dict[str, FactorScore] = {}
    for row in payload:
        try:
            score = FactorScore.from_dict(row)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedOutputError(f"bad factor score {row!r}: {exc}") from exc
        if score.factor_id not in expected_ids:
            raise MalformedOutputError(f"score for unknown factor {score.factor_id}")
        if score.score is not None and not score.rationale.strip():
            raise MalformedOutputError(f"factor {score.factor_id}: scored without a rationale")
        out[score.factor_id] = score
    return out


def judge_report(input: JudgeInput, gw: Gateway, reask_budget: int = DEFAULT_REASK_BUDGET, max_workers: int = 4) -> list[FactorScore]:
    """Score all factors of the judged dimensions, one model call per dimension.

    Missing factors are re-asked within the budget; an incomplete dimension
    after that raises IncompleteScoresError naming the factor ids.
    """
    dimensions = input.taxonomy.judged_dimensions()
    if not dimensions:
        return []

    def judge_dimension(dimension: Dimension) -> list[FactorScore]:
        expected = {f.id for c in dimension.criteria for e in c.elements for f in e.factors}
        request = build_judge_request(input, dimension)
        collected: dict[str, FactorScore] = {}
        last_error: Exception | None = None
        for attempt in range(reask_budget + 1):
            response = gw.complete(request, stage="judge")
            try:
                collected.update(_parse_judge_response(response.text, expected))
            except MalformedOutputError as exc:
                last_error = exc
                request = reask_request(
                    request,
                    f"Your previous output was rejected: {exc}. Re-emit the full JSON array, fixing this.",
                    attempt=attempt + 1,
                )
                continue
            missing = expected - set(collected)
            if not missing:
                return [collected[fid] for fid in sorted(expected)]
            request = reask_request(
                request,
                f"You omitted factors: {', '.join(sorted(missing))}. Emit the JSON array again including every factor.",
                attempt=attempt + 1,
            )
        missing = sorted(expected - set(collected))
        if missing:
            raise IncompleteScoresError(missing)
        raise MalformedOutputError(f"judge output never validated: {last_error}")

    with ThreadPoolExecutor(max_workers=min(max_workers, len(dimensions))) as pool:
        results = list(pool.map(judge_dimension, dimensions))
    return [score for group in results for score in group]


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def aggregate(
    scores: list[FactorScore],
    taxonomy: Taxonomy,
    info_dimensions: dict[str, float] | None = None,
    dimension_weights: dict[str, float] | None = None,
) -> AggregateScores:
    """factor -> element (per aspect, then combined) -> criterion -> dimension -> overall.

    Every level averages its defined children and propagates NA only when
    all children are NA. ``info_dimensions`` maps dimension ids to scores
    computed outside the judge (the verification metrics); they override
    that dimension's aggregate. ``dimension_weights`` reweights the overall
    mean (default unweighted).
    """
    known_ids = {f.id for f in taxonomy.all_factors()}
    by_factor: dict[str, int | None] = {}
    for score in scores:
        if score.factor_id not in known_ids:
            raise UnknownFactorIdError(f"unknown factor id {score.factor_id}")
        by_factor[score.factor_id] = score.score

    per_element: dict[str, dict[str, float | None]] = {}
    per_criterion: dict[str, float | None] = {}
    per_dimension: dict[str, float | None] = {}

    for dimension in taxonomy.dimensions:
        criterion_values: list[float] = []
        for criterion in dimension.criteria:
            element_values: list[float] = []
            for element in criterion.elements:
                aspect_scores: dict[str, float | None] = {}
                for aspect in ASPECTS:
                    defined = [
                        float(by_factor[f.id])
                        for f in element.factors
                        if f.aspect == aspect and by_factor.get(f.id) is not None
                    ]
                    aspect_scores[aspect.lower()] = _mean(defined)
                combined = _mean([v for v in aspect_scores.values() if v is not None])
                per_element[element.id] = {
                    "coverage": aspect_scores["coverage"],
                    "quality": aspect_scores["quality"],
                    "combined": combined,
                }
                if combined is not None:
                    element_values.append(combined)
            value = _mean(element_values)
            per_criterion[criterion.id] = value
            if value is not None:
                criterion_values.append(value)
        per_dimension[dimension.id] = _mean(criterion_values)

    if info_dimensions:
        for dim_id, value in info_dimensions.items():
            if not any(d.id == dim_id for d in taxonomy.dimensions):
                raise UnknownFactorIdError(f"unknown dimension id {dim_id}")
            per_dimension[dim_id] = value

    defined_dims = [(d.id, per_dimension[d.id]) for d in taxonomy.dimensions if per_dimension[d.id] is not None]
    if not defined_dims:
        overall = None
    elif dimension_weights:
        total_weight = sum(dimension_weights.get(dim_id, 1.0) for dim_id, _ in defined_dims)
        overall = (
            sum(dimension_weights.get(dim_id, 1.0) * value for dim_id, value in defined_dims) / total_weight
            if total_weight > 0
            else None
        )
    else:
        overall = _mean([value for _, value in defined_dims])

    return AggregateScores(
        per_element=per_element,
        per_criterion=per_criterion,
        per_dimension=per_dimension,
        overall=overall,
    )
