"""Batch-wise claim extraction and A-F classification.

The extractor sees the whole report for context but is told to extract
claims only from a small contiguous batch of target sentences, which keeps
long-document recall high. Batches partition the document and can run
concurrently; the merge step re-assembles one document-ordered claim set.

Claim classes:
  A  cited (explicit marker in the sentence)
  B  uncited, evidence earlier in the same section/paragraph
  C  uncited, evidence in a previous section/paragraph
  D  structural recap (intro/conclusion restatement)
  E  no citation required (general knowledge / author's own result)
  F  needs evidence but no source is presented
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

from .document import PositionId, ReportDocument
from .gateway import (
    Gateway,
    GatewayError,
    MalformedOutputError,
    ModelRequest,
    parse_model_json,
    reask_request,
)

EXTRACTION_PROMPT_VERSION = "extract-v1"
DEFAULT_BATCH_SIZE = 20
DEFAULT_REASK_BUDGET = 2

EXTRACTION_SYSTEM_TEXT = "You are an expert fact-checker and claim extractor."

_CLASS_DEFINITIONS = """\
Claim classes:
- "A": the sentence carries an explicit citation marker such as [1].
- "B": no marker, but the supporting citation appears in an earlier sentence of the same section or paragraph; record that sentence's position as evidence_position.
- "C": no marker, but the supporting citation appears in a previous section or paragraph; record that sentence's position as evidence_position.
- "D": a structural recap (introduction, conclusion or summary restatement); no evidence_position.
- "E": no citation required (general knowledge or the author's own result); no evidence_position.
- "F": the claim needs external evidence but no source is presented anywhere; no evidence_position."""

_OUTPUT_SPEC = """\
Return only JSON of the form:
{"claims": [{"position": "L2.S1", "index": 1, "claim_text": "...", "claim_class": "A", "direct_citation": [1], "evidence_position": null}, ...]}

Rules:
- Extract only core, verifiable claims; a sentence with nothing to verify emits no entry.
- A sentence may yield several claims; number them with consecutive index values starting at 1.
- Rewrite each claim_text to be self-contained: resolve pronouns and implicit references using the full report context.
- "position" must be one of the target sentence positions; "direct_citation" lists the integer keys of markers present in that sentence (empty list if none); "evidence_position" is an "Lx.Sy" string for classes B and C and null otherwise."""


class ClaimType(str, Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    E = "E"
    F = "F"

    @property
    def verifiable(self) -> bool:
        """A-C require external evidence; D-E are internal, F unknown-source."""
        return self in (ClaimType.A, ClaimType.B, ClaimType.C)


class ClaimValidationError(ValueError):
    """A model-emitted claim violates the claim schema."""


class DuplicateClaimIdError(ValueError):
    """Two batches emitted the same (position, index)."""


@dataclass(frozen=True)
class Claim:
    position: PositionId
    index: int
    claim_text: str
    claim_class: ClaimType
    direct_citations: tuple[int, ...] = ()
    evidence_position: PositionId | None = None

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ClaimValidationError(f"claim index must be >= 1, got {self.index}")
        if self.claim_class is ClaimType.A and not self.direct_citations:
            raise ClaimValidationError(f"{self.claim_id_str()}: class A requires direct citations")
        if self.claim_class in (ClaimType.B, ClaimType.C):
            if self.evidence_position is None:
                raise ClaimValidationError(f"{self.claim_id_str()}: class {self.claim_class.value} requires evidence_position")
            if not self.evidence_position < self.position:
                raise ClaimValidationError(
                    f"{self.claim_id_str()}: evidence_position {self.evidence_position} is not earlier than the claim"
                )
        if self.claim_class in (ClaimType.D, ClaimType.E, ClaimType.F) and self.evidence_position is not None:
            raise ClaimValidationError(f"{self.claim_id_str()}: class {self.claim_class.value} must not carry evidence_position")

    @property
    def claim_id(self) -> tuple[PositionId, int]:
        return (self.position, self.index)

    def claim_id_str(self) -> str:
        return f"{self.position.render()}#{self.index}"

    def to_dict(self) -> dict:
        return {
            "position": self.position.render(),
            "index": self.index,
            "claim_text": self.claim_text,
            "claim_class": self.claim_class.value,
            "direct_citation": list(self.direct_citations),
            "evidence_position": self.evidence_position.render() if self.evidence_position else None,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Claim":
        try:
            position = PositionId.parse(str(payload["position"]))
            index = int(payload["index"])
            claim_text = str(payload["claim_text"])
            claim_class = ClaimType(str(payload["claim_class"]))
            raw_citations = payload.get("direct_citation", [])
            if not isinstance(raw_citations, list):
                raise ClaimValidationError(f"direct_citation must be a list, got {type(raw_citations).__name__}")
            citations = tuple(int(k) for k in raw_citations)
            raw_evidence = payload.get("evidence_position")
            evidence = PositionId.parse(str(raw_evidence)) if raw_evidence else None
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ClaimValidationError):
                raise
            raise ClaimValidationError(f"bad claim object {payload!r}: {exc}") from exc
        if not claim_text.strip():
            raise ClaimValidationError(f"{position.render()}#{index}: empty claim_text")
        return cls(
            position=position,
            index=index,
            claim_text=claim_text,
            claim_class=claim_class,
            direct_citations=citations,
            evidence_position=evidence,
        )


@dataclass(frozen=True)
class ExtractionBatch:
    batch_index: int
    target_positions: tuple[PositionId, ...]


@dataclass(frozen=True)
class ClaimSet:
    """Document-ordered, immutable claim collection."""

    claims: tuple[Claim, ...]

    def __iter__(self):
        return iter(self.claims)

    def __len__(self) -> int:
        return len(self.claims)

    def by_position(self) -> dict[PositionId, list[Claim]]:
        index: dict[PositionId, list[Claim]] = {}
        for claim in self.claims:
            index.setdefault(claim.position, []).append(claim)
        return index

    def of_classes(self, *classes: ClaimType) -> list[Claim]:
        return [c for c in self.claims if c.claim_class in classes]

    def to_dicts(self) -> list[dict]:
        return [c.to_dict() for c in self.claims]

    @classmethod
    def from_dicts(cls, rows: list[dict]) -> "ClaimSet":
        return cls(claims=tuple(Claim.from_dict(row) for row in rows))


def plan_batches(doc: ReportDocument, batch_size: int = DEFAULT_BATCH_SIZE) -> list[ExtractionBatch]:
    """Contiguous, non-overlapping, exhaustive cover of the sentence positions."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    positions = [u.position for u in doc.sentences]
    return [
        ExtractionBatch(batch_index=i // batch_size + 1, target_positions=tuple(positions[i : i + batch_size]))
        for i in range(0, len(positions), batch_size)
    ]


def build_extraction_request(doc: ReportDocument, batch: ExtractionBatch, model_id: str) -> ModelRequest:
    target_lines = []
    for position in batch.target_positions:
        unit = doc.lookup(position)
        if unit is None:
            raise ValueError(f"batch position {position} not in document")
        target_lines.append(f"{position.render()}: {unit.text}")
    user_text = (
        "# Full Report Context\n"
        f"{doc.source_text}\n\n"
        "# Target Sentences to Extract Claims From\n"
        + "\n".join(target_lines)
        + "\n\nExtract claims only from the target sentences above. "
        "Use the full report context for coreference resolution.\n\n"
        f"{_CLASS_DEFINITIONS}\n\n{_OUTPUT_SPEC}"
    )
    return ModelRequest(
        system_text=EXTRACTION_SYSTEM_TEXT,
        user_text=user_text,
        model_id=model_id,
        expected_schema=EXTRACTION_PROMPT_VERSION,
    )


def _parse_extraction_response(text: str, batch: ExtractionBatch) -> list[Claim]:
    payload = parse_model_json(text)
    if not isinstance(payload, dict) or not isinstance(payload.get("claims"), list):
        raise MalformedOutputError('expected an object with a "claims" array')
    allowed = set(batch.target_positions)
    claims = [Claim.from_dict(row) for row in payload["claims"]]
    for claim in claims:
        if claim.position not in allowed:
            raise ClaimValidationError(f"{claim.claim_id_str()}: position outside the batch targets")
    _check_consecutive_indices(claims)
    return claims


def _check_consecutive_indices(claims: list[Claim]) -> None:
    per_sentence: dict[PositionId, list[int]] = {}
    for claim in claims:
        per_sentence.setdefault(claim.position, []).append(claim.index)
    for position, indices in per_sentence.items():
        if sorted(indices) != list(range(1, len(indices) + 1)):
            raise ClaimValidationError(f"{position.render()}: claim indices {sorted(indices)} are not consecutive from 1")


def extract_claims(
    doc: ReportDocument,
    batch: ExtractionBatch,
    gw: Gateway,
    model_id: str,
    reask_budget: int = DEFAULT_REASK_BUDGET,
) -> list[Claim]:
    """Extract the batch's claims, re-asking on schema violations.

    After ``reask_budget`` corrective re-asks the batch fails hard; silently
    dropping claims would corrupt every downstream recall-style metric.
    """
    request = build_extraction_request(doc, batch, model_id)
    last_error: Exception | None = None
    for attempt in range(reask_budget + 1):
        try:
            response = gw.complete(request, stage="extract")
        except GatewayError as exc:
            raise type(exc)(f"batch {batch.batch_index}: {exc}") from exc
        try:
            return _parse_extraction_response(response.text, batch)
        except (MalformedOutputError, ClaimValidationError) as exc:
            last_error = exc
            request = reask_request(
                request,
                f"Your previous output was rejected: {exc}. Re-emit the full JSON object, fixing this.",
                attempt=attempt + 1,
            )
    raise MalformedOutputError(f"batch {batch.batch_index}: schema still violated after {reask_budget} re-asks: {last_error}")


def extract_all(
    doc: ReportDocument,
    gw: Gateway,
    model_id: str,
    batch_size: int = DEFAULT_BATCH_SIZE,
    max_workers: int = 4,
    reask_budget: int = DEFAULT_REASK_BUDGET,
) -> ClaimSet:
    """plan -> extract per batch (concurrently) -> merge."""
    batches = plan_batches(doc, batch_size)
    if not batches:
        return ClaimSet(claims=())
    with ThreadPoolExecutor(max_workers=min(max_workers, len(batches))) as pool:
        per_batch = list(pool.map(lambda b: extract_claims(doc, b, gw, model_id, reask_budget), batches))
    return merge_batches(per_batch)


def merge_batches(per_batch: list[list[Claim]]) -> ClaimSet:
    """Union of batch outputs ordered by (position, index); ids must be unique."""
    merged: list[Claim] = [claim for batch in per_batch for claim in batch]
    merged.sort(key=lambda c: (c.position, c.index))
    seen: set[tuple[PositionId, int]] = set()
    for claim in merged:
        if claim.claim_id in seen:
            raise DuplicateClaimIdError(f"duplicate claim id {claim.claim_id_str()}")
        seen.add(claim.claim_id)
    return ClaimSet(claims=tuple(merged))


def claims_per_paragraph(claims: ClaimSet, doc: ReportDocument) -> float | None:
    """Extraction-density statistic: |claims| / |paragraph blocks|."""
    paragraphs = doc.paragraph_block_count()
    if paragraphs == 0:
        return None
    return len(claims) / paragraphs
