"""Citation back-tracking: build each claim's valid citation set.

A claim without its own marker (class B/C) points at an earlier position;
it inherits that position's explicit citations, one hop only. The valid set
actually checked during verification is the claim's direct citations
unioned with the inherited ones. A sliding-window baseline and set-overlap
scores support comparing inheritance strategies against gold annotations.
"""

from __future__ import annotations

from dataclasses import dataclass

from .claims import Claim, ClaimSet, ClaimType
from .document import PositionId, ReportDocument


class EmptyGoldError(ValueError):
    """Evidence-set comparison requires a non-empty gold set."""


@dataclass(frozen=True)
class EvidenceResolution:
    claim_id: tuple[PositionId, int]
    inherited_citations: frozenset[int]
    valid_citations: frozenset[int]
    inheritance_source: PositionId | None = None
    dangling_evidence_position: bool = False

    def to_dict(self) -> dict:
        return {
            "position": self.claim_id[0].render(),
            "index": self.claim_id[1],
            "inherited_citations": sorted(self.inherited_citations),
            "valid_citations": sorted(self.valid_citations),
            "inheritance_source": self.inheritance_source.render() if self.inheritance_source else None,
            "dangling_evidence_position": self.dangling_evidence_position,
        }


@dataclass(frozen=True)
class EvidenceSetScore:
    jaccard: float
    precision: float
    recall: float


def resolve_valid_citations(
    claim: Claim,
    claims_by_position: dict[PositionId, list[Claim]],
    doc: ReportDocument,
    transitive: bool = False,
) -> EvidenceResolution:
    """One-hop inheritance per the piecewise definition.

    Class B/C claims inherit the explicit citations found at their
    evidence_position: the direct citations of claims there if any exist,
    otherwise the sentence's own markers. Everything else inherits nothing.
    A B/C claim pointing at a position with neither claim nor sentence is
    flagged dangling, never fatal. ``transitive`` switches to closure over
    the inheritance chain; off by default because the formal definition is
    one hop.
    """
    direct = frozenset(claim.direct_citations)
    if claim.claim_class not in (ClaimType.B, ClaimType.C) or claim.evidence_position is None:
        return EvidenceResolution(claim_id=claim.claim_id, inherited_citations=frozenset(), valid_citations=direct)

    inherited, source, dangling = _citations_at(
        claim.evidence_position, claims_by_position, doc, transitive, _seen=frozenset({claim.position})
    )
    return EvidenceResolution(
        claim_id=claim.claim_id,
        inherited_citations=inherited,
        valid_citations=direct | inherited,
        inheritance_source=source,
        dangling_evidence_position=dangling,
    )


def _citations_at(
    position: PositionId,
    claims_by_position: dict[PositionId, list[Claim]],
    doc: ReportDocument,
    transitive: bool,
    _seen: frozenset[PositionId],
) -> tuple[frozenset[int], PositionId | None, bool]:
    target_claims = claims_by_position.get(position)
    if target_claims:
        cited = frozenset(k for c in target_claims for k in c.direct_citations)
        if transitive and position not in _seen:
            for c in target_claims:
                if c.claim_class in (ClaimType.B, ClaimType.C) and c.evidence_position is not None:
                    more, _, _ = _citations_at(
                        c.evidence_position, claims_by_position, doc, transitive, _seen | {position}
                    )
                    cited |= more
        return cited, position, False
    unit = doc.lookup(position)
    if unit is not None:
        return frozenset(unit.citations), position, False
    return frozenset(), None, True


def resolve_all(claims: ClaimSet, doc: ReportDocument, transitive: bool = False) -> list[EvidenceResolution]:
    by_position = claims.by_position()
    return [resolve_valid_citations(claim, by_position, doc, transitive) for claim in claims]


def sliding_window_citations(doc: ReportDocument, claim: Claim, k: int) -> frozenset[int]:
    """Baseline: union of explicit citations within ordinal distance <= k//2.

    Distance counts sentences in global document order, ignoring block
    boundaries; the window clamps at document bounds.
    """
    if k < 1:
        raise ValueError(f"window size must be >= 1, got {k}")
    ordinals = {u.position: i for i, u in enumerate(doc.sentences)}
    if claim.position not in ordinals:
        raise ValueError(f"claim position {claim.position} not in document")
    center = ordinals[claim.position]
    half = k // 2
    lo = max(0, center - half)
    hi = min(len(doc.sentences) - 1, center + half)
    cited: set[int] = set()
    for unit in doc.sentences[lo : hi + 1]:
        cited.update(unit.citations)
    return frozenset(cited)


def compare_evidence_sets(predicted: frozenset[int] | set[int], gold: frozenset[int] | set[int]) -> EvidenceSetScore:
    """Jaccard / precision / recall; empty prediction scores 0 precision."""
    if not gold:
        raise EmptyGoldError("gold citation set is empty")
    predicted = frozenset(predicted)
    gold = frozenset(gold)
    overlap = len(predicted & gold)
    union = len(predicted | gold)
    return EvidenceSetScore(
        jaccard=overlap / union,
        precision=overlap / len(predicted) if predicted else 0.0,
        recall=overlap / len(gold),
    )


def mean_evidence_scores(scores: list[EvidenceSetScore]) -> EvidenceSetScore:
    """Corpus aggregation: unweighted mean of per-claim scores."""
    if not scores:
        raise EmptyGoldError("no scores to aggregate")
    n = len(scores)
    return EvidenceSetScore(
        jaccard=sum(s.jaccard for s in scores) / n,
        precision=sum(s.precision for s in scores) / n,
        recall=sum(s.recall for s in scores) / n,
    )
