"""Integrity and sufficiency metrics over claims, verdicts and sources.

All ratios are exact set/count arithmetic; a zero denominator yields None
(flagged undefined) and the value is excluded from dimension aggregation
rather than defaulted. The two information dimension scores are linear
normalizations of these metrics onto a 1-10 scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from urllib.parse import urlparse

from .claims import ClaimSet, ClaimType
from .document import ReportDocument
from .evidence import FetchedSource
from .verify import VerificationRecord, Verdict


@dataclass(frozen=True)
class IntegrityMetrics:
    ext_claim_accuracy: float | None
    citation_accuracy: float | None
    reference_accuracy: float | None
    reproducibility: float | None
    reliability: float | None
    diversity_cv: float | None

    def to_dict(self) -> dict:
        return {
            "ext_claim_accuracy": self.ext_claim_accuracy,
            "citation_accuracy": self.citation_accuracy,
            "reference_accuracy": self.reference_accuracy,
            "reproducibility": self.reproducibility,
            "reliability": self.reliability,
            "diversity_cv": self.diversity_cv,
        }


@dataclass(frozen=True)
class SufficiencyMetrics:
    verifiable_ratio: float | None
    info_qty: int
    cit_qty: int
    ref_qty: int

    def to_dict(self) -> dict:
        return {
            "verifiable_ratio": self.verifiable_ratio,
            "info_qty": self.info_qty,
            "cit_qty": self.cit_qty,
            "ref_qty": self.ref_qty,
        }


@dataclass(frozen=True)
class NormalizationConfig:
    """Saturation thresholds for count metrics and the CV inversion cap."""

    info_qty_threshold: float = 50.0
    cit_qty_threshold: float = 40.0
    ref_qty_threshold: float = 15.0
    cv_cap: float = 2.0

    def __post_init__(self) -> None:
        for name in ("info_qty_threshold", "cit_qty_threshold", "ref_qty_threshold", "cv_cap"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "info_qty_threshold": self.info_qty_threshold,
            "cit_qty_threshold": self.cit_qty_threshold,
            "ref_qty_threshold": self.ref_qty_threshold,
            "cv_cap": self.cv_cap,
        }


@dataclass(frozen=True)
class InfoDimensionScores:
    information_integrity: float | None
    information_sufficiency: float | None
    components: dict[str, float | None] = field(compare=False)

    def to_dict(self) -> dict:
        return {
            "information_integrity": self.information_integrity,
            "information_sufficiency": self.information_sufficiency,
            "components": dict(self.components),
        }


def _supported_ids(records: list[VerificationRecord]) -> set:
    return {r.claim_id for r in records if r.verdict is Verdict.SUPPORTED}


def _supported_reference_keys(records: list[VerificationRecord]) -> set[int]:
    keys: set[int] = set()
    for record in records:
        for key, verdict in record.per_citation_verdicts.items():
            if verdict is Verdict.SUPPORTED:
                keys.add(key)
    return keys


def _used_reference_keys(records: list[VerificationRecord]) -> set[int]:
    used: set[int] = set()
    for record in records:
        used.update(record.citations_checked)
    return used


def _domain(url: str) -> str:
    return urlparse(url).netloc.lower()


def compute_integrity(
    claims: ClaimSet,
    records: list[VerificationRecord],
    doc: ReportDocument,
    sources: list[FetchedSource],
    denylist: tuple[str, ...] = (),
) -> IntegrityMetrics:
    """The six integrity ratios; see each metric's inline definition.

    "Shown" references are the document's reference list; "used" references
    are those appearing in any claim's valid citation set. The diversity CV
    uses the population standard deviation of per-used-reference citation
    counts.
    """
    supported = _supported_ids(records)
    abc = claims.of_classes(ClaimType.A, ClaimType.B, ClaimType.C)

    # Ext. Acc: Supported share of claims requiring external evidence.
    ext = sum(1 for c in abc if c.claim_id in supported) / len(abc) if abc else None

    # Cit. Acc: Supported share of (claim, citation) verdict instances.
    total_instances = sum(len(r.per_citation_verdicts) for r in records)
    supported_instances = sum(
        1 for r in records for v in r.per_citation_verdicts.values() if v is Verdict.SUPPORTED
    )
    cit = supported_instances / total_instances if total_instances else None

    # Ref. Acc: supported unique references per unique reference shown.
    shown = set(doc.references)
    supported_refs = _supported_reference_keys(records)
    ref = len(supported_refs & shown) / len(shown) if shown else None

    used = _used_reference_keys(records)
    ok_keys = {s.key for s in sources if s.ok}
    source_by_key = {s.key: s for s in sources}

    # Reproducibility: 1 - error share among used references.
    if used:
        errors = sum(1 for key in used if key not in ok_keys)
        repro = 1.0 - errors / len(used)
    else:
        repro = None

    # Reliability: reliable-and-supported share among used references.
    if used:
        def reliable(key: int) -> bool:
            source = source_by_key.get(key)
            if source is None or not source.ok:
                return False
            return _domain(source.url) not in denylist

        good = sum(1 for key in used if reliable(key) and key in supported_refs)
        reli = good / len(used)
    else:
        reli = None

    # Diversity: CV of citation counts over used references (lower = more even).
    if used:
        counts = [sum(1 for r in records if key in r.citations_checked) for key in sorted(used)]
        mean = sum(counts) / len(counts)
        variance = sum((c - mean) ** 2 for c in counts) / len(counts)
        cv = math.sqrt(variance) / mean if mean > 0 else None
    else:
        cv = None

    return IntegrityMetrics(
        ext_claim_accuracy=ext,
        citation_accuracy=cit,
        reference_accuracy=ref,
        reproducibility=repro,
        reliability=reli,
        diversity_cv=cv,
    )


def compute_sufficiency(
    claims: ClaimSet,
    records: list[VerificationRecord],
    doc: ReportDocument,
) -> SufficiencyMetrics:
    supported = _supported_ids(records)
    abc = claims.of_classes(ClaimType.A, ClaimType.B, ClaimType.C)
    ratio = len(abc) / len(claims) if len(claims) else None
    info_qty = sum(1 for c in abc if c.claim_id in supported)
    cit_qty = sum(1 for r in records for v in r.per_citation_verdicts.values() if v is Verdict.SUPPORTED)
    ref_qty = len(_supported_reference_keys(records))
    return SufficiencyMetrics(verifiable_ratio=ratio, info_qty=info_qty, cit_qty=cit_qty, ref_qty=ref_qty)


def _ratio_subscore(value: float | None) -> float | None:
    return None if value is None else 1.0 + 9.0 * value


def _count_subscore(count: int, threshold: float) -> float:
    return 1.0 + 9.0 * min(count / threshold, 1.0)


def _diversity_subscore(cv: float | None, cap: float) -> float | None:
    if cv is None:
        return None
    return 1.0 + 9.0 * (1.0 - min(cv / cap, 1.0))


def normalize_to_dimensions(
    integrity: IntegrityMetrics,
    sufficiency: SufficiencyMetrics,
    config: NormalizationConfig = NormalizationConfig(),
) -> InfoDimensionScores:
    """Map raw metrics onto [1, 10] sub-scores and average per dimension.

    Ratios map linearly, counts saturate at their thresholds, and the CV is
    inverted (0 is best). Undefined metrics are excluded from the means.
    """
    components: dict[str, float | None] = {
        "ext_claim_accuracy": _ratio_subscore(integrity.ext_claim_accuracy),
        "citation_accuracy": _ratio_subscore(integrity.citation_accuracy),
        "reference_accuracy": _ratio_subscore(integrity.reference_accuracy),
        "reproducibility": _ratio_subscore(integrity.reproducibility),
        "reliability": _ratio_subscore(integrity.reliability),
        "diversity": _diversity_subscore(integrity.diversity_cv, config.cv_cap),
        "verifiable_ratio": _ratio_subscore(sufficiency.verifiable_ratio),
        "info_qty": _count_subscore(sufficiency.info_qty, config.info_qty_threshold),
        "cit_qty": _count_subscore(sufficiency.cit_qty, config.cit_qty_threshold),
        "ref_qty": _count_subscore(sufficiency.ref_qty, config.ref_qty_threshold),
    }
    integrity_keys = (
        "ext_claim_accuracy",
        "citation_accuracy",
        "reference_accuracy",
        "reproducibility",
        "reliability",
        "diversity",
    )
    sufficiency_keys = ("verifiable_ratio", "info_qty", "cit_qty", "ref_qty")

    def mean_of(keys: tuple[str, ...]) -> float | None:
        defined = [components[k] for k in keys if components[k] is not None]
        return sum(defined) / len(defined) if defined else None

    return InfoDimensionScores(
        information_integrity=mean_of(integrity_keys),
        information_sufficiency=mean_of(sufficiency_keys),
        components=components,
    )
