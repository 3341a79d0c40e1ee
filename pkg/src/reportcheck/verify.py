"""Grouped claim verification and fair-use / direct-quote detection.

Claims citing the same source are verified together in one model call,
which is where the order-of-magnitude cost reduction comes from. The
verdict is binary: a claim is Supported when at least one of its valid
citations' sources explicitly backs it, NotSupported otherwise (including
every flavor of unverifiable evidence).
"""

from __future__ import annotations

import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

from .backtrack import EvidenceResolution
from .claims import Claim, ClaimSet, ClaimType
from .document import PositionId, ReportDocument, split_sentences
from .evidence import Chunk, ContextSelection, FetchedSource, chunk_source, select_context, tokenize_words
from .gateway import (
    Gateway,
    MalformedOutputError,
    ModelRequest,
    parse_model_json,
    reask_request,
)

VERIFICATION_PROMPT_VERSION = "verify-v1"
FAIR_USE_PROMPT_VERSION = "fairuse-v1"
DEFAULT_GROUP_SIZE = 20
DEFAULT_TAU = 0.9
DEFAULT_REASK_BUDGET = 2

VERIFICATION_SYSTEM_TEXT = (
    "You are a meticulous fact verifier. For each claim and each citation, decide whether "
    "the given context supports the claim.\n"
    '- "Supported": the cited context clearly and directly includes the core facts of the claim '
    "(figures, causality, definitions), matching its intent.\n"
    '- "NotSupported": the basis for the claim cannot be found in the context, the context is '
    "irrelevant, or the content cannot be verified."
)

FAIR_USE_SYSTEM_TEXT = (
    "You check direct quotations for fair-use compliance: proper quotation marking, source "
    "attribution, and minimal extent. Answer in JSON."
)

_QUOTE_OPEN = "\"'“‘«"
_QUOTE_CLOSE = "\"'”’»"


class Verdict(str, Enum):
    SUPPORTED = "Supported"
    NOT_SUPPORTED = "NotSupported"


class GroupVerificationError(Exception):
    """A verification group failed beyond its retry budget."""


@dataclass(frozen=True)
class VerificationRecord:
    claim_id: tuple[PositionId, int]
    verdict: Verdict
    rationale: str
    citations_checked: frozenset[int]
    per_citation_verdicts: dict[int, Verdict]
    context_hashes: tuple[str, ...] = ()
    cost_usd: float = 0.0

    def to_dict(self) -> dict:
        return {
            "position": self.claim_id[0].render(),
            "index": self.claim_id[1],
            "verdict": self.verdict.value,
            "rationale": self.rationale,
            "citations_checked": sorted(self.citations_checked),
            "per_citation_verdicts": {str(k): v.value for k, v in sorted(self.per_citation_verdicts.items())},
            "context_hashes": list(self.context_hashes),
            "cost_usd": self.cost_usd,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "VerificationRecord":
        return cls(
            claim_id=(PositionId.parse(payload["position"]), int(payload["index"])),
            verdict=Verdict(payload["verdict"]),
            rationale=payload["rationale"],
            citations_checked=frozenset(int(k) for k in payload["citations_checked"]),
            per_citation_verdicts={int(k): Verdict(v) for k, v in payload["per_citation_verdicts"].items()},
            context_hashes=tuple(payload.get("context_hashes", ())),
            cost_usd=float(payload.get("cost_usd", 0.0)),
        )


@dataclass(frozen=True)
class VerificationGroup:
    group_index: int
    claims: tuple[Claim, ...]
    shared_sources: frozenset[int]


@dataclass(frozen=True)
class DetectedQuote:
    position: PositionId
    source_key: int
    similarity: float
    properly_marked: bool
    compliant: bool

    def to_dict(self) -> dict:
        return {
            "position": self.position.render(),
            "source_key": self.source_key,
            "similarity": self.similarity,
            "properly_marked": self.properly_marked,
            "compliant": self.compliant,
        }


@dataclass(frozen=True)
class FairUseReport:
    detected_quotes: tuple[DetectedQuote, ...]
    noncompliant_ratio: float
    score: float

    def to_dict(self) -> dict:
        return {
            "detected_quotes": [q.to_dict() for q in self.detected_quotes],
            "noncompliant_ratio": self.noncompliant_ratio,
            "score": self.score,
        }


def _primary_source(resolution: EvidenceResolution) -> int:
    return min(resolution.valid_citations)


def group_claims(
    claims: ClaimSet | list[Claim],
    resolutions: dict[tuple[PositionId, int], EvidenceResolution],
    group_size: int = DEFAULT_GROUP_SIZE,
) -> list[VerificationGroup]:
    """Pack eligible claims (A/B/C with citations) into groups of <= group_size.

    Claims are bucketed by the smallest key in their valid citation set so
    same-source claims verify together; buckets stream into groups first-fit
    in document order, so fragments merge instead of costing extra calls.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    eligible = [
        c
        for c in claims
        if c.claim_class.verifiable and resolutions.get(c.claim_id) and resolutions[c.claim_id].valid_citations
    ]
    buckets: dict[int, list[Claim]] = {}
    first_seen: dict[int, int] = {}
    for order, claim in enumerate(eligible):
        source = _primary_source(resolutions[claim.claim_id])
        buckets.setdefault(source, []).append(claim)
        first_seen.setdefault(source, order)

    groups: list[VerificationGroup] = []
    current: list[Claim] = []

    def flush() -> None:
        if current:
            members = tuple(sorted(current, key=lambda c: (c.position, c.index)))
            sources = frozenset(_primary_source(resolutions[c.claim_id]) for c in members)
            groups.append(VerificationGroup(group_index=len(groups) + 1, claims=members, shared_sources=sources))
            current.clear()

    for source in sorted(buckets, key=lambda s: first_seen[s]):
        for claim in buckets[source]:
            current.append(claim)
            if len(current) == group_size:
                flush()
    flush()
    return groups


def build_auto_records(
    claims: ClaimSet | list[Claim],
    resolutions: dict[tuple[PositionId, int], EvidenceResolution],
) -> list[VerificationRecord]:
    """Records that need no model call: F claims and A-C claims with no
    resolvable citations are NotSupported by definition; D/E are skipped."""
    records = []
    for claim in claims:
        if claim.claim_class is ClaimType.F:
            records.append(
                VerificationRecord(
                    claim_id=claim.claim_id,
                    verdict=Verdict.NOT_SUPPORTED,
                    rationale="no_source",
                    citations_checked=frozenset(),
                    per_citation_verdicts={},
                )
            )
        elif claim.claim_class.verifiable:
            resolution = resolutions.get(claim.claim_id)
            if resolution is None or not resolution.valid_citations:
                records.append(
                    VerificationRecord(
                        claim_id=claim.claim_id,
                        verdict=Verdict.NOT_SUPPORTED,
                        rationale="no valid citations resolved",
                        citations_checked=frozenset(),
                        per_citation_verdicts={},
                    )
                )
    return records


def build_group_request(
    group: VerificationGroup,
    contexts: dict[tuple[PositionId, int], ContextSelection],
    resolutions: dict[tuple[PositionId, int], EvidenceResolution],
    model_id: str,
) -> ModelRequest:
    blocks = []
    for claim in group.claims:
        citations = sorted(resolutions[claim.claim_id].valid_citations)
        context = contexts.get(claim.claim_id)
        context_text = context.context_text() if context else ""
        blocks.append(
            f"## Claim {claim.claim_id_str()}\n"
            f"Claim: {claim.claim_text}\n"
            f"Citations to check: {citations}\n"
            f"Context:\n{context_text}"
        )
    user_text = (
        "# Claims to Verify\n"
        + "\n\n".join(blocks)
        + "\n\n# Output\n"
        'Return only JSON: {"results": [{"position": "Lx.Sy", "index": 1, '
        '"citation_verdicts": {"<citation key>": "Supported" | "NotSupported"}, '
        '"rationale": "..."}]}\n'
        "Give a verdict for every listed citation of every claim."
    )
    return ModelRequest(
        system_text=VERIFICATION_SYSTEM_TEXT,
        user_text=user_text,
        model_id=model_id,
        expected_schema=VERIFICATION_PROMPT_VERSION,
    )


def _parse_group_response(
    text: str,
    expected: dict[tuple[PositionId, int], frozenset[int]],
) -> dict[tuple[PositionId, int], tuple[dict[int, Verdict], str]]:
    payload = parse_model_json(text)
    if not isinstance(payload, dict) or not isinstance(payload.get("results"), list):
        raise MalformedOutputError('expected an object with a "results" array')
    out: dict[tuple[PositionId, int], tuple[dict[int, Verdict], str]] = {}
    for row in payload["results"]:
        try:
            claim_id = (PositionId.parse(str(row["position"])), int(row["index"]))
            raw_verdicts = row["citation_verdicts"]
            verdicts = {int(k): Verdict(v) for k, v in raw_verdicts.items()}
            rationale = str(row.get("rationale", ""))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedOutputError(f"bad result row {row!r}: {exc}") from exc
        if claim_id not in expected:
            raise MalformedOutputError(f"verdict for unknown claim {claim_id[0].render()}#{claim_id[1]}")
        missing = expected[claim_id] - set(verdicts)
        if missing:
            raise MalformedOutputError(
                f"claim {claim_id[0].render()}#{claim_id[1]} missing verdicts for citations {sorted(missing)}"
            )
        out[claim_id] = (verdicts, rationale)
    absent = set(expected) - set(out)
    if absent:
        names = ", ".join(f"{p.render()}#{i}" for p, i in sorted(absent))
        raise MalformedOutputError(f"no verdicts for claims: {names}")
    return out


def verify_group(
    group: VerificationGroup,
    contexts: dict[tuple[PositionId, int], ContextSelection],
    resolutions: dict[tuple[PositionId, int], EvidenceResolution],
    gw: Gateway,
    model_id: str,
    reask_budget: int = DEFAULT_REASK_BUDGET,
) -> list[VerificationRecord]:
    """One model call for the whole group; empty-context claims skip the model."""
    records: list[VerificationRecord] = []
    callable_claims: list[Claim] = []
    for claim in group.claims:
        context = contexts.get(claim.claim_id)
        if context is None or not context.selected:
            records.append(
                VerificationRecord(
                    claim_id=claim.claim_id,
                    verdict=Verdict.NOT_SUPPORTED,
                    rationale="unverifiable source",
                    citations_checked=resolutions[claim.claim_id].valid_citations,
                    per_citation_verdicts={
                        k: Verdict.NOT_SUPPORTED for k in resolutions[claim.claim_id].valid_citations
                    },
                )
            )
        else:
            callable_claims.append(claim)

    if callable_claims:
        subgroup = VerificationGroup(
            group_index=group.group_index, claims=tuple(callable_claims), shared_sources=group.shared_sources
        )
        expected = {c.claim_id: resolutions[c.claim_id].valid_citations for c in callable_claims}
        request = build_group_request(subgroup, contexts, resolutions, model_id)
        last_error: Exception | None = None
        parsed = None
        response = None
        for attempt in range(reask_budget + 1):
            response = gw.complete(request, stage="verify")
            try:
                parsed = _parse_group_response(response.text, expected)
                break
            except MalformedOutputError as exc:
                last_error = exc
                request = reask_request(
                    request,
                    f"Your previous output was rejected: {exc}. Re-emit the full JSON object, fixing this.",
                    attempt=attempt + 1,
                )
        if parsed is None:
            raise GroupVerificationError(
                f"group {group.group_index}: malformed output after {reask_budget} re-asks: {last_error}"
            )
        assert response is not None
        cost_per_claim = response.cost_usd / len(callable_claims)
        for claim in callable_claims:
            verdicts, rationale = parsed[claim.claim_id]
            verdict = Verdict.SUPPORTED if Verdict.SUPPORTED in verdicts.values() else Verdict.NOT_SUPPORTED
            context = contexts[claim.claim_id]
            records.append(
                VerificationRecord(
                    claim_id=claim.claim_id,
                    verdict=verdict,
                    rationale=rationale,
                    citations_checked=frozenset(verdicts),
                    per_citation_verdicts=verdicts,
                    context_hashes=tuple(context.context_hashes()),
                    cost_usd=cost_per_claim,
                )
            )

    records.sort(key=lambda r: r.claim_id)
    return records


def verify_all(
    groups: list[VerificationGroup],
    contexts: dict[tuple[PositionId, int], ContextSelection],
    resolutions: dict[tuple[PositionId, int], EvidenceResolution],
    gw: Gateway,
    model_id: str,
    max_workers: int = 4,
    reask_budget: int = DEFAULT_REASK_BUDGET,
) -> list[VerificationRecord]:
    if not groups:
        return []
    with ThreadPoolExecutor(max_workers=min(max_workers, len(groups))) as pool:
        results = list(
            pool.map(lambda g: verify_group(g, contexts, resolutions, gw, model_id, reask_budget), groups)
        )
    merged = [record for batch in results for record in batch]
    merged.sort(key=lambda r: r.claim_id)
    return merged


# --- direct-quote similarity -------------------------------------------------

def token_multiset_ratio(tokens_a: list[str], tokens_b: list[str]) -> float:
    """Dice coefficient over token multisets; 1.0 iff equal multisets."""
    if not tokens_a and not tokens_b:
        return 1.0
    if not tokens_a or not tokens_b:
        return 0.0
    overlap = sum((Counter(tokens_a) & Counter(tokens_b)).values())
    return 2.0 * overlap / (len(tokens_a) + len(tokens_b))


def contiguous_overlap_ratio(tokens_a: list[str], tokens_b: list[str]) -> float:
    """Longest common contiguous token run / max(len); 1.0 iff identical."""
    if not tokens_a and not tokens_b:
        return 1.0
    if not tokens_a or not tokens_b:
        return 0.0
    best = 0
    previous = [0] * (len(tokens_b) + 1)
    for a in tokens_a:
        current = [0] * (len(tokens_b) + 1)
        for j, b in enumerate(tokens_b, start=1):
            if a == b:
                current[j] = previous[j - 1] + 1
                if current[j] > best:
                    best = current[j]
        previous = current
    return best / max(len(tokens_a), len(tokens_b))


def span_similarity(tokens_a: list[str], tokens_b: list[str]) -> float:
    return max(token_multiset_ratio(tokens_a, tokens_b), contiguous_overlap_ratio(tokens_a, tokens_b))


def _source_sentences(markdown: str) -> list[str]:
    sentences: list[str] = []
    for block in re.split(r"\n\s*\n", markdown):
        block = " ".join(block.split())
        if block:
            sentences.extend(split_sentences(block))
    return sentences


_TRAILING_MARKER_RE = re.compile(r"(\s*\[\d+(?:\s*[,–-]\s*\d+)*\])+\s*$")
_ANY_MARKER_RE = re.compile(r"\[\d+(?:\s*[,–-]\s*\d+)*\]")


def _is_quote_marked(text: str) -> bool:
    stripped = _TRAILING_MARKER_RE.sub("", text.strip()).rstrip(".!?,;")
    return len(stripped) >= 2 and stripped[0] in _QUOTE_OPEN and stripped[-1] in _QUOTE_CLOSE


def _escalate_fair_use(
    sentence_text: str,
    source: FetchedSource,
    chunks: list[Chunk],
    gw: Gateway,
    model_id: str,
) -> bool:
    context = select_context(sentence_text, chunks, n=3)
    request = ModelRequest(
        system_text=FAIR_USE_SYSTEM_TEXT,
        user_text=(
            f"# Report sentence\n{sentence_text}\n\n"
            f"# Source [{source.key}] excerpt\n{context.context_text()}\n\n"
            "Is this direct quotation compliant with fair-use guidelines "
            "(clear attribution and minimal extent)? "
            'Return only JSON: {"compliant": true | false, "reason": "..."}'
        ),
        model_id=model_id,
        expected_schema=FAIR_USE_PROMPT_VERSION,
    )
    response = gw.complete(request, stage="fair_use")
    try:
        payload = parse_model_json(response.text)
        return bool(payload["compliant"])
    except (MalformedOutputError, KeyError, TypeError):
        return False


def detect_direct_quotes(
    doc: ReportDocument,
    sources: list[FetchedSource],
    tau: float = DEFAULT_TAU,
    gw: Gateway | None = None,
    model_id: str = "",
) -> FairUseReport:
    """Find report sentences lifted (near-)verbatim from fetched sources.

    similarity(sentence, source) = max over source sentences of
    max(token-multiset ratio, contiguous-overlap ratio); >= tau is a direct
    quote. A quote is compliant when it is quote-marked or in a blockquote
    AND the sentence cites that source; otherwise it is escalated to the
    model when a gateway is given, and counted non-compliant when not.
    The score deducts from 10 by the non-compliant share of quoting sentences.
    """
    ok_sources = [s for s in sources if s.ok and s.content_markdown.strip()]
    if not ok_sources:
        return FairUseReport(detected_quotes=(), noncompliant_ratio=0.0, score=10.0)

    source_tokens: dict[int, list[list[str]]] = {}
    source_chunks: dict[int, list[Chunk]] = {}
    for source in ok_sources:
        source_tokens[source.key] = [
            tokens for tokens in (tokenize_words(s) for s in _source_sentences(source.content_markdown)) if tokens
        ]

    quotes: list[DetectedQuote] = []
    compliant_positions: set[PositionId] = set()
    detected_positions: set[PositionId] = set()

    for unit in doc.sentences:
        # citation markers are attribution metadata, not quoted content
        unit_tokens = tokenize_words(_ANY_MARKER_RE.sub(" ", unit.text))
        if not unit_tokens:
            continue
        marked = _is_quote_marked(unit.text) or unit.block_kind.value == "blockquote"
        for source in ok_sources:
            best = 0.0
            for candidate in source_tokens[source.key]:
                score = span_similarity(unit_tokens, candidate)
                if score > best:
                    best = score
                    if best == 1.0:
                        break
            if best >= tau:
                cited = source.key in unit.citations
                if marked and cited:
                    compliant = True
                elif gw is not None:
                    if source.key not in source_chunks:
                        source_chunks[source.key] = chunk_source(source)
                    compliant = _escalate_fair_use(unit.text, source, source_chunks[source.key], gw, model_id)
                else:
                    compliant = False
                quotes.append(
                    DetectedQuote(
                        position=unit.position,
                        source_key=source.key,
                        similarity=best,
                        properly_marked=marked,
                        compliant=compliant,
                    )
                )
                detected_positions.add(unit.position)
                if compliant:
                    compliant_positions.add(unit.position)

    if detected_positions:
        noncompliant = len(detected_positions - compliant_positions)
        ratio = noncompliant / len(detected_positions)
    else:
        ratio = 0.0
    return FairUseReport(detected_quotes=tuple(quotes), noncompliant_ratio=ratio, score=10.0 * (1.0 - ratio))
