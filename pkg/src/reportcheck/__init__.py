"""reportcheck: claim-level verification and rubric scoring for research reports."""

from .backtrack import compare_evidence_sets, resolve_valid_citations, sliding_window_citations
from .claims import Claim, ClaimSet, ClaimType, merge_batches, plan_batches
from .document import PositionId, ReportDocument, parse_citations, segment_report
from .evidence import chunk_source, fetch_reference, select_context
from .gateway import Gateway, ModelRequest, ModelResponse, ReplayStore
from .metrics import compute_integrity, compute_sufficiency, normalize_to_dimensions
from .rubric import aggregate, judge_report, load_taxonomy
from .verify import detect_direct_quotes, group_claims, verify_group

__version__ = "0.1.0"

__all__ = [
    "Claim",
    "ClaimSet",
    "ClaimType",
    "Gateway",
    "ModelRequest",
    "ModelResponse",
    "PositionId",
    "ReplayStore",
    "ReportDocument",
    "aggregate",
    "chunk_source",
    "compare_evidence_sets",
    "compute_integrity",
    "compute_sufficiency",
    "detect_direct_quotes",
    "fetch_reference",
    "group_claims",
    "judge_report",
    "load_taxonomy",
    "merge_batches",
    "normalize_to_dimensions",
    "parse_citations",
    "plan_batches",
    "resolve_valid_citations",
    "segment_report",
    "select_context",
    "sliding_window_citations",
    "verify_group",
    "__version__",
]
