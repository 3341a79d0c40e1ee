from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from reportcheck.document import segment_report

# Mirrors the annotated mini-report: paragraph 1 ends with a cited result
# (L1.S3), paragraph 2 carries the implicit (B/C) and unsourced (F) claims.
MINI_REPORT = """\
Solar research has accelerated over the past decade. Multi-junction designs are a key research direction. The development of multi-junction solar cells has achieved efficiencies above 45% in laboratories [1].

This dramatic increase is due to the layering of different semiconductor materials. Commercial deployment is expanding concurrently. The enhanced efficiency of these cells will reduce the land area required for solar farms. These new panels are durable enough to withstand a Category 4 hurricane.

## References

[1] https://example.org/solar-efficiency
"""

# Claims the fake extractor emits for the mini-report, one per Table-style row.
MINI_REPORT_CLAIMS = {
    "L1.S3": [
        {
            "index": 1,
            "claim_text": "Multi-junction solar cells achieve efficiencies above 45% in laboratories.",
            "claim_class": "A",
            "direct_citation": [1],
            "evidence_position": None,
        }
    ],
    "L2.S1": [
        {
            "index": 1,
            "claim_text": "The efficiency increase of multi-junction solar cells is due to layering different semiconductor materials.",
            "claim_class": "B",
            "direct_citation": [],
            "evidence_position": "L1.S3",
        }
    ],
    "L2.S3": [
        {
            "index": 1,
            "claim_text": "The enhanced efficiency of multi-junction cells will reduce the land area required for solar farms.",
            "claim_class": "C",
            "direct_citation": [],
            "evidence_position": "L1.S3",
        }
    ],
    "L2.S4": [
        {
            "index": 1,
            "claim_text": "The new solar panels are durable enough to withstand a Category 4 hurricane.",
            "claim_class": "F",
            "direct_citation": [],
            "evidence_position": None,
        }
    ],
}

SOLAR_PAGE = """\
# Record Lab Results

Researchers report a 46.2% lab efficiency for multi-junction cells under concentrated light.

The gain is attributed to stacking semiconductor layers with complementary band gaps, which also shrinks the land footprint of future solar farms.
"""


@pytest.fixture
def mini_report_doc():
    return segment_report(MINI_REPORT)
