"""Markdown report model: position-addressed sentences, citations, references.

A report is segmented into blocks (markdown units separated by blank lines;
headings, list items, table rows and blockquote lines are their own blocks)
and each block into sentences. A sentence is addressed as ``L{block}.S{sentence}``,
both indices 1-based. The reference list ("References"/"Bibliography" heading)
is parsed into keyed entries and excluded from the sentence stream.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from functools import total_ordering

from .jsonio import sha256_text

_POSITION_RE = re.compile(r"^L(\d+)\.S(\d+)$")

# [1], [1,2], [1-3] / [1–3], and mixtures like [1,4-6]
_MARKER_RE = re.compile(r"\[(\d+(?:\s*[,–-]\s*\d+)*)\]")
_RANGE_RE = re.compile(r"^(\d+)\s*[–-]\s*(\d+)$")
_CODE_SPAN_RE = re.compile(r"`[^`]*`")

_HEADING_RE = re.compile(r"^#{1,6}\s+\S")
_LIST_ITEM_RE = re.compile(r"^\s{0,3}(?:[-*+]|\d{1,3}[.)])\s+\S")
_TABLE_ROW_RE = re.compile(r"^\s*\|.*\|\s*$")
_BLOCKQUOTE_RE = re.compile(r"^\s{0,3}>")
_FENCE_RE = re.compile(r"^\s*(```|~~~)")

_REFERENCE_HEADING_RE = re.compile(r"^#{1,6}\s+(references|bibliography)\s*$", re.IGNORECASE)
_REFERENCE_LINE_RE = re.compile(r"^\s*(?:[-*+]\s+)?\[(\d+)\]:?\s*(.*)$")
_URL_RE = re.compile(r"https?://[^\s<>()\[\]]+")

# Sentence boundary: terminal punctuation, whitespace, then capital or digit.
_BOUNDARY_RE = re.compile(r"[.?!](?=\s+[\"'“\(\[]?[A-Z0-9])")

# A trailing token ending in one of these never closes a sentence.
_ABBREVIATIONS = {
    "e.g.", "i.e.", "al.", "etc.", "cf.", "vs.", "fig.", "figs.", "eq.",
    "eqs.", "no.", "nos.", "sec.", "ch.", "vol.", "p.", "pp.", "dr.",
    "prof.", "mr.", "mrs.", "ms.", "st.", "approx.", "ca.", "resp.",
}


class BlockKind(str, Enum):
    PARAGRAPH = "paragraph"
    HEADING = "heading"
    LIST_ITEM = "list_item"
    TABLE_ROW = "table_row"
    BLOCKQUOTE = "blockquote"


@total_ordering
@dataclass(frozen=True)
class PositionId:
    """1-based (block, sentence) address, rendered as ``Lx.Sy``."""

    block: int
    sentence: int

    def __post_init__(self) -> None:
        if self.block < 1 or self.sentence < 1:
            raise ValueError(f"position indices are 1-based, got ({self.block}, {self.sentence})")

    def render(self) -> str:
        return f"L{self.block}.S{self.sentence}"

    @classmethod
    def parse(cls, text: str) -> "PositionId":
        m = _POSITION_RE.match(text.strip())
        if not m:
            raise ValueError(f"not a position id: {text!r}")
        return cls(int(m.group(1)), int(m.group(2)))

    def __lt__(self, other: "PositionId") -> bool:
        return (self.block, self.sentence) < (other.block, other.sentence)

    def __str__(self) -> str:
        return self.render()


@dataclass(frozen=True)
class SentenceUnit:
    position: PositionId
    text: str
    citations: tuple[int, ...]
    block_kind: BlockKind

    def to_dict(self) -> dict:
        return {
            "position": self.position.render(),
            "text": self.text,
            "citations": list(self.citations),
            "block_kind": self.block_kind.value,
        }


@dataclass(frozen=True)
class ReferenceEntry:
    key: int
    url: str
    title: str | None
    raw_line: str
    unresolvable: bool = False

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "url": self.url,
            "title": self.title,
            "raw_line": self.raw_line,
            "unresolvable": self.unresolvable,
        }


@dataclass(frozen=True)
class ReportDocument:
    sentences: tuple[SentenceUnit, ...]
    references: dict[int, ReferenceEntry]
    source_text: str
    _by_position: dict[PositionId, SentenceUnit] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        index = {unit.position: unit for unit in self.sentences}
        if len(index) != len(self.sentences):
            raise ValueError("duplicate sentence positions")
        object.__setattr__(self, "_by_position", index)

    @property
    def dangling_citations(self) -> frozenset[int]:
        cited = {key for unit in self.sentences for key in unit.citations}
        return frozenset(cited - set(self.references))

    def lookup(self, position: PositionId | str) -> SentenceUnit | None:
        if isinstance(position, str):
            try:
                position = PositionId.parse(position)
            except ValueError:
                return None
        return self._by_position.get(position)

    def paragraph_block_count(self) -> int:
        return len({u.position.block for u in self.sentences if u.block_kind is BlockKind.PARAGRAPH})

    def content_hash(self) -> str:
        return sha256_text(self.source_text)

    def to_dict(self) -> dict:
        return {
            "sentences": [u.to_dict() for u in self.sentences],
            "references": {str(k): v.to_dict() for k, v in sorted(self.references.items())},
            "dangling_citations": sorted(self.dangling_citations),
            "content_hash": self.content_hash(),
        }


def parse_citations(sentence_text: str) -> list[int]:
    """Citation keys from bracketed markers, document order, deduplicated.

    Handles ``[1]``, ``[2,3]`` and ``[5-7]``/``[5–7]`` ranges; markers inside
    inline code spans are ignored, as is any bracket content outside the grammar.
    """
    text = _CODE_SPAN_RE.sub(" ", sentence_text)
    seen: list[int] = []
    for match in _MARKER_RE.finditer(text):
        for part in match.group(1).split(","):
            part = part.strip()
            range_match = _RANGE_RE.match(part)
            if range_match:
                start, end = int(range_match.group(1)), int(range_match.group(2))
                if start > end:
                    continue
                keys = range(start, end + 1)
            elif part.isdigit():
                keys = (int(part),)
            else:
                continue
            for key in keys:
                if key > 0 and key not in seen:
                    seen.append(key)
    return seen


def split_sentences(block_text: str) -> list[str]:
    """Split block text on `.`/`?`/`!` + whitespace + capital/digit.

    Common abbreviations and decimal numbers do not end a sentence (a decimal
    point is never followed by whitespace, so the boundary pattern already
    skips it).
    """
    text = block_text.strip()
    if not text:
        return []
    pieces: list[str] = []
    start = 0
    for match in _BOUNDARY_RE.finditer(text):
        end = match.end()
        trailing = text[start:end].rsplit(None, 1)
        last_token = trailing[-1].lower().lstrip("([{'\"“‘") if trailing else ""
        if any(last_token == abbr or last_token.endswith("." + abbr) for abbr in _ABBREVIATIONS):
            continue
        pieces.append(text[start:end].strip())
        start = end
    rest = text[start:].strip()
    if rest:
        pieces.append(rest)
    return [p for p in pieces if p]


def _classify_line(line: str) -> BlockKind | None:
    if _HEADING_RE.match(line):
        return BlockKind.HEADING
    if _TABLE_ROW_RE.match(line):
        return BlockKind.TABLE_ROW
    if _BLOCKQUOTE_RE.match(line):
        return BlockKind.BLOCKQUOTE
    if _LIST_ITEM_RE.match(line):
        return BlockKind.LIST_ITEM
    return None


def _parse_reference_line(line: str) -> ReferenceEntry | None:
    m = _REFERENCE_LINE_RE.match(line)
    if not m:
        return None
    key = int(m.group(1))
    rest = m.group(2).strip()
    url_match = _URL_RE.search(rest)
    if url_match:
        url = url_match.group(0).rstrip(".,;")
        title = (rest[: url_match.start()] + rest[url_match.end():]).strip(" -–—:,") or None
        return ReferenceEntry(key=key, url=url, title=title, raw_line=line.strip())
    return ReferenceEntry(key=key, url="", title=rest or None, raw_line=line.strip(), unresolvable=True)


def segment_report(markdown: str) -> ReportDocument:
    """Segment markdown into position-addressed sentence units plus references.

    Never fails: empty input gives an empty document, malformed reference
    lines become unresolvable entries.
    """
    lines = markdown.splitlines()

    # Locate the reference section and parse its entries.
    reference_start = None
    for i, line in enumerate(lines):
        if _REFERENCE_HEADING_RE.match(line.strip()):
            reference_start = i
            break
    references: dict[int, ReferenceEntry] = {}
    if reference_start is not None:
        for line in lines[reference_start + 1:]:
            entry = _parse_reference_line(line)
            if entry is not None and entry.key not in references:
                references[entry.key] = entry
        lines = lines[:reference_start]

    # Group body lines into blocks.
    blocks: list[tuple[BlockKind, str]] = []
    paragraph_lines: list[str] = []
    in_fence = False
    fence_lines: list[str] = []

    def flush_paragraph() -> None:
        if paragraph_lines:
            blocks.append((BlockKind.PARAGRAPH, " ".join(paragraph_lines)))
            paragraph_lines.clear()

    for line in lines:
        if _FENCE_RE.match(line):
            if in_fence:
                fence_lines.append(line.strip())
                flush_paragraph()
                blocks.append((BlockKind.PARAGRAPH, "\n".join(fence_lines)))
                fence_lines.clear()
                in_fence = False
            else:
                flush_paragraph()
                in_fence = True
                fence_lines.append(line.strip())
            continue
        if in_fence:
            fence_lines.append(line)
            continue
        stripped = line.strip()
        if not stripped:
            flush_paragraph()
            continue
        kind = _classify_line(line)
        if kind is not None:
            flush_paragraph()
            blocks.append((kind, stripped))
        else:
            paragraph_lines.append(stripped)
    if fence_lines:  # unterminated fence
        flush_paragraph()
        blocks.append((BlockKind.PARAGRAPH, "\n".join(fence_lines)))
    flush_paragraph()

    # Number blocks and split sentences. Non-paragraph blocks are single
    # sentences; fenced code stays one opaque unit with citations suppressed.
    units: list[SentenceUnit] = []
    for block_index, (kind, text) in enumerate(blocks, start=1):
        if kind is BlockKind.PARAGRAPH and not text.startswith(("```", "~~~")):
            sentences = split_sentences(text)
        else:
            sentences = [text]
        for sentence_index, sentence in enumerate(sentences, start=1):
            citations = () if text.startswith(("```", "~~~")) else tuple(parse_citations(sentence))
            units.append(
                SentenceUnit(
                    position=PositionId(block_index, sentence_index),
                    text=sentence,
                    citations=citations,
                    block_kind=kind,
                )
            )

    return ReportDocument(sentences=tuple(units), references=references, source_text=markdown)
