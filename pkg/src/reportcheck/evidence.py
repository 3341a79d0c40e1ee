"""Source fetching, chunking and BM25 context selection.

Cited web pages are fetched as markdown (network failures become statuses,
never exceptions), split losslessly into chunks of roughly 1000 whitespace
tokens, and per claim only the top-N BM25-scored chunks are kept,
reassembled in original position order. That filtered context is what the
verifier sees, which is where most of the token-cost savings come from.
"""

from __future__ import annotations

import html
import html.parser
import math
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

from .document import ReferenceEntry
from .jsonio import dumps_canonical, load, sha256_text

DEFAULT_CHUNK_TOKENS = 1000
DEFAULT_TOP_N = 3
DEFAULT_TIMEOUT_S = 20.0
DEFAULT_FETCH_RETRIES = 2

BM25_K1 = 1.2
BM25_B = 0.75

_TOKEN_RE = re.compile(r"\S+")
_WORD_RE = re.compile(r"[a-z0-9]+")
_PARA_GAP_RE = re.compile(r"\n[ \t]*\n")


class NotFetchedError(ValueError):
    """Chunking requires a source with status ok."""


class FetchStatus:
    OK = "ok"
    HTTP_ERROR = "http_error"
    TIMEOUT = "timeout"
    UNREACHABLE = "unreachable"
    NON_TEXT = "non_text"


@dataclass(frozen=True)
class FetchedSource:
    key: int
    url: str
    status: str
    content_markdown: str
    fetched_at: str
    content_hash: str
    http_code: int | None = None

    @property
    def ok(self) -> bool:
        return self.status == FetchStatus.OK

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "url": self.url,
            "status": self.status,
            "http_code": self.http_code,
            "content_markdown": self.content_markdown,
            "fetched_at": self.fetched_at,
            "content_hash": self.content_hash,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "FetchedSource":
        return cls(
            key=int(payload["key"]),
            url=payload["url"],
            status=payload["status"],
            content_markdown=payload["content_markdown"],
            fetched_at=payload["fetched_at"],
            content_hash=payload["content_hash"],
            http_code=payload.get("http_code"),
        )


@dataclass(frozen=True)
class Chunk:
    source_key: int
    chunk_index: int
    text: str
    token_count: int

    @property
    def chunk_id(self) -> tuple[int, int]:
        return (self.source_key, self.chunk_index)


@dataclass(frozen=True)
class ContextSelection:
    claim_id: tuple | None
    selected: tuple[Chunk, ...]
    scores: dict[tuple[int, int], float] = field(compare=False)
    budget_n: int | None = None

    def context_text(self) -> str:
        return "\n\n".join(chunk.text for chunk in self.selected)

    def context_hashes(self) -> list[str]:
        return [sha256_text(chunk.text) for chunk in self.selected]


class _TextExtractor(html.parser.HTMLParser):
    """Built-in HTML-to-markdown fallback: headings, list bullets, plain text."""

    _SKIP = {"script", "style", "noscript"}
    _BLOCK = {"p", "div", "section", "article", "br", "tr", "table", "ul", "ol", "blockquote"}

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag, attrs):
        if tag in self._SKIP:
            self._skip_depth += 1
        elif tag in ("h1", "h2", "h3", "h4", "h5", "h6"):
            self.parts.append("\n\n" + "#" * int(tag[1]) + " ")
        elif tag == "li":
            self.parts.append("\n- ")
        elif tag in self._BLOCK:
            self.parts.append("\n\n")

    def handle_endtag(self, tag):
        if tag in self._SKIP and self._skip_depth:
            self._skip_depth -= 1
        elif tag in self._BLOCK or tag.startswith("h"):
            self.parts.append("\n")

    def handle_data(self, data):
        if not self._skip_depth:
            self.parts.append(data)


def html_to_markdown(html_text: str) -> str:
    parser = _TextExtractor()
    try:
        parser.feed(html_text)
        parser.close()
    except Exception:
        # tag soup: fall back to a bare strip
        text = re.sub(r"<[^>]+>", " ", html_text)
        return html.unescape(re.sub(r"[ \t]+", " ", text)).strip()
    text = "".join(parser.parts)
    text = re.sub(r"[ \t]+", " ", text)
    text = re.sub(r"\n{3,}", "\n\n", text)
    return text.strip()


# transport(url, timeout_s) -> (status_code, content_type, body)
FetchTransport = Callable[[str, float], tuple[int, str, str]]


class FetchTimeout(Exception):
    pass


class FetchUnreachable(Exception):
    pass


def requests_transport(url: str, timeout_s: float) -> tuple[int, str, str]:
    import requests

    try:
        resp = requests.get(url, timeout=timeout_s, headers={"User-Agent": "reportcheck/0.1"})
    except requests.Timeout as exc:
        raise FetchTimeout(str(exc)) from exc
    except requests.RequestException as exc:
        raise FetchUnreachable(str(exc)) from exc
    return resp.status_code, resp.headers.get("Content-Type", ""), resp.text


def endpoint_converter(endpoint: str, timeout_s: float = 30.0) -> Callable[[str], str]:
    """Conversion-service alternative to the built-in tag stripper.

    POSTs the raw HTML to the endpoint and uses the response body as
    markdown; any service failure falls back to the built-in converter so a
    flaky converter never fails a fetch.
    """
    import requests

    def convert(html_text: str) -> str:
        try:
            resp = requests.post(endpoint, data=html_text.encode("utf-8"), timeout=timeout_s)
            if resp.status_code < 400 and resp.text.strip():
                return resp.text
        except requests.RequestException:
            pass
        return html_to_markdown(html_text)

    return convert


class SourceCache:
    """Content-addressed fetch cache under the run directory.

    Files are keyed by sha256(url); the fetch date is stored inside. Live
    runs treat an entry from another UTC day as stale; offline runs accept
    any stored entry so replays are day-independent.
    """

    def __init__(self, cache_dir: Path):
        self.cache_dir = Path(cache_dir)
        self._lock = threading.Lock()

    def _path(self, url: str) -> Path:
        return self.cache_dir / f"{sha256_text(url)}.json"

    def get(self, url: str, today: str | None) -> FetchedSource | None:
        path = self._path(url)
        if not path.exists():
            return None
        try:
            payload = load(path)
            source = FetchedSource.from_dict(payload["source"])
        except Exception:
            return None  # corrupt entry: treat as a miss and refetch
        if today is not None and payload.get("fetched_date") != today:
            return None
        return source

    def put(self, url: str, source: FetchedSource, fetched_date: str) -> None:
        with self._lock:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            self._path(url).write_text(
                dumps_canonical({"url": url, "fetched_date": fetched_date, "source": source.to_dict()}),
                encoding="utf-8",
            )


def _utc_now() -> datetime:
    return datetime.now(timezone.utc)


def fetch_reference(
    entry: ReferenceEntry,
    cache: SourceCache | None = None,
    transport: FetchTransport = requests_transport,
    timeout_s: float = DEFAULT_TIMEOUT_S,
    retries: int = DEFAULT_FETCH_RETRIES,
    offline: bool = False,
    markdown_converter: Callable[[str], str] = html_to_markdown,
    now: Callable[[], datetime] = _utc_now,
) -> FetchedSource:
    """Fetch one reference as markdown; failures become statuses.

    Offline mode never calls the transport: a cache miss is recorded as
    unreachable so a replay run stays fully network-free.
    """
    moment = now()
    today = moment.strftime("%Y-%m-%d")
    fetched_at = moment.strftime("%Y-%m-%dT%H:%M:%SZ")

    def failed(status: str, code: int | None = None) -> FetchedSource:
        return FetchedSource(
            key=entry.key, url=entry.url, status=status, content_markdown="",
            fetched_at=fetched_at, content_hash="", http_code=code,
        )

    if entry.unresolvable or not entry.url:
        return failed(FetchStatus.UNREACHABLE)

    if cache is not None:
        cached = cache.get(entry.url, today=None if offline else today)
        if cached is not None:
            return cached

    if offline:
        return failed(FetchStatus.UNREACHABLE)

    last_status = FetchStatus.UNREACHABLE
    for _ in range(retries + 1):
        try:
            code, content_type, body = transport(entry.url, timeout_s)
        except FetchTimeout:
            last_status = FetchStatus.TIMEOUT
            continue
        except FetchUnreachable:
            last_status = FetchStatus.UNREACHABLE
            continue
        if code >= 400:
            source = failed(FetchStatus.HTTP_ERROR, code)
            break
        content_type = content_type.lower()
        if content_type and not any(t in content_type for t in ("text", "html", "xml", "json", "markdown")):
            source = failed(FetchStatus.NON_TEXT, code)
            break
        markdown = markdown_converter(body) if "html" in content_type else body
        source = FetchedSource(
            key=entry.key, url=entry.url, status=FetchStatus.OK, content_markdown=markdown,
            fetched_at=fetched_at, content_hash=sha256_text(markdown), http_code=code,
        )
        break
    else:
        source = failed(last_status)

    if cache is not None:
        cache.put(entry.url, source, fetched_date=today)
    return source


def tokenize_words(text: str) -> list[str]:
    """BM25/similarity tokens: lowercase alphanumeric runs, no stemming."""
    return _WORD_RE.findall(text.lower())


def chunk_source(source: FetchedSource, target_tokens: int = DEFAULT_CHUNK_TOKENS) -> list[Chunk]:
    """Greedy lossless packing into chunks of <= target_tokens whitespace tokens.

    Chunks are contiguous slices of the original text, so concatenating them
    reproduces the source byte-for-byte. Breaks prefer the last paragraph
    boundary inside the budget; a single over-budget paragraph splits at a
    token boundary.
    """
    if not source.ok:
        raise NotFetchedError(f"source [{source.key}] has status {source.status}")
    if target_tokens < 1:
        raise ValueError("target_tokens must be >= 1")
    text = source.content_markdown
    spans = [m.span() for m in _TOKEN_RE.finditer(text)]
    if not spans:
        return []

    # para_start[i]: token i begins a new paragraph (blank line before it)
    para_start = [False] * len(spans)
    for i in range(1, len(spans)):
        gap = text[spans[i - 1][1] : spans[i][0]]
        para_start[i] = bool(_PARA_GAP_RE.search(gap))

    chunks: list[Chunk] = []
    char_cursor = 0
    token_cursor = 0
    while token_cursor < len(spans):
        remaining = len(spans) - token_cursor
        if remaining <= target_tokens:
            cut_token = len(spans)
            cut_char = len(text)
        else:
            limit = token_cursor + target_tokens
            cut_token = limit
            for j in range(limit, token_cursor, -1):
                if para_start[j]:
                    cut_token = j
                    break
            cut_char = spans[cut_token][0]
        chunks.append(
            Chunk(
                source_key=source.key,
                chunk_index=len(chunks) + 1,
                text=text[char_cursor:cut_char],
                token_count=cut_token - token_cursor,
            )
        )
        char_cursor = cut_char
        token_cursor = cut_token
    return chunks


def bm25_scores(query: str, chunks: Sequence[Chunk], k1: float = BM25_K1, b: float = BM25_B) -> list[float]:
    """BM25 over the candidate chunks, per-corpus IDF.

    idf(t) = ln(1 + (N - n_t + 0.5)/(n_t + 0.5)); repeated query tokens
    contribute once per occurrence.
    """
    docs = [tokenize_words(chunk.text) for chunk in chunks]
    n_docs = len(docs)
    if n_docs == 0:
        return []
    avg_len = sum(len(d) for d in docs) / n_docs
    freqs = [Counter(d) for d in docs]
    df: Counter = Counter()
    for tf in freqs:
        df.update(tf.keys())
    idf = {t: math.log(1 + (n_docs - n + 0.5) / (n + 0.5)) for t, n in df.items()}

    query_tokens = tokenize_words(query)
    scores = []
    for tf, doc in zip(freqs, docs):
        if avg_len == 0:
            scores.append(0.0)
            continue
        norm = k1 * (1 - b + b * len(doc) / avg_len)
        score = 0.0
        for token in query_tokens:
            f = tf.get(token, 0)
            if f:
                score += idf[token] * f * (k1 + 1) / (f + norm)
        scores.append(score)
    return scores


def select_context(
    claim_text: str,
    chunks: Sequence[Chunk],
    n: int | None = DEFAULT_TOP_N,
    claim_id: tuple | None = None,
) -> ContextSelection:
    """Top-n chunks by BM25, ties to the earlier chunk, output in position order.

    ``n=None`` is retrieval-off: every chunk is selected.
    """
    if n is not None and n < 1:
        raise ValueError("n must be >= 1")
    ordered = sorted(chunks, key=lambda c: c.chunk_id)
    scores = bm25_scores(claim_text, ordered)
    score_map = {chunk.chunk_id: score for chunk, score in zip(ordered, scores)}
    if n is None or n >= len(ordered):
        selected = tuple(ordered)
    else:
        ranked = sorted(range(len(ordered)), key=lambda i: (-scores[i], i))
        keep = sorted(ranked[:n])
        selected = tuple(ordered[i] for i in keep)
    return ContextSelection(claim_id=claim_id, selected=selected, scores=score_map, budget_n=n)
