from __future__ import annotations

import random
from datetime import datetime, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fakes import FakeWeb
from oracles import bm25_rank_oracle
from reportcheck.document import ReferenceEntry
from reportcheck.evidence import (
    Chunk,
    FetchedSource,
    FetchStatus,
    NotFetchedError,
    SourceCache,
    chunk_source,
    fetch_reference,
    html_to_markdown,
    select_context,
    tokenize_words,
)


def _source(text, key=1):
    return FetchedSource(
        key=key, url=f"https://example.org/{key}", status=FetchStatus.OK,
        content_markdown=text, fetched_at="2026-01-01T00:00:00Z", content_hash="h",
    )


def _entry(key=1, url="https://example.org/page"):
    return ReferenceEntry(key=key, url=url, title=None, raw_line=f"[{key}] {url}")


def _fixed_now():
    return datetime(2026, 1, 2, tzinfo=timezone.utc)


class TestFetchReference:
    def test_success_converts_html(self, tmp_path):
        web = FakeWeb({"https://example.org/page": (200, "text/html", "<h1>Title</h1><p>Body text.</p>")})
        source = fetch_reference(_entry(), cache=SourceCache(tmp_path), transport=web, now=_fixed_now)
        assert source.ok
        assert "# Title" in source.content_markdown
        assert "Body text." in source.content_markdown
        assert source.content_hash

    def test_cache_hit_skips_network(self, tmp_path):
        web = FakeWeb({"https://example.org/page": (200, "text/plain", "cached content")})
        cache = SourceCache(tmp_path)
        first = fetch_reference(_entry(), cache=cache, transport=web, now=_fixed_now)
        second = fetch_reference(_entry(), cache=cache, transport=web, now=_fixed_now)
        assert web.calls == ["https://example.org/page"]
        assert first == second

    def test_cache_stale_on_new_day_in_live_mode(self, tmp_path):
        web = FakeWeb({"https://example.org/page": (200, "text/plain", "content")})
        cache = SourceCache(tmp_path)
        fetch_reference(_entry(), cache=cache, transport=web, now=lambda: datetime(2026, 1, 1, tzinfo=timezone.utc))
        fetch_reference(_entry(), cache=cache, transport=web, now=lambda: datetime(2026, 1, 2, tzinfo=timezone.utc))
        assert len(web.calls) == 2

    def test_offline_accepts_any_cached_day(self, tmp_path):
        web = FakeWeb({"https://example.org/page": (200, "text/plain", "content")})
        cache = SourceCache(tmp_path)
        fetch_reference(_entry(), cache=cache, transport=web, now=lambda: datetime(2026, 1, 1, tzinfo=timezone.utc))
        source = fetch_reference(_entry(), cache=cache, transport=web, offline=True, now=_fixed_now)
        assert source.ok
        assert len(web.calls) == 1

    def test_offline_miss_is_unreachable(self, tmp_path):
        source = fetch_reference(_entry(), cache=SourceCache(tmp_path), transport=FakeWeb({}), offline=True, now=_fixed_now)
        assert source.status == FetchStatus.UNREACHABLE
        assert source.content_markdown == ""

    def test_http_404(self, tmp_path):
        web = FakeWeb({"https://example.org/page": (404, "text/html", "missing")})
        source = fetch_reference(_entry(), cache=SourceCache(tmp_path), transport=web, now=_fixed_now)
        assert source.status == FetchStatus.HTTP_ERROR
        assert source.http_code == 404
        assert source.content_markdown == ""

    def test_unresolvable_entry_never_fetches(self, tmp_path):
        entry = ReferenceEntry(key=9, url="", title="no url", raw_line="[9] no url", unresolvable=True)
        web = FakeWeb({})
        source = fetch_reference(entry, cache=SourceCache(tmp_path), transport=web, now=_fixed_now)
        assert source.status == FetchStatus.UNREACHABLE
        assert web.calls == []

    def test_unreachable_with_retries(self, tmp_path):
        web = FakeWeb({})
        source = fetch_reference(_entry(url="https://down.org"), cache=None, transport=web, retries=2, now=_fixed_now)
        assert source.status == FetchStatus.UNREACHABLE
        assert len(web.calls) == 3

    def test_non_text_content(self, tmp_path):
        web = FakeWeb({"https://example.org/page": (200, "application/pdf", "%PDF")})
        source = fetch_reference(_entry(), cache=None, transport=web, now=_fixed_now)
        assert source.status == FetchStatus.NON_TEXT

    def test_corrupt_cache_refetches(self, tmp_path):
        cache = SourceCache(tmp_path)
        web = FakeWeb({"https://example.org/page": (200, "text/plain", "fresh")})
        path = cache._path("https://example.org/page")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("{corrupt", encoding="utf-8")
        source = fetch_reference(_entry(), cache=cache, transport=web, now=_fixed_now)
        assert source.ok
        assert source.content_markdown == "fresh"


class TestEndpointConverter:
    def test_uses_service_response(self, monkeypatch):
        import requests

        from reportcheck.evidence import endpoint_converter

        class Resp:
            status_code = 200
            text = "converted markdown"

        monkeypatch.setattr(requests, "post", lambda *a, **k: Resp())
        convert = endpoint_converter("https://convert.example.org")
        assert convert("<p>raw</p>") == "converted markdown"

    def test_falls_back_to_builtin_on_failure(self, monkeypatch):
        import requests

        from reportcheck.evidence import endpoint_converter

        def fail(*args, **kwargs):
            raise requests.ConnectionError("down")

        monkeypatch.setattr(requests, "post", fail)
        convert = endpoint_converter("https://convert.example.org")
        assert "raw" in convert("<p>raw</p>")


class TestHtmlToMarkdown:
    def test_headings_and_lists(self):
        markdown = html_to_markdown("<h2>Head</h2><ul><li>one</li><li>two</li></ul><p>para</p>")
        assert "## Head" in markdown
        assert "- one" in markdown
        assert "para" in markdown

    def test_scripts_stripped(self):
        markdown = html_to_markdown("<script>alert(1)</script><p>kept</p>")
        assert "alert" not in markdown
        assert "kept" in markdown


def _text_of_tokens(n, words_per_para=50):
    words = []
    for i in range(n):
        words.append(f"tok{i}")
        if (i + 1) % words_per_para == 0:
            words.append("\n\n")
    return " ".join(words).replace(" \n\n ", "\n\n")


class TestChunkSource:
    def test_under_budget_single_chunk(self):
        source = _source(_text_of_tokens(500))
        chunks = chunk_source(source, target_tokens=1000)
        assert len(chunks) == 1
        assert chunks[0].token_count == 500

    def test_2500_tokens_three_chunks(self):
        source = _source(_text_of_tokens(2500))
        chunks = chunk_source(source, target_tokens=1000)
        assert len(chunks) == 3
        assert sum(c.token_count for c in chunks) == 2500
        assert all(c.token_count <= 1000 for c in chunks)

    def test_lossless_concatenation(self):
        source = _source(_text_of_tokens(2500))
        chunks = chunk_source(source, target_tokens=1000)
        assert "".join(c.text for c in chunks) == source.content_markdown

    def test_prefers_paragraph_boundaries(self):
        # paragraphs of 40 tokens; budget 100 -> cuts at 80 (2 paragraphs), not 100
        source = _source(_text_of_tokens(200, words_per_para=40))
        chunks = chunk_source(source, target_tokens=100)
        assert chunks[0].token_count == 80

    def test_requires_ok_status(self):
        bad = FetchedSource(key=1, url="u", status=FetchStatus.TIMEOUT, content_markdown="", fetched_at="", content_hash="")
        with pytest.raises(NotFetchedError):
            chunk_source(bad)

    def test_empty_content_gives_no_chunks(self):
        assert chunk_source(_source("")) == []

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 400), st.integers(1, 120), st.integers(5, 60))
    def test_random_losslessness_and_budget(self, n_tokens, target, para):
        source = _source(_text_of_tokens(n_tokens, words_per_para=para))
        chunks = chunk_source(source, target_tokens=target)
        assert "".join(c.text for c in chunks) == source.content_markdown
        assert all(c.token_count <= target for c in chunks)
        assert [c.chunk_index for c in chunks] == list(range(1, len(chunks) + 1))
        retokenized = sum(len(tokenize_words(c.text)) > -1 for c in chunks)  # chunks re-parse cleanly
        assert retokenized == len(chunks)
        assert sum(c.token_count for c in chunks) == len(source.content_markdown.split())


def _chunks(texts, key=1):
    return [Chunk(source_key=key, chunk_index=i + 1, text=t, token_count=len(t.split())) for i, t in enumerate(texts)]


class TestSelectContext:
    def test_single_chunk_any_n(self):
        chunks = _chunks(["only chunk here"])
        for n in (1, 3, 10):
            selection = select_context("query words", chunks, n=n)
            assert [c.chunk_index for c in selection.selected] == [1]

    def test_zero_scores_fall_back_to_position_order(self):
        chunks = _chunks(["alpha beta", "gamma delta", "epsilon zeta"])
        selection = select_context("missing terms", chunks, n=2)
        assert [c.chunk_index for c in selection.selected] == [1, 2]
        assert all(score == 0.0 for score in selection.scores.values())

    def test_term_frequency_ranking_matches_oracle(self):
        texts = ["solar solar panels", "wind turbines here", "solar energy mix"]
        chunks = _chunks(texts)
        selection = select_context("solar", chunks, n=2)
        expected = bm25_rank_oracle(["solar"], [tokenize_words(t) for t in texts], 2)
        assert [c.chunk_index - 1 for c in selection.selected] == expected

    def test_output_in_position_order(self):
        texts = ["nothing relevant", "solar solar solar", "one solar mention"]
        chunks = _chunks(texts)
        selection = select_context("solar", chunks, n=2)
        indexes = [c.chunk_index for c in selection.selected]
        assert indexes == sorted(indexes)
        assert indexes == [2, 3]

    def test_retrieval_off_returns_all(self):
        chunks = _chunks(["a", "b", "c"])
        selection = select_context("query", chunks, n=None)
        assert len(selection.selected) == 3
        subset = select_context("query", chunks, n=2)
        assert set(c.chunk_id for c in subset.selected) <= set(c.chunk_id for c in selection.selected)

    def test_deterministic(self):
        chunks = _chunks(["solar one", "solar two", "other"])
        a = select_context("solar", chunks, n=2)
        b = select_context("solar", chunks, n=2)
        assert a.selected == b.selected and a.scores == b.scores

    def test_rejects_bad_n(self):
        with pytest.raises(ValueError):
            select_context("q", _chunks(["a"]), n=0)

    def test_cross_source_pool_ordering(self):
        pool = _chunks(["solar data one", "irrelevant filler"], key=1) + _chunks(
            ["solar data two", "more filler", "solar data three"], key=2
        )
        selection = select_context("solar data", pool, n=3)
        ids = [c.chunk_id for c in selection.selected]
        assert ids == sorted(ids)  # (source_key, chunk_index) order
        assert all("solar" in c.text for c in selection.selected)

    def test_selected_token_total_bounded(self):
        source = _source(_text_of_tokens(950, words_per_para=30))
        chunks = chunk_source(source, target_tokens=100)
        for n in (1, 2, 5):
            selection = select_context("tok1 tok2", chunks, n=n)
            assert sum(c.token_count for c in selection.selected) <= n * 100

    def test_random_corpora_match_oracle(self):
        rng = random.Random(11)
        vocabulary = [f"w{i}" for i in range(30)]
        for _ in range(100):
            n_chunks = rng.randint(1, 20)
            texts = [
                " ".join(rng.choice(vocabulary) for _ in range(rng.randint(1, 40))) for _ in range(n_chunks)
            ]
            chunks = _chunks(texts)
            query = " ".join(rng.choice(vocabulary) for _ in range(rng.randint(1, 5)))
            n = rng.randint(1, n_chunks)
            selection = select_context(query, chunks, n=n)
            expected = bm25_rank_oracle(tokenize_words(query), [tokenize_words(t) for t in texts], n)
            assert [c.chunk_index - 1 for c in selection.selected] == expected
