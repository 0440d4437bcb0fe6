import io
import math

import pytest

from bm25_index import (Bm25Params, Bm25Retriever, bm25_score, build_index, idf, load_index, save_index,
                        search, write_search_tsv)
from corpus_ingest import Chunk, tokenize
from utils.errors import CorpusFormatError, ValidationError


def _chunk(chunk_id, text):
    return Chunk(chunk_id, chunk_id.split("_")[0], text, len(tokenize(text)), 0, len(text))


@pytest.fixture
def small_chunks():
    return [
        _chunk("c3_chunk0000", "pump seal pump"),
        _chunk("c1_chunk0000", "compressor rotor seal"),
        _chunk("c2_chunk0000", "turbine blade"),
        _chunk("c4_chunk0000", "pump"),
    ]


def _brute_force(chunks, query_tokens, k1=1.2, b=0.75):
    docs = {c.chunk_id: tokenize(c.text) for c in chunks}
    n = len(docs)
    avg = sum(len(t) for t in docs.values()) / n
    scores = {}
    for cid, tokens in docs.items():
        total = 0.0
        for term in query_tokens:
            tf = tokens.count(term)
            if tf == 0:
                continue
            df = sum(1 for t in docs.values() if term in t)
            w = math.log((n - df + 0.5) / (df + 0.5) + 1)
            total += w * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(tokens) / avg))
        scores[cid] = total
    return scores


def test_build_index_postings_sorted_and_lengths(small_chunks):
    index = build_index(small_chunks)
    assert index.n_chunks == 4
    assert index.avg_length == pytest.approx(9 / 4)
    assert index.postings["pump"] == [("c3_chunk0000", 2), ("c4_chunk0000", 1)]
    assert index.postings["seal"] == [("c1_chunk0000", 1), ("c3_chunk0000", 1)]
    assert list(index.postings) == sorted(index.postings)


def test_idf_values_and_nonnegative(small_chunks):
    index = build_index(small_chunks)
    assert idf(index, "pump") == pytest.approx(math.log((4 - 2 + 0.5) / (2 + 0.5) + 1))
    assert idf(index, "unseen") == pytest.approx(math.log(4.5 / 0.5 + 1))
    for term in index.postings:
        assert idf(index, term) >= 0


def test_scores_match_brute_force(small_chunks):
    index = build_index(small_chunks)
    query = tokenize("pump seal seal rotor")
    expected = _brute_force(small_chunks, query)
    for chunk in small_chunks:
        assert bm25_score(index, query, chunk.chunk_id) == pytest.approx(expected[chunk.chunk_id], rel=1e-12)


def test_custom_params_match_brute_force(small_chunks):
    index = build_index(small_chunks, params=Bm25Params(k1=2.0, b=0.3))
    query = tokenize("pump turbine")
    expected = _brute_force(small_chunks, query, k1=2.0, b=0.3)
    for chunk in small_chunks:
        assert bm25_score(index, query, chunk.chunk_id) == pytest.approx(expected[chunk.chunk_id], rel=1e-12)


def test_search_orders_by_score_then_id_and_drops_zero(small_chunks):
    index = build_index(small_chunks)
    result = search(index, ["seal"], 10, query_id="q")
    assert result.query_id == "q"
    # 两个块词频相同，较短的 c1 与 c3 长度都为3，同分按ID升序
    assert result.chunk_ids == ["c1_chunk0000", "c3_chunk0000"]
    assert all(score > 0 for _, score in result.entries)


def test_search_truncates_to_k(small_chunks):
    index = build_index(small_chunks)
    result = search(index, ["pump", "seal"], 2)
    assert len(result) == 2
    scores = [s for _, s in result.entries]
    assert scores == sorted(scores, reverse=True)


def test_search_unknown_terms_returns_empty(small_chunks):
    assert len(search(build_index(small_chunks), ["zzz"], 5)) == 0


def test_search_rejects_k_below_one(small_chunks):
    with pytest.raises(ValidationError):
        search(build_index(small_chunks), ["pump"], 0)


def test_bm25_score_unknown_chunk(small_chunks):
    with pytest.raises(ValidationError):
        bm25_score(build_index(small_chunks), ["pump"], "missing")


def test_build_index_rejects_empty():
    with pytest.raises(ValidationError):
        build_index([])


def test_params_validation():
    with pytest.raises(ValidationError):
        Bm25Params(k1=-1.0)
    with pytest.raises(ValidationError):
        Bm25Params(b=1.5)


def test_retriever_tokenizes_query(small_chunks):
    retriever = Bm25Retriever(build_index(small_chunks))
    entries = retriever.retrieve("PUMP!", 3)
    assert [cid for cid, _ in entries] == ["c3_chunk0000", "c4_chunk0000"]


def test_save_and_load_preserve_rankings(tmp_path, small_chunks):
    index = build_index(small_chunks, params=Bm25Params(k1=1.5, b=0.5))
    path = save_index(index, str(tmp_path / "index.jsonl"))
    loaded = load_index(path)
    assert loaded.params == index.params
    assert loaded.postings == index.postings
    query = tokenize("pump seal blade")
    assert search(loaded, query, 10).entries == search(index, query, 10).entries


def test_load_index_rejects_foreign_file(tmp_path):
    path = tmp_path / "bogus.jsonl"
    path.write_text('{"format": "other"}\n', encoding="utf-8")
    with pytest.raises(CorpusFormatError):
        load_index(str(path))


def test_write_search_tsv(small_chunks):
    stream = io.StringIO()
    write_search_tsv(search(build_index(small_chunks), ["turbine"], 5), stream)
    lines = stream.getvalue().splitlines()
    assert len(lines) == 1
    rank, chunk_id, score = lines[0].split("\t")
    assert (rank, chunk_id) == ("1", "c2_chunk0000")
    assert float(score) > 0
