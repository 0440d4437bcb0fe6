import csv
import json
import math

import pytest
import torch

from corpus_ingest import Document, chunk_corpus
from embedding_provider import DenseEncoder, ToyEmbedder
from evaluation import (DenseRetriever, EvalConfig, EvalQuery, EvidenceMatcher, RunRetriever, alignment, evaluate,
                        evaluate_sts, hit_at_k, load_gold, map_at_10, match_evidence, plot_alignment_uniformity,
                        spearman_sts, uniformity, write_per_query_csv, write_report_json, write_retrieval_csv)
from utils.errors import CorpusFormatError, ValidationError

NUMBERS = Document("d1", "one two three four five six seven eight")
OTHER = Document("d2", "alpha beta gamma delta")


class FixedRetriever:
    def __init__(self, runs):
        self.runs = runs

    def retrieve(self, query_text, k):
        return [(cid, 1.0) for cid in self.runs.get(query_text, [])][:k]


@pytest.fixture
def number_chunks():
    return chunk_corpus([NUMBERS, OTHER], chunk_size=4)


@pytest.fixture
def wide_encoder():
    return DenseEncoder(ToyEmbedder(dim=256, seed=3))


def test_hit_at_k():
    assert hit_at_k(["x", "a"], {"a"}, 1) == 0
    assert hit_at_k(["x", "a"], {"a"}, 4) == 1
    assert hit_at_k([], {"a"}, 10) == 0


def test_map_at_10_reference_values():
    assert map_at_10(["a"], {"a"}) == pytest.approx(1.0)
    assert map_at_10(["x", "a"], {"a"}) == pytest.approx(0.5)
    assert map_at_10(["a", "x", "b"], {"a", "b"}) == pytest.approx(0.8333, abs=1e-4)
    assert map_at_10(["x"] * 10 + ["a"], {"a"}) == 0.0
    assert map_at_10(["a"], set()) == 0.0


def test_map_at_10_caps_denominator_at_ten():
    relevant = {f"r{i}" for i in range(15)}
    run = [f"r{i}" for i in range(10)]
    assert map_at_10(run, relevant) == pytest.approx(1.0)


def test_matcher_assigns_span_to_chunks_above_threshold(number_chunks):
    matcher = EvidenceMatcher(number_chunks, theta=0.6)
    assert matcher.match("three four five six seven") == {"d1_chunk0001"}
    loose = EvidenceMatcher(number_chunks, theta=0.4)
    assert loose.match("three four five six seven") == {"d1_chunk0000", "d1_chunk0001"}


def test_matcher_picks_smallest_id_on_tied_shares(number_chunks):
    assert EvidenceMatcher(number_chunks, theta=0.6).match("four five") == {"d1_chunk0000"}


def test_matcher_falls_back_to_bag_overlap(number_chunks):
    assert EvidenceMatcher(number_chunks, theta=0.6).match("Eight, seven; six!") == {"d1_chunk0001"}


def test_matcher_adds_overlapping_chunks_to_verbatim_match():
    chunks = chunk_corpus([Document("d1", "alpha beta gamma delta epsilon"),
                           Document("d2", "epsilon delta gamma beta alpha"),
                           Document("d3", "alpha beta zeta eta theta")], chunk_size=8)
    matcher = EvidenceMatcher(chunks, theta=0.6)
    assert matcher.match("alpha beta gamma delta epsilon") == {"d1_chunk0000", "d2_chunk0000"}


def test_unmatchable_span(number_chunks):
    assert match_evidence(["nothing here at all"], number_chunks) == set()
    assert match_evidence(["..."], number_chunks) == set()


def test_match_evidence_unions_spans(number_chunks):
    assert match_evidence(["one two three", "gamma delta"], number_chunks) == {"d1_chunk0000", "d2_chunk0000"}


def test_alignment_reference_values():
    result = alignment([[1.0, 0.0]], [[0.0, 1.0]], [[0.0, 1.0], [0.6, 0.8]])
    assert result.raw == pytest.approx(2.0)
    assert result.normalized == pytest.approx(2.5)
    assert result.skipped == 0


def test_alignment_positive_is_nearest_gives_one():
    result = alignment([[3.0, 4.0]], [[0.0, 2.0]], [[0.0, 1.0], [-1.0, 0.0]])
    assert result.normalized == 1.0


def test_alignment_skips_pairs_whose_query_is_in_database():
    result = alignment([[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]], [[1.0, 0.0], [0.6, 0.8]])
    assert result.skipped == 1
    assert result.normalized == pytest.approx(2.0 / 0.4)


def test_alignment_all_skipped_normalized_is_zero():
    result = alignment([[1.0, 0.0]], [[0.0, 1.0]], [[2.0, 0.0]])
    assert result.skipped == 1
    assert result.normalized == 0.0


def test_alignment_rejects_mismatched_pairs():
    with pytest.raises(ValidationError):
        alignment([[1.0, 0.0]], [[0.0, 1.0], [1.0, 0.0]], [[1.0, 0.0]])


def test_uniformity_reference_values():
    assert uniformity([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(4.0)
    assert uniformity([[1.0, 0.0], [-2.0, 0.0]]) == pytest.approx(8.0)
    assert uniformity([[1.0, 0.0], [5.0, 0.0]]) == pytest.approx(0.0)
    with pytest.raises(ValidationError):
        uniformity([[1.0, 0.0]])


def test_spearman_sts():
    assert spearman_sts([0.1, 0.4, 0.3, 0.9], [1, 3, 2, 4]) == pytest.approx(1.0)
    assert spearman_sts([0.9, 0.4, 0.3], [1, 2, 3]) == pytest.approx(-1.0)
    with pytest.raises(ValidationError):
        spearman_sts([0.1, 0.2], [1, 2])
    with pytest.raises(ValidationError):
        spearman_sts([0.5, 0.5, 0.5], [1, 2, 3])


def test_evaluate_sts_file(tmp_path, wide_encoder):
    path = tmp_path / "sts.jsonl"
    rows = [
        {"text1": "pump seal", "text2": "pump seal", "score": 5.0},
        {"text1": "pump seal", "text2": "pump seal valve", "score": 3.0},
        {"text1": "pump seal", "text2": "blue sky", "score": 0.0},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    assert evaluate_sts(str(path), wide_encoder) == pytest.approx(1.0)


def test_load_gold(tmp_path):
    path = tmp_path / "gold.jsonl"
    path.write_text(json.dumps({"query_id": "g1", "query": "Which?", "evidence": ["one two"]}) + "\n"
                    + json.dumps({"query_id": "g2", "query": "What?", "chunk_ids": ["d2_chunk0000"]}) + "\n",
                    encoding="utf-8")
    gold = load_gold(str(path))
    assert gold[0] == EvalQuery("g1", "Which?", ["one two"], [])
    assert gold[1].gold_chunk_ids == ["d2_chunk0000"]


def test_load_gold_rejects_queries_without_evidence(tmp_path):
    path = tmp_path / "gold.jsonl"
    path.write_text(json.dumps({"query_id": "g1", "query": "Which?"}) + "\n", encoding="utf-8")
    with pytest.raises(CorpusFormatError):
        load_gold(str(path))


def test_evaluate_with_retriever_excludes_unmatchable(number_chunks):
    queries = [
        EvalQuery("g1", "first", ["one two three"]),
        EvalQuery("g2", "second", ["gamma delta"]),
        EvalQuery("g3", "third", ["not in the corpus"]),
        EvalQuery("g4", "fourth", [], ["d1_chunk0001"]),
    ]
    retriever = FixedRetriever({
        "first": ["d1_chunk0000"],
        "second": ["d1_chunk0000", "d1_chunk0001", "d2_chunk0000"],
        "fourth": ["d2_chunk0000"],
    })
    report = evaluate(retriever, queries, number_chunks, method="fixed")
    assert report.n_queries == 3
    assert report.n_unmatchable == 1
    assert report.hit_at_1 == pytest.approx(1 / 3)
    assert report.hit_at_4 == pytest.approx(2 / 3)
    assert report.map_at_10 == pytest.approx((1.0 + 1 / 3 + 0.0) / 3)
    assert report.alignment_raw is None
    assert [row["query_id"] for row in report.per_query] == ["g1", "g2", "g4"]


def test_evaluate_rejects_when_nothing_matches(number_chunks):
    with pytest.raises(ValidationError):
        evaluate(FixedRetriever({}), [EvalQuery("g", "q", ["zzz"])], number_chunks)
    with pytest.raises(ValidationError):
        evaluate(FixedRetriever({}), [], number_chunks)


def test_evaluate_run_retriever_uses_query_ids(number_chunks):
    run = RunRetriever({"g1": [("d2_chunk0000", 1.0), ("d1_chunk0000", 0.5)]}, name="bm25")
    report = evaluate(run, [EvalQuery("g1", "ignored", ["one two three"])], number_chunks, method="bm25")
    assert report.hit_at_1 == 0.0
    assert report.hit_at_4 == 1.0
    assert report.map_at_10 == pytest.approx(0.5)


def test_evaluate_dense_encoder_reports_geometry(number_chunks, wide_encoder):
    queries = [EvalQuery("g1", "five six seven", ["five six seven eight"]),
               EvalQuery("g2", "alpha beta", ["alpha beta gamma"])]
    report = evaluate(wide_encoder, queries, number_chunks, EvalConfig(uniformity_sample=2), method="Base")
    assert report.hit_at_1 == 1.0
    assert report.alignment_raw is not None and report.alignment_raw >= 0
    assert report.alignment_norm >= 0
    assert report.uniformity_abs >= 0
    plain = evaluate(wide_encoder, queries, number_chunks, method="Base", with_geometry=False)
    assert plain.uniformity_abs is None
    assert plain.hit_at_1 == report.hit_at_1


def test_dense_retriever_orders_by_similarity(number_chunks, wide_encoder):
    retriever = DenseRetriever(wide_encoder, number_chunks)
    results = retriever.retrieve("alpha beta gamma delta", 3)
    assert results[0][0] == "d2_chunk0000"
    assert results[0][1] == pytest.approx(1.0)
    sims = [s for _, s in results]
    assert sims == sorted(sims, reverse=True)


def test_eval_config_validation():
    with pytest.raises(ValidationError):
        EvalConfig(theta=0.0)
    with pytest.raises(ValidationError):
        EvalConfig(uniformity_sample=1)


def test_report_writers(tmp_path, number_chunks, wide_encoder):
    queries = [EvalQuery("g1", "one two", ["one two three"])]
    dense = evaluate(wide_encoder, queries, number_chunks, method="Base")
    sparse = evaluate(FixedRetriever({"one two": ["d1_chunk0000"]}), queries, number_chunks, method="BM25")

    with open(write_report_json(str(tmp_path / "base.json"), dense), encoding="utf-8") as f:
        assert json.load(f)["method"] == "Base"

    with open(write_per_query_csv(str(tmp_path / "base.csv"), dense), newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["query_id"] == "g1"

    with open(write_retrieval_csv(str(tmp_path / "retrieval.csv"), [sparse, dense]), newline="",
              encoding="utf-8") as f:
        table = list(csv.DictReader(f))
    assert [row["method"] for row in table] == ["BM25", "Base"]
    assert table[0]["alignment_raw"] == ""
    assert float(table[1]["hit@1"]) == dense.hit_at_1
    assert math.isclose(float(table[1]["uniformity_abs"]), dense.uniformity_abs)


def test_plot_is_byte_stable(tmp_path, number_chunks, wide_encoder):
    queries = [EvalQuery("g1", "one two", ["one two three"])]
    reports = [evaluate(wide_encoder, queries, number_chunks, method="Base"),
               evaluate(wide_encoder.with_params(None), queries, number_chunks, method="Copy")]
    first = plot_alignment_uniformity(str(tmp_path / "a.svg"), reports)
    second = plot_alignment_uniformity(str(tmp_path / "b.svg"), reports)
    with open(first, "rb") as f1, open(second, "rb") as f2:
        assert f1.read() == f2.read()


def test_unit_rows_keep_zero_vectors():
    # 零向量保持为零，不产生 NaN
    result = alignment(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 0.0]]), torch.tensor([[0.0, 1.0]]))
    assert result.raw == pytest.approx(1.0)
