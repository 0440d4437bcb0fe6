import csv

import pytest

from corpus_ingest import Document, chunk_corpus
from evaluation import EvalQuery
from perturbation_harness import (MASK_TOKEN, PerturbedQuerySet, build_perturbed_queries, extract_keywords,
                                  generate_synonyms, load_variants, mask_keywords, run_perturbation_eval,
                                  save_variants, substitute_keywords, write_perturbation_csv)
from utils.errors import LlmResponseError, ValidationError

QUERY = "Which facility assembles the PHX-121?"
EVIDENCE = ["The PHX-121 compressor is assembled at the Lorvik facility."]


class TextRetriever:
    def __init__(self, runs):
        self.runs = runs

    def retrieve(self, query_text, k):
        return [(cid, 1.0) for cid in self.runs.get(query_text, [])][:k]


def test_mask_replaces_every_keyword_occurrence():
    assert mask_keywords(QUERY, ["facility", "PHX-121"]) == "Which [MASK] assembles the [MASK]?"
    assert mask_keywords("pump and PUMP and pumps", ["pump"]) == "[MASK] and [MASK] and pumps"


def test_mask_prefers_longer_phrases_and_respects_word_boundaries():
    assert mask_keywords("Flights from New York to York", ["York", "New York"]) == \
        f"Flights from {MASK_TOKEN} to {MASK_TOKEN}"
    assert mask_keywords("Start the art show", ["art"]) == "Start the [MASK] show"


def test_mask_without_keywords_returns_query():
    assert mask_keywords(QUERY, []) == QUERY
    assert mask_keywords(QUERY, ["  "]) == QUERY


def test_substitute_keywords():
    result = substitute_keywords(QUERY, {"facility": "plant", "phx": "phoenix"})
    assert result == "Which plant assembles the phoenix-121?"


def test_substitute_matches_case_and_whitespace_insensitively():
    assert substitute_keywords("Trip to New   York", {"new york": "NYC"}) == "Trip to NYC"
    assert substitute_keywords("FIRMWARE revision", {"firmware": "software"}) == "software revision"


def test_substitute_requires_every_keyword():
    with pytest.raises(ValidationError):
        substitute_keywords(QUERY, {"facility": "plant"}, keywords=["facility", "phx"])


def test_extract_keywords_offline_ranks_by_idf_then_position():
    idf = {"facility": 2.0, "phx": 3.0, "121": 3.0, "the": 0.1}
    assert extract_keywords(QUERY, EVIDENCE, idf=idf, limit=3) == ["phx", "121", "facility"]
    assert extract_keywords(QUERY, EVIDENCE) == ["facility", "the", "phx", "121"]
    assert extract_keywords(QUERY, EVIDENCE, idf=lambda t: len(t), limit=1) == ["facility"]


def test_extract_keywords_with_llm_keeps_only_shared_phrases(canned_llm):
    llm = canned_llm({"common keywords": "keywords: PHX-121, facility, Lorvik, facility"})
    assert extract_keywords(QUERY, EVIDENCE, llm=llm) == ["PHX-121", "facility"]
    assert "Query:\n\n" + QUERY in llm.prompts[0]


def test_extract_keywords_rejects_empty_evidence():
    with pytest.raises(ValidationError):
        extract_keywords(QUERY, ["  "])


def test_generate_synonyms_offline_uses_lexicon():
    synonyms = generate_synonyms(QUERY, ["facility", "lorvik"], lexicon={"facility": "plant"}, seed=2)
    assert synonyms["facility"] == "plant"
    assert synonyms["lorvik"].startswith("syn")
    assert generate_synonyms(QUERY, [], lexicon={}) == {}


def test_generate_synonyms_with_llm(canned_llm):
    llm = canned_llm({"substituted words": "plant, phoenix-121"})
    assert generate_synonyms(QUERY, ["facility", "PHX-121"], llm=llm) == {"facility": "plant",
                                                                          "PHX-121": "phoenix-121"}


def test_generate_synonyms_count_mismatch(canned_llm):
    llm = canned_llm({"substituted words": "plant"})
    with pytest.raises(LlmResponseError) as excinfo:
        generate_synonyms(QUERY, ["facility", "PHX-121"], llm=llm)
    assert excinfo.value.raw_response == "plant"


def test_build_perturbed_queries_skips_queries_without_keywords():
    gold = [
        EvalQuery("g1", QUERY, EVIDENCE),
        EvalQuery("g2", "Unrelated words only", EVIDENCE),
        EvalQuery("g3", "No evidence", [], ["c1"]),
    ]
    lexicon = {"facility": "plant", "the": "this", "phx": "phoenix", "121": "karika"}
    variants = build_perturbed_queries(gold, idf={"phx": 3.0, "121": 3.0, "facility": 2.0}, lexicon=lexicon)
    assert [v.query_id for v in variants] == ["g1"]
    variant = variants[0]
    assert variant.original == QUERY
    assert variant.masked == "Which [MASK] assembles [MASK] [MASK]-[MASK]?"
    assert variant.substituted == "Which plant assembles this phoenix-karika?"
    assert variant.variant("masked") == variant.masked


def test_variants_roundtrip(tmp_path):
    variants = [PerturbedQuerySet("g1", QUERY, "m", "s", ["facility"], {"facility": "plant"})]
    path = save_variants(str(tmp_path / "variants.jsonl"), variants)
    assert load_variants(path) == variants


def test_run_perturbation_eval_reports_drops(tmp_path):
    chunks = chunk_corpus([Document("d1", EVIDENCE[0]), Document("d2", "Unrelated text about pumps.")], 64)
    gold = [EvalQuery("g1", QUERY, EVIDENCE)]
    variant = PerturbedQuerySet("g1", QUERY, "Which [MASK] assembles the [MASK]?",
                                "Which plant assembles the phoenix-121?", ["facility", "PHX-121"],
                                {"facility": "plant", "PHX-121": "phoenix-121"})
    lexical = TextRetriever({QUERY: ["d1_chunk0000"], variant.masked: ["d2_chunk0000"],
                             variant.substituted: ["d2_chunk0000", "d1_chunk0000"]})
    rows = run_perturbation_eval({"BM25": lexical}, [variant], gold, chunks)
    assert [(r["method"], r["variant"]) for r in rows] == [("BM25", "original"), ("BM25", "masked"),
                                                          ("BM25", "substituted")]
    original, masked, substituted = rows
    assert original["drop_map@10"] == 0.0
    assert masked["hit@10"] == 0.0
    assert masked["drop_hit@1"] == 1.0
    assert substituted["map@10"] == pytest.approx(0.5)
    assert substituted["drop_map@10"] == pytest.approx(0.5)

    path = write_perturbation_csv(str(tmp_path / "perturbation.csv"), rows)
    with open(path, newline="", encoding="utf-8") as f:
        table = list(csv.DictReader(f))
    assert len(table) == 3
    assert table[1]["drop_hit@1"] == "1.0"


def test_run_perturbation_eval_requires_variants():
    with pytest.raises(ValidationError):
        run_perturbation_eval({}, [], [], [])
