"""
行话语料上的端到端验收：200篇文档、1000步 ListNet 训练

运行较慢，默认不执行：pytest -m acceptance
"""
import os

import pytest

from jargon_fixture import build_jargon_fixture
from pipeline import load_config, run_pipeline
from utils.jsonl import read_json

pytestmark = pytest.mark.acceptance

METRICS = ("hit@1", "hit@4", "hit@10", "map@10")


@pytest.fixture(scope="module")
def fixture_paths(tmp_path_factory):
    return build_jargon_fixture(str(tmp_path_factory.mktemp("jargon")), n_docs=200, seed=7)


@pytest.fixture(scope="module")
def manifest(fixture_paths, tmp_path_factory):
    config = load_config(fixture_paths["config"], output_dir=str(tmp_path_factory.mktemp("runs")))
    return run_pipeline(config)


@pytest.fixture(scope="module")
def methods(manifest):
    payload = read_json(os.path.join(manifest.run_dir, "report", "report.json"))
    return {row["method"]: row for row in payload["methods"]}


def _perturbation_row(manifest, method, variant):
    for row in read_json(manifest.path("perturbation")):
        if row["method"] == method and row["variant"] == variant:
            return row
    raise AssertionError(f"missing perturbation row {method}/{variant}")


def test_adapted_embedding_beats_base(methods):
    assert methods["BMEmbed"]["map@10"] > methods["Base"]["map@10"]


def test_contrastive_baseline_is_reported(methods):
    assert list(methods) == ["BM25", "Base", "CL", "BMEmbed", "RRF", "RRF+BMEmbed"]
    assert all(methods["CL"][metric] is not None for metric in METRICS)


def test_uniformity_rises_while_alignment_holds(methods):
    base, adapted = methods["Base"], methods["BMEmbed"]
    assert adapted["uniformity_abs"] > base["uniformity_abs"]
    assert adapted["alignment_norm"] <= base["alignment_norm"] * 1.05


def test_fusion_with_adapted_embedding(manifest, methods):
    assert methods["RRF+BMEmbed"]["map@10"] >= methods["RRF"]["map@10"]
    with open(manifest.path("run_rrf"), "rb") as f1, open(manifest.path("run_rrf_bmembed"), "rb") as f2:
        assert f1.read() != f2.read()


def test_masking_keywords_collapses_bm25(manifest):
    original = _perturbation_row(manifest, "BM25", "original")
    masked = _perturbation_row(manifest, "BM25", "masked")
    for metric in METRICS:
        assert masked[metric] <= 0.2 * original[metric] + 1e-12


def test_dense_models_tolerate_substitution_better_than_bm25(manifest):
    bm25 = _perturbation_row(manifest, "BM25", "substituted")
    for method in ("Base", "BMEmbed"):
        dense = _perturbation_row(manifest, method, "substituted")
        assert dense["drop_map@10"] < bm25["drop_map@10"]


def test_identical_runs_are_byte_identical(fixture_paths, manifest, tmp_path):
    config = load_config(fixture_paths["config"], output_dir=str(tmp_path))
    again = run_pipeline(config, report=False)
    for name in ("adapter", "eval_bm25", "eval_base", "eval_bmembed", "eval_rrf", "eval_rrf_bmembed"):
        with open(again.path(name), "rb") as f1, open(manifest.path(name), "rb") as f2:
            assert f1.read() == f2.read(), name
