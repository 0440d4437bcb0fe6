import math
import random

import pytest
import torch

from bm25_index import build_index, search
from corpus_ingest import Chunk, Document, chunk_corpus, tokenize
from embedding_provider import AdapterParams, DenseEncoder, ToyEmbedder, adapt
from evaluation import EvalConfig, EvalQuery, alignment, evaluate
from listwise_trainer import entropy, listmle_loss, listnet_gradient, listnet_loss, target_distribution
from relevance_sampler import FINE_TO_COARSE, UNIFORM, PartitionScheme, RankingSample, partition

VOCAB = [f"t{i}" for i in range(12)]


def _brute_force_search(chunks, query_tokens, k1=1.2, b=0.75):
    docs = {c.chunk_id: tokenize(c.text) for c in chunks}
    n = len(docs)
    avg = sum(len(t) for t in docs.values()) / n
    scored = []
    for cid, tokens in docs.items():
        total = 0.0
        for term in query_tokens:
            tf = tokens.count(term)
            if tf == 0:
                continue
            df = sum(1 for t in docs.values() if term in t)
            total += math.log((n - df + 0.5) / (df + 0.5) + 1) * tf * (k1 + 1) / \
                (tf + k1 * (1 - b + b * len(tokens) / avg))
        if total > 0:
            scored.append((cid, total))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored


def test_bm25_matches_brute_force_on_random_corpora():
    rng = random.Random(2024)
    for _ in range(200):
        chunks = []
        for i in range(rng.randint(1, 50)):
            text = " ".join(rng.choice(VOCAB) for _ in range(rng.randint(1, 15)))
            chunks.append(Chunk(f"c{i:03d}", "doc", text, len(tokenize(text)), 0, len(text)))
        index = build_index(chunks)
        query = [rng.choice(VOCAB) for _ in range(rng.randint(1, 8))]
        expected = _brute_force_search(chunks, query)
        actual = search(index, query, len(chunks)).entries
        assert [cid for cid, _ in actual] == [cid for cid, _ in expected]
        for (_, got), (_, want) in zip(actual, expected):
            assert abs(got - want) <= 1e-9


def test_partitions_tile_and_fine_to_coarse_lengths_grow():
    rng = random.Random(7)
    for _ in range(1000):
        m = rng.randint(2, 12)
        k = rng.randint(m, 500)
        growth = rng.choice([1.0, 1.5, 2.0, 3.0])
        first_len = rng.randint(1, 5)
        for strategy in (UNIFORM, FINE_TO_COARSE):
            scheme = PartitionScheme(strategy=strategy, m=m, k=k, first_len=first_len, growth=growth)
            intervals = partition(k, m, scheme)
            assert intervals[0][0] == 0 and intervals[-1][1] == k
            assert all(a[1] == b[0] for a, b in zip(intervals, intervals[1:]))
            lengths = [hi - lo for lo, hi in intervals]
            assert min(lengths) >= 1
            if strategy == UNIFORM:
                assert max(lengths) - min(lengths) <= 1
            else:
                assert lengths == sorted(lengths)


class _RandomProvider:
    def __init__(self, vectors):
        self.vectors = vectors

    def dim(self):
        return next(iter(self.vectors.values())).shape[0]

    def embed_batch(self, texts):
        return torch.stack([self.vectors[t] for t in texts]).to(torch.float32)


def test_listnet_gradient_on_random_instances():
    gen = torch.Generator().manual_seed(5)
    rng = random.Random(5)
    eps = 1e-6
    worst = 0.0
    for _ in range(100):
        d = rng.randint(2, 16)
        m = rng.randint(2, 6)
        texts = ["q"] + [f"p{j}" for j in range(m)]
        provider = _RandomProvider({t: torch.randn(d, generator=gen, dtype=torch.float64) for t in texts})
        sample = RankingSample("q", "q", [f"c{j}" for j in range(m)],
                               sorted((rng.uniform(0, 20) for _ in range(m)), reverse=True))
        chunk_texts = {f"c{j}": f"p{j}" for j in range(m)}
        alpha = rng.choice([0.5, 1.0, 2.0])
        W = 0.2 * torch.randn(d, d, generator=gen, dtype=torch.float64)
        base_q = provider.embed_batch(["q"])
        base_p = provider.embed_batch(texts[1:])

        def loss_at(weights):
            params = AdapterParams(W=weights)
            return listnet_loss((adapt(params, base_q) @ adapt(params, base_p).T)[0], sample.scores, alpha)

        numeric = torch.zeros_like(W)
        for i in range(d):
            for j in range(d):
                plus, minus = W.clone(), W.clone()
                plus[i, j] += eps
                minus[i, j] -= eps
                numeric[i, j] = (loss_at(plus) - loss_at(minus)) / (2 * eps)
        analytic = listnet_gradient(sample, provider, AdapterParams(W=W), alpha, chunk_texts)
        worst = max(worst, float((analytic - numeric).norm() / max(float(numeric.norm()), 1e-12)))
    assert worst < 1e-4


def test_loss_identities_on_random_lists():
    rng = random.Random(11)
    for _ in range(1000):
        m = rng.randint(2, 8)
        r = [rng.uniform(-5, 30) for _ in range(m)]
        s = [rng.uniform(-1, 1) for _ in range(m)]
        alpha = rng.uniform(0.05, 5.0)
        shift = rng.uniform(-10, 10)
        p = target_distribution(r, alpha)
        assert float(p.sum()) == pytest.approx(1.0, abs=1e-9)
        assert listnet_loss([x / alpha for x in r], r, alpha) == pytest.approx(entropy(p), abs=1e-9)
        assert listnet_loss([x + shift for x in s], r, alpha) == pytest.approx(listnet_loss(s, r, alpha), abs=1e-9)
        assert listmle_loss([x + shift for x in s], r) == pytest.approx(listmle_loss(s, r), abs=1e-9)
        sharper = rng.uniform(0.01, alpha)
        assert entropy(target_distribution(r, sharper)) <= entropy(p) + 1e-12


def test_alignment_of_identical_pairs_is_zero():
    vectors = torch.randn(5, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    assert alignment(vectors, vectors, vectors + 1.0).raw == 0.0


def test_zero_adapter_reproduces_base_metrics_exactly():
    docs = [Document("d1", "pump seal rotor gasket bearing filter"), Document("d2", "turbine blade nozzle valve"),
            Document("d3", "glossary sheet for the field crews")]
    chunks = chunk_corpus(docs, 3)
    queries = [EvalQuery("g1", "pump seal", ["pump seal rotor"]), EvalQuery("g2", "blade nozzle", ["nozzle valve"])]
    provider = ToyEmbedder(dim=16, seed=2)
    config = EvalConfig(uniformity_sample=4)
    base = evaluate(DenseEncoder(provider), queries, chunks, config, method="m")
    adapted = evaluate(DenseEncoder(provider, params=AdapterParams.zeros(16)), queries, chunks, config, method="m")
    assert base.to_dict() == adapted.to_dict()
