import csv
import math

import pytest
import torch

from embedding_provider import AdapterParams, DenseEncoder, adapt
from listwise_trainer import (INFONCE, LISTMLE, LISTNET, ContrastivePair, TrainConfig, entropy, infonce_gradient,
                              infonce_loss, listmle_gradient, listmle_loss, listnet_gradient, listnet_loss,
                              listwise_batch_gradient, min_max_normalize, target_distribution, train,
                              write_loss_curve)
from relevance_sampler import RankingSample
from utils.errors import DegenerateAdapterError, TrainingDivergedError, ValidationError

DIM = 4


@pytest.fixture
def problem(fixed_provider):
    gen = torch.Generator().manual_seed(11)
    texts = ["query one", "query two", "p0", "p1", "p2", "p3"]
    provider = fixed_provider({t: torch.randn(DIM, generator=gen, dtype=torch.float64).tolist() for t in texts})
    chunk_texts = {f"c{i}": f"p{i}" for i in range(4)}
    samples = [
        RankingSample("q1", "query one", ["c0", "c1", "c2"], [2.0, 1.0, 0.0]),
        RankingSample("q2", "query two", ["c3", "c1", "c0"], [5.5, 5.5, 1.25]),
    ]
    W = 0.1 * torch.randn(DIM, DIM, generator=gen, dtype=torch.float64)
    return provider, chunk_texts, samples, AdapterParams(W=W)


def _similarities(provider, W, query_text, passage_texts):
    q = adapt(AdapterParams(W=W), provider.embed_batch([query_text]))
    p = adapt(AdapterParams(W=W), provider.embed_batch(passage_texts))
    return (q @ p.T)[0]


def _finite_difference(loss_fn, W, eps=1e-6):
    grad = torch.zeros_like(W)
    for i in range(W.shape[0]):
        for j in range(W.shape[1]):
            plus = W.clone()
            minus = W.clone()
            plus[i, j] += eps
            minus[i, j] -= eps
            grad[i, j] = (loss_fn(plus) - loss_fn(minus)) / (2 * eps)
    return grad


def _relative_error(a, b):
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def test_target_distribution_reference_values():
    p = target_distribution([2.0, 1.0, 0.0], 1.0)
    assert p.tolist() == pytest.approx([0.66524, 0.24473, 0.09003], abs=1e-5)
    assert float(p.sum()) == pytest.approx(1.0)
    assert entropy(p) == pytest.approx(0.83241, abs=1e-5)


def test_target_distribution_temperature_and_stability():
    sharp = target_distribution([2.0, 1.0, 0.0], 0.1)
    flat = target_distribution([2.0, 1.0, 0.0], 10.0)
    assert entropy(sharp) < entropy(flat)
    huge = target_distribution([1e4, 1e4 - 1, 0.0], 1.0)
    assert torch.isfinite(huge).all()
    assert float(huge.sum()) == pytest.approx(1.0)


def test_target_distribution_rejects_bad_input():
    with pytest.raises(ValidationError):
        target_distribution([1.0, float("inf")], 1.0)
    with pytest.raises(ValidationError):
        target_distribution([1.0, 2.0], 0.0)


def test_min_max_normalize():
    assert min_max_normalize([4.0, 2.0, 3.0]).tolist() == [1.0, 0.0, 0.5]
    assert min_max_normalize([7.0, 7.0]).tolist() == [0.0, 0.0]


def test_listnet_loss_reference_values():
    assert listnet_loss([0.0, 0.0, 0.0], [2.0, 1.0, 0.0], 1.0) == pytest.approx(math.log(3))
    matched = torch.log(target_distribution([2.0, 1.0, 0.0], 1.0))
    assert listnet_loss(matched, [2.0, 1.0, 0.0], 1.0) == pytest.approx(0.83241, abs=1e-5)


def test_listnet_loss_bounded_below_by_target_entropy():
    gen = torch.Generator().manual_seed(0)
    scores = [3.0, 1.0, 0.5, 0.0]
    floor = entropy(target_distribution(scores, 1.0))
    for _ in range(20):
        s = torch.randn(4, generator=gen, dtype=torch.float64)
        assert listnet_loss(s, scores, 1.0) >= floor - 1e-12


def test_listmle_loss_reference_value():
    assert listmle_loss([0.0, 0.0, 0.0], [3.0, 2.0, 1.0]) == pytest.approx(math.log(6), abs=1e-5)
    assert listmle_loss([0.0, 0.0, 0.0], [3.0, 2.0, 1.0]) == pytest.approx(1.79176, abs=1e-5)


def test_listmle_ties_keep_original_order():
    sims = [0.3, -0.2, 0.9]
    assert listmle_loss(sims, [1.0, 1.0, 1.0]) == pytest.approx(listmle_loss(sims, [3.0, 2.0, 1.0]))


def test_infonce_loss_reference_values():
    assert infonce_loss([1.0, 0.0], [1.0, 0.0], [[0.0, 1.0]], 1.0) == pytest.approx(0.31326, abs=1e-5)
    assert infonce_loss([1.0, 0.0], [2.0, 0.0], [[3.0, 0.0]], 0.05) == pytest.approx(math.log(2))
    with pytest.raises(ValidationError):
        infonce_loss([1.0, 0.0], [1.0, 0.0], [], 1.0)


def test_listnet_gradient_matches_finite_differences(problem):
    provider, chunk_texts, samples, params = problem
    sample = samples[0]
    passages = [chunk_texts[c] for c in sample.passages]
    grad = listnet_gradient(sample, provider, params, 1.0, chunk_texts)
    numeric = _finite_difference(
        lambda W: listnet_loss(_similarities(provider, W, sample.query_text, passages), sample.scores, 1.0),
        params.W)
    assert grad.shape == (DIM, DIM)
    assert _relative_error(grad, numeric) < 1e-4


def test_listnet_gradient_with_normalized_scores(problem):
    provider, chunk_texts, samples, params = problem
    sample = RankingSample("q", "query one", ["c0", "c1", "c2"], [30.0, 12.0, 4.0])
    passages = [chunk_texts[c] for c in sample.passages]
    grad = listnet_gradient(sample, provider, params, 0.5, chunk_texts, normalize_scores=True)
    normalized = min_max_normalize(sample.scores)
    numeric = _finite_difference(
        lambda W: listnet_loss(_similarities(provider, W, sample.query_text, passages), normalized, 0.5),
        params.W)
    assert _relative_error(grad, numeric) < 1e-4


def test_listmle_gradient_matches_finite_differences(problem):
    provider, chunk_texts, samples, params = problem
    sample = samples[1]
    passages = [chunk_texts[c] for c in sample.passages]
    grad = listmle_gradient(sample, provider, params, chunk_texts)
    numeric = _finite_difference(
        lambda W: listmle_loss(_similarities(provider, W, sample.query_text, passages), sample.scores),
        params.W)
    assert _relative_error(grad, numeric) < 1e-4


def test_infonce_gradient_matches_finite_differences(problem):
    provider, _, _, params = problem
    pairs = [ContrastivePair("query one", "p0"), ContrastivePair("query two", "p1"), ContrastivePair("p2", "p3")]
    tau = 0.5

    def batch_loss(W):
        q = adapt(AdapterParams(W=W), provider.embed_batch([p.query_text for p in pairs]))
        d = adapt(AdapterParams(W=W), provider.embed_batch([p.positive_text for p in pairs]))
        losses = [infonce_loss(q[i], d[i], [d[j] for j in range(len(pairs)) if j != i], tau)
                  for i in range(len(pairs))]
        return sum(losses) / len(losses)

    loss, grad = infonce_gradient(pairs, provider, params, tau)
    assert loss == pytest.approx(batch_loss(params.W))
    assert _relative_error(grad, _finite_difference(batch_loss, params.W)) < 1e-4


def test_infonce_gradient_needs_two_pairs(problem):
    provider, _, _, params = problem
    with pytest.raises(ValidationError):
        infonce_gradient([ContrastivePair("query one", "p0")], provider, params, 0.05)


def test_batch_gradient_is_sum_of_sample_gradients(problem):
    provider, chunk_texts, samples, params = problem
    config = TrainConfig(loss=LISTNET, alpha=1.0)
    loss, grad = listwise_batch_gradient(samples, provider, params, config, chunk_texts)
    expected = sum(listnet_gradient(s, provider, params, 1.0, chunk_texts) for s in samples)
    assert torch.allclose(grad, expected)
    assert loss > 0


def test_gradient_requires_chunk_texts(problem):
    provider, _, samples, params = problem
    with pytest.raises(ValidationError):
        listnet_gradient(samples[0], provider, params, 1.0, {})


def test_degenerate_adapter_raises(problem):
    provider, chunk_texts, samples, _ = problem
    with pytest.raises(DegenerateAdapterError):
        listnet_gradient(samples[0], provider, AdapterParams(W=-torch.eye(DIM, dtype=torch.float64)), 1.0,
                         chunk_texts)


def test_zero_adapter_is_identity_at_init(problem):
    provider, _, _, _ = problem
    base = DenseEncoder(provider).encode(["p0", "p1"])
    adapted = DenseEncoder(provider, params=AdapterParams.zeros(DIM)).encode(["p0", "p1"])
    assert torch.allclose(base, adapted)


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(loss="hinge")
    with pytest.raises(ValidationError):
        TrainConfig(alpha=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(steps=-1)
    with pytest.raises(ValidationError):
        TrainConfig(optimizer="rmsprop")


def test_train_zero_steps_returns_initial_params(problem):
    provider, chunk_texts, samples, params = problem
    trained, reports = train(samples, provider, params, TrainConfig(steps=0), chunk_texts)
    assert reports == []
    assert torch.equal(trained.W, params.W)
    assert trained.W is not params.W


def test_train_rejects_empty_samples(problem):
    provider, chunk_texts, _, params = problem
    with pytest.raises(ValidationError):
        train([], provider, params, TrainConfig(steps=5), chunk_texts)


@pytest.mark.parametrize("loss", [LISTNET, LISTMLE])
def test_train_reduces_loss_and_is_deterministic(problem, loss):
    provider, chunk_texts, samples, _ = problem
    config = TrainConfig(loss=loss, lr=1e-2, steps=200, seed=3)
    start = AdapterParams.zeros(DIM)
    progress = []
    trained, reports = train(samples, provider, start, config, chunk_texts, progress_callback=progress.append)
    again, _ = train(samples, provider, start, config, chunk_texts)
    assert torch.equal(trained.W, again.W)
    assert torch.equal(start.W, torch.zeros(DIM, DIM, dtype=torch.float64))
    assert len(reports) == 200
    assert progress[-1] == 100
    before = listwise_batch_gradient(samples, provider, start, config, chunk_texts)[0]
    after = listwise_batch_gradient(samples, provider, trained, config, chunk_texts)[0]
    assert after < before


def test_train_with_sgd_and_infonce(problem):
    provider, _, _, _ = problem
    pairs = [ContrastivePair("query one", "p0"), ContrastivePair("query two", "p1"), ContrastivePair("p2", "p3")]
    config = TrainConfig(loss=INFONCE, infonce_tau=0.5, infonce_batch=3, optimizer="sgd", lr=0.1, steps=30)
    start = AdapterParams.zeros(DIM)
    trained, reports = train(pairs, provider, start, config)
    assert len(reports) == 30
    assert all(math.isfinite(r.loss) for r in reports)
    assert infonce_gradient(pairs, provider, trained, 0.5)[0] < infonce_gradient(pairs, provider, start, 0.5)[0]


def test_train_resamples_each_epoch(problem):
    provider, chunk_texts, samples, params = problem
    epochs = []

    def resample(epoch):
        epochs.append(epoch)
        return samples

    config = TrainConfig(steps=5, listwise_batch=1, resample_each_epoch=True)
    train(samples, provider, params, config, chunk_texts, resample=resample)
    assert epochs == [1, 2]


def test_train_divergence_raises(fixed_provider):
    provider = fixed_provider({"q": [float("inf"), 1.0], "p0": [1.0, 0.0], "p1": [0.0, 1.0]})
    samples = [RankingSample("q", "q", ["c0", "c1"], [1.0, 0.0])]
    with pytest.raises(TrainingDivergedError) as excinfo:
        train(samples, provider, AdapterParams.zeros(2), TrainConfig(steps=3), {"c0": "p0", "c1": "p1"})
    assert excinfo.value.step == 1


def test_write_loss_curve(tmp_path, problem):
    provider, chunk_texts, samples, params = problem
    _, reports = train(samples, provider, params, TrainConfig(steps=3), chunk_texts)
    path = write_loss_curve(str(tmp_path / "loss_curve.csv"), reports)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "loss", "grad_norm"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3]
    assert float(rows[1][1]) == reports[0].loss
