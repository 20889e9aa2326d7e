import math

import pytest
import torch
from scipy.stats import binom

from convjepa.data import Dataset
from convjepa.encoder import EncoderConfig, build_encoder
from convjepa.errors import DegenerateLabels, EmptyDataset, EmptyTable, ShapeMismatch
from convjepa.probes import (FeatureTable, ProbeReport, config_digest, extract_features, knn_classify,
                             knn_probe, knn_scores, topk_accuracy, train_linear_probe)


def _clusters(n_per, dim=8, seed=0, sep=10.0):
    gen = torch.Generator().manual_seed(seed)
    centers = torch.zeros(2, dim)
    centers[0, 0], centers[1, 1] = sep, sep
    rows = torch.cat([centers[c] + torch.randn(n_per, dim, generator=gen) for c in (0, 1)])
    labels = torch.tensor([0] * n_per + [1] * n_per)
    return FeatureTable(rows, labels)


# -- top-k --------------------------------------------------------------------

def test_topk_identity():
    assert topk_accuracy(torch.eye(4), torch.arange(4), 1) == 1.0


def test_topk_uniform_tie_break():
    labels = torch.tensor([0, 1, 2, 0, 3])
    assert topk_accuracy(torch.ones(5, 4), labels, 1) == pytest.approx(2 / 5)
    assert topk_accuracy(torch.ones(5, 4), labels, 2) == pytest.approx(3 / 5)


def test_topk_all_classes():
    scores = torch.randn(10, 6)
    assert topk_accuracy(scores, torch.randint(0, 6, (10,)), 6) == 1.0
    with pytest.raises(ValueError):
        topk_accuracy(scores, torch.zeros(10, dtype=torch.long), 7)


# -- k-NN ---------------------------------------------------------------------

def test_knn_exact_match():
    train = _clusters(5)
    scores = knn_classify(train, train.rows[7], k=1, temperature=0.07)
    assert int(scores.argmax()) == 1
    assert scores[1].item() == pytest.approx(math.exp(1 / 0.07), rel=1e-12)
    assert scores[0].item() == 0.0


@pytest.mark.parametrize("k", [1, 3, 10])
def test_knn_clusters(k):
    train = _clusters(10)
    queries = _clusters(4, seed=1)
    assert knn_probe(train, queries, k=k).top1 == 1.0


def test_knn_hand_vote():
    # unit vectors at known angles from the query direction (1, 0)
    angles = [0.1, 0.2, 0.3, 0.5, 0.7, 1.2, 2.0]
    labels = [2, 0, 2, 1, 0, 1, 1]
    rows = torch.tensor([[math.cos(a), math.sin(a)] for a in angles], dtype=torch.float64)
    train = FeatureTable(rows, torch.tensor(labels))
    t = 0.5
    scores = knn_classify(train, torch.tensor([3.0, 0.0]), k=5, temperature=t, num_classes=3)
    vote = [0.0, 0.0, 0.0]
    for a, y in list(zip(angles, labels))[:5]:
        vote[y] += math.exp(math.cos(a) / t)
    assert scores.tolist() == pytest.approx(vote, rel=1e-12)


def test_knn_tie_prefers_lower_index():
    rows = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    train = FeatureTable(rows, torch.tensor([1, 0, 0]))
    scores = knn_scores(train, torch.tensor([[2.0, 0.0]]), k=1)
    assert scores.argmax().item() == 1


def test_knn_errors():
    train = _clusters(2)
    with pytest.raises(ValueError):
        knn_scores(train, train.rows, k=5)
    with pytest.raises(EmptyTable):
        FeatureTable(torch.zeros(0, 3), torch.zeros(0, dtype=torch.long))
    with pytest.raises(ShapeMismatch):
        FeatureTable(torch.zeros(3, 3), torch.zeros(2, dtype=torch.long))


def test_knn_probe_clips_k():
    rep = knn_probe(_clusters(2), _clusters(2, seed=1), k=20)
    assert rep.kind == "knn" and rep.epochs_or_k == 4


# -- linear probe -------------------------------------------------------------

def test_linear_separable():
    rep = train_linear_probe(_clusters(50), _clusters(20, seed=1), epochs=20, batch_size=16)
    assert rep.top1 == 1.0 and rep.kind == "linear" and rep.epochs_or_k == 20


def test_linear_zero_epochs_scores_initial_head():
    train, val = _clusters(20), _clusters(10, seed=1)
    a = train_linear_probe(train, val, epochs=0, seed=3)
    b = train_linear_probe(train, val, epochs=0, seed=3)
    assert a == b and a.epochs_or_k == 0


def test_linear_shuffled_labels_binomial_band():
    n_train, n_val, classes, epochs = 2000, 1000, 10, 20
    gen = torch.Generator().manual_seed(0)
    train = FeatureTable(torch.randn(n_train, 16, generator=gen), torch.randint(0, classes, (n_train,), generator=gen))
    val = FeatureTable(torch.randn(n_val, 16, generator=gen), torch.randint(0, classes, (n_val,), generator=gen))
    rep = train_linear_probe(train, val, epochs=epochs, batch_size=128)
    # val labels are independent of the head, so each epoch's hit count is
    # Binomial(n_val, 0.1); the reported top-1 is a max over epochs, so the
    # upper quantile is Bonferroni-corrected by the number of epochs
    alpha = 1e-3
    lo = binom.ppf(alpha / 2, n_val, 1 / classes) / n_val
    hi = binom.ppf(1 - alpha / (2 * epochs), n_val, 1 / classes) / n_val
    assert lo <= rep.top1 <= hi, (lo, rep.top1, hi)


def test_linear_degenerate_labels():
    t = FeatureTable(torch.randn(5, 3), torch.zeros(5, dtype=torch.long))
    with pytest.raises(DegenerateLabels):
        train_linear_probe(t, t)


def test_linear_deterministic():
    train, val = _clusters(30, sep=1.0), _clusters(10, seed=1, sep=1.0)
    assert train_linear_probe(train, val, epochs=5, seed=1) == train_linear_probe(train, val, epochs=5, seed=1)


# -- features / reports -------------------------------------------------------

def _dataset(images, labels):
    return Dataset(list(zip(images, labels)), ["a", "b"])


def test_extract_features_shape_and_duplicates():
    enc = build_encoder(EncoderConfig.from_preset("micro"), seed=0)
    img = torch.rand(3, 16, 16)
    table = extract_features(enc, _dataset([img, img.clone(), torch.rand(3, 16, 16)], [0, 0, 1]), (16, 16))
    assert table.rows.shape == (3, 16)
    assert torch.equal(table.rows[0], table.rows[1])
    assert enc.training  # mode restored


def test_extract_features_zero_weights():
    enc = build_encoder(EncoderConfig.from_preset("micro"), seed=0)
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    table = extract_features(enc, _dataset([torch.rand(3, 16, 16)] * 2, [0, 1]), (16, 16))
    assert not table.rows.any()


def test_extract_features_empty():
    enc = build_encoder(EncoderConfig.from_preset("micro"))
    ds = _dataset([torch.rand(3, 16, 16)], [0])
    ds.items.clear()
    with pytest.raises(EmptyDataset):
        extract_features(enc, ds, (16, 16))


def test_report_json_round_trip():
    rep = ProbeReport("linear", 0.5, 0.75, 90, config_digest({"a": 1}))
    assert ProbeReport.from_json(rep.to_json()) == rep
    assert list(__import__("json").loads(rep.to_json())) == ["kind", "top1", "top5", "epochs_or_k", "config_digest"]
    assert config_digest({"a": 1, "b": 2}) == config_digest({"b": 2, "a": 1}) != config_digest({"a": 2})
