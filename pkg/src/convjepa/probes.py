"""Frozen-feature evaluation: pooled feature extraction, linear probe, k-NN."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .data import Dataset, eval_transform
from .encoder import SparseEncoder
from .errors import DegenerateLabels, EmptyDataset, EmptyTable, ShapeMismatch


@dataclass
class FeatureTable:
    rows: Tensor
    labels: Tensor

    def __post_init__(self):
        if self.rows.dim() != 2 or self.rows.shape[0] == 0:
            raise EmptyTable("feature table must be a non-empty N x C matrix")
        if self.labels.shape != (self.rows.shape[0],):
            raise ShapeMismatch("one label per feature row is required")

    def __len__(self):
        return self.rows.shape[0]


@dataclass
class ProbeReport:
    kind: str
    top1: float
    top5: float
    epochs_or_k: int
    config_digest: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "ProbeReport":
        return cls(**json.loads(text))


def config_digest(settings: dict) -> str:
    blob = json.dumps(settings, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@torch.no_grad()
def extract_features(encoder: SparseEncoder, dataset: Dataset, out_hw, batch_size: int = 256) -> FeatureTable:
    """Eval transform, dense eval-mode forward, global average pooling."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot extract features from an empty dataset")
    was_training = encoder.training
    encoder.set_bn_mode("eval")
    dtype = next(encoder.parameters()).dtype
    rows = []
    try:
        for start in range(0, len(dataset), batch_size):
            batch = torch.stack([eval_transform(dataset.image(i), out_hw, dataset.mean, dataset.std)
                                 for i in range(start, min(start + batch_size, len(dataset)))])
            rows.append(encoder(batch.to(dtype)).mean(dim=(2, 3)))
    finally:
        encoder.train(was_training)
    return FeatureTable(torch.cat(rows), torch.tensor(dataset.labels, dtype=torch.long))


def topk_accuracy(scores: Tensor, labels: Tensor, k: int) -> float:
    """Fraction of rows whose label is among the ``k`` best scores.

    Equal scores rank the lower class index first.
    """
    scores = torch.as_tensor(scores)
    labels = torch.as_tensor(labels)
    if k > scores.shape[1]:
        raise ValueError(f"k={k} exceeds the number of classes {scores.shape[1]}")
    order = torch.sort(scores, dim=1, descending=True, stable=True).indices[:, :k]
    hits = (order == labels.view(-1, 1)).any(dim=1)
    return float(hits.double().mean())


def _num_classes(*tables: FeatureTable) -> int:
    return int(max(int(t.labels.max()) for t in tables)) + 1


def knn_scores(train: FeatureTable, queries: Tensor, k: int = 20, temperature: float = 0.07,
               num_classes: int | None = None) -> Tensor:
    """Temperature-weighted cosine k-NN vote for a batch of query rows."""
    if len(train) == 0:
        raise EmptyTable("k-NN needs a non-empty training table")
    if not 1 <= k <= len(train):
        raise ValueError(f"k must be in [1, {len(train)}], got {k}")
    num_classes = num_classes or _num_classes(train)
    queries = queries.reshape(-1, train.rows.shape[1])
    bank = F.normalize(train.rows.double(), dim=1)
    sims = F.normalize(queries.double(), dim=1) @ bank.T
    # stable sort keeps the lower training index first among equal similarities
    top = torch.sort(sims, dim=1, descending=True, stable=True)
    nn_sims, nn_idx = top.values[:, :k], top.indices[:, :k]
    weights = torch.exp(nn_sims / temperature)
    scores = torch.zeros(queries.shape[0], num_classes, dtype=torch.float64)
    scores.scatter_add_(1, train.labels[nn_idx], weights)
    return scores


def knn_classify(train: FeatureTable, query: Tensor, k: int = 20, temperature: float = 0.07,
                 num_classes: int | None = None) -> Tensor:
    return knn_scores(train, query.view(1, -1), k, temperature, num_classes)[0]


def knn_probe(train: FeatureTable, val: FeatureTable, k: int = 20, temperature: float = 0.07,
              digest: str = "") -> ProbeReport:
    num_classes = _num_classes(train, val)
    k = min(k, len(train))
    scores = knn_scores(train, val.rows, k, temperature, num_classes)
    top1 = topk_accuracy(scores, val.labels, 1)
    top5 = topk_accuracy(scores, val.labels, min(5, num_classes))
    return ProbeReport("knn", top1, top5, k, digest)


def train_linear_probe(train: FeatureTable, val: FeatureTable, epochs: int = 90, lr: float = 0.1,
                       momentum: float = 0.9, batch_size: int = 256, seed: int = 0,
                       digest: str = "") -> ProbeReport:
    """Softmax-regression head on frozen features, SGD with cosine decay.

    Features are standardized with the training table's per-dimension mean
    and std (a fixed preprocessing step, not learned). The head is evaluated
    on ``val`` after every epoch and the report keeps the best top-1 with the
    top-5 of that same epoch. With ``epochs=0`` the initial head is scored.
    """
    if train.rows.shape[1] != val.rows.shape[1]:
        raise ShapeMismatch("train and val feature widths differ")
    if torch.unique(train.labels).numel() < 2:
        raise DegenerateLabels("linear probe needs at least two classes in the training table")
    num_classes = _num_classes(train, val)
    k5 = min(5, num_classes)
    mu = train.rows.double().mean(dim=0)
    sd = train.rows.double().std(dim=0, unbiased=False)
    sd = torch.where(sd > 1e-12, sd, torch.ones_like(sd))
    x_train = ((train.rows.double() - mu) / sd).float()
    x_val = ((val.rows.double() - mu) / sd).float()

    gen = torch.Generator().manual_seed(seed)
    head = torch.nn.Linear(x_train.shape[1], num_classes)
    with torch.no_grad():
        head.weight.normal_(0.0, 0.01, generator=gen)
        head.bias.zero_()
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=momentum)
    steps_per_epoch = math.ceil(len(train) / batch_size)
    total = max(epochs * steps_per_epoch, 1)

    def evaluate():
        with torch.no_grad():
            scores = head(x_val)
        return topk_accuracy(scores, val.labels, 1), topk_accuracy(scores, val.labels, k5)

    best = evaluate() if epochs == 0 else (-1.0, -1.0)
    step = 0
    for _ in range(epochs):
        perm = torch.randperm(len(train), generator=gen)
        for b in range(steps_per_epoch):
            idx = perm[b * batch_size:(b + 1) * batch_size]
            for group in opt.param_groups:
                group["lr"] = lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
            loss = F.cross_entropy(head(x_train[idx]), train.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        result = evaluate()
        if result[0] > best[0]:
            best = result
    return ProbeReport("linear", best[0], best[1], epochs, digest)
