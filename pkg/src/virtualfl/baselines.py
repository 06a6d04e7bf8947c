"""FedAvg, Local and Global reference trainers on point-weight MLPs.

All three use the plain MLP (no lateral connections), minibatch SGD on the
mean cross-entropy, and the same dropout as the variational model. Epoch
budgets are expressed per client so the methods can be matched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import FederatedDataset, concat_train, minibatch_indices
from .metrics import accuracy
from .model import MLPArchitecture, init_weights, mlp_forward


@dataclass(frozen=True, eq=False)
class PointModel:
    weights: np.ndarray
    arch: MLPArchitecture

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if len(w) != self.arch.num_params:
            raise ValueError(f"weight vector has length {len(w)}, architecture needs {self.arch.num_params}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def logits(self, x) -> np.ndarray:
        return mlp_forward(x, self.weights, self.arch).data


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.05
    batch_size: int = 32
    dropout: float = 0.3


@dataclass(frozen=True)
class FedAvgConfig:
    client_fraction: float = 0.2
    local_epochs: int = 1
    rounds: int | None = None  # derived from the epoch budget when None
    lr: float = 0.05
    batch_size: int = 32
    dropout: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.client_fraction <= 1.0:
            raise ValueError("client_fraction must lie in (0, 1]")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")

    @property
    def sgd(self) -> SGDConfig:
        return SGDConfig(self.lr, self.batch_size, self.dropout)


def init_point_model(arch: MLPArchitecture, rng: np.random.Generator) -> PointModel:
    return PointModel(init_weights(arch.layout, rng), arch)


def sgd_train(
    model: PointModel, x: np.ndarray, y: np.ndarray, epochs: int, cfg: SGDConfig, rng: np.random.Generator
) -> PointModel:
    w = np.array(model.weights)
    for _ in range(epochs):
        for idx in minibatch_indices(len(y), cfg.batch_size, rng):
            leaf = ad.Tensor(w, check=False)
            with ad.Tape() as tape:
                tape.watch(leaf)
                logits = mlp_forward(x[idx], leaf, model.arch, dropout=cfg.dropout, rng=rng, training=True)
                loss = ad.mean(ad.softmax_cross_entropy(logits, y[idx]))
            (g,) = tape.gradient(loss, [leaf])
            w -= cfg.lr * g
    return PointModel(w, model.arch)


def weighted_average(vectors: list[np.ndarray], counts: list[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if len(vectors) != len(counts) or counts.sum() <= 0:
        raise ValueError("need one positive count per vector")
    stacked = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
    return (counts[:, None] * stacked).sum(axis=0) / counts.sum()


def clients_per_round(client_fraction: float, num_clients: int) -> int:
    return max(1, round(client_fraction * num_clients))


def fedavg_round(
    global_model: PointModel,
    ds: FederatedDataset,
    cfg: FedAvgConfig,
    rng: np.random.Generator,
    selected_out: list | None = None,
) -> PointModel:
    """Sample clients, train each locally from the global weights, average by sample count."""
    m = clients_per_round(cfg.client_fraction, ds.num_clients)
    selected = np.sort(rng.choice(ds.num_clients, size=m, replace=False))
    if selected_out is not None:
        selected_out.extend(int(k) for k in selected)
    client_rngs = rng.spawn(m)
    updates, counts = [], []
    for k, crng in zip(selected, client_rngs):
        shard = ds[int(k)]
        local = sgd_train(global_model, shard.x_train, shard.y_train, cfg.local_epochs, cfg.sgd, crng)
        updates.append(local.weights)
        counts.append(shard.n_train)
    if m == 1:
        return PointModel(updates[0], global_model.arch)
    return PointModel(weighted_average(updates, counts), global_model.arch)


def rounds_for_budget(num_clients: int, epochs_per_client: int, cfg: FedAvgConfig) -> int:
    """Rounds so that each client trains ``epochs_per_client`` epochs on average."""
    m = clients_per_round(cfg.client_fraction, num_clients)
    return max(1, math.ceil(num_clients * epochs_per_client / (m * cfg.local_epochs)))


@dataclass
class BaselineResult:
    models: list[PointModel]  # one per client (shared model repeated for FedAvg/Global)
    accuracies: list[float]
    epochs_per_client: float
    client_epochs: list[int]


def _evaluate(models: list[PointModel], ds: FederatedDataset) -> list[float]:
    return [accuracy(m.logits(s.x_test), s.y_test) for m, s in zip(models, ds)]


def _arch(ds: FederatedDataset, widths) -> MLPArchitecture:
    return MLPArchitecture(ds.feature_dim, tuple(widths), ds.num_classes)


def run_fedavg(
    ds: FederatedDataset, cfg: FedAvgConfig, epochs_per_client: int, rng: np.random.Generator, widths=(100, 100)
) -> BaselineResult:
    init_rng, round_rng = rng.spawn(2)
    model = init_point_model(_arch(ds, widths), init_rng)
    rounds = cfg.rounds if cfg.rounds is not None else rounds_for_budget(ds.num_clients, epochs_per_client, cfg)
    counts = [0] * ds.num_clients
    for _ in range(rounds):
        chosen: list[int] = []
        model = fedavg_round(model, ds, cfg, round_rng, chosen)
        for k in chosen:
            counts[k] += cfg.local_epochs
    models = [model] * ds.num_clients
    return BaselineResult(models, _evaluate(models, ds), sum(counts) / ds.num_clients, counts)


def train_local(
    ds: FederatedDataset, cfg: SGDConfig, epochs: int, rng: np.random.Generator, widths=(100, 100)
) -> list[PointModel]:
    arch = _arch(ds, widths)
    models = []
    for shard, crng in zip(ds, rng.spawn(ds.num_clients)):
        init_rng, train_rng = crng.spawn(2)
        start = init_point_model(arch, init_rng)
        models.append(sgd_train(start, shard.x_train, shard.y_train, epochs, cfg, train_rng))
    return models


def train_global(
    ds: FederatedDataset, cfg: SGDConfig, epochs: int, rng: np.random.Generator, widths=(100, 100)
) -> PointModel:
    init_rng, train_rng = rng.spawn(2)
    x, y = concat_train(ds)
    return sgd_train(init_point_model(_arch(ds, widths), init_rng), x, y, epochs, cfg, train_rng)


def run_local(ds, cfg: SGDConfig, epochs: int, rng, widths=(100, 100)) -> BaselineResult:
    models = train_local(ds, cfg, epochs, rng, widths)
    return BaselineResult(models, _evaluate(models, ds), float(epochs), [epochs] * ds.num_clients)


def run_global(ds, cfg: SGDConfig, epochs: int, rng, widths=(100, 100)) -> BaselineResult:
    model = train_global(ds, cfg, epochs, rng, widths)
    models = [model] * ds.num_clients
    return BaselineResult(models, _evaluate(models, ds), float(epochs), [epochs] * ds.num_clients)
