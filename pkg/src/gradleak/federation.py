"""FedSGD simulation with an interception hook on client gradients."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .models import ModelSpec, Parameters, loss_and_grads


@dataclass(frozen=True)
class FedConfig:
    num_clients: int = 4
    clients_per_round: int = 2
    lr: float = 0.1
    rounds: int = 10
    local_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError("need 1 <= clients_per_round <= num_clients")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.rounds < 0 or self.local_epochs < 1:
            raise ValueError("rounds must be >= 0 and local_epochs >= 1")


@dataclass(frozen=True)
class ClientUpdate:
    """Gradients one client sends to the server, in parameter order."""

    client_id: int
    round: int
    grads: tuple
    num_samples: int
    names: tuple = ()
    loss: float = float("nan")

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("a client update needs at least one sample")

    def flat(self) -> np.ndarray:
        return np.concatenate([g.reshape(-1) for g in self.grads])

    def replace_grads(self, grads) -> "ClientUpdate":
        return ClientUpdate(self.client_id, self.round, tuple(np.asarray(g) for g in grads),
                            self.num_samples, self.names, self.loss)


@dataclass
class RoundLog:
    round: int
    mean_loss: float
    client_ids: tuple


@dataclass
class FedResult:
    params: Parameters
    log: list = field(default_factory=list)


def client_update(spec: ModelSpec, params: Parameters, images: np.ndarray, labels,
                  client_id: int = 0, round: int = 0, local_epochs: int = 1,
                  lr: float | None = None) -> ClientUpdate:
    """Mean cross-entropy gradient of the client's data at ``params``.

    With ``local_epochs > 1`` the client takes that many local gradient
    steps of size ``lr`` and transmits its total displacement divided by
    ``lr``, i.e. the sum of the local gradients.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if images.ndim == 3:
        images = images[None]
    if len(images) == 0 or len(images) != len(labels):
        raise ValueError("client data must be non-empty with one label per image")
    loss, grads = loss_and_grads(spec, params, images, labels)
    if local_epochs > 1:
        if lr is None:
            raise ValueError("local_epochs > 1 needs a learning rate")
        total = [g.copy() for g in grads]
        local = params
        for _ in range(local_epochs - 1):
            local = local.with_arrays([p - lr * g for p, g in zip(local.arrays(), grads)])
            _, grads = loss_and_grads(spec, local, images, labels)
            total = [t + g for t, g in zip(total, grads)]
        grads = total
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError("client gradient is not finite")
    return ClientUpdate(client_id, round, tuple(grads), len(images), tuple(params), loss)


def server_aggregate(params: Parameters, updates: Sequence[ClientUpdate], lr: float) -> Parameters:
    """``w - lr * sum_k (n_k / n) g_k`` over the updates, in client-id order."""
    if not updates:
        raise ValueError("cannot aggregate an empty list of updates")
    updates = sorted(updates, key=lambda u: u.client_id)
    n = sum(u.num_samples for u in updates)
    shapes = [a.shape for a in params.arrays()]
    step = [np.zeros(s) for s in shapes]
    for u in updates:
        if [g.shape for g in u.grads] != shapes:
            raise ValueError(f"update from client {u.client_id} does not match the parameter layout")
        w = u.num_samples / n
        for acc, g in zip(step, u.grads):
            acc += w * g
    return params.with_arrays([p - lr * s for p, s in zip(params.arrays(), step)])


def partition(n: int, num_clients: int, seed: int = 0) -> list[np.ndarray]:
    """Disjoint, covering, near-equal split of ``range(n)`` after a seeded shuffle."""
    if n < num_clients:
        raise ValueError("need at least one sample per client")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(p) for p in np.array_split(perm, num_clients)]


def run_rounds(fed: FedConfig, spec: ModelSpec, params: Parameters, images: np.ndarray,
               labels: np.ndarray, hook: Callable[[ClientUpdate], None] | None = None,
               partitions: Sequence[np.ndarray] | None = None) -> FedResult:
    """Run ``fed.rounds`` rounds of FedSGD.

    Each round samples ``clients_per_round`` clients without replacement,
    collects their updates (handing each to ``hook``, the interception
    point) and aggregates them.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if partitions is None:
        partitions = partition(len(images), fed.num_clients, fed.seed)
    if len(partitions) != fed.num_clients:
        raise ValueError("need one partition per client")
    rng = np.random.default_rng(fed.seed)
    result = FedResult(params)
    for t in range(fed.rounds):
        chosen = np.sort(rng.choice(fed.num_clients, fed.clients_per_round, replace=False))
        updates = []
        for k in chosen:
            idx = partitions[k]
            u = client_update(spec, result.params, images[idx], labels[idx], int(k), t,
                              fed.local_epochs, fed.lr)
            if hook is not None:
                hook(u)
            updates.append(u)
        n = sum(u.num_samples for u in updates)
        mean_loss = sum(u.loss * u.num_samples for u in updates) / n
        result.params = server_aggregate(result.params, updates, fed.lr)
        result.log.append(RoundLog(t, float(mean_loss), tuple(int(k) for k in chosen)))
    return result


def write_round_log(log: Sequence[RoundLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "mean_loss", "participating_client_ids"])
        for r in log:
            w.writerow([r.round, repr(r.mean_loss), " ".join(map(str, r.client_ids))])


def gradient_descent(spec: ModelSpec, params: Parameters, images, labels, lr: float,
                     steps: int) -> tuple[Parameters, list[float]]:
    """Centralised full-batch gradient descent, the C=1 reference."""
    losses = []
    for _ in range(steps):
        loss, grads = loss_and_grads(spec, params, images, labels)
        losses.append(loss)
        params = params.with_arrays([p - lr * g for p, g in zip(params.arrays(), grads)])
    return params, losses
