"""Test-time BN statistics for trained models.

``batch_average`` freezes every parameter, runs training-mode forwards over
a number of minibatches, and stores the arithmetic mean of the minibatch BN
means and variances in each layer. ``moving_average_finalize`` instead
copies the moving averages tracked during training.
"""

from __future__ import annotations

from typing import Iterable, Iterator

import numpy as np

from .baseline import TRAIN, StateError


class BatchAverageAccumulator:
    def __init__(self):
        self.mu_sum = None
        self.var_sum = None
        self.mu_sq_sum = None
        self.count = 0

    def add(self, mu: np.ndarray, var: np.ndarray) -> None:
        if self.count == 0:
            self.mu_sum = np.zeros_like(mu)
            self.var_sum = np.zeros_like(var)
            self.mu_sq_sum = np.zeros_like(mu)
        self.mu_sum = self.mu_sum + mu
        self.var_sum = self.var_sum + var
        self.mu_sq_sum = self.mu_sq_sum + mu * mu
        self.count += 1

    def finalize(self, pooled: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Mean of minibatch means and of minibatch variances.

        With ``pooled`` the spread of the minibatch means is added to the
        variance (law of total variance) -- not the default.
        """
        if self.count < 1:
            raise ValueError("no minibatches were absorbed")
        mu = self.mu_sum / self.count
        var = self.var_sum / self.count
        if pooled:
            var = var + np.maximum(self.mu_sq_sum / self.count - mu * mu, 0.0)
        return mu, var


def random_minibatches(images: np.ndarray, batch_size: int, num_batches: int | None,
                       rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Minibatches drawn from a random permutation of ``images``.

    ``num_batches=None`` covers the whole set once (incomplete tail dropped).
    """
    order = rng.permutation(len(images))
    full = len(images) // batch_size
    if num_batches is None:
        num_batches = full
    for b in range(num_batches):
        k = b % full
        if k == 0 and b:
            order = rng.permutation(len(images))
        yield images[order[k * batch_size:(k + 1) * batch_size]]


def batch_average(model, data_source: Iterable, num_batches: int | None = None,
                  pooled: bool = False) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Estimate and install frozen BN statistics for every layer that has them.

    ``data_source`` yields minibatches, each an array or a list of partition
    arrays. Returns the installed statistics keyed by layer name.
    """
    layers = [l for l in model.norm_layers if l.has_bn_stats()]
    accs = {l.name: BatchAverageAccumulator() for l in layers}
    model.set_update_stats(False)
    try:
        for i, batch in enumerate(data_source):
            if num_batches is not None and i >= num_batches:
                break
            parts = list(batch) if isinstance(batch, (list, tuple)) else [batch]
            model.forward(parts, TRAIN)
            for l in layers:
                for mu, var in l.last_stats:
                    accs[l.name].add(mu, var)
    finally:
        model.set_update_stats(True)
    if layers and accs[layers[0].name].count == 0:
        raise ValueError("data source produced no minibatches")
    out = {}
    for l in layers:
        mu, var = accs[l.name].finalize(pooled)
        l.set_frozen(mu, var)
        out[l.name] = (mu, var)
    return out


def moving_average_finalize(model) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out = {}
    for l in model.norm_layers:
        if not l.has_bn_stats():
            continue
        stats = l.moving_stats()
        if stats is None:
            raise StateError(f"layer {l.name} has no tracked moving statistics")
        l.set_frozen(*stats)
        out[l.name] = stats
    return out
