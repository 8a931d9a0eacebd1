"""Normalizer statistics over NCHW tensors.

IN statistics are computed directly; LN and BN statistics are derived from
them (the reuse path), which needs only the per-(n, c) means and variances.
``direct_stats`` computes every mode by a literal two-pass sum and serves as
the reference for the reuse path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import as_tensor4

PER_NC = "PerNC"
PER_N = "PerN"
PER_C = "PerC"
PER_NG = "PerNG"

MODES = ("in", "ln", "bn")


class ContractError(ValueError):
    """Inputs violate a structural precondition (signature, shape)."""


@dataclass
class StatPair:
    mu: np.ndarray
    var: np.ndarray
    signature: str
    # number of variance entries that came out negative and were clamped to 0
    clamped: int = field(default=0)

    def __post_init__(self):
        if self.mu.shape != self.var.shape:
            raise ContractError(f"mu {self.mu.shape} and var {self.var.shape} differ")

    @property
    def count(self) -> int:
        """Number of scalars held (means plus variances)."""
        return self.mu.size + self.var.size


def _clamp(var: np.ndarray) -> tuple[np.ndarray, int]:
    neg = var < 0.0
    n = int(np.count_nonzero(neg))
    if n:
        var = np.where(neg, 0.0, var)
    return var, n


def in_stats(x: np.ndarray) -> StatPair:
    x = as_tensor4(x)
    mu = x.mean(axis=(2, 3))
    d = x - mu[:, :, None, None]
    var = (d * d).mean(axis=(2, 3))
    return StatPair(mu, var, PER_NC)


def _require_nc(s: StatPair) -> None:
    if s.signature != PER_NC or s.mu.ndim != 2:
        raise ContractError(f"expected PerNC statistics, got {s.signature}")


def ln_stats_from_in(s: StatPair, C: int | None = None) -> StatPair:
    """Per-sample statistics over (C, H, W) from IN statistics alone."""
    _require_nc(s)
    if C is not None and s.mu.shape[1] != C:
        raise ContractError(f"IN stats have {s.mu.shape[1]} channels, expected {C}")
    mu = s.mu.mean(axis=1)
    second = (s.var + s.mu * s.mu).mean(axis=1)
    var, n = _clamp(second - mu * mu)
    return StatPair(mu, var, PER_N, n)


def bn_stats_from_in(s: StatPair, N: int | None = None) -> StatPair:
    """Per-channel statistics over (N, H, W) from IN statistics alone."""
    _require_nc(s)
    if N is not None and s.mu.shape[0] != N:
        raise ContractError(f"IN stats have {s.mu.shape[0]} samples, expected {N}")
    mu = s.mu.mean(axis=0)
    second = (s.var + s.mu * s.mu).mean(axis=0)
    var, n = _clamp(second - mu * mu)
    return StatPair(mu, var, PER_C, n)


_DIRECT_AXES = {"in": ((2, 3), PER_NC), "ln": ((1, 2, 3), PER_N), "bn": ((0, 2, 3), PER_C)}


def direct_stats(x: np.ndarray, mode: str) -> StatPair:
    """Two-pass mean/variance over the index set of ``mode``."""
    x = as_tensor4(x)
    try:
        axes, sig = _DIRECT_AXES[mode.lower()]
    except KeyError:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}") from None
    mu = x.mean(axis=axes, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axes)
    return StatPair(mu.reshape(var.shape), var, sig)


def gn_stats(x: np.ndarray, groups: int) -> StatPair:
    """Per-(sample, group) statistics; ``mu``/``var`` have shape (N, groups)."""
    x = as_tensor4(x)
    N, C, H, W = x.shape
    if groups < 1 or C % groups:
        raise ValueError(f"C={C} is not divisible by groups={groups}")
    xg = x.reshape(N, groups, C // groups, H, W)
    mu = xg.mean(axis=(2, 3, 4), keepdims=True)
    var = ((xg - mu) ** 2).mean(axis=(2, 3, 4))
    return StatPair(mu.reshape(N, groups), var, PER_NG)


def check_partitions(parts: Sequence[np.ndarray]) -> list[np.ndarray]:
    if len(parts) < 1:
        raise ContractError("need at least one partition")
    parts = [as_tensor4(p) for p in parts]
    chw = parts[0].shape[1:]
    for i, p in enumerate(parts):
        if p.shape[1:] != chw:
            raise ContractError(f"partition {i} has (C,H,W)={p.shape[1:]}, expected {chw}")
    return parts


def pool_bn_stats(triples: Sequence[tuple[int, np.ndarray, np.ndarray]]) -> StatPair:
    """Pool per-partition (count, mean, E[x^2]) triples in the given order."""
    if len(triples) == 1:
        _, mu, sq = triples[0]
        var, n = _clamp(sq - mu * mu)
        return StatPair(mu, var, PER_C, n)
    total = 0
    s1 = 0.0
    s2 = 0.0
    for count, mean, sq in triples:
        total += count
        s1 = s1 + count * mean
        s2 = s2 + count * sq
    mu = s1 / total
    var, n = _clamp(s2 / total - mu * mu)
    return StatPair(mu, var, PER_C, n)


def partition_triple(s_in: StatPair, hw: int) -> tuple[int, np.ndarray, np.ndarray]:
    """(count, per-channel mean, per-channel E[x^2]) of one partition from its IN stats."""
    _require_nc(s_in)
    n = s_in.mu.shape[0]
    return n * hw, s_in.mu.mean(axis=0), (s_in.var + s_in.mu * s_in.mu).mean(axis=0)


def sync_bn_stats(parts: Sequence[np.ndarray]) -> StatPair:
    """BN statistics over the union of all partitions' samples."""
    parts = check_partitions(parts)
    hw = parts[0].shape[2] * parts[0].shape[3]
    return pool_bn_stats([partition_triple(in_stats(p), hw) for p in parts])
