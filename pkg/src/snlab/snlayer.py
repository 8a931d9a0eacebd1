"""Switchable Normalization.

The layer standardizes with a convex mix of IN, LN and BN statistics:

    mu  = w_in mu_in  + w_ln mu_ln  + w_bn mu_bn          (weights from lambda_mu)
    var = v_in var_in + v_ln var_ln + v_bn var_bn         (weights from lambda_sigma)
    y   = gamma * (x - mu) / sqrt(var + eps) + beta

Means and variances carry separate softmax weights. The backward pass is
written for a list of partitions whose BN statistics are pooled; a single
device is the one-partition case.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .baseline import DEFAULT_EPS, DEFAULT_MOMENTUM, EVAL, TRAIN, StateError
from .stats import (
    ContractError,
    StatPair,
    bn_stats_from_in,
    check_partitions,
    in_stats,
    ln_stats_from_in,
    partition_triple,
    pool_bn_stats,
)
from .tensor import as_tensor4

NORMALIZERS = ("in", "ln", "bn")
DIVERGENCE_FLOOR = 1e-12


def softmax_weights(lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (3,):
        raise ValueError(f"expected 3 control parameters, got shape {lam.shape}")
    if not np.all(np.isfinite(lam)):
        raise ValueError(f"control parameters must be finite, got {lam}")
    e = np.exp(lam - lam.max())
    return e / e.sum()


def _one_hot(i: int) -> np.ndarray:
    w = np.zeros(3)
    w[i] = 1.0
    return w


@dataclass(frozen=True)
class ImportanceWeights:
    w_mu: np.ndarray
    w_sigma: np.ndarray

    def as_dict(self) -> dict:
        return {"w_mu": self.w_mu.tolist(), "w_sigma": self.w_sigma.tolist()}


@dataclass
class SNParams:
    gamma: np.ndarray
    beta: np.ndarray
    lambda_mu: np.ndarray
    lambda_sigma: np.ndarray
    eps: float = DEFAULT_EPS
    frozen_bn: tuple[np.ndarray, np.ndarray] | None = None
    # argmax selections recorded by harden(); None means soft weights
    hard_mu: int | None = None
    hard_sigma: int | None = None
    # optional moving average of BN statistics, tracked in training
    track_moving: bool = True
    momentum: float = DEFAULT_MOMENTUM
    moving_mu: np.ndarray | None = None
    moving_var: np.ndarray | None = None
    moving_steps: int = 0

    @classmethod
    def create(cls, C: int, *, eps: float = DEFAULT_EPS, lambda_init: float = 1.0,
               track_moving: bool = True, momentum: float = DEFAULT_MOMENTUM) -> "SNParams":
        if eps <= 0:
            raise ValueError("eps must be positive")
        return cls(np.ones(C), np.zeros(C), np.full(3, float(lambda_init)),
                   np.full(3, float(lambda_init)), eps=eps, track_moving=track_moving,
                   momentum=momentum, moving_mu=np.zeros(C), moving_var=np.ones(C))

    @property
    def channels(self) -> int:
        return self.gamma.size

    @property
    def hardened(self) -> bool:
        return self.hard_mu is not None or self.hard_sigma is not None

    def learnable(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta,
                "lambda_mu": self.lambda_mu, "lambda_sigma": self.lambda_sigma}

    def num_learnable(self) -> int:
        return sum(v.size for v in self.learnable().values())

    def weights(self) -> ImportanceWeights:
        """Effective importance weights (one-hot where hardened)."""
        w_mu = _one_hot(self.hard_mu) if self.hard_mu is not None else softmax_weights(self.lambda_mu)
        w_sigma = (_one_hot(self.hard_sigma) if self.hard_sigma is not None
                   else softmax_weights(self.lambda_sigma))
        return ImportanceWeights(w_mu, w_sigma)

    def soft_weights(self) -> ImportanceWeights:
        return ImportanceWeights(softmax_weights(self.lambda_mu), softmax_weights(self.lambda_sigma))

    def copy(self) -> "SNParams":
        def cp(a):
            return None if a is None else np.array(a, dtype=np.float64)
        frozen = None if self.frozen_bn is None else (cp(self.frozen_bn[0]), cp(self.frozen_bn[1]))
        return replace(self, gamma=cp(self.gamma), beta=cp(self.beta), lambda_mu=cp(self.lambda_mu),
                       lambda_sigma=cp(self.lambda_sigma), frozen_bn=frozen,
                       moving_mu=cp(self.moving_mu), moving_var=cp(self.moving_var))

    def update_moving(self, s: StatPair) -> None:
        if not self.track_moving:
            return
        p = self.momentum
        self.moving_mu = (1.0 - p) * self.moving_mu + p * s.mu
        self.moving_var = (1.0 - p) * self.moving_var + p * s.var
        self.moving_steps += 1

    def to_dict(self) -> dict:
        d = {
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "lambda_mu": self.lambda_mu.tolist(),
            "lambda_sigma": self.lambda_sigma.tolist(),
            "eps": self.eps,
            "frozen_bn": None if self.frozen_bn is None else
            {"mu": self.frozen_bn[0].tolist(), "var": self.frozen_bn[1].tolist()},
        }
        if self.hardened:
            d["hard"] = {"mu": self.hard_mu, "sigma": self.hard_sigma}
        if self.track_moving:
            d["moving"] = {"mu": self.moving_mu.tolist(), "var": self.moving_var.tolist(),
                           "momentum": self.momentum, "steps": self.moving_steps}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SNParams":
        def arr(v):
            return np.array(v, dtype=np.float64)
        frozen = d.get("frozen_bn")
        p = cls(arr(d["gamma"]), arr(d["beta"]), arr(d["lambda_mu"]), arr(d["lambda_sigma"]),
                eps=float(d["eps"]),
                frozen_bn=None if frozen is None else (arr(frozen["mu"]), arr(frozen["var"])))
        hard = d.get("hard")
        if hard:
            p.hard_mu, p.hard_sigma = hard["mu"], hard["sigma"]
        moving = d.get("moving")
        if moving:
            p.track_moving = True
            p.moving_mu, p.moving_var = arr(moving["mu"]), arr(moving["var"])
            p.momentum = float(moving["momentum"])
            p.moving_steps = int(moving["steps"])
        else:
            p.track_moving = False
        return p

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "SNParams":
        return cls.from_dict(json.loads(s))


def harden(params: SNParams) -> SNParams:
    """Copy of ``params`` selecting one normalizer for the mean and one for the
    variance by argmax over the control parameters. Ties go to the earliest of
    (in, ln, bn)."""
    out = params.copy()
    out.hard_mu = int(np.argmax(params.lambda_mu))
    out.hard_sigma = int(np.argmax(params.lambda_sigma))
    return out


def ratio_divergence(w_mu, w_sigma, floor: float = DIVERGENCE_FLOOR) -> float:
    """Symmetric KL divergence between two 3-way ratio distributions."""
    a = np.asarray(w_mu, dtype=np.float64)
    b = np.asarray(w_sigma, dtype=np.float64)
    for v in (a, b):
        if v.ndim != 1 or v.size != b.size or np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a probability distribution: {v}")
    a = np.maximum(a, floor)
    b = np.maximum(b, floor)
    # KL(a||b) + KL(b||a) == sum (a - b)(log a - log b), symmetric term by term
    return float(np.sum((a - b) * (np.log(a) - np.log(b))))


@dataclass
class GradBundle:
    dx: np.ndarray | list
    dgamma: np.ndarray
    dbeta: np.ndarray
    dlambda_mu: np.ndarray
    dlambda_sigma: np.ndarray

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.dgamma, "beta": self.dbeta,
                "lambda_mu": self.dlambda_mu, "lambda_sigma": self.dlambda_sigma}


@dataclass
class _Part:
    x: np.ndarray
    s_in: StatPair
    s_ln: StatPair
    xt: np.ndarray
    inv_std: np.ndarray  # (N, C)


@dataclass
class SNCache:
    parts: list[_Part]
    s_bn: StatPair
    bn_count: int  # samples*H*W contributing to the BN statistics
    weights: ImportanceWeights
    phase: str
    gamma: np.ndarray
    hard_mu: bool
    hard_sigma: bool
    synced: bool = field(default=False)

    @property
    def x(self) -> np.ndarray:
        return self.parts[0].x

    @property
    def xt(self) -> np.ndarray:
        return self.parts[0].xt


def _bn_for_eval(params: SNParams, C: int) -> StatPair:
    if params.frozen_bn is None:
        raise StateError("evaluation needs frozen BN statistics; run batch_average or "
                         "moving_average_finalize first")
    mu, var = params.frozen_bn
    if mu.shape != (C,) or var.shape != (C,):
        raise ContractError(f"frozen BN statistics have shape {mu.shape}, expected ({C},)")
    return StatPair(mu, var, "PerC")


def _check_channels(C: int, params: SNParams) -> None:
    if C != params.channels:
        raise ContractError(f"input has {C} channels, layer has {params.channels}")


def _forward_parts(parts: list[np.ndarray], s_ins: list[StatPair], s_bn: StatPair, bn_count: int,
                   params: SNParams, phase: str, synced: bool):
    w = params.weights()
    wm, ws = w.w_mu, w.w_sigma
    g = params.gamma[None, :, None, None]
    b = params.beta[None, :, None, None]
    outs, cached = [], []
    for x, s_in in zip(parts, s_ins):
        s_ln = ln_stats_from_in(s_in)
        mu = wm[0] * s_in.mu + wm[1] * s_ln.mu[:, None] + wm[2] * s_bn.mu[None, :]
        var = ws[0] * s_in.var + ws[1] * s_ln.var[:, None] + ws[2] * s_bn.var[None, :]
        inv_std = 1.0 / np.sqrt(var + params.eps)
        xt = (x - mu[:, :, None, None]) * inv_std[:, :, None, None]
        outs.append(g * xt + b)
        cached.append(_Part(x, s_in, s_ln, xt, inv_std))
    cache = SNCache(cached, s_bn, bn_count, w, phase, params.gamma.copy(),
                    params.hard_mu is not None, params.hard_sigma is not None, synced)
    return outs, cache


def sn_forward(x, params: SNParams, phase: str = TRAIN):
    x = as_tensor4(x)
    N, C, H, W = x.shape
    _check_channels(C, params)
    s_in = in_stats(x)
    if phase == TRAIN:
        s_bn = bn_stats_from_in(s_in)
        params.update_moving(s_bn)
    elif phase == EVAL:
        s_bn = _bn_for_eval(params, C)
    else:
        raise ValueError(f"unknown phase {phase!r}")
    outs, cache = _forward_parts([x], [s_in], s_bn, N * H * W, params, phase, False)
    return outs[0], cache


def sn_forward_sync(parts: Sequence[np.ndarray], params: SNParams, phase: str = TRAIN):
    """Forward over partitions whose BN statistics are synchronized.

    IN and LN statistics stay per sample. In training, each partition
    contributes its (count, mean, E[x^2]) to the pooled BN statistics in
    partition order.
    """
    parts = check_partitions(parts)
    _check_channels(parts[0].shape[1], params)
    hw = parts[0].shape[2] * parts[0].shape[3]
    s_ins = [in_stats(p) for p in parts]
    count = sum(p.shape[0] for p in parts) * hw
    if phase == TRAIN:
        s_bn = pool_bn_stats([partition_triple(s, hw) for s in s_ins])
        params.update_moving(s_bn)
    elif phase == EVAL:
        s_bn = _bn_for_eval(params, parts[0].shape[1])
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return _forward_parts(parts, s_ins, s_bn, count, params, phase, True)


def _softmax_backward(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    # d w_k / d lambda_j = w_k (delta_kj - w_j)
    return w * (g - np.dot(w, g))


def _backward_parts(cache: SNCache, dys: list[np.ndarray]) -> GradBundle:
    if len(dys) != len(cache.parts):
        raise ContractError(f"got {len(dys)} gradient partitions, forward had {len(cache.parts)}")
    wm, ws = cache.weights.w_mu, cache.weights.w_sigma
    gamma = cache.gamma[None, :, None, None]
    bn_live = cache.phase == TRAIN
    s_bn = cache.s_bn

    dgamma = np.zeros_like(cache.gamma)
    dbeta = np.zeros_like(cache.gamma)
    g_mu = np.zeros(3)
    g_var = np.zeros(3)
    local = []
    # first pass: per-partition reductions; BN terms need their sum over all partitions
    dvar_bn = np.zeros_like(cache.gamma)
    dmu_bn = np.zeros_like(cache.gamma)
    for part, dy in zip(cache.parts, dys):
        dy = np.asarray(dy, dtype=np.float64)
        if dy.shape != part.x.shape:
            raise ContractError(f"dy shape {dy.shape} does not match forward input {part.x.shape}")
        dgamma += (dy * part.xt).sum(axis=(0, 2, 3))
        dbeta += dy.sum(axis=(0, 2, 3))
        dxt = dy * gamma
        # gradients w.r.t. the mixed per-(n, c) mean and variance
        dvar = -0.5 * part.inv_std ** 2 * (dxt * part.xt).sum(axis=(2, 3))
        dmu = -part.inv_std * dxt.sum(axis=(2, 3))
        dvar_bn += dvar.sum(axis=0)
        dmu_bn += dmu.sum(axis=0)
        g_mu += [np.sum(dmu * part.s_in.mu), np.sum(dmu * part.s_ln.mu[:, None]),
                 np.sum(dmu * s_bn.mu[None, :])]
        g_var += [np.sum(dvar * part.s_in.var), np.sum(dvar * part.s_ln.var[:, None]),
                  np.sum(dvar * s_bn.var[None, :])]
        local.append((dxt, dvar, dmu))

    dxs = []
    for part, (dxt, dvar, dmu) in zip(cache.parts, local):
        x = part.x
        N, C, H, W = x.shape
        hw = H * W
        # direct path through the normalized value
        dx = dxt * part.inv_std[:, :, None, None]
        # variance back-flow: IN, LN, then (pooled) BN
        dx += ws[0] * 2.0 * (x - part.s_in.mu[:, :, None, None]) / hw * dvar[:, :, None, None]
        dx += (ws[1] * 2.0 * (x - part.s_ln.mu[:, None, None, None]) / (C * hw)
               * dvar.sum(axis=1)[:, None, None, None])
        # mean back-flow
        dx += wm[0] / hw * dmu[:, :, None, None]
        dx += wm[1] / (C * hw) * dmu.sum(axis=1)[:, None, None, None]
        if bn_live:
            dx += (ws[2] * 2.0 * (x - s_bn.mu[None, :, None, None]) / cache.bn_count
                   * dvar_bn[None, :, None, None])
            dx += wm[2] / cache.bn_count * dmu_bn[None, :, None, None]
        dxs.append(dx)

    dl_mu = np.zeros(3) if cache.hard_mu else _softmax_backward(wm, g_mu)
    dl_sigma = np.zeros(3) if cache.hard_sigma else _softmax_backward(ws, g_var)
    return GradBundle(dxs, dgamma, dbeta, dl_mu, dl_sigma)


def sn_backward(cache: SNCache, dy) -> GradBundle:
    if cache.synced:
        raise ContractError("cache comes from sn_forward_sync; use sn_backward_sync")
    g = _backward_parts(cache, [dy])
    g.dx = g.dx[0]
    return g


def sn_backward_sync(cache: SNCache, dy_parts: Sequence[np.ndarray]) -> GradBundle:
    """Per-partition input gradients (``dx`` is a list) and parameter gradients
    summed over all partitions."""
    if not cache.synced:
        raise ContractError("cache comes from sn_forward; use sn_backward")
    return _backward_parts(cache, list(dy_parts))
