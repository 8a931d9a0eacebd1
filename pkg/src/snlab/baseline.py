"""Plain IN / LN / BN / GN layers with hand-written backward passes.

These use two-pass statistics and the textbook group-wise backward formula,
so they share no code path with the switchable layer they are checked
against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .stats import ContractError, direct_stats, gn_stats
from .tensor import as_tensor4

TRAIN = "train"
EVAL = "eval"

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1
DEFAULT_GROUPS = 32


class StateError(RuntimeError):
    pass


def resolve_groups(C: int, groups: int | None = None) -> tuple[int, bool]:
    """Group count for GN over ``C`` channels, and whether it was clamped to C."""
    g = DEFAULT_GROUPS if groups is None else int(groups)
    if g > C:
        return C, True
    if g < 1 or C % g:
        raise ValueError(f"C={C} is not divisible by groups={g}")
    return g, False


@dataclass
class BaselineParams:
    mode: str  # "in" | "ln" | "bn" | "gn"
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_EPS
    groups: int = 1
    groups_clamped: bool = False
    momentum: float = DEFAULT_MOMENTUM
    moving_mu: np.ndarray | None = None
    moving_var: np.ndarray | None = None
    moving_ready: bool = field(default=False)

    @classmethod
    def create(cls, mode: str, C: int, *, eps: float = DEFAULT_EPS, groups: int | None = None,
               momentum: float = DEFAULT_MOMENTUM) -> "BaselineParams":
        mode = mode.lower()
        if mode not in ("in", "ln", "bn", "gn"):
            raise ValueError(f"unknown mode {mode!r}")
        if eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")
        p = cls(mode, np.ones(C), np.zeros(C), eps=eps, momentum=momentum)
        if mode == "gn":
            p.groups, p.groups_clamped = resolve_groups(C, groups)
        if mode == "bn":
            p.moving_mu = np.zeros(C)
            p.moving_var = np.ones(C)
        return p

    @property
    def channels(self) -> int:
        return self.gamma.size

    def set_moving_stats(self, mu, var) -> None:
        if self.mode != "bn":
            raise StateError("moving statistics exist only for BN")
        self.moving_mu = np.array(mu, dtype=np.float64)
        self.moving_var = np.array(var, dtype=np.float64)
        self.moving_ready = True

    def update_moving(self, mu: np.ndarray, var: np.ndarray) -> None:
        p = self.momentum
        self.moving_mu = (1.0 - p) * self.moving_mu + p * mu
        self.moving_var = (1.0 - p) * self.moving_var + p * var
        self.moving_ready = True


@dataclass
class BaselineCache:
    mode: str
    phase: str
    shape: tuple
    xhat: np.ndarray
    inv_std: np.ndarray  # broadcastable against the grouped view
    gamma: np.ndarray
    groups: int
    mu: np.ndarray  # statistics actually used, in their natural shape
    var: np.ndarray


def _grouped(x: np.ndarray, mode: str, groups: int) -> np.ndarray:
    """View x so normalization statistics run over the last axis."""
    N, C, H, W = x.shape
    if mode == "in":
        return x.reshape(N, C, H * W)
    if mode == "ln":
        return x.reshape(N, 1, C * H * W)
    if mode == "gn":
        return x.reshape(N, groups, (C // groups) * H * W)
    return x.transpose(1, 0, 2, 3).reshape(C, N * H * W)  # bn


def _ungrouped(g: np.ndarray, mode: str, shape: tuple) -> np.ndarray:
    N, C, H, W = shape
    if mode == "bn":
        return np.ascontiguousarray(g.reshape(C, N, H, W).transpose(1, 0, 2, 3))
    return g.reshape(shape)


def baseline_forward(x, params: BaselineParams, phase: str = TRAIN):
    x = as_tensor4(x)
    mode = params.mode
    N, C, H, W = x.shape
    if C != params.channels:
        raise ContractError(f"input has {C} channels, layer has {params.channels}")
    if mode == "gn":
        s = gn_stats(x, params.groups)
    elif mode == "bn" and phase == EVAL:
        if not params.moving_ready:
            raise StateError("BN evaluation needs moving statistics; none have been tracked or set")
        s = None
    else:
        s = direct_stats(x, mode)
        if mode == "bn":
            params.update_moving(s.mu, s.var)

    if s is None:
        mu, var = params.moving_mu, params.moving_var
    else:
        mu, var = s.mu, s.var
    xg = _grouped(x, mode, params.groups)
    inv_std = 1.0 / np.sqrt(var.reshape(xg.shape[:-1] + (1,)) + params.eps)
    xhat = (xg - mu.reshape(xg.shape[:-1] + (1,))) * inv_std
    xhat = _ungrouped(xhat, mode, x.shape)
    y = params.gamma[None, :, None, None] * xhat + params.beta[None, :, None, None]
    cache = BaselineCache(mode, phase, x.shape, xhat, inv_std, params.gamma.copy(), params.groups,
                          mu, var)
    return y, cache


def baseline_backward(cache: BaselineCache, dy) -> dict:
    """Gradients ``{"dx", "dgamma", "dbeta"}`` for the forward that produced ``cache``."""
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache.shape:
        raise ContractError(f"dy shape {dy.shape} does not match forward input {cache.shape}")
    dgamma = (dy * cache.xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * cache.gamma[None, :, None, None]
    g = _grouped(dxhat, cache.mode, cache.groups)
    if cache.mode == "bn" and cache.phase == EVAL:
        dx = g * cache.inv_std
    else:
        xh = _grouped(cache.xhat, cache.mode, cache.groups)
        dx = cache.inv_std * (g - g.mean(axis=-1, keepdims=True)
                              - xh * (g * xh).mean(axis=-1, keepdims=True))
    return {"dx": _ungrouped(dx, cache.mode, cache.shape), "dgamma": dgamma, "dbeta": dbeta}
