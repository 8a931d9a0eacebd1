"""Small conv classifier whose layers operate on lists of partitions.

Every layer takes and returns one array per partition. Only normalization
layers look across samples; whether their BN statistics are pooled over
partitions is decided by ``sync``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .baseline import EVAL, TRAIN, BaselineParams, baseline_backward, baseline_forward
from .snlayer import SNParams, sn_backward, sn_backward_sync, sn_forward, sn_forward_sync

NORM_KINDS = ("in", "ln", "bn", "gn", "sn")


class Layer:
    name = ""

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, xs: list, phase: str) -> list:
        raise NotImplementedError

    def backward(self, dys: list) -> list:
        raise NotImplementedError


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero padding 1, no bias."""

    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator):
        self.name = name
        std = np.sqrt(2.0 / (9 * c_in))
        self.weight = rng.normal(0.0, std, size=(c_out, c_in, 3, 3))
        self._g = np.zeros_like(self.weight)

    def params(self):
        return {"weight": self.weight}

    def grads(self):
        return {"weight": self._g}

    def forward(self, xs, phase):
        self._win = []
        out = []
        for x in xs:
            win = sliding_window_view(_pad1(x), (3, 3), axis=(2, 3))  # (N, Cin, H, W, 3, 3)
            self._win.append(win)
            y = np.tensordot(win, self.weight, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, Cout)
            out.append(np.ascontiguousarray(y.transpose(0, 3, 1, 2)))
        return out

    def backward(self, dys):
        self._g = np.zeros_like(self.weight)
        flipped = self.weight[:, :, ::-1, ::-1]
        dxs = []
        for win, dy in zip(self._win, dys):
            self._g += np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
            # input gradient: correlate padded dy with the spatially flipped kernel
            dwin = sliding_window_view(_pad1(dy), (3, 3), axis=(2, 3))
            dx = np.tensordot(dwin, flipped, axes=([1, 4, 5], [0, 2, 3]))  # (N, H, W, Cin)
            dxs.append(np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))
        return dxs


def _pad1(x: np.ndarray) -> np.ndarray:
    N, C, H, W = x.shape
    out = np.zeros((N, C, H + 2, W + 2))
    out[:, :, 1:-1, 1:-1] = x
    return out


class ReLU(Layer):
    def __init__(self, name: str):
        self.name = name

    def forward(self, xs, phase):
        self._masks = [x > 0 for x in xs]
        return [np.where(m, x, 0.0) for m, x in zip(self._masks, xs)]

    def backward(self, dys):
        return [np.where(m, d, 0.0) for m, d in zip(self._masks, dys)]


class GlobalAvgPool(Layer):
    def __init__(self, name: str):
        self.name = name

    def forward(self, xs, phase):
        self._shapes = [x.shape for x in xs]
        return [x.mean(axis=(2, 3)) for x in xs]

    def backward(self, dys):
        return [np.broadcast_to(d[:, :, None, None] / (s[2] * s[3]), s).copy()
                for d, s in zip(dys, self._shapes)]


class Linear(Layer):
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.name = name
        self.weight = rng.normal(0.0, np.sqrt(1.0 / d_in), size=(d_in, d_out))
        self.bias = np.zeros(d_out)
        self._gw = np.zeros_like(self.weight)
        self._gb = np.zeros_like(self.bias)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self._gw, "bias": self._gb}

    def forward(self, xs, phase):
        self._xs = xs
        return [x @ self.weight + self.bias for x in xs]

    def backward(self, dys):
        self._gw = sum(x.T @ d for x, d in zip(self._xs, dys))
        self._gb = sum(d.sum(axis=0) for d in dys)
        return [d @ self.weight.T for d in dys]


class BaselineNorm(Layer):
    def __init__(self, name: str, mode: str, C: int, *, groups=None, eps=None, sync=False):
        self.name = name
        kw = {} if eps is None else {"eps": eps}
        self.p = BaselineParams.create(mode, C, groups=groups, **kw)
        self.sync = sync
        self.update_stats = True

    @property
    def mode(self) -> str:
        return self.p.mode

    def params(self):
        return {"gamma": self.p.gamma, "beta": self.p.beta}

    def grads(self):
        return self._grads

    def forward(self, xs, phase):
        saved = (self.p.moving_mu, self.p.moving_var, self.p.moving_ready)
        self.last_stats = []
        if self.sync and self.mode == "bn" and phase == TRAIN and len(xs) > 1:
            # pooled BN over partitions == BN over the concatenated batch
            sizes = np.cumsum([x.shape[0] for x in xs])[:-1]
            y, cache = baseline_forward(np.concatenate(xs), self.p, phase)
            self._caches, self._split = [cache], sizes
            outs = np.split(y, sizes)
        else:
            self._split = None
            outs, self._caches = [], []
            for x in xs:
                y, c = baseline_forward(x, self.p, phase)
                outs.append(y)
                self._caches.append(c)
        if self.mode == "bn" and phase == TRAIN:
            for c in self._caches:
                self.last_stats.append((c.mu, c.var))
            if not self.update_stats:
                self.p.moving_mu, self.p.moving_var, self.p.moving_ready = saved
        return outs

    def backward(self, dys):
        if self._split is not None:
            g = baseline_backward(self._caches[0], np.concatenate(dys))
            self._grads = {"gamma": g["dgamma"], "beta": g["dbeta"]}
            return np.split(g["dx"], self._split)
        gs = [baseline_backward(c, d) for c, d in zip(self._caches, dys)]
        self._grads = {"gamma": sum(g["dgamma"] for g in gs), "beta": sum(g["dbeta"] for g in gs)}
        return [g["dx"] for g in gs]

    def has_bn_stats(self) -> bool:
        return self.mode == "bn"

    def set_frozen(self, mu, var) -> None:
        self.p.set_moving_stats(mu, var)

    def moving_stats(self):
        if not self.p.moving_ready:
            return None
        return self.p.moving_mu.copy(), self.p.moving_var.copy()


class SNNorm(Layer):
    def __init__(self, name: str, C: int, *, eps=None, sync=False, lambda_init: float = 1.0):
        self.name = name
        kw = {} if eps is None else {"eps": eps}
        self.p = SNParams.create(C, lambda_init=lambda_init, **kw)
        self.sync = sync
        self.update_stats = True
        self.freeze_lambda = False

    mode = "sn"

    def params(self):
        return self.p.learnable()

    def grads(self):
        return self._grads

    def forward(self, xs, phase):
        track = self.p.track_moving
        self.p.track_moving = track and self.update_stats
        try:
            if self.sync:
                outs, cache = sn_forward_sync(xs, self.p, phase)
                self._caches = [cache]
            else:
                outs, self._caches = [], []
                for x in xs:
                    y, c = sn_forward(x, self.p, phase)
                    outs.append(y)
                    self._caches.append(c)
        finally:
            self.p.track_moving = track
        self.last_stats = [(c.s_bn.mu, c.s_bn.var) for c in self._caches] if phase == TRAIN else []
        return outs

    def backward(self, dys):
        if self.sync:
            gs = [sn_backward_sync(self._caches[0], dys)]
            dxs = gs[0].dx
        else:
            gs = [sn_backward(c, d) for c, d in zip(self._caches, dys)]
            dxs = [g.dx for g in gs]
        grads = {k: sum(g.params()[k] for g in gs) for k in ("gamma", "beta", "lambda_mu",
                                                             "lambda_sigma")}
        if self.freeze_lambda:
            grads["lambda_mu"] = np.zeros(3)
            grads["lambda_sigma"] = np.zeros(3)
        self._grads = grads
        return dxs

    def has_bn_stats(self) -> bool:
        return True

    def set_frozen(self, mu, var) -> None:
        self.p.frozen_bn = (np.array(mu, dtype=np.float64), np.array(var, dtype=np.float64))

    def moving_stats(self):
        if not self.p.track_moving or self.p.moving_steps == 0:
            return None
        return self.p.moving_mu.copy(), self.p.moving_var.copy()


@dataclass
class ModelSpec:
    norm: str = "sn"
    in_channels: int = 3
    channels: int = 16
    blocks: int = 4
    classes: int = 4
    gn_groups: int | None = None
    eps: float | None = None
    sync: bool = False

    def __post_init__(self):
        if self.norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}, got {self.norm!r}")
        if self.blocks < 1 or self.classes < 2:
            raise ValueError("need blocks >= 1 and classes >= 2")


class Model:
    """conv3x3 -> norm -> relu, repeated; global average pool; linear head."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        self.layers: list[Layer] = []
        c_in = spec.in_channels
        for b in range(spec.blocks):
            self.layers.append(Conv3x3(f"block{b}.conv", c_in, spec.channels, rng))
            self.layers.append(self._norm(f"block{b}.norm", spec.channels))
            self.layers.append(ReLU(f"block{b}.relu"))
            c_in = spec.channels
        self.layers.append(GlobalAvgPool("pool"))
        self.layers.append(Linear("fc", spec.channels, spec.classes, rng))

    def _norm(self, name: str, C: int) -> Layer:
        s = self.spec
        if s.norm == "sn":
            return SNNorm(name, C, eps=s.eps, sync=s.sync)
        return BaselineNorm(name, s.norm, C, groups=s.gn_groups, eps=s.eps, sync=s.sync)

    @property
    def norm_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, (SNNorm, BaselineNorm))]

    @property
    def sn_layers(self) -> list[SNNorm]:
        return [l for l in self.layers if isinstance(l, SNNorm)]

    def named_params(self):
        """(qualified name, array, is_control_parameter) for every learnable array."""
        for layer in self.layers:
            for k, v in layer.params().items():
                yield f"{layer.name}.{k}", v, k.startswith("lambda")

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers for k, v in l.grads().items()}

    def forward(self, xs: list, phase: str = TRAIN) -> list:
        for layer in self.layers:
            xs = layer.forward(xs, phase)
        return xs

    def backward(self, dys: list) -> list:
        for layer in reversed(self.layers):
            dys = layer.backward(dys)
        return dys

    def set_update_stats(self, flag: bool) -> None:
        for l in self.norm_layers:
            l.update_stats = flag

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, v, _ in self.named_params():
            h.update(name.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def softmax_cross_entropy(logits_parts: list, labels_parts: list):
    """Mean cross-entropy over all samples of all partitions, and d(loss)/d(logits)."""
    total = sum(l.shape[0] for l in logits_parts)
    loss = 0.0
    correct = 0
    grads = []
    for z, y in zip(logits_parts, labels_parts):
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        idx = np.arange(len(y))
        loss -= logp[idx, y].sum()
        correct += int((logp.argmax(axis=1) == y).sum())
        g = np.exp(logp)
        g[idx, y] -= 1.0
        grads.append(g / total)
    return loss / total, correct, grads
