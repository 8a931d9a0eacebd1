"""Desk-scale training of the toy conv classifier on synthetic blob images."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .baseline import EVAL, TRAIN
from .inference import batch_average, moving_average_finalize, random_minibatches
from .model import Model, ModelSpec, softmax_cross_entropy
from .snlayer import NORMALIZERS, harden, ratio_divergence
from .tensor import make_rng

DIVERGENCE_LIMIT = 1e6
REFERENCE_BATCH = 32

# rng streams derived from the run seed
_STREAM_INIT, _STREAM_SHUFFLE, _STREAM_FINALIZE = 1, 2, 3


# ---------------------------------------------------------------------------
# data


@dataclass
class DatasetSpec:
    classes: int = 4
    channels: int = 3
    size: int = 8
    n_train: int = 512
    n_eval: int = 256
    noise: float = 1.0
    blobs: int = 3
    blob_width: float = 1.5
    amplitude: float = 0.4  # RMS of each class template
    # nuisance jitter: x -> gain * x + offset, gain per sample, offset per (sample, channel)
    gain_jitter: float = 0.3
    offset_jitter: float = 1.0
    seed: int = 0


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    templates: np.ndarray  # (classes, C, H, W)
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray


def _templates(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:spec.size, 0:spec.size].astype(np.float64)
    out = np.zeros((spec.classes, spec.channels, spec.size, spec.size))
    for k in range(spec.classes):
        for _ in range(spec.blobs):
            cy, cx = rng.uniform(0, spec.size - 1, size=2)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * spec.blob_width ** 2))
            out[k] += rng.normal(size=spec.channels)[:, None, None] * bump
        out[k] *= spec.amplitude / np.sqrt(np.mean(out[k] ** 2))
    return out


def _draw(spec, templates, n, rng):
    labels = rng.permutation(np.arange(n) % spec.classes)
    x = templates[labels] + spec.noise * rng.normal(size=(n,) + templates.shape[1:])
    if spec.gain_jitter:
        x *= np.exp(spec.gain_jitter * rng.normal(size=(n, 1, 1, 1)))
    if spec.offset_jitter:
        x += spec.offset_jitter * rng.normal(size=(n, templates.shape[1], 1, 1))
    return x, labels


def reference_task(seed: int = 0) -> DatasetSpec:
    """The task used for the batch-size sweeps: 4 classes, noise 1.0, 512
    training images and a 1024-image eval split."""
    return DatasetSpec(classes=4, noise=1.0, n_train=512, n_eval=1024, seed=seed)


REFERENCE_EPOCHS = 20


def make_dataset(spec: DatasetSpec, rng: np.random.Generator | None = None) -> SyntheticDataset:
    if spec.classes < 2:
        raise ValueError("need at least 2 classes")
    rng = make_rng(spec.seed) if rng is None else rng
    templates = _templates(spec, rng)
    tx, ty = _draw(spec, templates, spec.n_train, rng)
    ex, ey = _draw(spec, templates, spec.n_eval, rng)
    return SyntheticDataset(spec, templates, tx, ty, ex, ey)


def nearest_template_accuracy(ds: SyntheticDataset) -> float:
    """Eval accuracy of picking the template with the highest correlation."""
    def standardize(a):
        a = a.reshape(len(a), -1)
        a = a - a.mean(axis=1, keepdims=True)
        return a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-300)
    scores = standardize(ds.eval_x) @ standardize(ds.templates).T
    return float(np.mean(scores.argmax(axis=1) == ds.eval_y))


# ---------------------------------------------------------------------------
# optimization


@dataclass
class TrainConfig:
    batch: int = 32  # per partition
    partitions: int = 1
    sync: bool = False
    epochs: int = 30
    lr: float = 0.1  # at REFERENCE_BATCH total samples, scaled linearly
    lr_decay_epochs: tuple = ()  # empty: 30%, 60% and 90% of the run
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_lambda: bool = False
    freeze_lambda: bool = False
    inference: str = "batch-average"  # or "moving-average"
    finalize_batches: int | None = None  # None: one pass over the training set
    eval_batch: int = 256
    eval_every: int = 1  # 0: evaluate after the final epoch only
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 and self.epochs > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.batch < 1 or self.partitions < 1:
            raise ValueError("batch and partitions must be >= 1")
        if self.inference not in ("batch-average", "moving-average"):
            raise ValueError(f"unknown inference method {self.inference!r}")
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)

    @property
    def total_batch(self) -> int:
        return self.batch * self.partitions

    def decay_points(self) -> tuple:
        if self.lr_decay_epochs:
            return self.lr_decay_epochs
        return tuple(sorted({max(1, round(f * self.epochs)) for f in (0.3, 0.6, 0.9)}))

    def lr_at(self, epoch: int) -> float:
        base = self.lr * self.total_batch / REFERENCE_BATCH
        return base * self.lr_decay ** sum(epoch >= e for e in self.decay_points())


class SGD:
    """Heavy-ball SGD: v <- m v + g + wd theta;  theta <- theta - lr v.

    Control parameters (lambda) are excluded from weight decay unless
    ``decay_lambda`` is set.
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0, decay_lambda: bool = False):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_lambda = decay_lambda
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, named_params, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, theta, is_control in named_params:
            g = grads[name]
            if g.shape != theta.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
            wd = 0.0 if (is_control and not self.decay_lambda) else self.weight_decay
            v = self.velocity.get(name)
            v = g + wd * theta if v is None else self.momentum * v + g + wd * theta
            self.velocity[name] = v
            theta -= lr * v


def sgd_step(model: Model, grads: dict, config: TrainConfig, step_index: int, opt: SGD,
             steps_per_epoch: int = 1) -> None:
    """One optimizer update of ``model`` in place, at the lr of ``step_index``."""
    opt.step(model.named_params(), grads, config.lr_at(step_index // max(steps_per_epoch, 1)))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    initial_layers: list = field(default_factory=list)
    model: Model | None = None
    diverged: bool = False
    divergence_message: str = ""
    losses: list = field(default_factory=list)  # per step

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    def ratio_rows(self) -> list[dict]:
        rows = []
        for epoch, layers in [(0, self.initial_layers)] + [(r["epoch"], r["layers"]) for r in self.records]:
            for l in layers:
                row = {"epoch": epoch, "layer": l["name"]}
                for stat in ("mu", "sigma"):
                    for k, w in zip(NORMALIZERS, l[f"w_{stat}"]):
                        row[f"w_{stat}_{k}"] = w
                row["divergence"] = l["divergence"]
                rows.append(row)
        return rows

    def final_eval_acc(self) -> float:
        return self.records[-1]["eval_acc"] if self.records else float("nan")


def layer_ratios(model: Model) -> list[dict]:
    out = []
    for l in model.sn_layers:
        w = l.p.weights()
        rec = {"name": l.name, "w_mu": w.w_mu.tolist(), "w_sigma": w.w_sigma.tolist(),
               "divergence": ratio_divergence(w.w_mu, w.w_sigma)}
        rec["hard_mu"] = NORMALIZERS[int(np.argmax(l.p.lambda_mu))]
        rec["hard_sigma"] = NORMALIZERS[int(np.argmax(l.p.lambda_sigma))]
        out.append(rec)
    return out


def finalize(model: Model, images: np.ndarray, config: TrainConfig, rng=None) -> None:
    """Install test-time BN statistics according to ``config.inference``."""
    if config.inference == "moving-average":
        moving_average_finalize(model)
        return
    rng = make_rng(config.seed, _STREAM_FINALIZE) if rng is None else rng
    batches = random_minibatches(images, config.total_batch, config.finalize_batches, rng)
    if config.partitions > 1:
        batches = (np.split(b, config.partitions) for b in batches)
    batch_average(model, batches)


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, batch: int = 256) -> float:
    correct = 0
    for i in range(0, len(images), batch):
        logits = model.forward([images[i:i + batch]], EVAL)[0]
        correct += int((logits.argmax(axis=1) == labels[i:i + batch]).sum())
    return correct / len(images)


def evaluate_finalized(model: Model, ds: SyntheticDataset, config: TrainConfig) -> float:
    """Eval accuracy of a copy of ``model`` with freshly installed test statistics."""
    m = copy.deepcopy(model)
    finalize(m, ds.train_x, config)
    return evaluate(m, ds.eval_x, ds.eval_y, config.eval_batch)


def train(model_or_spec, ds: SyntheticDataset, config: TrainConfig) -> TrainReport:
    if isinstance(model_or_spec, ModelSpec):
        spec = copy.copy(model_or_spec)
        spec.sync = config.sync
        if spec.classes != ds.spec.classes or spec.in_channels != ds.spec.channels:
            raise ValueError("model spec does not match the dataset")
        model = Model(spec, make_rng(config.seed, _STREAM_INIT))
    else:
        model = model_or_spec
        for l in model.norm_layers:
            l.sync = config.sync
    for l in model.sn_layers:
        l.freeze_lambda = config.freeze_lambda or l.p.hardened

    report = TrainReport(model=model, initial_layers=layer_ratios(model))
    opt = SGD(config.momentum, config.weight_decay, config.decay_lambda)
    rng = make_rng(config.seed, _STREAM_SHUFFLE)
    B, P = config.total_batch, config.partitions
    steps_per_epoch = len(ds.train_x) // B
    if steps_per_epoch < 1:
        raise ValueError(f"training set of {len(ds.train_x)} is smaller than one batch of {B}")
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(ds.train_x))
        loss_sum, correct = 0.0, 0
        for s in range(steps_per_epoch):
            idx = order[s * B:(s + 1) * B]
            xs = np.split(ds.train_x[idx], P)
            ys = np.split(ds.train_y[idx], P)
            logits = model.forward(xs, TRAIN)
            loss, c, dlogits = softmax_cross_entropy(logits, ys)
            if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
                report.diverged = True
                report.divergence_message = f"loss {loss} at epoch {epoch + 1}, step {s}"
                return report
            model.backward(dlogits)
            sgd_step(model, model.named_grads(), config, step, opt, steps_per_epoch)
            report.losses.append(loss)
            loss_sum += loss
            correct += c
            step += 1
        last = epoch + 1 == config.epochs
        due = last or (config.eval_every > 0 and (epoch + 1) % config.eval_every == 0)
        report.records.append({
            "epoch": epoch + 1,
            "train_loss": loss_sum / steps_per_epoch,
            "train_acc": correct / (steps_per_epoch * B),
            "eval_acc": evaluate_finalized(model, ds, config) if due else None,
            "lr": lr,
            "layers": layer_ratios(model),
        })
    return report


def finetune_hard(model: Model, ds: SyntheticDataset, config: TrainConfig) -> TrainReport:
    """Replace every SN layer's soft ratios by their argmax and keep training
    with the control parameters frozen."""
    if not model.sn_layers:
        raise ValueError("model has no switchable normalization layers")
    for l in model.sn_layers:
        l.p = harden(l.p)
    return train(model, ds, config)


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["lr_decay_epochs"] = list(config.lr_decay_epochs)
    return d
