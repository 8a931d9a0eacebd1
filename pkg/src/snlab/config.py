"""Flat ``key=value`` experiment configuration.

One file, one setting per line, ``#`` starts a comment. Command-line
overrides use the same syntax. Every key routes to exactly one of the model,
dataset, or training settings (or to the experiment itself).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .model import ModelSpec
from .trainer import REFERENCE_EPOCHS, DatasetSpec, TrainConfig, reference_task


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v: str):
    return None if v.strip().lower() in ("", "none") else int(v)


def _opt_float(v: str):
    return None if v.strip().lower() in ("", "none") else float(v)


def _int_list(v: str) -> tuple:
    return tuple(int(p) for p in v.split(",") if p.strip())


# key -> (section, attribute, parser)
KEYS = {
    "norm": ("model", "norm", str),
    "width": ("model", "channels", int),
    "blocks": ("model", "blocks", int),
    "gn_groups": ("model", "gn_groups", _opt_int),
    "eps": ("model", "eps", _opt_float),
    "classes": ("data", "classes", int),
    "in_channels": ("data", "channels", int),
    "image_size": ("data", "size", int),
    "n_train": ("data", "n_train", int),
    "n_eval": ("data", "n_eval", int),
    "noise": ("data", "noise", float),
    "blobs": ("data", "blobs", int),
    "blob_width": ("data", "blob_width", float),
    "amplitude": ("data", "amplitude", float),
    "gain_jitter": ("data", "gain_jitter", float),
    "offset_jitter": ("data", "offset_jitter", float),
    "batch": ("train", "batch", int),
    "partitions": ("train", "partitions", int),
    "sync": ("train", "sync", _bool),
    "epochs": ("train", "epochs", int),
    "lr": ("train", "lr", float),
    "lr_decay_epochs": ("train", "lr_decay_epochs", _int_list),
    "lr_decay": ("train", "lr_decay", float),
    "momentum": ("train", "momentum", float),
    "weight_decay": ("train", "weight_decay", float),
    "decay_lambda": ("train", "decay_lambda", _bool),
    "freeze_lambda": ("train", "freeze_lambda", _bool),
    "inference": ("train", "inference", str),
    "finalize_batches": ("train", "finalize_batches", _opt_int),
    "eval_every": ("train", "eval_every", int),
    "seed": ("run", "seed", int),
    "batch_sweep": ("run", "batch_sweep", _int_list),
    "finetune_hard_epochs": ("run", "finetune_hard_epochs", int),
}


@dataclass
class Experiment:
    model: ModelSpec
    data: DatasetSpec
    train: TrainConfig
    seed: int = 0
    batch_sweep: tuple = ()
    finetune_hard_epochs: int = 0
    raw: dict = field(default_factory=dict)

    def flat(self) -> dict:
        """Resolved settings as a flat ``key -> str`` mapping (sorted)."""
        sections = {"model": self.model, "data": self.data, "train": self.train}
        out = {}
        for key, (sec, attr, _) in KEYS.items():
            v = getattr(self, attr) if sec == "run" else getattr(sections[sec], attr)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            out[key] = "none" if v is None else str(v).lower() if isinstance(v, bool) else str(v)
        return dict(sorted(out.items()))


def parse_lines(lines) -> dict:
    out = {}
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {num}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_file(path) -> dict:
    try:
        with open(path) as f:
            return parse_lines(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def build(settings: dict) -> Experiment:
    """Resolve raw settings on top of the reference-task defaults."""
    sections = {"model": {}, "data": {}, "train": {}, "run": {}}
    for k, v in settings.items():
        if k not in KEYS:
            raise ConfigError(f"unknown setting {k!r}")
        sec, attr, parse = KEYS[k]
        try:
            sections[sec][attr] = parse(v)
        except ValueError as e:
            raise ConfigError(f"bad value for {k}: {e}") from e
    run = sections["run"]
    seed = run.get("seed", 0)
    data_defaults = {f.name: getattr(reference_task(seed), f.name) for f in fields(DatasetSpec)}
    data_defaults.update(sections["data"])
    data_defaults["seed"] = seed
    train_kw = {"epochs": REFERENCE_EPOCHS, **sections["train"], "seed": seed}
    try:
        data = DatasetSpec(**data_defaults)
        model = ModelSpec(**{"classes": data.classes, "in_channels": data.channels,
                             **sections["model"]})
        train = TrainConfig(**train_kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    model.sync = train.sync
    return Experiment(model, data, train, seed, run.get("batch_sweep", ()),
                      run.get("finetune_hard_epochs", 0), dict(settings))
