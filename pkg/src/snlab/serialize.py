"""JSON (de)serialization of whole models.

A model file holds the resolved flat configuration (enough to rebuild the
architecture and regenerate the dataset) and every layer's arrays. SN layers
use the ``SNParams`` JSON object verbatim. Floats go through ``json``'s
shortest round-trip repr, so values survive exactly.
"""

from __future__ import annotations

import json

import numpy as np

from .config import Experiment, build
from .model import BaselineNorm, Conv3x3, Linear, Model, SNNorm
from .snlayer import SNParams
from .tensor import make_rng


def model_to_dict(model: Model, exp: Experiment) -> dict:
    layers = []
    for l in model.layers:
        if isinstance(l, Conv3x3):
            layers.append({"name": l.name, "type": "conv3x3", "weight": l.weight.tolist()})
        elif isinstance(l, Linear):
            layers.append({"name": l.name, "type": "linear", "weight": l.weight.tolist(),
                           "bias": l.bias.tolist()})
        elif isinstance(l, SNNorm):
            layers.append({"name": l.name, "type": "sn", "params": l.p.to_dict()})
        elif isinstance(l, BaselineNorm):
            p = l.p
            d = {"name": l.name, "type": p.mode, "gamma": p.gamma.tolist(), "beta": p.beta.tolist(),
                 "eps": p.eps, "groups": p.groups}
            if p.mode == "bn":
                d["moving"] = {"mu": p.moving_mu.tolist(), "var": p.moving_var.tolist(),
                               "momentum": p.momentum, "ready": p.moving_ready}
            layers.append(d)
    return {"config": exp.flat(), "layers": layers}


def model_from_dict(d: dict) -> tuple[Model, Experiment]:
    exp = build(d["config"])
    model = Model(exp.model, make_rng(exp.seed, 1))
    by_name = {l["name"]: l for l in d["layers"]}
    for l in model.layers:
        rec = by_name.get(l.name)
        if rec is None:
            if l.params():
                raise ValueError(f"model file has no entry for layer {l.name}")
            continue
        if isinstance(l, Conv3x3):
            l.weight = np.array(rec["weight"], dtype=np.float64)
        elif isinstance(l, Linear):
            l.weight = np.array(rec["weight"], dtype=np.float64)
            l.bias = np.array(rec["bias"], dtype=np.float64)
        elif isinstance(l, SNNorm):
            l.p = SNParams.from_dict(rec["params"])
        elif isinstance(l, BaselineNorm):
            l.p.gamma = np.array(rec["gamma"], dtype=np.float64)
            l.p.beta = np.array(rec["beta"], dtype=np.float64)
            l.p.eps = float(rec["eps"])
            if "moving" in rec:
                m = rec["moving"]
                l.p.moving_mu = np.array(m["mu"], dtype=np.float64)
                l.p.moving_var = np.array(m["var"], dtype=np.float64)
                l.p.momentum = float(m["momentum"])
                l.p.moving_ready = bool(m["ready"])
    return model, exp


def save_model(path, model: Model, exp: Experiment) -> None:
    with open(path, "w") as f:
        json.dump(model_to_dict(model, exp), f)
        f.write("\n")


def load_model(path) -> tuple[Model, Experiment]:
    with open(path) as f:
        return model_from_dict(json.load(f))
