"""Central finite-difference checks for the hand-written backward passes."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .baseline import EVAL, TRAIN, BaselineParams, baseline_backward, baseline_forward
from .snlayer import SNParams, sn_backward, sn_backward_sync, sn_forward, sn_forward_sync
from .tensor import make_rng

STEP = 1e-5
TOLERANCE = 1e-4
# below this magnitude the relative error degrades into an absolute one
REL_FLOOR = 1e-6
SHAPE = (2, 3, 4, 5)


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, coords=None, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. entries of ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2.0 * h))
    return np.array(out)


def sample_coords(rng: np.random.Generator, size: int, k: int) -> np.ndarray:
    """All coordinates when ``size <= k``, else ``k`` distinct ones."""
    if size <= k:
        return np.arange(size)
    return np.sort(rng.choice(size, size=k, replace=False))


def random_sn_params(rng: np.random.Generator, C: int) -> SNParams:
    p = SNParams.create(C, track_moving=False)
    p.gamma = rng.uniform(0.5, 1.5, C)
    p.beta = rng.normal(size=C)
    p.lambda_mu = rng.normal(size=3)
    p.lambda_sigma = rng.normal(size=3)
    return p


def check_baseline(mode: str, rng, shape=SHAPE, phase=TRAIN, coords_k: int = 200, groups=None,
                   corrupt: bool = False) -> dict:
    C = shape[1]
    p = BaselineParams.create(mode, C, groups=groups)
    p.gamma = rng.uniform(0.5, 1.5, C)
    p.beta = rng.normal(size=C)
    if phase == EVAL and mode == "bn":
        p.set_moving_stats(rng.normal(size=C), rng.uniform(0.5, 2.0, C))
    x = rng.normal(size=shape)
    r = rng.normal(size=shape)
    momentum_state = (p.moving_mu, p.moving_var, p.moving_ready)

    def loss() -> float:
        return float(np.sum(r * baseline_forward(x, p, phase)[0]))

    _, cache = baseline_forward(x, p, phase)
    g = baseline_backward(cache, r)
    if corrupt:
        g["dx"] = g["dx"] * 1.01
    coords = sample_coords(rng, x.size, coords_k)
    errs = {"x": rel_error(g["dx"].reshape(-1)[coords], numeric_grad(loss, x, coords))}
    errs["gamma"] = rel_error(g["dgamma"], numeric_grad(loss, p.gamma))
    errs["beta"] = rel_error(g["dbeta"], numeric_grad(loss, p.beta))
    p.moving_mu, p.moving_var, p.moving_ready = momentum_state
    return errs


def check_sn(rng, shape=SHAPE, phase=TRAIN, coords_k: int = 200, params: SNParams | None = None,
             corrupt: bool = False) -> dict:
    C = shape[1]
    p = params if params is not None else random_sn_params(rng, C)
    if phase == EVAL and p.frozen_bn is None:
        p.frozen_bn = (rng.normal(size=C), rng.uniform(0.5, 2.0, C))
    x = rng.normal(size=shape)
    r = rng.normal(size=shape)

    def loss() -> float:
        return float(np.sum(r * sn_forward(x, p, phase)[0]))

    _, cache = sn_forward(x, p, phase)
    g = sn_backward(cache, r)
    if corrupt:
        g.dx = g.dx * 1.01
    coords = sample_coords(rng, x.size, coords_k)
    errs = {"x": rel_error(g.dx.reshape(-1)[coords], numeric_grad(loss, x, coords))}
    for name, arr in p.learnable().items():
        errs[name] = rel_error(g.params()[name], numeric_grad(loss, arr))
    return errs


def check_sn_sync(rng, P: int = 2, shape=SHAPE, coords_k: int = 200, params: SNParams | None = None,
                  corrupt: bool = False) -> dict:
    C = shape[1]
    p = params if params is not None else random_sn_params(rng, C)
    parts = [rng.normal(size=shape) for _ in range(P)]
    rs = [rng.normal(size=shape) for _ in range(P)]

    def loss() -> float:
        outs, _ = sn_forward_sync(parts, p, TRAIN)
        return float(sum(np.sum(r * y) for r, y in zip(rs, outs)))

    _, cache = sn_forward_sync(parts, p, TRAIN)
    g = sn_backward_sync(cache, rs)
    if corrupt:
        g.dx = [d * 1.01 for d in g.dx]
    errs = {}
    for i, (x, dx) in enumerate(zip(parts, g.dx)):
        coords = sample_coords(rng, x.size, coords_k)
        errs[f"x[{i}]"] = rel_error(dx.reshape(-1)[coords], numeric_grad(loss, x, coords))
    for name, arr in p.learnable().items():
        errs[name] = rel_error(g.params()[name], numeric_grad(loss, arr))
    return errs


def run_suite(seed: int = 0, corrupt: bool = False, tol: float = TOLERANCE) -> list[dict]:
    """Every layer/phase combination; one record per checked layer."""
    rng = make_rng(seed)
    cases = [
        ("baseline-in", lambda: check_baseline("in", rng, corrupt=corrupt)),
        ("baseline-ln", lambda: check_baseline("ln", rng, corrupt=corrupt)),
        ("baseline-bn-train", lambda: check_baseline("bn", rng, corrupt=corrupt)),
        ("baseline-bn-eval", lambda: check_baseline("bn", rng, phase=EVAL, corrupt=corrupt)),
        ("baseline-gn", lambda: check_baseline("gn", rng, shape=(2, 4, 4, 5), groups=2,
                                               corrupt=corrupt)),
        ("sn-train", lambda: check_sn(rng, corrupt=corrupt)),
        ("sn-eval", lambda: check_sn(rng, phase=EVAL, corrupt=corrupt)),
        ("sn-train-large", lambda: check_sn(rng, shape=(4, 4, 5, 5), corrupt=corrupt)),
        ("sn-sync-p2", lambda: check_sn_sync(rng, P=2, corrupt=corrupt)),
        ("sn-sync-p4", lambda: check_sn_sync(rng, P=4, shape=(1, 3, 3, 3), corrupt=corrupt)),
    ]
    report = []
    for name, run in cases:
        errs = run()
        worst = max(errs.values())
        report.append({"layer": name, "max_rel_err": worst, "pass": bool(worst <= tol),
                       "errors": errs})
    return report
