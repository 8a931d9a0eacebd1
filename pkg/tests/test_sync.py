import numpy as np
import pytest

from snlab.baseline import BaselineParams, baseline_backward, baseline_forward
from snlab.gradcheck import check_sn_sync, random_sn_params
from snlab.snlayer import sn_backward, sn_backward_sync, sn_forward, sn_forward_sync
from snlab.stats import ContractError

SHAPE = (2, 3, 4, 5)


def _parts(rng, P, shape=SHAPE):
    return [rng.normal(size=shape) for _ in range(P)]


def test_single_partition_matches_single_device(rng):
    p = random_sn_params(rng, 3)
    x = rng.normal(size=SHAPE)
    dy = rng.normal(size=SHAPE)
    y, c = sn_forward(x, p)
    (ys,), cs = sn_forward_sync([x], p)
    assert np.max(np.abs(y - ys)) <= 1e-15
    g, gs = sn_backward(c, dy), sn_backward_sync(cs, [dy])
    assert np.max(np.abs(g.dx - gs.dx[0])) <= 1e-15
    for k, v in g.params().items():
        assert np.max(np.abs(v - gs.params()[k])) <= 1e-15


def _one_hot(rng, k, C=3):
    p = random_sn_params(rng, C)
    p.lambda_mu = np.full(3, -40.0)
    p.lambda_sigma = np.full(3, -40.0)
    p.lambda_mu[k] = p.lambda_sigma[k] = 40.0
    return p


def test_bn_selection_equals_full_batch_bn(rng):
    p = _one_hot(rng, 2)
    parts = _parts(rng, 4)
    dys = _parts(rng, 4)
    b = BaselineParams.create("bn", 3)
    b.gamma, b.beta = p.gamma.copy(), p.beta.copy()
    full = np.concatenate(parts)
    yb, cb = baseline_forward(full, b)
    gb = baseline_backward(cb, np.concatenate(dys))
    ys, cs = sn_forward_sync(parts, p)
    gs = sn_backward_sync(cs, dys)
    assert np.max(np.abs(np.concatenate(ys) - yb)) <= 1e-10
    assert np.max(np.abs(np.concatenate(gs.dx) - gb["dx"])) <= 1e-8
    assert np.max(np.abs(gs.dgamma - gb["dgamma"])) <= 1e-8


def test_in_selection_is_per_partition(rng):
    p = _one_hot(rng, 0)
    parts = _parts(rng, 3)
    ys, _ = sn_forward_sync(parts, p)
    for x, y in zip(parts, ys):
        assert np.max(np.abs(y - sn_forward(x, p.copy())[0])) <= 1e-12


def test_decomposes_without_bn(rng):
    # with the BN weight negligible each partition is independent, and the
    # parameter gradients are the sum of the single-device ones
    p = random_sn_params(rng, 3)
    p.lambda_mu[2] = p.lambda_sigma[2] = -1000.0
    parts, dys = _parts(rng, 3), _parts(rng, 3)
    ys, cs = sn_forward_sync(parts, p)
    gs = sn_backward_sync(cs, dys)
    total = {k: 0.0 for k in gs.params()}
    for x, dy, y_s, dx_s in zip(parts, dys, ys, gs.dx):
        y, c = sn_forward(x, p)
        g = sn_backward(c, dy)
        assert np.max(np.abs(y - y_s)) <= 1e-12
        assert np.max(np.abs(g.dx - dx_s)) <= 1e-12
        for k, v in g.params().items():
            total[k] = total[k] + v
    for k, v in gs.params().items():
        assert np.max(np.abs(v - total[k])) <= 1e-10


def test_zero_dy(rng):
    _, cs = sn_forward_sync(_parts(rng, 2), random_sn_params(rng, 3))
    g = sn_backward_sync(cs, [np.zeros(SHAPE)] * 2)
    assert not any(d.any() for d in g.dx)
    assert not any(v.any() for v in g.params().values())


@pytest.mark.parametrize("P,shape", [(2, SHAPE), (4, (1, 3, 3, 3))])
def test_finite_differences(P, shape, rng):
    errs = check_sn_sync(rng, P=P, shape=shape)
    assert max(errs.values()) <= 1e-4, errs


def test_partition_count_mismatch(rng):
    _, cs = sn_forward_sync(_parts(rng, 2), random_sn_params(rng, 3))
    with pytest.raises(ContractError):
        sn_backward_sync(cs, [np.zeros(SHAPE)])


def test_cache_kinds_are_not_interchangeable(rng):
    p = random_sn_params(rng, 3)
    _, cs = sn_forward_sync(_parts(rng, 2), p)
    _, c = sn_forward(rng.normal(size=SHAPE), p)
    with pytest.raises(ContractError):
        sn_backward(cs, np.zeros(SHAPE))
    with pytest.raises(ContractError):
        sn_backward_sync(c, [np.zeros(SHAPE)])


def test_mismatched_partitions_rejected(rng):
    with pytest.raises(ContractError):
        sn_forward_sync([rng.normal(size=SHAPE), rng.normal(size=(2, 3, 4, 4))],
                        random_sn_params(rng, 3))
