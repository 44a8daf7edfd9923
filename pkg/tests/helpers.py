"""Shared finite-difference oracle for gradient tests."""

import numpy as np

from homocl import loss, model


def rel_error(a, b, floor=1e-10):
    # magnitudes below ``floor`` are compared absolutely
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def network_loss(params, x, bi, cfg, dh_weight=None):
    rec = model.forward(params, x)
    val, dz = loss.ntxent(rec.z, bi, cfg)
    dh = None
    if dh_weight is not None:
        val = val + float(np.sum(dh_weight * rec.h))
        dh = dh_weight
    return val, rec, dz, dh


def _relu_pattern(rec):
    c = rec.cache
    return np.concatenate([(c[k] > 0).ravel() for k in ("a1", "a2", "hpre", "q1", "q2")])


def sample_coordinates(params, per_tensor, rng):
    coords = []
    for name in model.PARAM_ORDER:
        size = params[name].size
        for flat in rng.choice(size, size=min(per_tensor, size), replace=False):
            coords.append((name, np.unravel_index(flat, params[name].shape)))
    return coords


def network_gradient_check(seed=0, per_tensor=20, step=1e-4, batch=3, size=8):
    """Analytic vs central-difference gradients of NT-Xent through the encoder.

    Coordinates whose +/- step flips any ReLU are dropped: the loss is not
    differentiable across the kink and the difference quotient is
    meaningless there.  Returns the relative errors of the kept coordinates.
    """
    rng = np.random.default_rng(seed)
    params = model.init_params(3, seed=seed, dtype=np.float64)
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.normal(0, 0.05, size=params[k].shape)
    x = rng.random((2 * batch, size, size, 3))
    bi = loss.BatchIndex.interleaved(batch)
    cfg = loss.LossConfig(temperature=0.5)
    dh_w = rng.normal(0, 0.1, size=(2 * batch, model.FEATURE_DIM))
    _, rec, dz, dh = network_loss(params, x, bi, cfg, dh_w)
    grads = model.backward(rec, params, dz, dh)
    errs = []
    for name, idx in sample_coordinates(params, per_tensor, rng):
        old = params[name][idx]
        params[name][idx] = old + step
        up, rec_up = network_loss(params, x, bi, cfg, dh_w)[:2]
        params[name][idx] = old - step
        down, rec_down = network_loss(params, x, bi, cfg, dh_w)[:2]
        params[name][idx] = old
        if not np.array_equal(_relu_pattern(rec_up), _relu_pattern(rec_down)):
            continue
        errs.append(rel_error(grads[name][idx], (up - down) / (2 * step), floor=1e-6))
    return np.array(errs)


def loss_gradient_check(fn, z, step=1e-3):
    """Fourth-order central differences of a loss w.r.t. every entry of z."""
    _, dz = fn(z)
    fd = np.zeros_like(z)
    for idx in np.ndindex(*z.shape):
        vals = []
        for k in (2, 1, -1, -2):
            zk = z.copy()
            zk[idx] += k * step
            vals.append(fn(zk)[0])
        fd[idx] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * step)
    return rel_error(dz, fd, floor=1e-8)
