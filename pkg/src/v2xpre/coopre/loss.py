"""Chamfer reconstruction objective with analytic gradients."""
from __future__ import annotations

import numpy as np

from v2xpre import kernels
from v2xpre.nn import tensor as T


def pad_targets(targets):
    """List of (n_m, 3) arrays -> padded (M, N_max, 3) array and counts."""
    counts = np.array([len(t) for t in targets], dtype=np.int64)
    if np.any(counts == 0):
        raise ValueError("chamfer target sets must be non-empty")
    n_max = int(counts.max()) if len(counts) else 1
    out = np.zeros((len(targets), n_max, 3))
    for m, t in enumerate(targets):
        out[m, :len(t)] = t
    return out, counts


def chamfer_batch(pred, targets, counts=None):
    """Per-set symmetric Chamfer distance, (M,) tensor.

    For each m: mean over predicted points of the squared distance to the
    nearest target, plus mean over targets of the squared distance to the
    nearest prediction. ``targets`` is either a list of (n, 3) arrays or a
    padded (M, N, 3) array with ``counts``.
    """
    pred = T.as_tensor(pred)
    if counts is None:
        targets, counts = pad_targets(targets)
    targets = np.asarray(targets, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    M, K, _ = pred.shape
    if K < 1:
        raise ValueError("chamfer needs at least one predicted point")
    if np.any(counts < 1):
        raise ValueError("chamfer target sets must be non-empty")
    d_p, i_p, d_t, i_t = kernels.chamfer_nn(pred.data, targets, counts)
    loss = d_p.mean(axis=1) + d_t.sum(axis=1) / counts
    out = None

    def bw():
        g = out.grad  # (M,)
        mrange = np.arange(M)[:, None]
        nearest_t = targets[mrange, i_p]  # (M, K, 3)
        grad = (2.0 / K) * g[:, None, None] * (pred.data - nearest_t)
        valid = i_t >= 0
        mm, nn = np.nonzero(valid)
        kk = i_t[mm, nn]
        contrib = (2.0 * g[mm] / counts[mm])[:, None] * (pred.data[mm, kk] - targets[mm, nn])
        np.add.at(grad, (mm, kk), contrib)
        T._acc(pred, grad)

    out = T._make(loss, (pred,), bw, "chamfer")
    return out


def chamfer(pred, target):
    """Symmetric Chamfer distance between a (K, 3) prediction and an (N, 3) target."""
    pred = T.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if pred.data.ndim != 2 or pred.shape[0] < 1 or len(target) < 1:
        raise ValueError("chamfer needs non-empty (K, 3) and (N, 3) point sets")
    per = chamfer_batch(T.reshape(pred, (1,) + pred.shape), target[None], [len(target)])
    return T.reshape(per, ())


def recon_loss(plan, cells, predictions):
    """Mean per-grid Chamfer over all masked grids.

    ``cells`` lists the grid of each row of ``predictions`` (M, K, 3); it
    must cover exactly the plan's masked grids.
    """
    cells = [tuple(c) for c in cells]
    if not cells:
        raise ValueError("recon_loss needs at least one masked grid")
    if len(cells) != len(set(cells)) or set(cells) != plan.masked_set:
        raise ValueError("predictions do not cover exactly the masked grids")
    per = chamfer_batch(predictions, [plan.targets[c] for c in cells])
    return T.mean_over_axis(per)
