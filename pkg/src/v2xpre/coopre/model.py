"""Pillar encoder producing X x Y x C BEV features, and the one-conv reconstruction decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from v2xpre.bevgrid import BevSpec
from v2xpre.nn import tensor as T
from v2xpre.nn.layers import Affine, Conv2d, Linear, Module

N_PILLAR_FEATURES = 7


@dataclass(frozen=True)
class EncoderConfig:
    max_points_per_pillar: int = 16
    pillar_feature_dim: int = 32
    bev_channels: int = 32
    conv_blocks: int = 2

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (isinstance(v, int) and v > 0):
                raise ValueError(f"EncoderConfig.{k} must be a positive integer, got {v!r}")


@dataclass
class Pillars:
    features: np.ndarray  # (P, M, 7)
    mask: np.ndarray  # (P, M, 1), 1 for real points
    i: np.ndarray
    j: np.ndarray
    counts: np.ndarray  # retained points per pillar

    def __len__(self):
        return len(self.i)


def pillarize(points: np.ndarray, provenance: np.ndarray, spec: BevSpec, max_points: int,
              rng: np.random.Generator, z_scale: float = 4.0) -> Pillars:
    """Group in-bounds points into per-grid pillars of at most ``max_points``.

    Per-point features, all scaled to roughly unit range: x and y over the
    half-extent of the grid, z over ``z_scale``, offsets from the grid
    center over the cell size, z offset from the pillar mean over
    ``z_scale``, and a cooperative-source flag (0 ego, 1 cooperative).
    Pillars larger than ``max_points`` keep a uniform random subset.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    i, j, inside = spec.grid_indices(pts)
    sel = np.nonzero(inside)[0]
    if len(sel) == 0:
        z = np.zeros(0, dtype=np.int64)
        return Pillars(np.zeros((0, max_points, N_PILLAR_FEATURES)), np.zeros((0, max_points, 1)),
                       z, z, z)
    flat = i[sel] * spec.Y + j[sel]
    perm = rng.permutation(len(sel))
    order = perm[np.argsort(flat[perm], kind="stable")]
    sel, flat = sel[order], flat[order]
    cells, starts, counts = np.unique(flat, return_index=True, return_counts=True)
    pillar_of = np.repeat(np.arange(len(cells)), counts)
    rank = np.arange(len(flat)) - starts[pillar_of]
    keep = rank < max_points
    sel, pillar_of, rank = sel[keep], pillar_of[keep], rank[keep]
    kept = np.minimum(counts, max_points)

    p = pts[sel]
    ci, cj = cells // spec.Y, cells % spec.Y
    cx, cy = spec.cell_center(ci, cj)
    zmean = np.bincount(pillar_of, weights=p[:, 2], minlength=len(cells)) / kept
    half_x = (spec.x_max - spec.x_min) / 2
    half_y = (spec.y_max - spec.y_min) / 2
    feats = np.stack([
        p[:, 0] / half_x,
        p[:, 1] / half_y,
        p[:, 2] / z_scale,
        (p[:, 0] - cx[pillar_of]) / spec.cell,
        (p[:, 1] - cy[pillar_of]) / spec.cell,
        (p[:, 2] - zmean[pillar_of]) / z_scale,
        (np.asarray(provenance)[sel] > 0).astype(np.float64),
    ], axis=1)
    out = np.zeros((len(cells), max_points, N_PILLAR_FEATURES))
    mask = np.zeros((len(cells), max_points, 1))
    out[pillar_of, rank] = feats
    mask[pillar_of, rank] = 1.0
    return Pillars(out, mask, ci.astype(np.int64), cj.astype(np.int64), kept)


class PillarEncoder(Module):
    """Shared per-point linear + ReLU, max over each pillar, scatter, then 3x3 conv blocks."""

    def __init__(self, cfg: EncoderConfig, spec: BevSpec, rng: np.random.Generator):
        self.cfg = cfg
        self.spec = spec
        self.pfn = Linear(N_PILLAR_FEATURES, cfg.pillar_feature_dim, rng)
        chans = [cfg.pillar_feature_dim] + [cfg.bev_channels] * cfg.conv_blocks
        self.convs = [Conv2d(a, b, rng) for a, b in zip(chans[:-1], chans[1:])]
        self.norms = [Affine(b) for b in chans[1:]]

    @property
    def out_channels(self) -> int:
        return self.cfg.bev_channels

    def pillar_vectors(self, pillars: Pillars):
        h = T.relu(self.pfn(pillars.features))
        h = T.mul(h, pillars.mask)
        return T.max_over_axis(h, axis=1)

    def scatter(self, pillars: Pillars):
        X, Y = self.spec.shape
        if len(pillars) == 0:
            return T.Tensor(np.zeros((X, Y, self.cfg.pillar_feature_dim)))
        return T.scatter_to_bev(self.pillar_vectors(pillars), pillars.i, pillars.j, X, Y)

    def __call__(self, pillars: Pillars):
        x = self.scatter(pillars)
        for conv, norm in zip(self.convs, self.norms):
            x = T.relu(norm(conv(x)))
        return x


class ReconDecoder(Module):
    """One 3x3 conv to 3K channels; each masked grid reads its own cell as K points."""

    def __init__(self, channels: int, k_points: int, rng: np.random.Generator):
        self.k = k_points
        self.conv = Conv2d(channels, 3 * k_points, rng)

    def __call__(self, bev, cells):
        """(M, K, 3) predictions in grid-local normalized coordinates."""
        cells = list(cells)
        i = np.array([c[0] for c in cells], dtype=np.int64)
        j = np.array([c[1] for c in cells], dtype=np.int64)
        X, Y, _ = bev.shape
        if len(i) and (i.min() < 0 or i.max() >= X or j.min() < 0 or j.max() >= Y):
            raise IndexError("masked grid index outside the BEV map")
        out = T.conv2d_at_cells(bev, self.conv.weight, self.conv.bias, i, j)
        out = T.reshape(out, (len(cells), self.k, 3))
        xy = T.tanh(T.slice_axis(out, slice(0, 2), axis=2))
        z = T.slice_axis(out, slice(2, 3), axis=2)
        return T.concat([xy, z], axis=2)
