"""BEV-guided masking: bin points into BEV grids, mask non-empty grids, split targets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from v2xpre.fusion import FusedCloud

OUT_OF_BOUNDS = None


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class BevSpec:
    x_min: float = -70.4
    x_max: float = 70.4
    y_min: float = -70.4
    y_max: float = 70.4
    cell: float = 0.8

    def __post_init__(self):
        if not self.cell > 0:
            raise ValueError("cell must be > 0")
        for lo, hi in ((self.x_min, self.x_max), (self.y_min, self.y_max)):
            n = (hi - lo) / self.cell
            if not hi > lo or abs(n - round(n)) > 1e-9 * max(1.0, n):
                raise ValueError(f"extent [{lo}, {hi}] is not an integral number of {self.cell} m cells")

    @property
    def X(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell))

    @property
    def Y(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell))

    @property
    def shape(self):
        return (self.X, self.Y)

    def cell_center(self, i, j):
        return (self.x_min + (np.asarray(i) + 0.5) * self.cell,
                self.y_min + (np.asarray(j) + 0.5) * self.cell)

    def grid_indices(self, points: np.ndarray):
        """Vectorized binning; returns (i, j, inside) with a right-open convention."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        x, y = p[:, 0], p[:, 1]
        inside = (x >= self.x_min) & (x < self.x_max) & (y >= self.y_min) & (y < self.y_max)
        i = np.clip(np.floor((x - self.x_min) / self.cell), 0, self.X - 1).astype(np.int64)
        j = np.clip(np.floor((y - self.y_min) / self.cell), 0, self.Y - 1).astype(np.int64)
        return i, j, inside


def point_to_grid(spec: BevSpec, p):
    """(i, j) of the grid containing ``p``, or None when out of bounds. z is ignored."""
    i, j, inside = spec.grid_indices(np.array([p[0], p[1], 0.0]))
    if not inside[0]:
        return OUT_OF_BOUNDS
    return int(i[0]), int(j[0])


@dataclass(frozen=True)
class Occupancy:
    spec: BevSpec
    flat: np.ndarray  # per point: i * Y + j, or -1 when out of bounds
    order: np.ndarray  # point indices grouped by cell (stable)
    non_empty: np.ndarray  # sorted flat ids of occupied cells
    starts: np.ndarray  # per non-empty cell: slice start into ``order``
    counts: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.flat)

    def unflatten(self, flat):
        flat = np.asarray(flat)
        return flat // self.spec.Y, flat % self.spec.Y

    def non_empty_cells(self) -> set:
        i, j = self.unflatten(self.non_empty)
        return set(zip(i.tolist(), j.tolist()))

    def point_indices(self, cell) -> np.ndarray:
        flat = cell[0] * self.spec.Y + cell[1]
        k = np.searchsorted(self.non_empty, flat)
        if k >= len(self.non_empty) or self.non_empty[k] != flat:
            return np.zeros(0, dtype=np.int64)
        return self.order[self.starts[k]:self.starts[k] + self.counts[k]]

    def count_map(self) -> np.ndarray:
        m = np.zeros(self.spec.X * self.spec.Y, dtype=np.int64)
        m[self.non_empty] = self.counts
        return m.reshape(self.spec.X, self.spec.Y)


def build_occupancy(spec: BevSpec, fc: FusedCloud) -> Occupancy:
    i, j, inside = spec.grid_indices(fc.points)
    flat = np.where(inside, i * spec.Y + j, -1)
    idx_in = np.nonzero(inside)[0]
    order = idx_in[np.argsort(flat[idx_in], kind="stable")]
    cells, starts, counts = np.unique(flat[order], return_index=True, return_counts=True)
    return Occupancy(spec, flat, order, cells.astype(np.int64), starts, counts)


@dataclass
class MaskPlan:
    masked: list  # (i, j) cells, ascending flat order
    raw_targets: dict  # (i, j) -> (n, 3) ego-frame points, all masked points
    ratio_used: float
    targets: dict = field(default_factory=dict)  # (i, j) -> (n, 3) normalized
    point_indices: dict = field(default_factory=dict)  # (i, j) -> source point indices
    n_source_points: int = 0

    @property
    def masked_set(self) -> set:
        return set(self.masked)

    def __len__(self) -> int:
        return len(self.masked)


def sample_mask(occ: Occupancy, ratio: float, rng: np.random.Generator,
                points: np.ndarray | None = None) -> MaskPlan:
    """Mask round(ratio * |non_empty|) distinct non-empty grids, uniformly without replacement.

    ``points`` (the cloud ``occ`` was built from) fills ``raw_targets``;
    without it the plan records only point indices until ``split_cloud``.
    """
    if not 0 <= ratio <= 1:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    n_ne = len(occ.non_empty)
    n_mask = round_half_up(ratio * n_ne)
    chosen = np.sort(rng.choice(n_ne, size=n_mask, replace=False)) if n_mask else np.zeros(0, int)
    masked, idx_map, raw = [], {}, {}
    for k in chosen:
        cell = tuple(int(v) for v in occ.unflatten(occ.non_empty[k]))
        masked.append(cell)
        idx = occ.order[occ.starts[k]:occ.starts[k] + occ.counts[k]]
        idx_map[cell] = idx
        if points is not None:
            raw[cell] = points[idx]
    return MaskPlan(masked, raw, ratio, point_indices=idx_map, n_source_points=occ.n_points)


def split_cloud(fc: FusedCloud, plan: MaskPlan, occ: Occupancy):
    """Visible cloud (in-bounds, unmasked) and the plan with per-grid raw targets."""
    if plan.n_source_points != occ.n_points or len(fc) != occ.n_points:
        raise ValueError("mask plan, occupancy and cloud do not describe the same points")
    masked_flat = np.array([i * occ.spec.Y + j for i, j in plan.masked], dtype=np.int64)
    for cell, flat in zip(plan.masked, masked_flat):
        idx = plan.point_indices.get(cell)
        k = np.searchsorted(occ.non_empty, flat)
        if (idx is None or k >= len(occ.non_empty) or occ.non_empty[k] != flat
                or len(idx) != occ.counts[k]):
            raise ValueError(f"masked grid {cell} is not a non-empty grid of this occupancy")
        plan.raw_targets[cell] = fc.points[idx]
    hidden = np.isin(occ.flat, masked_flat) | (occ.flat < 0)
    visible = fc.select(~hidden)
    return visible, plan


def normalize_targets(plan: MaskPlan, spec: BevSpec, z_center: float = 0.0,
                      z_scale: float = 4.0, cap: int | None = None,
                      rng: np.random.Generator | None = None) -> MaskPlan:
    """Grid-local targets: x, y scaled to [-1, 1] across the cell, z by ``z_scale``.

    Grids holding more than ``cap`` points are uniformly subsampled.
    """
    targets = {}
    for cell in plan.masked:
        pts = plan.raw_targets[cell]
        if cap is not None and len(pts) > cap:
            rng = rng if rng is not None else np.random.default_rng(0)
            pts = pts[np.sort(rng.choice(len(pts), size=cap, replace=False))]
        targets[cell] = to_local(pts, spec, cell, z_center, z_scale)
    plan.targets = targets
    return plan


def to_local(pts, spec: BevSpec, cell, z_center=0.0, z_scale=4.0) -> np.ndarray:
    cx, cy = spec.cell_center(*cell)
    pts = np.asarray(pts, dtype=np.float64)
    return np.stack([(pts[:, 0] - cx) / spec.cell * 2, (pts[:, 1] - cy) / spec.cell * 2,
                     (pts[:, 2] - z_center) / z_scale], axis=1)


def from_local(local, spec: BevSpec, cell, z_center=0.0, z_scale=4.0) -> np.ndarray:
    cx, cy = spec.cell_center(*cell)
    local = np.asarray(local, dtype=np.float64)
    return np.stack([local[:, 0] * spec.cell / 2 + cx, local[:, 1] * spec.cell / 2 + cy,
                     local[:, 2] * z_scale + z_center], axis=1)
