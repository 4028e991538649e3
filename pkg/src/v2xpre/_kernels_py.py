"""Pure numpy implementations of the hot kernels.

These are the reference semantics; ``_kernels.pyx`` must agree with them
exactly (same tie-breaking, same hit codes).
"""
import numpy as np

NO_HIT = -2
GROUND = -1


def raycast(origin, dirs, centers, rotations, halves, ground_z, max_range):
    """Nearest hit of rays from one origin against oriented boxes and a ground plane.

    Returns ``(t, code)``: distance along each unit direction (``inf`` on
    miss) and the hit box index, ``GROUND`` or ``NO_HIT``. Boxes whose
    interior contains the origin are ignored.
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(dirs)
    best_t = np.full(n, np.inf)
    code = np.full(n, NO_HIT, dtype=np.int64)

    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (ground_z - origin[2]) / dz
    ok = (dz < 0) & (tg > 0) & (tg <= max_range)
    best_t[ok] = tg[ok]
    code[ok] = GROUND

    for b in range(len(centers)):
        R = rotations[b]
        h = halves[b]
        o = R.T @ (origin - centers[b])
        if np.all(np.abs(o) < h):
            continue
        d = dirs @ R  # rows: R^T d
        tnear = np.full(n, -np.inf)
        tfar = np.full(n, np.inf)
        miss = np.zeros(n, dtype=bool)
        for k in range(3):
            dk = d[:, k]
            par = dk == 0.0
            miss |= par & ((o[k] < -h[k]) | (o[k] > h[k]))
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-h[k] - o[k]) / dk
                t2 = (h[k] - o[k]) / dk
            lo = np.where(par, -np.inf, np.minimum(t1, t2))
            hi = np.where(par, np.inf, np.maximum(t1, t2))
            tnear = np.maximum(tnear, lo)
            tfar = np.minimum(tfar, hi)
        hit = (~miss) & (tnear <= tfar) & (tnear > 0) & (tnear <= max_range) & (tnear < best_t)
        best_t[hit] = tnear[hit]
        code[hit] = b
    return best_t, code


def chamfer_nn(pred, target, counts):
    """Bidirectional nearest neighbours for a batch of (pred, padded target) sets.

    pred (M, K, 3), target (M, N, 3) with ``counts[m]`` valid rows. Returns
    squared distances and indices in both directions; padded target slots
    get distance 0 and index -1. Ties resolve to the lowest index.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    M, K, _ = pred.shape
    N = target.shape[1]
    diff = pred[:, :, None, :] - target[:, None, :, :]
    d2 = np.einsum("mknc,mknc->mkn", diff, diff)
    valid = np.arange(N)[None, :] < counts[:, None]  # (M, N)
    d2_pred = np.where(valid[:, None, :], d2, np.inf)
    idx_p = np.argmin(d2_pred, axis=2)
    dist_p = np.take_along_axis(d2_pred, idx_p[:, :, None], axis=2)[:, :, 0]
    idx_t = np.argmin(d2, axis=1)
    dist_t = np.take_along_axis(d2, idx_t[:, None, :], axis=1)[:, 0, :]
    idx_t = np.where(valid, idx_t, -1)
    dist_t = np.where(valid, dist_t, 0.0)
    return dist_p, idx_p.astype(np.int64), dist_t, idx_t.astype(np.int64)


def _clip(poly, a, b):
    """Keep the part of ``poly`` left of the directed edge a->b."""
    out = []
    n = len(poly)
    if n == 0:
        return out
    ex, ey = b[0] - a[0], b[1] - a[1]
    side = [ex * (p[1] - a[1]) - ey * (p[0] - a[0]) for p in poly]
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        sp, sq = side[i], side[(i + 1) % n]
        if sp >= 0:
            out.append(p)
        if (sp >= 0) != (sq >= 0):
            t = sp / (sp - sq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _area(poly):
    s = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        s += x1 * y2 - x2 * y1
    return abs(s) * 0.5


def convex_intersection_area(pa, pb):
    """Intersection area of two counter-clockwise convex polygons."""
    poly = [tuple(map(float, p)) for p in pa]
    clipper = [tuple(map(float, p)) for p in pb]
    for i in range(len(clipper)):
        poly = _clip(poly, clipper[i], clipper[(i + 1) % len(clipper)])
        if not poly:
            return 0.0
    return _area(poly)


def rect_intersection_areas(ca, cb):
    """Pairwise intersection areas, ca (n, 4, 2) x cb (m, 4, 2) -> (n, m)."""
    ca = np.asarray(ca, dtype=np.float64)
    cb = np.asarray(cb, dtype=np.float64)
    out = np.zeros((len(ca), len(cb)))
    if len(ca) == 0 or len(cb) == 0:
        return out
    ra = np.max(np.linalg.norm(ca - ca.mean(axis=1, keepdims=True), axis=2), axis=1)
    rb = np.max(np.linalg.norm(cb - cb.mean(axis=1, keepdims=True), axis=2), axis=1)
    ctr_a = ca.mean(axis=1)
    ctr_b = cb.mean(axis=1)
    for i in range(len(ca)):
        dist = np.linalg.norm(ctr_b - ctr_a[i], axis=1)
        for j in np.nonzero(dist < ra[i] + rb)[0]:
            out[i, j] = convex_intersection_area(ca[i], cb[j])
    return out
