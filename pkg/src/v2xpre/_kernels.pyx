# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_kernels_py``; identical semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, fabs, sqrt

cnp.import_array()

NO_HIT = -2
GROUND = -1


def raycast(origin, dirs, centers, rotations, halves, double ground_z, double max_range):
    cdef double[::1] org = np.ascontiguousarray(origin, dtype=np.float64)
    cdef double[:, ::1] D = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef double[:, ::1] C = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
    cdef double[:, :, ::1] Rm = np.ascontiguousarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    cdef double[:, ::1] H = np.ascontiguousarray(halves, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t n = D.shape[0], nb = C.shape[0]
    t_out = np.full(n, np.inf)
    code_out = np.full(n, NO_HIT, dtype=np.int64)
    cdef double[::1] T = t_out
    cdef long long[::1] CODE = code_out
    # per-box ray origin in box frame, and inside flags
    ob_arr = np.zeros((nb, 3))
    cdef double[:, ::1] OB = ob_arr
    inside_arr = np.zeros(nb, dtype=np.uint8)
    cdef unsigned char[::1] INS = inside_arr
    cdef Py_ssize_t i, b, k, r
    cdef double v, tg, tnear, tfar, dk, t1, t2, lo, hi, best
    cdef double d[3]
    cdef int miss
    for b in range(nb):
        for k in range(3):
            v = 0.0
            for r in range(3):
                v += Rm[b, r, k] * (org[r] - C[b, r])
            OB[b, k] = v
        INS[b] = 1
        for k in range(3):
            if not (fabs(OB[b, k]) < H[b, k]):
                INS[b] = 0
    for i in range(n):
        best = INFINITY
        CODE[i] = NO_HIT
        if D[i, 2] < 0:
            tg = (ground_z - org[2]) / D[i, 2]
            if tg > 0 and tg <= max_range:
                best = tg
                CODE[i] = GROUND
        for b in range(nb):
            if INS[b]:
                continue
            for k in range(3):
                d[k] = Rm[b, 0, k] * D[i, 0] + Rm[b, 1, k] * D[i, 1] + Rm[b, 2, k] * D[i, 2]
            tnear = -INFINITY
            tfar = INFINITY
            miss = 0
            for k in range(3):
                dk = d[k]
                if dk == 0.0:
                    if OB[b, k] < -H[b, k] or OB[b, k] > H[b, k]:
                        miss = 1
                        break
                    continue
                t1 = (-H[b, k] - OB[b, k]) / dk
                t2 = (H[b, k] - OB[b, k]) / dk
                if t1 < t2:
                    lo = t1
                    hi = t2
                else:
                    lo = t2
                    hi = t1
                if lo > tnear:
                    tnear = lo
                if hi < tfar:
                    tfar = hi
            if miss:
                continue
            if tnear <= tfar and tnear > 0 and tnear <= max_range and tnear < best:
                best = tnear
                CODE[i] = b
        T[i] = best
    return t_out, code_out


def chamfer_nn(pred, target, counts):
    cdef double[:, :, ::1] P = np.ascontiguousarray(pred, dtype=np.float64)
    cdef double[:, :, ::1] Q = np.ascontiguousarray(target, dtype=np.float64)
    cdef long long[::1] CNT = np.ascontiguousarray(counts, dtype=np.int64)
    cdef Py_ssize_t M = P.shape[0], K = P.shape[1], N = Q.shape[1]
    dist_p = np.full((M, K), np.inf)
    idx_p = np.zeros((M, K), dtype=np.int64)
    dist_t = np.zeros((M, N))
    idx_t = np.full((M, N), -1, dtype=np.int64)
    cdef double[:, ::1] DP = dist_p
    cdef long long[:, ::1] IP = idx_p
    cdef double[:, ::1] DT = dist_t
    cdef long long[:, ::1] IT = idx_t
    cdef Py_ssize_t m, a, j, n
    cdef double dx, dy, dz, dd
    for m in range(M):
        n = CNT[m]
        for j in range(n):
            DT[m, j] = INFINITY
        for a in range(K):
            for j in range(n):
                dx = P[m, a, 0] - Q[m, j, 0]
                dy = P[m, a, 1] - Q[m, j, 1]
                dz = P[m, a, 2] - Q[m, j, 2]
                dd = dx * dx + dy * dy + dz * dz
                if dd < DP[m, a]:
                    DP[m, a] = dd
                    IP[m, a] = j
                if dd < DT[m, j]:
                    DT[m, j] = dd
                    IT[m, j] = a
    return dist_p, idx_p, dist_t, idx_t


cdef double _clip_area(double[:, ::1] A, double[:, ::1] B, double* buf1, double* buf2):
    # Sutherland-Hodgman of convex quad A against convex quad B (both CCW).
    cdef int n = 4, m, e, i, nb = B.shape[0]
    cdef double ax, ay, bx, by, ex, ey, px, py, qx, qy, sp, sq, t, s
    cdef double* src = buf1
    cdef double* dst = buf2
    cdef double* tmp
    for i in range(n):
        src[2 * i] = A[i, 0]
        src[2 * i + 1] = A[i, 1]
    for e in range(nb):
        ax = B[e, 0]
        ay = B[e, 1]
        bx = B[(e + 1) % nb, 0]
        by = B[(e + 1) % nb, 1]
        ex = bx - ax
        ey = by - ay
        m = 0
        for i in range(n):
            px = src[2 * i]
            py = src[2 * i + 1]
            qx = src[2 * ((i + 1) % n)]
            qy = src[2 * ((i + 1) % n) + 1]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0:
                dst[2 * m] = px
                dst[2 * m + 1] = py
                m += 1
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                dst[2 * m] = px + t * (qx - px)
                dst[2 * m + 1] = py + t * (qy - py)
                m += 1
        n = m
        tmp = src
        src = dst
        dst = tmp
        if n == 0:
            return 0.0
    s = 0.0
    for i in range(n):
        s += src[2 * i] * src[2 * ((i + 1) % n) + 1] - src[2 * ((i + 1) % n)] * src[2 * i + 1]
    return fabs(s) * 0.5


def convex_intersection_area(pa, pb):
    cdef double buf1[64]
    cdef double buf2[64]
    cdef double[:, ::1] A = np.ascontiguousarray(pa, dtype=np.float64)
    cdef double[:, ::1] B = np.ascontiguousarray(pb, dtype=np.float64)
    return _clip_area(A, B, buf1, buf2)


def rect_intersection_areas(ca, cb):
    cdef double[:, :, ::1] CA = np.ascontiguousarray(ca, dtype=np.float64).reshape(-1, 4, 2)
    cdef double[:, :, ::1] CB = np.ascontiguousarray(cb, dtype=np.float64).reshape(-1, 4, 2)
    cdef Py_ssize_t na = CA.shape[0], nbx = CB.shape[0], i, j, k
    out = np.zeros((na, nbx))
    cdef double[:, ::1] O = out
    cdef double buf1[64]
    cdef double buf2[64]
    cdef double cxa, cya, cxb, cyb, ra, rb, dx, dy, r
    for i in range(na):
        cxa = 0.25 * (CA[i, 0, 0] + CA[i, 1, 0] + CA[i, 2, 0] + CA[i, 3, 0])
        cya = 0.25 * (CA[i, 0, 1] + CA[i, 1, 1] + CA[i, 2, 1] + CA[i, 3, 1])
        ra = 0.0
        for k in range(4):
            r = sqrt((CA[i, k, 0] - cxa) ** 2 + (CA[i, k, 1] - cya) ** 2)
            if r > ra:
                ra = r
        for j in range(nbx):
            cxb = 0.25 * (CB[j, 0, 0] + CB[j, 1, 0] + CB[j, 2, 0] + CB[j, 3, 0])
            cyb = 0.25 * (CB[j, 0, 1] + CB[j, 1, 1] + CB[j, 2, 1] + CB[j, 3, 1])
            rb = 0.0
            for k in range(4):
                r = sqrt((CB[j, k, 0] - cxb) ** 2 + (CB[j, k, 1] - cyb) ** 2)
                if r > rb:
                    rb = r
            dx = cxb - cxa
            dy = cyb - cya
            if sqrt(dx * dx + dy * dy) < ra + rb:
                O[i, j] = _clip_area(CA[i], CB[j], buf1, buf2)
    return out
