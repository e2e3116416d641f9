"""Triangle BVH (binned surface-area heuristic) with closest-hit and any-hit queries."""
from __future__ import annotations

import numba as nb
import numpy as np

LEAF_SIZE = 4
N_BINS = 12
STACK_DEPTH = 128


@nb.njit(cache=True)
def _build(tri_min, tri_max, centroid):
    n = tri_min.shape[0]
    max_nodes = 2 * n + 1
    bmin = np.empty((max_nodes, 3))
    bmax = np.empty((max_nodes, 3))
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    start = np.zeros(max_nodes, np.int64)
    count = np.zeros(max_nodes, np.int64)
    order = np.arange(n)
    stack = np.empty((max_nodes, 3), np.int64)  # node, begin, end
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    sp = 1
    n_nodes = 1
    bin_min = np.empty((N_BINS, 3))
    bin_max = np.empty((N_BINS, 3))
    bin_cnt = np.empty(N_BINS, np.int64)
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        b = stack[sp, 1]
        e = stack[sp, 2]
        for k in range(3):
            bmin[node, k] = np.inf
            bmax[node, k] = -np.inf
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for i in range(b, e):
            t = order[i]
            for k in range(3):
                bmin[node, k] = min(bmin[node, k], tri_min[t, k])
                bmax[node, k] = max(bmax[node, k], tri_max[t, k])
                cmin[k] = min(cmin[k], centroid[t, k])
                cmax[k] = max(cmax[k], centroid[t, k])
        cnt = e - b
        if cnt <= LEAF_SIZE:
            start[node] = b
            count[node] = cnt
            continue
        best_cost = np.inf
        best_axis = -1
        best_split = 0
        for axis in range(3):
            ext = cmax[axis] - cmin[axis]
            if ext <= 0.0:
                continue
            for j in range(N_BINS):
                bin_cnt[j] = 0
                for k in range(3):
                    bin_min[j, k] = np.inf
                    bin_max[j, k] = -np.inf
            for i in range(b, e):
                t = order[i]
                j = int(N_BINS * (centroid[t, axis] - cmin[axis]) / ext)
                if j >= N_BINS:
                    j = N_BINS - 1
                bin_cnt[j] += 1
                for k in range(3):
                    bin_min[j, k] = min(bin_min[j, k], tri_min[t, k])
                    bin_max[j, k] = max(bin_max[j, k], tri_max[t, k])
            for s in range(1, N_BINS):
                # cost of splitting before bin s
                lc = 0
                rc = 0
                lmin = np.full(3, np.inf)
                lmax = np.full(3, -np.inf)
                rmin = np.full(3, np.inf)
                rmax = np.full(3, -np.inf)
                for j in range(N_BINS):
                    if bin_cnt[j] == 0:
                        continue
                    if j < s:
                        lc += bin_cnt[j]
                        for k in range(3):
                            lmin[k] = min(lmin[k], bin_min[j, k])
                            lmax[k] = max(lmax[k], bin_max[j, k])
                    else:
                        rc += bin_cnt[j]
                        for k in range(3):
                            rmin[k] = min(rmin[k], bin_min[j, k])
                            rmax[k] = max(rmax[k], bin_max[j, k])
                if lc == 0 or rc == 0:
                    continue
                dl = lmax - lmin
                dr = rmax - rmin
                sa_l = dl[0] * dl[1] + dl[1] * dl[2] + dl[2] * dl[0]
                sa_r = dr[0] * dr[1] + dr[1] * dr[2] + dr[2] * dr[0]
                cost = lc * sa_l + rc * sa_r
                if cost < best_cost:
                    best_cost = cost
                    best_axis = axis
                    best_split = s
        if best_axis < 0:
            # all centroids coincide: split the index range in half
            mid = b + cnt // 2
        else:
            ext = cmax[best_axis] - cmin[best_axis]
            i = b
            j2 = e - 1
            while i <= j2:
                t = order[i]
                j = int(N_BINS * (centroid[t, best_axis] - cmin[best_axis]) / ext)
                if j >= N_BINS:
                    j = N_BINS - 1
                if j < best_split:
                    i += 1
                else:
                    order[i] = order[j2]
                    order[j2] = t
                    j2 -= 1
            mid = i
            if mid == b or mid == e:
                mid = b + cnt // 2
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        stack[sp, 0] = lnode
        stack[sp, 1] = b
        stack[sp, 2] = mid
        sp += 1
        stack[sp, 0] = rnode
        stack[sp, 1] = mid
        stack[sp, 2] = e
        sp += 1
    return (bmin[:n_nodes].copy(), bmax[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), start[:n_nodes].copy(), count[:n_nodes].copy(), order)


@nb.njit(cache=True, inline="always")
def _slab(bmin, bmax, node, o0, o1, o2, inv0, inv1, inv2, tmax):
    t0 = (bmin[node, 0] - o0) * inv0
    t1 = (bmax[node, 0] - o0) * inv0
    lo = min(t0, t1)
    hi = max(t0, t1)
    t0 = (bmin[node, 1] - o1) * inv1
    t1 = (bmax[node, 1] - o1) * inv1
    lo = max(lo, min(t0, t1))
    hi = min(hi, max(t0, t1))
    t0 = (bmin[node, 2] - o2) * inv2
    t1 = (bmax[node, 2] - o2) * inv2
    lo = max(lo, min(t0, t1))
    hi = min(hi, max(t0, t1))
    return hi >= max(lo, 0.0) and lo <= tmax


@nb.njit(cache=True, inline="always")
def _tri_hit(v0, e1, e2, t, o0, o1, o2, d0, d1, d2):
    # Moller-Trumbore; returns (t, u, v), t < 0 on miss
    p0 = d1 * e2[t, 2] - d2 * e2[t, 1]
    p1 = d2 * e2[t, 0] - d0 * e2[t, 2]
    p2 = d0 * e2[t, 1] - d1 * e2[t, 0]
    det = e1[t, 0] * p0 + e1[t, 1] * p1 + e1[t, 2] * p2
    if abs(det) < 1e-14:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    s0 = o0 - v0[t, 0]
    s1 = o1 - v0[t, 1]
    s2 = o2 - v0[t, 2]
    u = (s0 * p0 + s1 * p1 + s2 * p2) * inv
    if u < 0.0 or u > 1.0:
        return -1.0, 0.0, 0.0
    q0 = s1 * e1[t, 2] - s2 * e1[t, 1]
    q1 = s2 * e1[t, 0] - s0 * e1[t, 2]
    q2 = s0 * e1[t, 1] - s1 * e1[t, 0]
    v = (d0 * q0 + d1 * q1 + d2 * q2) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0, 0.0, 0.0
    tt = (e2[t, 0] * q0 + e2[t, 1] * q1 + e2[t, 2] * q2) * inv
    return tt, u, v


@nb.njit(cache=True, parallel=True)
def _closest(bmin, bmax, left, right, start, count, order, v0, e1, e2, orig, dirs, tmin, tmax):
    n = orig.shape[0]
    out_t = np.full(n, np.inf)
    out_id = np.full(n, -1, np.int64)
    out_u = np.zeros(n)
    out_v = np.zeros(n)
    for r in nb.prange(n):
        o0, o1, o2 = orig[r, 0], orig[r, 1], orig[r, 2]
        d0, d1, d2 = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        inv0 = 1.0 / d0 if d0 != 0.0 else 1e300
        inv1 = 1.0 / d1 if d1 != 0.0 else 1e300
        inv2 = 1.0 / d2 if d2 != 0.0 else 1e300
        best = tmax[r]
        best_id = -1
        bu = 0.0
        bv = 0.0
        stack = np.empty(STACK_DEPTH, np.int64)
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if not _slab(bmin, bmax, node, o0, o1, o2, inv0, inv1, inv2, best):
                continue
            if count[node] > 0:
                for i in range(start[node], start[node] + count[node]):
                    t = order[i]
                    tt, u, v = _tri_hit(v0, e1, e2, t, o0, o1, o2, d0, d1, d2)
                    if tt > tmin[r] and tt < best:
                        best = tt
                        best_id = t
                        bu = u
                        bv = v
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        if best_id >= 0:
            out_t[r] = best
            out_id[r] = best_id
            out_u[r] = bu
            out_v[r] = bv
    return out_t, out_id, out_u, out_v


@nb.njit(cache=True, parallel=True)
def _any(bmin, bmax, left, right, start, count, order, v0, e1, e2, orig, dirs, tmin, tmax):
    n = orig.shape[0]
    hit = np.zeros(n, np.bool_)
    for r in nb.prange(n):
        o0, o1, o2 = orig[r, 0], orig[r, 1], orig[r, 2]
        d0, d1, d2 = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        inv0 = 1.0 / d0 if d0 != 0.0 else 1e300
        inv1 = 1.0 / d1 if d1 != 0.0 else 1e300
        inv2 = 1.0 / d2 if d2 != 0.0 else 1e300
        stack = np.empty(STACK_DEPTH, np.int64)
        stack[0] = 0
        sp = 1
        found = False
        while sp > 0 and not found:
            sp -= 1
            node = stack[sp]
            if not _slab(bmin, bmax, node, o0, o1, o2, inv0, inv1, inv2, tmax[r]):
                continue
            if count[node] > 0:
                for i in range(start[node], start[node] + count[node]):
                    tt, u, v = _tri_hit(v0, e1, e2, order[i], o0, o1, o2, d0, d1, d2)
                    if tt > tmin[r] and tt < tmax[r]:
                        found = True
                        break
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        hit[r] = found
    return hit


class BVH:
    """Bounding volume hierarchy over a triangle soup given as (V, 3) positions and (F, 3) faces."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        faces = np.ascontiguousarray(faces, dtype=np.int64)
        p0 = vertices[faces[:, 0]]
        p1 = vertices[faces[:, 1]]
        p2 = vertices[faces[:, 2]]
        self.v0 = np.ascontiguousarray(p0)
        self.e1 = np.ascontiguousarray(p1 - p0)
        self.e2 = np.ascontiguousarray(p2 - p0)
        self.n_triangles = len(faces)
        if self.n_triangles == 0:
            self.nodes = None
            return
        tmin = np.minimum(np.minimum(p0, p1), p2)
        tmax = np.maximum(np.maximum(p0, p1), p2)
        self.nodes = _build(tmin, tmax, (p0 + p1 + p2) / 3.0)

    def intersect(self, orig, dirs, tmin=None, tmax=None):
        """Closest hit per ray: (t, triangle id or -1, barycentric u, barycentric v)."""
        orig = np.ascontiguousarray(orig, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        n = len(orig)
        tmin = np.zeros(n) if tmin is None else np.broadcast_to(np.asarray(tmin, np.float64), (n,)).copy()
        tmax = np.full(n, np.inf) if tmax is None else np.broadcast_to(np.asarray(tmax, np.float64), (n,)).copy()
        if self.nodes is None or n == 0:
            return np.full(n, np.inf), np.full(n, -1, np.int64), np.zeros(n), np.zeros(n)
        return _closest(*self.nodes, self.v0, self.e1, self.e2, orig, dirs, tmin, tmax)

    def occluded(self, orig, dirs, tmin=None, tmax=None):
        orig = np.ascontiguousarray(orig, dtype=np.float64)
        dirs = np.ascontiguousarray(dirs, dtype=np.float64)
        n = len(orig)
        tmin = np.zeros(n) if tmin is None else np.broadcast_to(np.asarray(tmin, np.float64), (n,)).copy()
        tmax = np.full(n, np.inf) if tmax is None else np.broadcast_to(np.asarray(tmax, np.float64), (n,)).copy()
        if self.nodes is None or n == 0:
            return np.zeros(n, bool)
        return _any(*self.nodes, self.v0, self.e1, self.e2, orig, dirs, tmin, tmax)
