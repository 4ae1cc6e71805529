"""Quadric-error-metric edge-collapse decimation for closed manifold meshes.

Collapses are taken in order of increasing quadric cost; equal costs are
ordered by the edge's ``(lo, hi)`` vertex pair.  A collapse is skipped when
it would break the link condition (so genus and watertightness survive) or
flip a neighbouring face.  Skipped edges are retried once the queue drains,
and decimation stops early when a full retry pass makes no progress.

By default each collapse target minimises the quadric on the plane that
keeps the enclosed volume unchanged.  Plain quadric placement shrinks
convex limbs by more than 10% at a 100-face budget.
"""
from __future__ import annotations

import heapq
import warnings

import numba as nb
import numpy as np

from .mesh import MeshError, TriangleMesh, validate

COND_LIMIT = 1e12
FLIP_COS = 0.0


class DecimationWarning(UserWarning):
    """The face budget could not be reached without a topology violation."""


@nb.njit(cache=True, inline="always")
def _cross(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


@nb.njit(cache=True)
def _solve3(a00, a01, a02, a11, a12, a22, r0, r1, r2):
    """Solve a symmetric 3x3 system; ``ok`` is False when ill-conditioned."""
    c00 = a11 * a22 - a12 * a12
    c01 = a02 * a12 - a01 * a22
    c02 = a01 * a12 - a02 * a11
    c11 = a00 * a22 - a02 * a02
    c12 = a01 * a02 - a00 * a12
    c22 = a00 * a11 - a01 * a01
    det = a00 * c00 + a01 * c01 + a02 * c02
    # Frobenius condition number ||A|| * ||adj A|| / |det|
    norm_a = np.sqrt(a00 * a00 + a11 * a11 + a22 * a22
                     + 2.0 * (a01 * a01 + a02 * a02 + a12 * a12))
    norm_adj = np.sqrt(c00 * c00 + c11 * c11 + c22 * c22
                       + 2.0 * (c01 * c01 + c02 * c02 + c12 * c12))
    if det == 0.0 or norm_a * norm_adj >= COND_LIMIT * abs(det):
        return False, 0.0, 0.0, 0.0
    x = (c00 * r0 + c01 * r1 + c02 * r2) / det
    y = (c01 * r0 + c11 * r1 + c12 * r2) / det
    z = (c02 * r0 + c12 * r1 + c22 * r2) / det
    return True, x, y, z


@nb.njit(cache=True)
def _volume_constraint(a, b, V, F, head, nxt, face_alive):
    """Plane ``g . p = h`` on which the enclosed volume is unchanged."""
    gx = gy = gz = 0.0
    h = 0.0
    for v in (a, b):
        c = head[v]
        while c >= 0:
            f = c // 3
            if face_alive[f]:
                i0, i1, i2 = F[f, 0], F[f, 1], F[f, 2]
                has_a = i0 == a or i1 == a or i2 == a
                has_b = i0 == b or i1 == b or i2 == b
                if not (v == b and has_a):  # shared faces once
                    cx, cy, cz = _cross(V[i1, 0], V[i1, 1], V[i1, 2],
                                        V[i2, 0], V[i2, 1], V[i2, 2])
                    h += V[i0, 0] * cx + V[i0, 1] * cy + V[i0, 2] * cz
                    if not (has_a and has_b):
                        k = c % 3
                        j1 = F[f, (k + 1) % 3]
                        j2 = F[f, (k + 2) % 3]
                        cx, cy, cz = _cross(V[j1, 0], V[j1, 1], V[j1, 2],
                                            V[j2, 0], V[j2, 1], V[j2, 2])
                        gx += cx
                        gy += cy
                        gz += cz
            c = nxt[c]
    return gx, gy, gz, h


@nb.njit(cache=True)
def _placement(Q, lo, hi, V, F, head, nxt, face_alive, preserve_volume):
    """Collapse target for edge (lo, hi) and its quadric cost.

    The quadric minimiser when well conditioned, else the midpoint.  With
    ``preserve_volume`` the quadric is minimised on the zero-volume-change
    plane instead.
    """
    a00 = Q[lo, 0] + Q[hi, 0]
    a01 = Q[lo, 1] + Q[hi, 1]
    a02 = Q[lo, 2] + Q[hi, 2]
    b0 = Q[lo, 3] + Q[hi, 3]
    a11 = Q[lo, 4] + Q[hi, 4]
    a12 = Q[lo, 5] + Q[hi, 5]
    b1 = Q[lo, 6] + Q[hi, 6]
    a22 = Q[lo, 7] + Q[hi, 7]
    b2 = Q[lo, 8] + Q[hi, 8]
    cc = Q[lo, 9] + Q[hi, 9]
    ok, x, y, z = _solve3(a00, a01, a02, a11, a12, a22, -b0, -b1, -b2)
    if not ok:
        x = 0.5 * (V[lo, 0] + V[hi, 0])
        y = 0.5 * (V[lo, 1] + V[hi, 1])
        z = 0.5 * (V[lo, 2] + V[hi, 2])
    if preserve_volume:
        gx, gy, gz, h = _volume_constraint(lo, hi, V, F, head, nxt, face_alive)
        gg = gx * gx + gy * gy + gz * gz
        if gg > 0.0:
            r = h - (gx * x + gy * y + gz * z)
            okg, ux, uy, uz = _solve3(a00, a01, a02, a11, a12, a22, gx, gy, gz)
            gu = gx * ux + gy * uy + gz * uz
            if ok and okg and gu > 0.0:
                t = r / gu
                x += t * ux
                y += t * uy
                z += t * uz
            else:
                t = r / gg
                x += t * gx
                y += t * gy
                z += t * gz
    cost = (a00 * x * x + 2 * a01 * x * y + 2 * a02 * x * z + 2 * b0 * x
            + a11 * y * y + 2 * a12 * y * z + 2 * b1 * y
            + a22 * z * z + 2 * b2 * z + cc)
    return cost, x, y, z


@nb.njit(cache=True)
def _has_face(v, x, y, head, nxt, F, face_alive):
    c = head[v]
    while c >= 0:
        f = c // 3
        if face_alive[f]:
            i0, i1, i2 = F[f, 0], F[f, 1], F[f, 2]
            if ((i0 == x or i1 == x or i2 == x) and (i0 == y or i1 == y or i2 == y)):
                return True
        c = nxt[c]
    return False


@nb.njit(cache=True)
def _neighbors(v, head, nxt, F, face_alive, mark, token, out):
    """Fill ``out`` with distinct neighbours of ``v``; returns the count."""
    n = 0
    c = head[v]
    while c >= 0:
        f = c // 3
        if face_alive[f]:
            for k in range(3):
                w = F[f, k]
                if w != v and mark[w] != token:
                    mark[w] = token
                    out[n] = w
                    n += 1
        c = nxt[c]
    return n


@nb.njit(cache=True)
def _flips(v, a, b, x, y, z, V, F, head, nxt, face_alive, flip_cos):
    """Would moving a and b to (x, y, z) flip or flatten a face around v?"""
    c = head[v]
    while c >= 0:
        f = c // 3
        if face_alive[f]:
            i0, i1, i2 = F[f, 0], F[f, 1], F[f, 2]
            has_a = i0 == a or i1 == a or i2 == a
            has_b = i0 == b or i1 == b or i2 == b
            if not (has_a and has_b):
                k = c % 3
                j1 = F[f, (k + 1) % 3]
                j2 = F[f, (k + 2) % 3]
                px, py, pz = V[v, 0], V[v, 1], V[v, 2]
                n0x, n0y, n0z = _cross(V[j1, 0] - px, V[j1, 1] - py, V[j1, 2] - pz,
                                       V[j2, 0] - px, V[j2, 1] - py, V[j2, 2] - pz)
                n1x, n1y, n1z = _cross(V[j1, 0] - x, V[j1, 1] - y, V[j1, 2] - z,
                                       V[j2, 0] - x, V[j2, 1] - y, V[j2, 2] - z)
                l0 = np.sqrt(n0x * n0x + n0y * n0y + n0z * n0z)
                l1 = np.sqrt(n1x * n1x + n1y * n1y + n1z * n1z)
                if l1 <= 1e-12 * (l0 + 1e-300):
                    return True
                if n0x * n1x + n0y * n1y + n0z * n1z <= flip_cos * l0 * l1:
                    return True
        c = nxt[c]
    return False


@nb.njit(cache=True)
def _push_edge(heap, Q, V, F, head, nxt, face_alive, stamp, u, w, preserve_volume):
    lo = min(u, w)
    hi = max(u, w)
    cost, _, _, _ = _placement(Q, lo, hi, V, F, head, nxt, face_alive, preserve_volume)
    heapq.heappush(heap, (cost, lo, hi, stamp[lo], stamp[hi]))


@nb.njit(cache=True)
def _simplify(V, F, edges, target, flip_cos, preserve_volume):
    V = V.copy()
    F = F.copy()
    nv = V.shape[0]
    nf = F.shape[0]
    Q = np.zeros((nv, 10))
    for f in range(nf):
        i0, i1, i2 = F[f, 0], F[f, 1], F[f, 2]
        nx, ny, nz = _cross(V[i1, 0] - V[i0, 0], V[i1, 1] - V[i0, 1], V[i1, 2] - V[i0, 2],
                            V[i2, 0] - V[i0, 0], V[i2, 1] - V[i0, 1], V[i2, 2] - V[i0, 2])
        ln = np.sqrt(nx * nx + ny * ny + nz * nz)
        if ln == 0.0:
            continue
        area = 0.5 * ln
        nx /= ln
        ny /= ln
        nz /= ln
        d = -(nx * V[i0, 0] + ny * V[i0, 1] + nz * V[i0, 2])
        k = (nx * nx, nx * ny, nx * nz, nx * d, ny * ny, ny * nz, ny * d, nz * nz, nz * d, d * d)
        for j in range(3):
            v = F[f, j]
            for t in range(10):
                Q[v, t] += k[t] * area

    head = -np.ones(nv, dtype=np.int64)
    tail = -np.ones(nv, dtype=np.int64)
    nxt = -np.ones(3 * nf, dtype=np.int64)
    for f in range(nf):
        for j in range(3):
            c = 3 * f + j
            v = F[f, j]
            if head[v] < 0:
                head[v] = c
            else:
                nxt[tail[v]] = c
            tail[v] = c

    face_alive = np.ones(nf, dtype=np.bool_)
    alive = np.ones(nv, dtype=np.bool_)
    stamp = np.zeros(nv, dtype=np.int64)
    mark = np.zeros(nv, dtype=np.int64)
    token = 0
    buf_a = np.empty(nv, dtype=np.int64)
    buf_b = np.empty(nv, dtype=np.int64)
    buf_c = np.empty(nv, dtype=np.int64)

    heap = [(0.0, 0, 0, 0, 0)]
    heap.pop()
    for e in range(edges.shape[0]):
        _push_edge(heap, Q, V, F, head, nxt, face_alive, stamp, edges[e, 0], edges[e, 1],
                   preserve_volume)

    faces_left = nf
    rejected = [(0, 0)]
    rejected.pop()
    progress = 0
    while faces_left > target:
        if len(heap) == 0:
            if progress == 0 or len(rejected) == 0:
                break
            progress = 0
            for r in range(len(rejected)):
                a, b = rejected[r]
                if alive[a] and alive[b]:
                    _push_edge(heap, Q, V, F, head, nxt, face_alive, stamp, a, b,
                               preserve_volume)
            rejected.clear()
            continue
        queued_cost, a, b, sa, sb = heapq.heappop(heap)
        if not alive[a] or not alive[b] or stamp[a] != sa or stamp[b] != sb:
            continue

        token += 1
        na = _neighbors(a, head, nxt, F, face_alive, mark, token, buf_a)
        adjacent = False
        for i in range(na):
            if buf_a[i] == b:
                adjacent = True
        if not adjacent:
            continue
        token += 1
        for i in range(na):
            mark[buf_a[i]] = token
        n_common = 0
        c_ = -1
        d_ = -1
        c = head[b]
        token2 = token + 1
        # distinct neighbours of b that are also neighbours of a
        while c >= 0:
            f = c // 3
            if face_alive[f]:
                for k in range(3):
                    w = F[f, k]
                    if w != b and w != a and mark[w] == token:
                        mark[w] = token2
                        n_common += 1
                        if c_ < 0:
                            c_ = w
                        else:
                            d_ = w
            c = nxt[c]
        token = token2
        if n_common != 2:
            rejected.append((a, b))
            continue
        # c and d must keep degree >= 3, and a, b, c, d must not span a tetrahedron
        token += 1
        ok = _neighbors(c_, head, nxt, F, face_alive, mark, token, buf_c) >= 4
        token += 1
        if ok and _neighbors(d_, head, nxt, F, face_alive, mark, token, buf_b) < 4:
            ok = False
        if ok and (_has_face(a, c_, d_, head, nxt, F, face_alive)
                   and _has_face(b, c_, d_, head, nxt, F, face_alive)):
            ok = False
        if not ok:
            rejected.append((a, b))
            continue

        cost, x, y, z = _placement(Q, a, b, V, F, head, nxt, face_alive, preserve_volume)
        if cost > queued_cost:
            # the volume plane moved with a neighbouring collapse; requeue
            heapq.heappush(heap, (cost, a, b, sa, sb))
            continue
        if (_flips(a, a, b, x, y, z, V, F, head, nxt, face_alive, flip_cos)
                or _flips(b, a, b, x, y, z, V, F, head, nxt, face_alive, flip_cos)):
            rejected.append((a, b))
            continue

        # collapse b into a
        V[a, 0] = x
        V[a, 1] = y
        V[a, 2] = z
        for t in range(10):
            Q[a, t] += Q[b, t]
        alive[b] = False
        stamp[a] += 1
        c = head[b]
        while c >= 0:
            f = c // 3
            if face_alive[f]:
                if F[f, 0] == a or F[f, 1] == a or F[f, 2] == a:
                    face_alive[f] = False
                    faces_left -= 1
                else:
                    F[c // 3, c % 3] = a
            c = nxt[c]
        # rebuild a's corner chain from both chains, dropping dead faces
        new_head = -1
        new_tail = -1
        for start in (head[a], head[b]):
            c = start
            while c >= 0:
                nc_ = nxt[c]
                if face_alive[c // 3]:
                    if new_head < 0:
                        new_head = c
                    else:
                        nxt[new_tail] = c
                    new_tail = c
                c = nc_
        if new_tail >= 0:
            nxt[new_tail] = -1
        head[a] = new_head
        tail[a] = new_tail
        head[b] = -1
        tail[b] = -1
        progress += 1

        token += 1
        na = _neighbors(a, head, nxt, F, face_alive, mark, token, buf_a)
        for i in range(na):
            _push_edge(heap, Q, V, F, head, nxt, face_alive, stamp, a, buf_a[i],
                       preserve_volume)

    return V, F, alive, face_alive, faces_left <= target


def simplify(m: TriangleMesh, target_faces: int, flip_cos: float = FLIP_COS,
             preserve_volume: bool = True):
    """Decimate ``m`` to at most ``target_faces`` faces.

    Returns ``(mesh, reached)``; ``reached`` is False when every remaining
    collapse would violate the link condition or flip a face.
    """
    if target_faces < 20:
        raise ValueError("target_faces must be at least 20")
    if m.n_faces <= target_faces:
        return m.copy(), True
    stats = validate(m)
    if not stats.watertight:
        raise MeshError("decimation requires a watertight mesh")
    V, F, alive, face_alive, reached = _simplify(
        m.vertices, m.faces, m.edges(), int(target_faces), float(flip_cos),
        bool(preserve_volume))
    remap = -np.ones(len(V), dtype=np.int64)
    remap[alive] = np.arange(int(alive.sum()))
    return TriangleMesh(V[alive], remap[F[face_alive]]), bool(reached)


def decimate(m: TriangleMesh, target_faces: int, preserve_volume: bool = True) -> TriangleMesh:
    """QEM decimation to a face budget (an upper bound).

    Emits :class:`DecimationWarning` when the budget is unreachable and
    returns the best mesh obtained.
    """
    out, reached = simplify(m, target_faces, preserve_volume=preserve_volume)
    if not reached:
        warnings.warn(f"could only reach {out.n_faces} faces (target {target_faces})",
                      DecimationWarning, stacklevel=2)
    return out
