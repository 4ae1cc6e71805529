"""Marching cubes on binary occupancy grids.

The case table is generated rather than transcribed.  On every cube face the
isoline segments are fixed by the face's own four corners (ambiguous faces
always separate the two inside corners), so neighbouring cubes agree on the
shared segments.  Each cube's segments chain into closed loops which are
triangulated inside that cube: triangles directly, quads by a diagonal that
does not lie in a cube face, longer loops by a fan around an added centroid
vertex.  Every mesh edge is therefore either a face segment (one triangle on
each side of the face) or interior to a single cube, which makes the output
watertight by construction.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..volume import VoxelVolume
from .mesh import MeshError, TriangleMesh

CORNERS = np.array([[k & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)])
# (start corner, end corner, axis); start has the axis bit clear
EDGES = [(c, c | (1 << a), a) for a in range(3) for c in range(8) if not c & (1 << a)]
_EDGE_OF = {frozenset((a, b)): i for i, (a, b, _) in enumerate(EDGES)}


def _faces():
    out = []
    for a in range(3):
        b, c = [x for x in range(3) if x != a]
        for s in (0, 1):
            cyc = []
            for ub, uc in ((0, 0), (1, 0), (1, 1), (0, 1)):
                k = (s << a) | (ub << b) | (uc << c)
                cyc.append(k)
            normal = np.zeros(3)
            normal[a] = 2 * s - 1
            out.append((cyc, normal))
    return out


FACES = _faces()
# cube faces each edge lies on
_EDGE_FACES = [frozenset(f for f, (cyc, _) in enumerate(FACES)
                         if EDGES[e][0] in cyc and EDGES[e][1] in cyc) for e in range(12)]


def _midpoint(e):
    a, b, _ = EDGES[e]
    return (CORNERS[a] + CORNERS[b]) / 2.0


def _case(config: int):
    inside = [(config >> k) & 1 for k in range(8)]
    segments = {}
    for cyc, normal in FACES:
        ins = [inside[k] for k in cyc]
        cross = [i for i in range(4) if ins[i] != ins[(i + 1) % 4]]
        if not cross:
            continue
        if len(cross) == 2:
            pairs = [(cross[0], cross[1], next(cyc[i] for i in range(4) if ins[i]))]
        else:
            # ambiguous face: cut each inside corner off on its own
            pairs = [((i - 1) % 4, i, cyc[i]) for i in range(4) if ins[i]]
        for i, j, corner in pairs:
            ep = _EDGE_OF[frozenset((cyc[i], cyc[(i + 1) % 4]))]
            eq = _EDGE_OF[frozenset((cyc[j], cyc[(j + 1) % 4]))]
            p, q = _midpoint(ep), _midpoint(eq)
            side = np.cross(normal, q - p) @ (CORNERS[corner] - (p + q) / 2.0)
            if side > 0:
                ep, eq = eq, ep
            if ep in segments:
                raise AssertionError(f"config {config}: crossing {ep} starts two segments")
            segments[ep] = eq
    loops = []
    while segments:
        start = min(segments)
        loop = [start]
        nxt = segments.pop(start)
        while nxt != start:
            loop.append(nxt)
            nxt = segments.pop(nxt)
        loops.append(loop)
    return loops


def _shares_face(e0, e1):
    return bool(_EDGE_FACES[e0] & _EDGE_FACES[e1])


@lru_cache(maxsize=None)
def case_table():
    """Per configuration: (triangles over local ids, centroid loops).

    Local ids 0-11 are cube edges; id ``12 + j`` is the centroid of the j-th
    entry in the centroid-loop list.
    """
    table = []
    for config in range(256):
        tris, centroid_loops = [], []
        for loop in _case(config):
            n = len(loop)
            if n == 3:
                tris.append(tuple(loop))
                continue
            if n == 4:
                for s in (0, 1):
                    if not _shares_face(loop[s], loop[s + 2]):
                        a, b, c, d = loop[s:] + loop[:s]
                        tris += [(a, b, c), (a, c, d)]
                        break
                else:
                    s = None
                if s is not None:
                    continue
            cid = 12 + len(centroid_loops)
            centroid_loops.append(tuple(loop))
            tris += [(cid, loop[i], loop[(i + 1) % n]) for i in range(n)]
        table.append((tuple(tris), tuple(centroid_loops)))
    return table


def marching_cubes(v: VoxelVolume, isolevel: float = 0.5, origin=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Extract the closed isosurface of a binary volume.

    Occupancy is sampled at voxel centres; crossings are placed by linear
    interpolation at ``isolevel``.  Output faces wind counter-clockwise seen
    from outside.  Vertices are ordered by their global grid-edge key
    (``3 * linear_index + axis``), centroid vertices after all edge vertices.
    """
    if not 0.0 < isolevel < 1.0:
        raise ValueError("isolevel must lie strictly between 0 and 1")
    occ = v.data
    if not occ.any():
        raise MeshError("cannot extract a surface from an empty volume")
    if (occ[0].any() or occ[-1].any() or occ[:, 0].any() or occ[:, -1].any()
            or occ[:, :, 0].any() or occ[:, :, -1].any()):
        raise MeshError("set voxels touch the grid boundary; pad the volume before extraction")
    nx, ny, nz = occ.shape
    o = occ.astype(np.uint8)
    config = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint8)
    for k, (dx, dy, dz) in enumerate(CORNERS):
        config |= o[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz] << k
    table = case_table()
    n_grid = nx * ny * nz
    edge_start = np.array([e[0] for e in EDGES])
    edge_axis = np.array([e[2] for e in EDGES])
    edge_off = CORNERS[edge_start]

    active = np.nonzero((config != 0) & (config != 255))
    cfg = config[active]
    cube = np.stack(active, axis=1)
    cube_lin = cube[:, 0] + nx * (cube[:, 1] + ny * cube[:, 2])
    order = np.argsort(cube_lin, kind="stable")
    cfg, cube, cube_lin = cfg[order], cube[order], cube_lin[order]

    face_keys, face_sort, cent_keys, cent_members = [], [], [], []
    for c in np.unique(cfg):
        tris, cloops = table[c]
        sel = cfg == c
        cb, cl = cube[sel], cube_lin[sel]
        # global keys of the 12 edge vertices for each cube in the group
        p = cb[:, None, :] + edge_off[None, :, :]
        ekeys = 3 * (p[..., 0] + nx * (p[..., 1] + ny * p[..., 2])) + edge_axis[None, :]
        ckeys = 3 * n_grid + 4 * cl[:, None] + np.arange(len(cloops))[None, :]
        keys = np.concatenate([ekeys, ckeys], axis=1)
        t = np.asarray(tris)
        face_keys.append(keys[:, t].reshape(-1, 3))
        face_sort.append(np.stack([np.repeat(cl, len(t)), np.tile(np.arange(len(t)), len(cl))], 1))
        for j, loop in enumerate(cloops):
            cent_keys.append(ckeys[:, j])
            cent_members.append(ekeys[:, list(loop)])

    fk = np.concatenate(face_keys)
    fs = np.concatenate(face_sort)
    fk = fk[np.lexsort((fs[:, 1], fs[:, 0]))]
    keys, faces = np.unique(fk, return_inverse=True)
    faces = faces.reshape(-1, 3)

    spacing = np.asarray(v.spacing)
    verts = np.empty((len(keys), 3))
    is_edge = keys < 3 * n_grid
    verts[is_edge] = _edge_positions(keys[is_edge], o, isolevel)
    if cent_keys:
        ck = np.concatenate(cent_keys)
        # pad member lists to a common width with NaN-masked means
        width = max(m.shape[1] for m in cent_members)
        pos = np.full((len(ck), width, 3), np.nan)
        row = 0
        for m in cent_members:
            pos[row:row + len(m), :m.shape[1]] = _edge_positions(m.ravel(), o, isolevel).reshape(
                m.shape[0], m.shape[1], 3)
            row += len(m)
        verts[np.searchsorted(keys, ck)] = np.nanmean(pos, axis=1)
    verts = verts * spacing + np.asarray(origin, dtype=float)
    return TriangleMesh(verts, faces)


def _edge_positions(keys: np.ndarray, o: np.ndarray, isolevel: float) -> np.ndarray:
    nx, ny, _ = o.shape
    axis = keys % 3
    lin = keys // 3
    i = lin % nx
    j = (lin // nx) % ny
    k = lin // (nx * ny)
    base = np.stack([i, j, k], axis=1)
    step = np.eye(3, dtype=np.int64)[axis]
    v0 = o[i, j, k].astype(float)
    q = base + step
    v1 = o[q[:, 0], q[:, 1], q[:, 2]].astype(float)
    t = (isolevel - v0) / (v1 - v0)
    return base + t[:, None] * step
