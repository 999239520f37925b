"""Zero level set extraction, vertex normals and z-buffered rasterization.

The marching-cubes case table is generated at import time. For each of the
256 sign configurations, crossing edges on every cube face are paired into
segments (on ambiguous faces the two inside corners are cut off separately),
segments are chained into closed loops, and loops are triangulated (never
with a chord lying inside a cube face) with the winding oriented so triangle normals point toward increasing distance.
Because the face pairing depends only on the four face corners, adjacent cells
agree and closed level sets give watertight meshes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Intrinsics  # noqa: F401  (re-export)
from .volume import CORNER_OFFSETS, trilinear_anchors_batch, warp_points


def _cube_edges():
    edges = []
    for axis in range(3):
        for c0 in range(8):
            if not (c0 >> axis) & 1:
                edges.append((c0, c0 | (1 << axis), axis))
    return edges


CUBE_EDGES = _cube_edges()
_EDGE_OF = {frozenset(e[:2]): k for k, e in enumerate(CUBE_EDGES)}


def _cube_faces():
    faces = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, 1):
            base = side << axis
            ring = [base, base | (1 << u), base | (1 << u) | (1 << v), base | (1 << v)]
            faces.append(ring)
    return faces


def _case_triangles(case):
    inside = [(case >> c) & 1 for c in range(8)]
    adj = {}

    def link(a, b):
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)

    for ring in _cube_faces():
        fe = [_EDGE_OF[frozenset((ring[k], ring[(k + 1) % 4]))] for k in range(4)]
        crossing = [k for k in range(4) if inside[ring[k]] != inside[ring[(k + 1) % 4]]]
        if len(crossing) == 2:
            link(fe[crossing[0]], fe[crossing[1]])
        elif len(crossing) == 4:
            for k in range(4):
                if inside[ring[k]]:
                    link(fe[(k - 1) % 4], fe[k])

    corner = CORNER_OFFSETS.astype(float)
    tris = []
    seen = set()
    for start in sorted(adj):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = start, min(adj[start])
        while cur != start:
            loop.append(cur)
            seen.add(cur)
            a, b = adj[cur]
            prev, cur = cur, (b if a == prev else a)
        pts = [0.5 * (corner[CUBE_EDGES[e][0]] + corner[CUBE_EDGES[e][1]]) for e in loop]
        normal = np.zeros(3)
        for k in range(len(pts)):
            normal += np.cross(pts[k], pts[(k + 1) % len(pts)])
        outward = np.zeros(3)
        for e in loop:
            c0, c1, _ = CUBE_EDGES[e]
            ci, co = (c0, c1) if inside[c0] else (c1, c0)
            outward += corner[co] - corner[ci]
        if normal @ outward < 0:
            loop = loop[:1] + loop[1:][::-1]
        tris.extend(_triangulate_loop(loop))
    return tris


_FACE_EDGE_SETS = [
    {_EDGE_OF[frozenset((ring[k], ring[(k + 1) % 4]))] for k in range(4)} for ring in _cube_faces()
]


def _share_face(*edges):
    return any(set(edges) <= s for s in _FACE_EDGE_SETS)


def _triangulate_loop(loop):
    """Triangulate a polygon of cube edges without chords lying in a cube face.

    A loop may cross an ambiguous face twice; a chord between those two face
    segments would also be produced by the neighbouring cell and make the
    surface non-manifold. Small interval DP over polygon triangulations.
    """
    n = len(loop)
    best = {}

    def chord_cost(i, j):
        if j - i == 1 or (i == 0 and j == n - 1):
            return 0
        return int(_share_face(loop[i], loop[j]))

    def solve(i, j):
        if j - i < 2:
            return 0, []
        if (i, j) in best:
            return best[(i, j)]
        choice = None
        for k in range(i + 1, j):
            c1, t1 = solve(i, k)
            c2, t2 = solve(k, j)
            cost = c1 + c2 + chord_cost(i, k) + chord_cost(k, j)
            if choice is None or cost < choice[0]:
                choice = (cost, t1 + [(loop[i], loop[k], loop[j])] + t2)
        best[(i, j)] = choice
        return choice

    cost, tris = solve(0, n - 1)
    if cost:
        raise AssertionError(f"loop {loop} has no face-free triangulation")
    return tris


def _build_table():
    all_tris = [_case_triangles(c) for c in range(256)]
    width = max(len(t) for t in all_tris)
    table = -np.ones((256, width, 3), dtype=np.int64)
    for c, tris in enumerate(all_tris):
        if tris:
            table[c, : len(tris)] = tris
    return table


TRI_TABLE = _build_table()
_EDGE_START = np.array([CORNER_OFFSETS[e[0]] for e in CUBE_EDGES])
_EDGE_AXIS = np.array([e[2] for e in CUBE_EDGES])


@dataclass
class SurfaceMesh:
    vertices_canonical: np.ndarray
    vertices_deformed: np.ndarray
    triangles: np.ndarray
    normals_deformed: np.ndarray | None = None
    normal_valid: np.ndarray | None = None
    anchor_idx: np.ndarray | None = None
    anchor_w: np.ndarray | None = None

    @property
    def n_vertices(self):
        return len(self.vertices_canonical)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def euler_characteristic(self):
        tri = self.triangles
        e = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(e, axis=0))
        n_verts = len(np.unique(tri))
        return n_verts - n_edges + len(tri)


def surface_cells(volume):
    """Base indices and case codes of cells crossing zero with all 8 corners observed."""
    d = volume.grid3(volume.tsdf)
    w = volume.grid3(volume.weight)
    nz, ny, nx = d.shape
    case = np.zeros((nz - 1, ny - 1, nx - 1), dtype=np.int64)
    observed = np.ones(case.shape, dtype=bool)
    for c, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        sl = (slice(oz, oz + nz - 1), slice(oy, oy + ny - 1), slice(ox, ox + nx - 1))
        case |= (d[sl] < 0).astype(np.int64) << c
        observed &= w[sl] > 0
    valid = observed & (case != 0) & (case != 255)
    cz, cy, cx = np.nonzero(valid)
    base = np.stack([cx, cy, cz], axis=1)
    return volume.ijk_to_index(base), case[cz, cy, cx]


def extract_mesh(volume, pose):
    """Marching cubes on the canonical TSDF; vertices are then warped by the field."""
    cells, cases = surface_cells(volume)
    if len(cells) == 0:
        empty = np.zeros((0, 3))
        return compute_normals(SurfaceMesh(empty, empty.copy(), np.zeros((0, 3), dtype=np.int64),
                                           anchor_idx=np.zeros((0, 8), dtype=np.int64),
                                           anchor_w=np.zeros((0, 8))))
    local = TRI_TABLE[cases]  # (cells, T, 3)
    keep = local[:, :, 0] >= 0
    cell_of = np.broadcast_to(cells[:, None], keep.shape)[keep]
    local = local[keep]  # (F, 3)
    start = cell_of[:, None] + (_EDGE_START[local] * volume.strides).sum(axis=2)
    keys = start * 3 + _EDGE_AXIS[local]
    uniq, inv = np.unique(keys.ravel(), return_inverse=True)
    triangles = inv.reshape(-1, 3).astype(np.int64)

    p = uniq // 3
    axis = uniq % 3
    q = p + volume.strides[axis]
    d0, d1 = volume.tsdf[p], volume.tsdf[q]
    t = d0 / (d0 - d1)
    canon = volume.canonical_positions(p)
    canon[np.arange(len(p)), axis] += t * volume.voxel_size

    anchor_idx, anchor_w = trilinear_anchors_batch(volume, canon)
    deformed = pose.apply(np.einsum("kc,kcd->kd", anchor_w, volume.positions[anchor_idx]))
    mesh = SurfaceMesh(canon, deformed, triangles, anchor_idx=anchor_idx, anchor_w=anchor_w)
    return compute_normals(mesh)


def rewarp_mesh(mesh, volume, pose):
    """Re-apply the current deformation to an already extracted canonical mesh."""
    if mesh.anchor_idx is not None and len(mesh.anchor_idx):
        local = np.einsum("kc,kcd->kd", mesh.anchor_w, volume.positions[mesh.anchor_idx])
        deformed = pose.apply(local)
    elif mesh.n_vertices:
        deformed = warp_points(volume, pose, mesh.vertices_canonical)
    else:
        deformed = mesh.vertices_deformed.copy()
    out = SurfaceMesh(mesh.vertices_canonical, deformed, mesh.triangles,
                      anchor_idx=mesh.anchor_idx, anchor_w=mesh.anchor_w)
    return compute_normals(out)


def compute_normals(mesh):
    """Area-weighted vertex normals of the deformed mesh; isolated vertices get zero and are flagged."""
    v = mesh.vertices_deformed
    tri = mesh.triangles
    acc = np.zeros_like(v)
    if len(tri):
        fn = np.cross(v[tri[:, 1]] - v[tri[:, 0]], v[tri[:, 2]] - v[tri[:, 0]])
        for k in range(3):
            np.add.at(acc, tri[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    valid = norm > 1e-20
    normals = np.zeros_like(v)
    normals[valid] = acc[valid] / norm[valid, None]
    mesh.normals_deformed = normals
    mesh.normal_valid = valid
    return mesh


@dataclass
class GeometryBuffer:
    depth: np.ndarray       # (H, W), +inf where empty
    points: np.ndarray      # (H, W, 3)
    normals: np.ndarray     # (H, W, 3)
    canonical: np.ndarray   # (H, W, 3)
    triangle: np.ndarray    # (H, W) generating triangle, -1 where empty

    @property
    def valid(self):
        return np.isfinite(self.depth)


def _empty_buffer(h, w):
    return GeometryBuffer(np.full((h, w), np.inf), np.zeros((h, w, 3)), np.zeros((h, w, 3)),
                          np.zeros((h, w, 3)), -np.ones((h, w), dtype=np.int64))


def rasterize(mesh, intrinsics, near=1e-3, chunk=200_000):
    """Software z-buffer of the deformed mesh at pixel centres (top-left fill rule).

    Each covered pixel gets the perspective-correct interpolated point, normal
    and canonical point of the nearest triangle; exact depth ties go to the
    lower triangle index.
    """
    h, w = intrinsics.height, intrinsics.width
    buf = _empty_buffer(h, w)
    if mesh.n_triangles == 0:
        return buf
    v = mesh.vertices_deformed
    tri = mesh.triangles
    u, vv, z = intrinsics.project(v)
    tz = z[tri]
    ok = np.all(tz > near, axis=1)
    tri_ids = np.nonzero(ok)[0]
    su, sv = u[tri[tri_ids]], vv[tri[tri_ids]]  # (F, 3)
    area = (su[:, 1] - su[:, 0]) * (sv[:, 2] - sv[:, 0]) - (sv[:, 1] - sv[:, 0]) * (su[:, 2] - su[:, 0])
    nondeg = area != 0
    tri_ids, su, sv, area = tri_ids[nondeg], su[nondeg], sv[nondeg], area[nondeg]
    flip = area < 0
    su[flip] = su[flip][:, [0, 2, 1]]
    sv[flip] = sv[flip][:, [0, 2, 1]]
    order = np.where(flip[:, None], np.array([0, 2, 1]), np.array([0, 1, 2]))
    area = np.abs(area)

    x0 = np.maximum(np.ceil(su.min(axis=1)), 0).astype(np.int64)
    x1 = np.minimum(np.floor(su.max(axis=1)), w - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(sv.min(axis=1)), 0).astype(np.int64)
    y1 = np.minimum(np.floor(sv.max(axis=1)), h - 1).astype(np.int64)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)
    counts = bw * bh
    has = counts > 0
    tri_ids, su, sv, area, order = tri_ids[has], su[has], sv[has], area[has], order[has]
    x0, y0, bw, counts = x0[has], y0[has], bw[has], counts[has]

    # edge k goes from vertex k to vertex k+1; top-left edges own their boundary pixels
    eu = np.roll(su, -1, axis=1) - su
    ev = np.roll(sv, -1, axis=1) - sv
    topleft = ((ev == 0) & (eu > 0)) | (ev < 0)

    pix_all, depth_all, tri_all, bary_all = [], [], [], []
    bounds = np.concatenate([[0], np.cumsum(counts)])
    start = 0
    while start < len(counts):
        stop = int(np.searchsorted(bounds, bounds[start] + chunk, side="right")) - 1
        stop = max(stop, start + 1)
        sel = slice(start, stop)
        cnt = counts[sel]
        f = np.repeat(np.arange(start, stop), cnt)
        local = np.arange(cnt.sum()) - np.repeat(bounds[start:stop] - bounds[start], cnt)
        px = x0[f] + local % bw[f]
        py = y0[f] + local // bw[f]
        e = eu[f] * (py[:, None] - sv[f]) - ev[f] * (px[:, None] - su[f])  # (P, 3)
        inside = np.all((e > 0) | ((e == 0) & topleft[f]), axis=1)
        f, px, py, e = f[inside], px[inside], py[inside], e[inside]
        # barycentric weight of vertex k is the edge function of the opposite edge
        lam = np.stack([e[:, 1], e[:, 2], e[:, 0]], axis=1) / area[f, None]
        vz = tz[tri_ids[f][:, None], order[f]]
        inv = lam / vz
        s = inv.sum(axis=1)
        pix_all.append(py * w + px)
        depth_all.append(1.0 / s)
        tri_all.append(f)
        bary_all.append(inv / s[:, None])
        start = stop

    pix = np.concatenate(pix_all)
    if len(pix) == 0:
        return buf
    depth = np.concatenate(depth_all)
    fidx = np.concatenate(tri_all)
    bary = np.concatenate(bary_all)
    tid = tri_ids[fidx]
    sort = np.lexsort((tid, depth, pix))
    pix, depth, fidx, bary, tid = pix[sort], depth[sort], fidx[sort], bary[sort], tid[sort]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, depth, fidx, bary, tid = pix[first], depth[first], fidx[first], bary[first], tid[first]

    corners = tri[tid[:, None], order[fidx]]  # (P, 3) vertex ids in rasterized order
    point = np.einsum("pk,pkd->pd", bary, v[corners])
    normal = np.einsum("pk,pkd->pd", bary, mesh.normals_deformed[corners])
    nn = np.linalg.norm(normal, axis=1)
    good = nn > 1e-12
    pix, depth, point, normal, nn, corners, bary, tid = (
        pix[good], depth[good], point[good], normal[good], nn[good], corners[good], bary[good], tid[good])
    canon = np.einsum("pk,pkd->pd", bary, mesh.vertices_canonical[corners])

    flat = lambda a: a.reshape(h * w, *a.shape[2:])  # noqa: E731
    flat(buf.depth)[pix] = depth
    flat(buf.points)[pix] = point
    flat(buf.normals)[pix] = normal / nn[:, None]
    flat(buf.canonical)[pix] = canon
    flat(buf.triangle)[pix] = tid
    return buf


def write_ply(path, vertices, triangles, colors=None, normals=None, binary=False):
    """PLY mesh writer (ascii or binary little-endian)."""
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(vertices)}",
              "property float x", "property float y", "property float z"]
    if normals is not None:
        header += ["property float nx", "property float ny", "property float nz"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {len(triangles)}", "property list uchar int vertex_indices", "end_header"]
    fields = [("xyz", "<f4", (3,))]
    if normals is not None:
        fields.append(("n", "<f4", (3,)))
    if colors is not None:
        fields.append(("rgb", "u1", (3,)))
    rec = np.empty(len(vertices), dtype=fields)
    rec["xyz"] = vertices
    if normals is not None:
        rec["n"] = normals
    if colors is not None:
        rec["rgb"] = np.clip(np.rint(colors), 0, 255)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(rec.tobytes())
            faces = np.empty(len(triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            faces["n"] = 3
            faces["idx"] = triangles
            f.write(faces.tobytes())
        else:
            lines = []
            for r in rec:
                parts = [f"{x:.7g}" for x in r["xyz"]]
                if normals is not None:
                    parts += [f"{x:.7g}" for x in r["n"]]
                if colors is not None:
                    parts += [str(int(x)) for x in r["rgb"]]
                lines.append(" ".join(parts))
            lines += [f"3 {a} {b} {c}" for a, b, c in triangles]
            f.write(("\n".join(lines) + "\n").encode("ascii"))


def read_ply(path):
    """Read back vertices, triangles and optional colors from a PLY written by ``write_ply``."""
    with open(path, "rb") as f:
        fmt, n_v, n_f, props = None, 0, 0, []
        current = None
        while True:
            line = f.readline().decode("ascii").strip()
            if line.startswith("format"):
                fmt = line.split()[1]
            elif line.startswith("element vertex"):
                n_v, current = int(line.split()[-1]), "vertex"
            elif line.startswith("element face"):
                n_f, current = int(line.split()[-1]), "face"
            elif line.startswith("property") and current == "vertex":
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        has_n = "nx" in props
        has_c = "red" in props
        if fmt == "binary_little_endian":
            fields = [("xyz", "<f4", (3,))]
            if has_n:
                fields.append(("n", "<f4", (3,)))
            if has_c:
                fields.append(("rgb", "u1", (3,)))
            rec = np.frombuffer(f.read(np.dtype(fields).itemsize * n_v), dtype=fields)
            faces = np.frombuffer(f.read(13 * n_f), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            verts = rec["xyz"].astype(float)
            colors = rec["rgb"].astype(float) if has_c else None
            tris = faces["idx"].astype(np.int64)
        else:
            rows = [f.readline().split() for _ in range(n_v)]
            arr = np.array(rows, dtype=float).reshape(n_v, -1)
            verts = arr[:, :3]
            colors = arr[:, -3:] if has_c else None
            tris = np.array([f.readline().split()[1:4] for _ in range(n_f)], dtype=np.int64).reshape(n_f, 3)
    return verts, tris, colors
