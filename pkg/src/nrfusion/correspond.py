"""Dense projective depth correspondences with kernel confidences, and sparse feature constraints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DENSE = 0
SPARSE = 1


@dataclass
class CorrespondenceParams:
    eps_d: float = 0.05   # metres
    eps_n: float = 0.5    # 1 - cos between normals
    eps_v: float = 0.8    # 1 - cos between normal and view ray

    def __post_init__(self):
        if min(self.eps_d, self.eps_n, self.eps_v) <= 0:
            raise ValueError("correspondence thresholds must be positive")


@dataclass
class Correspondences:
    """A batch of alignment constraints, one row per correspondence.

    ``source`` are canonical points, ``target`` world points; ``normal`` is the
    target normal (dense rows only); ``weight`` the confidence.
    """

    kind: np.ndarray
    source: np.ndarray
    target: np.ndarray
    normal: np.ndarray
    weight: np.ndarray

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, dtype=np.int8), np.zeros((0, 3)), np.zeros((0, 3)),
                   np.zeros((0, 3)), np.zeros(0))

    def __len__(self):
        return len(self.kind)

    @property
    def n_dense(self):
        return int(np.sum(self.kind == DENSE))

    @property
    def n_sparse(self):
        return int(np.sum(self.kind == SPARSE))

    def subset(self, mask):
        return Correspondences(self.kind[mask], self.source[mask], self.target[mask],
                               self.normal[mask], self.weight[mask])

    @staticmethod
    def concat(*parts):
        parts = [p for p in parts if p is not None and len(p)]
        if not parts:
            return Correspondences.empty()
        return Correspondences(*(np.concatenate([getattr(p, f) for p in parts])
                                 for f in ("kind", "source", "target", "normal", "weight")))


def backproject_depth(frame):
    """Camera-space points and central-difference normals of a depth map.

    Normals face the camera; a pixel whose four neighbours are not all valid
    gets an invalid normal.
    """
    depth = frame.depth
    intr = frame.intrinsics
    points = intr.rays() * depth[..., None]
    valid = depth > 0
    normals = np.zeros_like(points)
    nvalid = np.zeros_like(valid)
    du = points[1:-1, 2:] - points[1:-1, :-2]
    dv = points[2:, 1:-1] - points[:-2, 1:-1]
    n = np.cross(dv, du)
    norm = np.linalg.norm(n, axis=-1)
    ok = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
          & (norm > 0))
    inner = np.zeros_like(n)
    inner[ok] = n[ok] / norm[ok][:, None]
    normals[1:-1, 1:-1] = inner
    nvalid[1:-1, 1:-1] = ok
    return points, normals, valid, nvalid


def kernel(r, eps):
    """Linear confidence kernel ``1 - r / eps``."""
    return 1.0 - np.asarray(r, dtype=float) / eps


def confidence(distance, normal_dot, view_dot, params):
    """Squared mean of the three kernels; zero where any kernel is negative."""
    phi_d = kernel(distance, params.eps_d)
    phi_n = kernel(1.0 - normal_dot, params.eps_n)
    phi_v = kernel(1.0 - view_dot, params.eps_v)
    w = ((phi_d + phi_n + phi_v) / 3.0) ** 2
    pruned = (phi_d < 0) | (phi_n < 0) | (phi_v < 0)
    return np.where(pruned, 0.0, w)


def associate(points, normals, intrinsics, frame_points, frame_normals, frame_nvalid, params):
    """Projective lookup of world points into the frame.

    Returns ``(weight, target, target_normal)`` per input point; weight 0 marks
    pruned or unmatched points.
    """
    u, v, z = intrinsics.project(points)
    with np.errstate(invalid="ignore"):
        ui = np.rint(u)
        vi = np.rint(v)
    inside = (z > 0) & (ui >= 0) & (ui < intrinsics.width) & (vi >= 0) & (vi < intrinsics.height)
    ui = np.where(inside, ui, 0).astype(np.int64)
    vi = np.where(inside, vi, 0).astype(np.int64)
    target = frame_points[vi, ui]
    tnormal = frame_normals[vi, ui]
    ok = inside & frame_nvalid[vi, ui]
    view = -points / np.maximum(np.linalg.norm(points, axis=-1, keepdims=True), 1e-300)
    dist = np.linalg.norm(points - target, axis=-1)
    w = confidence(dist, np.sum(normals * tnormal, axis=-1), np.sum(normals * view, axis=-1), params)
    return np.where(ok, w, 0.0), target, tnormal


def find_dense_correspondences(buffer, frame_points, frame_normals, frame_nvalid, intrinsics, params):
    """Point-to-plane constraints from every valid rendered pixel, in pixel order."""
    valid = buffer.valid
    pts = buffer.points[valid]
    nrm = buffer.normals[valid]
    w, target, tnormal = associate(pts, nrm, intrinsics, frame_points, frame_normals, frame_nvalid, params)
    keep = w > 0
    n = int(keep.sum())
    return Correspondences(np.full(n, DENSE, dtype=np.int8), buffer.canonical[valid][keep],
                           target[keep], tnormal[keep], w[keep])


def sparse_to_constraints(matches, store, current):
    """Point-to-point constraints: stored canonical feature -> current 3D keypoint."""
    if len(matches) == 0:
        return Correspondences.empty()
    src = store.canonical[np.array([m.source for m in matches])]
    dst = current.world[np.array([m.target for m in matches])]
    n = len(matches)
    return Correspondences(np.full(n, SPARSE, dtype=np.int8), src, dst, np.zeros((n, 3)), np.ones(n))


def write_correspondence_ply(path, world_sources, targets):
    """Debug line set: one edge per source/target pair."""
    n = len(targets)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {2 * n}\nproperty float x\nproperty float y\nproperty float z\n")
        f.write(f"element edge {n}\nproperty int vertex1\nproperty int vertex2\nend_header\n")
        for p in np.concatenate([world_sources, targets]):
            f.write(f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g}\n")
        for i in range(n):
            f.write(f"{i} {i + n}\n")
