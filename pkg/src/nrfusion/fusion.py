"""Age-gated projective TSDF integration through the warp, and growth of the active set."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .isosurface import surface_cells
from .volume import CORNER_OFFSETS

log = logging.getLogger(__name__)


@dataclass
class FusionParams:
    mu: float | None = None     # truncation band; None means 4 voxels
    w_max: float = 64.0
    sample_weight: float = 1.0
    k_min: int = 3              # solves a voxel must have been part of before fusing into it

    def truncation(self, voxel_size):
        return 4.0 * voxel_size if self.mu is None else float(self.mu)


@dataclass
class FusionStats:
    candidates: int = 0
    updated: int = 0
    occluded: int = 0
    outside: int = 0


def sample_depth(frame, u, v):
    """Bilinear depth at sub-pixel positions; nearest pixel where a neighbour is invalid.

    Returns ``(depth, vi, ui, ok)`` with the nearest pixel indices.
    """
    intr = frame.intrinsics
    h, w = intr.height, intr.width
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(u) & np.isfinite(v) & (u > -0.5) & (u < w - 0.5) & (v > -0.5) & (v < h - 0.5)
    u = np.where(ok, u, 0.0)
    v = np.where(ok, v, 0.0)
    ui = np.clip(np.rint(u), 0, w - 1).astype(np.int64)
    vi = np.clip(np.rint(v), 0, h - 1).astype(np.int64)
    nearest = frame.depth[vi, ui]
    u0 = np.clip(np.floor(u), 0, w - 2).astype(np.int64)
    v0 = np.clip(np.floor(v), 0, h - 2).astype(np.int64)
    fu = np.clip(u - u0, 0.0, 1.0)
    fv = np.clip(v - v0, 0.0, 1.0)
    d00, d01 = frame.depth[v0, u0], frame.depth[v0, u0 + 1]
    d10, d11 = frame.depth[v0 + 1, u0], frame.depth[v0 + 1, u0 + 1]
    bil = (1 - fv) * ((1 - fu) * d00 + fu * d01) + fv * ((1 - fu) * d10 + fu * d11)
    full = (d00 > 0) & (d01 > 0) & (d10 > 0) & (d11 > 0)
    depth = np.where(full, bil, nearest)
    ok &= nearest > 0
    return np.where(ok, depth, 0.0), vi, ui, ok


def projective_sdf(points, frame):
    """``depth(u, v) - z`` at the projection of each camera-space point.

    Returns ``(sdf, pixel_v, pixel_u, ok)``; ``ok`` is False off-frame, behind
    the camera or at invalid depth.
    """
    u, v, z = frame.intrinsics.project(points)
    depth, vi, ui, ok = sample_depth(frame, u, v)
    ok &= z > 0
    return np.where(ok, depth - z, 0.0), vi, ui, ok


def integrate_frame(volume, frame, pose, params=None, bootstrap=False):
    """Running-average update of distance, weight and colour for eligible voxels.

    Eligible voxels are active with ``age >= k_min``; with ``bootstrap`` every
    grid point is eligible (the first frame, before any deformation exists).
    Voxel centres move with their own deformed position ``t_i``.
    """
    params = params or FusionParams()
    stats = FusionStats()
    mu = params.truncation(volume.voxel_size)
    if bootstrap:
        idx = np.arange(volume.n_points)
    else:
        idx = np.nonzero(volume.active & (volume.age >= params.k_min))[0]
    stats.candidates = len(idx)
    if len(idx) == 0:
        return stats
    cam = pose.apply(volume.positions[idx])
    d, vi, ui, ok = projective_sdf(cam, frame)
    stats.outside = int((~ok).sum())
    occluded = ok & (d < -mu)
    stats.occluded = int(occluded.sum())
    ok &= ~occluded
    idx, d, vi, ui = idx[ok], np.minimum(d[ok], mu), vi[ok], ui[ok]
    w = params.sample_weight
    w_old = volume.weight[idx]
    total = w_old + w
    volume.tsdf[idx] = (w_old * volume.tsdf[idx] + w * d) / total
    col = frame.color[vi, ui].astype(float)
    volume.color[idx] = np.clip((w_old[:, None] * volume.color[idx] + w * col) / total[:, None], 0.0, 255.0)
    volume.weight[idx] = np.minimum(total, params.w_max)
    stats.updated = len(idx)
    return stats


def advance_ages(volume, solved):
    """One more solve for every point of the solved set."""
    volume.age[solved] += 1


_NEIGHBOR_OFFSETS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


def _neighbors(volume, idx):
    """(k, 6) neighbour indices, -1 off-grid."""
    ijk = volume.index_to_ijk(idx)
    nb = ijk[:, None, :] + _NEIGHBOR_OFFSETS[None]
    inside = np.all((nb >= 0) & (nb < np.array(volume.dims)), axis=2)
    out = -np.ones(nb.shape[:2], dtype=np.int64)
    out[inside] = volume.ijk_to_index(nb[inside])
    return out


def surface_ring(volume):
    """Corners of all surface cells plus their 6-neighbours."""
    cells, _ = surface_cells(volume)
    mask = np.zeros(volume.n_points, dtype=bool)
    if len(cells) == 0:
        return mask
    corners = cells[:, None] + (CORNER_OFFSETS * volume.strides).sum(axis=1)[None]
    mask[np.unique(corners)] = True
    nb = _neighbors(volume, np.nonzero(mask)[0])
    mask[nb[nb >= 0]] = True
    return mask


@dataclass
class ExpandStats:
    added: int = 0
    removed: int = 0
    isolated: int = 0   # new points without any known neighbour (identity init)


def expand_grid(volume):
    """Recompute the active set from the isosurface; initialise points entering it.

    Entering points get the mean of their known neighbours' rigid motions
    applied to their canonical position and the rotation of the lowest-index
    known neighbour, sweeping outwards ring by ring. Points with no path to a
    known point start at identity. Points leaving the set keep their state.
    """
    stats = ExpandStats()
    new_active = surface_ring(volume)
    if not np.any(new_active) and not np.any(volume.active):
        return stats
    known = volume.active & new_active
    pending = new_active & ~volume.active
    stats.added = int(pending.sum())
    stats.removed = int((volume.active & ~new_active).sum())
    canon = volume.canonical_positions()
    rots = None
    while np.any(pending):
        todo = np.nonzero(pending)[0]
        nb = _neighbors(volume, todo)
        has = (nb >= 0) & known[np.maximum(nb, 0)]
        front = has.any(axis=1)
        if not np.any(front):
            break
        todo, nb, has = todo[front], nb[front], has[front]
        if rots is None:
            rots = volume.rotation_matrices()
        cnt = has.sum(axis=1)
        nbc = np.maximum(nb, 0)
        # t_j + R_j (x_i - x_j), averaged over known neighbours
        rel = canon[todo][:, None, :] - canon[nbc]
        pred = volume.positions[nbc] + np.einsum("knab,knb->kna", rots[nbc], rel)
        volume.positions[todo] = (pred * has[..., None]).sum(axis=1) / cnt[:, None]
        first = np.where(has, nbc, np.iinfo(np.int64).max).min(axis=1)
        volume.rotations[todo] = volume.rotations[first]
        rots[todo] = rots[first]
        known[todo] = True
        pending[todo] = False
    rest = np.nonzero(pending)[0]
    if len(rest):
        stats.isolated = len(rest)
        volume.positions[rest] = canon[rest]
        volume.rotations[rest] = 0.0
    volume.active = new_active
    return stats
