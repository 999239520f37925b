"""Unified voxel grid: canonical TSDF plus the per-point deformation field.

Every grid point carries the fused surface (distance, weight, color) in the
canonical pose and its deformed position and local rotation. Points are stored
in flat arrays with linear index ``i = x + nx * (y + ny * z)`` (x fastest).

Rotations are stored as three Euler angles ``(a, b, c)`` with
``R = Rz(c) @ Ry(b) @ Rx(a)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

# corner c of a cell has offset (c & 1, (c >> 1) & 1, (c >> 2) & 1)
CORNER_OFFSETS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)

_BOUNDS_EPS = 1e-9


class OutOfBoundsError(ValueError):
    """A point lies outside the canonical bounding box of the grid."""


class InversionFailedError(RuntimeError):
    """Inverse warp did not converge."""


def euler_to_matrix(angles):
    """(..., 3) Euler angles -> (..., 3, 3) rotation matrices."""
    angles = np.asarray(angles, dtype=float)
    flat = angles.reshape(-1, 3)
    mats = Rotation.from_euler("xyz", flat).as_matrix()
    return mats.reshape(angles.shape[:-1] + (3, 3))


def matrix_to_euler(mats):
    """(..., 3, 3) rotation matrices -> (..., 3) Euler angles."""
    mats = np.asarray(mats, dtype=float)
    flat = mats.reshape(-1, 3, 3)
    if flat.shape[0] == 0:
        return np.zeros(mats.shape[:-2] + (3,))
    import warnings

    with warnings.catch_warnings():
        # gimbal lock is harmless here: the matrix is still reproduced exactly
        warnings.simplefilter("ignore", UserWarning)
        angles = Rotation.from_matrix(flat).as_euler("xyz")
    return angles.reshape(mats.shape[:-2] + (3,))


def rotation_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0 or angle == 0.0:
        return np.eye(3)
    return Rotation.from_rotvec(axis / n * angle).as_matrix()


@dataclass
class GlobalPose:
    """Rigid transform applied after the local deformation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.array(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.array(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls):
        return cls()

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self):
        rt = self.rotation.T
        return GlobalPose(rt, -rt @ self.translation)

    def compose(self, other):
        """self after other."""
        return GlobalPose(self.rotation @ other.rotation,
                          self.rotation @ other.translation + self.translation)

    def copy(self):
        return GlobalPose(self.rotation.copy(), self.translation.copy())

    def orthonormalize(self):
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] *= -1
            r = u @ vt
        self.rotation = r
        return self

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


class DeformableVolume:
    """Regular grid of points holding canonical TSDF data and deformation state.

    Attributes are flat arrays over the ``n_points`` grid points:
    ``tsdf``, ``weight``, ``color`` (n, 3), ``positions`` (n, 3) deformed
    positions, ``rotations`` (n, 3) Euler angles, ``age`` and ``active``.
    """

    def __init__(self, dims, voxel_size, origin=(0.0, 0.0, 0.0)):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 2:
            raise ValueError(f"each grid dimension must be >= 2, got {dims}")
        if not voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {voxel_size}")
        self.dims = dims
        self.voxel_size = float(voxel_size)
        self.origin = np.array(origin, dtype=float).reshape(3)
        n = self.n_points
        self.strides = np.array([1, dims[0], dims[0] * dims[1]], dtype=np.int64)
        self.tsdf = np.zeros(n)
        self.weight = np.zeros(n)
        self.color = np.zeros((n, 3))
        self.positions = self.canonical_positions().copy()
        self.rotations = np.zeros((n, 3))
        self.age = np.zeros(n, dtype=np.int64)
        self.active = np.zeros(n, dtype=bool)

    @property
    def n_points(self):
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def shape3(self):
        """Shape of a (z, y, x) view of any flat per-point array."""
        return (self.dims[2], self.dims[1], self.dims[0])

    def grid3(self, arr):
        return arr.reshape(self.shape3 + arr.shape[1:])

    def index_to_ijk(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        nx, ny, _ = self.dims
        return np.stack([idx % nx, (idx // nx) % ny, idx // (nx * ny)], axis=-1)

    def ijk_to_index(self, ijk):
        ijk = np.asarray(ijk, dtype=np.int64)
        return ijk[..., 0] + self.dims[0] * (ijk[..., 1] + self.dims[1] * ijk[..., 2])

    def canonical_positions(self, idx=None):
        if idx is None:
            key = (self.dims, self.voxel_size, tuple(self.origin))
            if getattr(self, "_canon_key", None) != key:
                self._canon = self.origin + self.voxel_size * self.index_to_ijk(
                    np.arange(self.n_points)).astype(float)
                self._canon.flags.writeable = False
                self._canon_key = key
            return self._canon
        return self.origin + self.voxel_size * self.index_to_ijk(idx).astype(float)

    @property
    def upper_corner(self):
        return self.origin + self.voxel_size * (np.array(self.dims) - 1)

    def contains(self, points):
        g = (np.asarray(points, dtype=float) - self.origin) / self.voxel_size
        hi = np.array(self.dims) - 1
        return np.all((g >= -_BOUNDS_EPS) & (g <= hi + _BOUNDS_EPS), axis=-1)

    def rotation_matrices(self, idx=None):
        if idx is None:
            return euler_to_matrix(self.rotations)
        return euler_to_matrix(self.rotations[idx])

    def set_rotation_matrices(self, idx, mats):
        self.rotations[idx] = matrix_to_euler(mats)

    def copy(self):
        other = DeformableVolume.__new__(DeformableVolume)
        other.dims = self.dims
        other.voxel_size = self.voxel_size
        other.origin = self.origin.copy()
        other.strides = self.strides.copy()
        for name in ("tsdf", "weight", "color", "positions", "rotations", "age", "active"):
            setattr(other, name, getattr(self, name).copy())
        return other

    def neighbor_pairs(self, mask=None):
        """Undirected 6-neighbour edges (i, j) with i < j, both in ``mask``."""
        src_all = np.arange(self.n_points) if mask is None else np.nonzero(mask)[0]
        ijk = self.index_to_ijk(src_all)
        pairs = []
        for axis in range(3):
            keep = ijk[:, axis] < self.dims[axis] - 1
            src = src_all[keep]
            dst = src + self.strides[axis]
            if mask is not None:
                ok = mask[dst]
                src, dst = src[ok], dst[ok]
            pairs.append(np.stack([src, dst], axis=1))
        return np.concatenate(pairs, axis=0)


def create_grid(dims, voxel_size, origin=(0.0, 0.0, 0.0)):
    """A fresh volume: empty TSDF, identity deformation, nothing active."""
    return DeformableVolume(dims, voxel_size, origin)


def _cell_coords(volume, points):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    g = (points - volume.origin) / volume.voxel_size
    hi = np.array(volume.dims) - 1
    bad = np.any((g < -_BOUNDS_EPS) | (g > hi + _BOUNDS_EPS), axis=1)
    if np.any(bad):
        raise OutOfBoundsError(f"{int(bad.sum())} point(s) outside the grid, e.g. {points[bad][0]}")
    g = np.clip(g, 0.0, hi)
    base = np.minimum(np.floor(g).astype(np.int64), hi - 1)
    return base, g - base


def trilinear_anchors_batch(volume, points):
    """Anchors of many points: (k, 8) grid indices and (k, 8) weights."""
    base, frac = _cell_coords(volume, points)
    off = CORNER_OFFSETS
    idx = volume.ijk_to_index(base[:, None, :] + off[None, :, :])
    w = np.where(off[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]).prod(axis=2)
    return idx, w


def trilinear_anchors(volume, x):
    """The 8 corners of the cell containing ``x`` with their trilinear weights."""
    idx, w = trilinear_anchors_batch(volume, np.asarray(x, dtype=float).reshape(1, 3))
    return list(zip(idx[0].tolist(), w[0].tolist()))


def interpolate(volume, values, points):
    """Trilinear blend of a per-point attribute at canonical points."""
    idx, w = trilinear_anchors_batch(volume, points)
    vals = values[idx]
    if vals.ndim == 2:
        return (vals * w).sum(axis=1)
    return np.einsum("kc,kcd->kd", w, vals)


def warp_points(volume, pose, points):
    """Space deformation ``R @ sum_i(alpha_i(x) t_i) + t`` for many points."""
    deformed = interpolate(volume, volume.positions, points)
    return pose.apply(deformed)


def warp_point(volume, pose, x):
    return warp_points(volume, pose, np.asarray(x, dtype=float).reshape(1, 3))[0]


def warp_jacobians(volume, pose, points):
    """d S / d x at canonical points, (k, 3, 3)."""
    base, frac = _cell_coords(volume, points)
    off = CORNER_OFFSETS
    idx = volume.ijk_to_index(base[:, None, :] + off[None, :, :])
    w1 = np.where(off[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    sign = np.where(off == 1, 1.0, -1.0)
    grads = np.empty(w1.shape)
    for d in range(3):
        others = [e for e in range(3) if e != d]
        grads[:, :, d] = sign[None, :, d] * w1[:, :, others[0]] * w1[:, :, others[1]]
    grads /= volume.voxel_size
    t = volume.positions[idx]
    local = np.einsum("kci,kcj->kij", t, grads)
    return pose.rotation[None] @ local


def invert_warp_points(volume, pose, targets, seeds, tol=1e-9, max_iters=20):
    """Gauss-Newton inversion of the warp for many points.

    Returns ``(canonical, ok)``; ``ok`` is False where the residual did not
    reach 1e-6 m. Steps are clamped to one voxel and iterates to the grid.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    x = np.atleast_2d(np.asarray(seeds, dtype=float)).copy()
    lo, hi = volume.origin, volume.upper_corner
    x = np.clip(x, lo, hi)
    h = volume.voxel_size
    done = np.zeros(len(x), dtype=bool)
    for _ in range(max_iters):
        todo = np.nonzero(~done)[0]
        if len(todo) == 0:
            break
        r = warp_points(volume, pose, x[todo]) - targets[todo]
        rn = np.linalg.norm(r, axis=1)
        conv = rn <= tol
        done[todo[conv]] = True
        todo, r = todo[~conv], r[~conv]
        if len(todo) == 0:
            break
        jac = warp_jacobians(volume, pose, x[todo])
        det = np.linalg.det(jac)
        good = np.abs(det) > 1e-12
        step = np.zeros_like(r)
        if np.any(good):
            step[good] = -np.linalg.solve(jac[good], r[good][:, :, None])[:, :, 0]
        sn = np.linalg.norm(step, axis=1)
        scale = np.where(sn > h, h / np.maximum(sn, 1e-300), 1.0)
        x[todo] = np.clip(x[todo] + step * scale[:, None], lo, hi)
    res = np.linalg.norm(warp_points(volume, pose, x) - targets, axis=1)
    return x, res <= 1e-6


def invert_warp(volume, pose, y, seed):
    """Canonical point mapping to world point ``y``; raises if not converged."""
    seed = np.asarray(seed, dtype=float).reshape(1, 3)
    if not volume.contains(seed)[0]:
        raise OutOfBoundsError(f"seed {seed[0]} outside the grid")
    x, ok = invert_warp_points(volume, pose, np.asarray(y, dtype=float).reshape(1, 3), seed)
    if not ok[0]:
        raise InversionFailedError(f"warp inversion did not converge for target {y}")
    return x[0]


def sample_tsdf_points(volume, points):
    idx, w = trilinear_anchors_batch(volume, points)
    d = (volume.tsdf[idx] * w).sum(axis=1)
    wt = (volume.weight[idx] * w).sum(axis=1)
    c = np.einsum("kc,kcd->kd", w, volume.color[idx])
    return d, wt, c


def sample_tsdf(volume, x):
    """Trilinear (distance, weight, color) at a canonical point."""
    d, wt, c = sample_tsdf_points(volume, np.asarray(x, dtype=float).reshape(1, 3))
    return float(d[0]), float(wt[0]), c[0]


# --- binary snapshot -------------------------------------------------------

VOLUME_MAGIC = b"NRFV"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<4sI3i4d")
POINT_RECORD = np.dtype([
    ("tsdf", "<f8"), ("weight", "<f8"), ("color", "<f8", (3,)),
    ("position", "<f8", (3,)), ("rotation", "<f8", (3,)),
    ("age", "<i8"), ("active", "u1"),
])


def save_volume(volume, path):
    """Little-endian header then one packed record per point, x fastest."""
    rec = np.empty(volume.n_points, dtype=POINT_RECORD)
    rec["tsdf"] = volume.tsdf
    rec["weight"] = volume.weight
    rec["color"] = volume.color
    rec["position"] = volume.positions
    rec["rotation"] = volume.rotations
    rec["age"] = volume.age
    rec["active"] = volume.active
    with open(path, "wb") as f:
        f.write(_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, *volume.dims,
                             volume.voxel_size, *volume.origin))
        f.write(rec.tobytes())


def load_volume(path):
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated volume header")
        magic, version, nx, ny, nz, h, ox, oy, oz = _HEADER.unpack(head)
        if magic != VOLUME_MAGIC or version != VOLUME_VERSION:
            raise ValueError(f"{path}: not a volume snapshot (magic={magic!r}, version={version})")
        vol = DeformableVolume((nx, ny, nz), h, (ox, oy, oz))
        rec = np.frombuffer(f.read(), dtype=POINT_RECORD)
    if len(rec) != vol.n_points:
        raise ValueError(f"{path}: expected {vol.n_points} records, found {len(rec)}")
    vol.tsdf = rec["tsdf"].copy()
    vol.weight = rec["weight"].copy()
    vol.color = rec["color"].copy()
    vol.positions = rec["position"].copy()
    vol.rotations = rec["rotation"].copy()
    vol.age = rec["age"].astype(np.int64)
    vol.active = rec["active"].astype(bool)
    return vol
