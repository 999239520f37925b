"""Synthetic RGB-D sequences of analytically warped scenes with exact ground truth.

A scene is an analytic signed distance function in the canonical (frame 0)
pose, a procedural solid texture, a time-parameterized warp program and a
camera trajectory. World coordinates coincide with the camera frame of
frame 0, the camera looks along +z with y pointing down.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .camera import Frame, Intrinsics
from .volume import GlobalPose, euler_to_matrix, rotation_from_axis_angle

_AXES = {"x": np.array([1.0, 0.0, 0.0]), "y": np.array([0.0, 1.0, 0.0]), "z": np.array([0.0, 0.0, 1.0])}


class GenerationFailed(RuntimeError):
    def __init__(self, frame, message):
        super().__init__(f"frame {frame}: {message}")
        self.frame = frame


def _axis(value, name):
    if isinstance(value, str):
        if value not in _AXES:
            raise ValueError(f"{name}: unknown axis {value!r}")
        return _AXES[value].copy()
    v = np.asarray(value, dtype=float).reshape(3)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError(f"{name}: zero-length axis")
    return v / n


# --- shapes -----------------------------------------------------------------

@dataclass
class Shape:
    """Analytic SDF: sphere, box, plane, cylinder (capped) or union of children."""

    kind: str
    center: tuple = (0.0, 0.0, 1.0)
    radius: float = 0.2
    half_extents: tuple = (0.1, 0.1, 0.1)
    normal: tuple = (0.0, 0.0, -1.0)
    axis: str = "y"
    height: float = 0.4
    rotation: tuple = (0.0, 0.0, 0.0)   # box orientation, x-y-z Euler angles in degrees
    children: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "plane", "cylinder", "union"):
            raise ValueError(f"shape.kind: unknown shape {self.kind!r}")
        if self.kind == "union":
            self.children = [c if isinstance(c, Shape) else Shape(**c) for c in self.children]
            if not self.children:
                raise ValueError("shape.children: union needs at least one child")
        if self.kind in ("sphere", "cylinder") and not self.radius > 0:
            raise ValueError("shape.radius: must be positive")

    def sdf(self, p):
        p = np.asarray(p, dtype=float)
        c = np.asarray(self.center, dtype=float)
        if self.kind == "sphere":
            return np.linalg.norm(p - c, axis=-1) - self.radius
        if self.kind == "box":
            rot = euler_to_matrix(np.radians(np.asarray(self.rotation, dtype=float)))
            q = np.abs((p - c) @ rot) - np.asarray(self.half_extents, dtype=float)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(q.max(axis=-1), 0.0)
        if self.kind == "plane":
            n = _axis(self.normal, "shape.normal")
            return (p - c) @ n
        if self.kind == "cylinder":
            a = _axis(self.axis, "shape.axis")
            rel = p - c
            s = rel @ a
            radial = np.linalg.norm(rel - s[..., None] * a, axis=-1) - self.radius
            axial = np.abs(s) - 0.5 * self.height
            q = np.stack([radial, axial], axis=-1)
            return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)
        return np.min(np.stack([ch.sdf(p) for ch in self.children]), axis=0)

    def to_dict(self):
        d = asdict(self)
        d["children"] = [c.to_dict() for c in self.children]
        return d


# --- texture ----------------------------------------------------------------

def _hash_uniform(cells, salt):
    """Deterministic uniform [0, 1) values from integer lattice coordinates."""
    c = cells.astype(np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = (c[..., 0] * np.uint64(0x9E3779B97F4A7C15)
             ^ c[..., 1] * np.uint64(0xC2B2AE3D27D4EB4F)
             ^ c[..., 2] * np.uint64(0x165667B19E3779F9)
             ^ np.uint64(salt) * np.uint64(0xD6E8FEB86659FD93))
        h ^= h >> np.uint64(31)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


@dataclass
class Texture:
    """Procedural solid texture: jittered dots (default), checker or value noise."""

    kind: str = "dots"
    scale: float = 0.04
    seed: int = 7

    def __post_init__(self):
        if self.kind not in ("dots", "checker", "noise"):
            raise ValueError(f"texture.kind: unknown texture {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("texture.scale: must be positive")

    def _noise(self, p, scale, salt):
        g = p / scale
        base = np.floor(g)
        f = g - base
        f = f * f * (3 - 2 * f)
        out = np.zeros(p.shape[:-1])
        for cx in (0, 1):
            for cy in (0, 1):
                for cz in (0, 1):
                    corner = base + np.array([cx, cy, cz])
                    w = ((f[..., 0] if cx else 1 - f[..., 0]) * (f[..., 1] if cy else 1 - f[..., 1])
                         * (f[..., 2] if cz else 1 - f[..., 2]))
                    out += w * _hash_uniform(corner, salt)
        return out

    def color(self, p):
        """RGB in [0, 255] at canonical points (n, 3)."""
        p = np.asarray(p, dtype=float)
        s = self.scale
        if self.kind == "checker":
            parity = np.floor(p / s).astype(np.int64).sum(axis=-1) % 2
            v = np.where(parity == 0, 230.0, 40.0)
            return np.stack([v, v, v], axis=-1)
        if self.kind == "noise":
            v = 255.0 * self._noise(p, s, self.seed)
            return np.stack([v, 255.0 * self._noise(p, s, self.seed + 1), v], axis=-1)
        # smooth backdrop plus one jittered dot per lattice cell (some cells empty)
        back = 120.0 + 60.0 * self._noise(p, 4.0 * s, self.seed + 11)
        rgb = np.stack([back, back * 0.9 + 10.0, back * 0.8 + 20.0], axis=-1)
        cell = np.floor(p / s)
        best = np.full(p.shape[:-1], np.inf)
        for ox in (-1, 0, 1):
            for oy in (-1, 0, 1):
                for oz in (-1, 0, 1):
                    c = cell + np.array([ox, oy, oz])
                    jit = np.stack([_hash_uniform(c, self.seed * 7 + k) for k in range(3)], axis=-1)
                    centre = (c + 0.2 + 0.6 * jit) * s
                    radius = s * (0.18 + 0.17 * _hash_uniform(c, self.seed * 7 + 3))
                    present = _hash_uniform(c, self.seed * 7 + 4) < 0.75
                    d = np.linalg.norm(p - centre, axis=-1)
                    hit = present & (d < radius) & (d < best)
                    if np.any(hit):
                        tone = _hash_uniform(c, self.seed * 7 + 5)
                        dark = tone < 0.5
                        col = np.where(dark[..., None],
                                       np.stack([20 + 40 * tone, 20 + 30 * tone, 30 + 40 * tone], -1),
                                       np.stack([200 + 50 * tone, 230 - 60 * tone, 150 + 90 * tone], -1))
                        rgb[hit] = col[hit]
                        best = np.where(hit, d, best)
        return np.clip(rgb, 0.0, 255.0)


# --- warps ------------------------------------------------------------------

@dataclass
class Warp:
    """One time-parameterized warp component (``k`` is the frame index).

    rigid: rotation ``angular_velocity`` (axis-angle, rad/frame) about ``pivot``
        plus translation ``velocity`` (m/frame).
    bend: displacement ``amplitude * sin(2 pi frequency k) * (s / length)^2``
        along ``direction``, ``s`` the coordinate along ``axis`` from ``pivot``.
    twist: rotation about ``axis`` through ``pivot`` by ``rate * k * s``.
    """

    kind: str
    pivot: tuple = (0.0, 0.0, 1.0)
    angular_velocity: tuple = (0.0, 0.0, 0.0)
    velocity: tuple = (0.0, 0.0, 0.0)
    axis: str = "y"
    direction: str = "x"
    amplitude: float = 0.0
    frequency: float = 0.0
    length: float = 1.0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("rigid", "bend", "twist"):
            raise ValueError(f"warp.kind: unknown warp {self.kind!r}")
        if self.kind == "bend":
            if abs(_axis(self.axis, "warp.axis") @ _axis(self.direction, "warp.direction")) > 1e-12:
                raise ValueError("warp.direction: must be perpendicular to warp.axis")
            if not self.length > 0:
                raise ValueError("warp.length: must be positive")

    def _rigid(self, k):
        w = np.asarray(self.angular_velocity, dtype=float) * k
        ang = np.linalg.norm(w)
        rot = rotation_from_axis_angle(w, ang) if ang > 0 else np.eye(3)
        return rot, np.asarray(self.velocity, dtype=float) * k

    def is_rigid(self):
        return self.kind == "rigid"

    def rigid_transform(self, k):
        rot, vel = self._rigid(k)
        c = np.asarray(self.pivot, dtype=float)
        return GlobalPose(rot, c - rot @ c + vel)

    def forward(self, p, k):
        p = np.asarray(p, dtype=float)
        c = np.asarray(self.pivot, dtype=float)
        if self.kind == "rigid":
            rot, vel = self._rigid(k)
            return (p - c) @ rot.T + c + vel
        a = _axis(self.axis, "warp.axis")
        s = (p - c) @ a
        if self.kind == "bend":
            d = _axis(self.direction, "warp.direction")
            amp = self.amplitude * np.sin(2.0 * np.pi * self.frequency * k)
            return p + (amp * (s / self.length) ** 2)[..., None] * d
        return _rotate_about(p - c, a, self.rate * k * s) + c

    def inverse(self, q, k):
        q = np.asarray(q, dtype=float)
        c = np.asarray(self.pivot, dtype=float)
        if self.kind == "rigid":
            rot, vel = self._rigid(k)
            return (q - c - vel) @ rot + c
        a = _axis(self.axis, "warp.axis")
        s = (q - c) @ a
        if self.kind == "bend":
            d = _axis(self.direction, "warp.direction")
            amp = self.amplitude * np.sin(2.0 * np.pi * self.frequency * k)
            return q - (amp * (s / self.length) ** 2)[..., None] * d
        return _rotate_about(q - c, a, -self.rate * k * s) + c


def _rotate_about(v, axis, angle):
    """Rodrigues rotation of vectors ``v`` about unit ``axis`` by per-vector ``angle``."""
    angle = np.asarray(angle, dtype=float)
    cos, sin = np.cos(angle)[..., None], np.sin(angle)[..., None]
    return v * cos + np.cross(axis, v) * sin + (v @ axis)[..., None] * axis * (1 - cos)


@dataclass
class CameraMotion:
    """Camera-to-world pose ``(Rot(k * angular_velocity), k * velocity)``."""

    velocity: tuple = (0.0, 0.0, 0.0)
    angular_velocity: tuple = (0.0, 0.0, 0.0)

    def pose(self, k):
        w = np.asarray(self.angular_velocity, dtype=float) * k
        ang = np.linalg.norm(w)
        rot = rotation_from_axis_angle(w, ang) if ang > 0 else np.eye(3)
        return GlobalPose(rot, np.asarray(self.velocity, dtype=float) * k)


@dataclass
class SceneSpec:
    shape: Shape
    texture: Texture = field(default_factory=Texture)
    warps: list = field(default_factory=list)
    camera: CameraMotion = field(default_factory=CameraMotion)
    n_frames: int = 10
    intrinsics: Intrinsics = field(default_factory=lambda: Intrinsics(280.0, 280.0, 159.5, 119.5, 320, 240))
    bounds: tuple = ((-0.5, -0.5, 0.5), (0.5, 0.5, 1.5))
    depth_noise: float = 0.0
    noise_seed: int = 0
    max_depth: float = 4.0

    def __post_init__(self):
        if not isinstance(self.shape, Shape):
            self.shape = Shape(**self.shape)
        if not isinstance(self.texture, Texture):
            self.texture = Texture(**self.texture)
        self.warps = [w if isinstance(w, Warp) else Warp(**w) for w in self.warps]
        if not isinstance(self.camera, CameraMotion):
            self.camera = CameraMotion(**self.camera)
        if not isinstance(self.intrinsics, Intrinsics):
            self.intrinsics = Intrinsics(**self.intrinsics)
        if int(self.n_frames) < 1:
            raise ValueError("n_frames: must be at least 1")
        self.n_frames = int(self.n_frames)
        if self.depth_noise < 0:
            raise ValueError("depth_noise: must be non-negative")

    def warp(self, p, k):
        for w in self.warps:
            p = w.forward(p, k)
        return p

    def unwarp(self, q, k):
        for w in reversed(self.warps):
            q = w.inverse(q, k)
        return q

    def is_rigid(self):
        return all(w.is_rigid() for w in self.warps)

    def to_dict(self):
        return {
            "shape": self.shape.to_dict(),
            "texture": asdict(self.texture),
            "warps": [asdict(w) for w in self.warps],
            "camera": asdict(self.camera),
            "n_frames": self.n_frames,
            "intrinsics": asdict(self.intrinsics),
            "bounds": [list(b) for b in self.bounds],
            "depth_noise": self.depth_noise,
            "noise_seed": self.noise_seed,
            "max_depth": self.max_depth,
        }

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown scene field")
        if "shape" not in d:
            raise ValueError("shape: missing")
        return cls(**d)


@dataclass
class GroundTruth:
    spec: SceneSpec
    frame_ids: list
    camera_poses: list
    samples: list              # per frame: (canonical (n, 3), camera-space (n, 3))

    def world_to_camera(self, j):
        return self.camera_poses[j].inverse()

    def full_warp(self, j, canonical):
        """Canonical points to camera space of the j-th kept frame."""
        k = self.frame_ids[j]
        return self.world_to_camera(j).apply(self.spec.warp(canonical, k))

    def full_unwarp(self, j, camera_points):
        k = self.frame_ids[j]
        return self.spec.unwarp(self.camera_poses[j].apply(camera_points), k)

    def pose(self, j):
        """Rigid canonical-to-camera transform (rigid scenes only)."""
        if not self.spec.is_rigid():
            raise ValueError("scene warp is not rigid")
        k = self.frame_ids[j]
        total = GlobalPose()
        for w in self.spec.warps:
            total = w.rigid_transform(k).compose(total)
        return self.world_to_camera(j).compose(total)

    def canonical_sdf(self, p):
        return self.spec.shape.sdf(p)

    def subsample(self, n):
        return GroundTruth(self.spec, self.frame_ids[::n], self.camera_poses[::n], self.samples[::n])


def _check_diffeomorphism(spec, k, rng):
    lo, hi = (np.asarray(b, dtype=float) for b in spec.bounds)
    pts = lo + (hi - lo) * rng.random((256, 3))
    eps = 1e-5
    jac = np.empty((len(pts), 3, 3))
    for d in range(3):
        e = np.zeros(3)
        e[d] = eps
        jac[:, :, d] = (spec.warp(pts + e, k) - spec.warp(pts - e, k)) / (2 * eps)
    det = np.linalg.det(jac)
    if np.any(det <= 0):
        raise GenerationFailed(k, f"warp Jacobian determinant {det.min():.3g} <= 0")


def _trace(spec, k, cam, rays, max_iters=600, tol=1e-9):
    """Sphere tracing with a safety factor, then Newton refinement along each ray."""
    dirs = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    flat = dirs.reshape(-1, 3)
    n = len(flat)

    def f(idx, s):
        world = cam.apply(s[:, None] * flat[idx])
        return spec.shape.sdf(spec.unwarp(world, k))

    s = np.full(n, 0.05)
    hit = np.zeros(n, dtype=bool)
    alive = np.arange(n)
    safety = 0.5
    for _ in range(max_iters):
        if len(alive) == 0:
            break
        val = f(alive, s[alive])
        close = val < 1e-6
        hit[alive[close]] = True
        s[alive[~close]] += safety * val[~close]
        far = s[alive] > spec.max_depth
        alive = alive[~close & ~far]
    idx = np.nonzero(hit)[0]
    for _ in range(6):
        if len(idx) == 0:
            break
        v = f(idx, s[idx])
        h = 1e-6
        g = (f(idx, s[idx] + h) - f(idx, s[idx] - h)) / (2 * h)
        ok = g < -1e-6
        s[idx[ok]] -= v[ok] / g[ok]
    if len(idx):
        resid = np.abs(f(idx, s[idx]))
        hit[idx[resid > 1e-6]] = False
    return s, hit, flat


def render_frame(spec, k):
    """Depth (metres) and color of frame ``k``, plus canonical and camera points of hits."""
    intr = spec.intrinsics
    cam = spec.camera.pose(k)
    s, hit, dirs = _trace(spec, k, cam, intr.rays())
    cam_pts = s[:, None] * dirs
    depth = np.where(hit, cam_pts[:, 2], 0.0)
    canonical = np.zeros_like(cam_pts)
    canonical[hit] = spec.unwarp(cam.apply(cam_pts[hit]), k)
    color = np.zeros((len(s), 3))
    color[hit] = spec.texture.color(canonical[hit])
    h, w = intr.height, intr.width
    return (depth.reshape(h, w), np.rint(color).astype(np.uint8).reshape(h, w, 3),
            canonical.reshape(h, w, 3), cam_pts.reshape(h, w, 3), hit.reshape(h, w))


def render_sequence(spec, sample_stride=4):
    """All frames of a scene plus ground truth (warp, camera poses, surface samples)."""
    rng = np.random.default_rng(12345)
    noise_rng = np.random.default_rng(spec.noise_seed)
    frames, poses, samples = [], [], []
    for k in range(spec.n_frames):
        _check_diffeomorphism(spec, k, rng)
        depth, color, canonical, cam_pts, hit = render_frame(spec, k)
        if spec.depth_noise > 0:
            noise = noise_rng.normal(0.0, spec.depth_noise, depth.shape)
            depth = np.where(hit, depth + noise, 0.0)
        frames.append(Frame(depth, color, spec.intrinsics, k))
        poses.append(spec.camera.pose(k))
        sel = np.zeros_like(hit)
        sel[::sample_stride, ::sample_stride] = True
        sel &= hit
        samples.append((canonical[sel], cam_pts[sel]))
    return frames, GroundTruth(spec, list(range(spec.n_frames)), poses, samples)


def frame_skip(frames, truth, n):
    """Every n-th frame, with the ground truth resampled to match."""
    if n < 1:
        raise ValueError("frame skip must be >= 1")
    return frames[::n], truth.subsample(n)


# --- ground-truth sidecar ---------------------------------------------------

def save_truth(truth, directory):
    """``truth.json`` index plus ``warp_samples.bin`` (per frame: id, count, canonical, camera)."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = {
        "scene": truth.spec.to_dict(),
        "frame_ids": list(truth.frame_ids),
        "camera_poses": [p.to_dict() for p in truth.camera_poses],
        "rigid_poses": ([truth.pose(j).to_dict() for j in range(len(truth.frame_ids))]
                        if truth.spec.is_rigid() else None),
        "samples_file": "warp_samples.bin",
    }
    (d / "truth.json").write_text(json.dumps(index, indent=1))
    with open(d / "warp_samples.bin", "wb") as f:
        for fid, (canon, cam) in zip(truth.frame_ids, truth.samples):
            f.write(struct.pack("<ii", fid, len(canon)))
            f.write(np.ascontiguousarray(canon, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(cam, dtype="<f8").tobytes())


def load_truth(directory):
    from pathlib import Path

    d = Path(directory)
    index = json.loads((d / "truth.json").read_text())
    spec = SceneSpec.from_dict(index["scene"])
    poses = [GlobalPose.from_dict(p) for p in index["camera_poses"]]
    samples = []
    with open(d / index.get("samples_file", "warp_samples.bin"), "rb") as f:
        for _ in index["frame_ids"]:
            fid, n = struct.unpack("<ii", f.read(8))
            canon = np.frombuffer(f.read(24 * n), dtype="<f8").reshape(n, 3).copy()
            cam = np.frombuffer(f.read(24 * n), dtype="<f8").reshape(n, 3).copy()
            samples.append((canon, cam))
    return GroundTruth(spec, list(index["frame_ids"]), poses, samples)


def evaluate_reconstruction(canonical_vertices, truth):
    """Point-to-surface distances of canonical mesh vertices to the analytic surface."""
    v = np.asarray(canonical_vertices, dtype=float)
    if len(v) == 0:
        raise ValueError("evaluation failed: empty mesh")
    dist = np.abs(truth.canonical_sdf(v))
    return {
        "n_vertices": int(len(v)),
        "mean": float(dist.mean()),
        "max": float(dist.max()),
        "rms": float(np.sqrt(np.mean(dist ** 2))),
    }


def to_truth_canonical(truth, points):
    """Reconstruction canonical space is the camera space of the first kept frame."""
    return truth.full_unwarp(0, np.asarray(points, dtype=float))


def surface_error(canonical_vertices, truth):
    """Like ``evaluate_reconstruction`` but for vertices in reconstruction canonical space."""
    v = np.asarray(canonical_vertices, dtype=float)
    if len(v) == 0:
        raise ValueError("evaluation failed: empty mesh")
    return evaluate_reconstruction(to_truth_canonical(truth, v), truth)


def drift_distances(truth, j, volume, pose, max_samples=2000):
    """Canonical-stability drift at frame ``j``.

    The ground-truth camera samples of frame ``j`` are pulled back through the
    estimated warp; the distance to their true canonical position is the
    drift. Only samples whose estimate lands in a fully active cell count.
    """
    from .volume import invert_warp_points, trilinear_anchors_batch

    canon_gt, cam = truth.samples[j]
    if len(cam) == 0:
        return np.zeros(0)
    if len(cam) > max_samples:
        sel = np.linspace(0, len(cam) - 1, max_samples).astype(np.int64)
        canon_gt, cam = canon_gt[sel], cam[sel]
    seeds = pose.inverse().apply(cam)
    inside = volume.contains(seeds)
    if not np.any(inside):
        return np.zeros(0)
    est, ok = invert_warp_points(volume, pose, cam[inside], seeds[inside])
    idx, w = trilinear_anchors_batch(volume, est)
    ok &= np.all(volume.active[idx] | (w == 0), axis=1)
    est_gt = to_truth_canonical(truth, est[ok])
    return np.linalg.norm(est_gt - canon_gt[inside][ok], axis=1)


def evaluate_drift(truth, states):
    """Mean drift per frame and over the sequence; ``states`` yields (j, volume, pose)."""
    per_frame = []
    all_d = []
    for j, volume, pose in states:
        d = drift_distances(truth, j, volume, pose)
        per_frame.append({"frame": int(truth.frame_ids[j]), "n": int(len(d)),
                          "mean": float(d.mean()) if len(d) else None})
        all_d.append(d)
    all_d = np.concatenate(all_d) if all_d else np.zeros(0)
    means = [f["mean"] for f in per_frame if f["mean"] is not None]
    return {"per_frame": per_frame,
            "mean": float(np.mean(means)) if means else None,
            "max": float(all_d.max()) if len(all_d) else None}
