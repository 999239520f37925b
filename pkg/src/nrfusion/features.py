"""Scale-space keypoints with 128-entry gradient histogram descriptors, lifting to
canonical space and matching against the stored feature history."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, minimum_filter
from scipy.spatial.distance import cdist

from .camera import gray, write_ppm
from .fusion import sample_depth
from .volume import invert_warp_points, warp_points

log = logging.getLogger(__name__)

N_OCTAVES = 4
N_DOG = 3                     # DoG levels per octave
N_GAUSS = N_DOG + 1
SIGMA0 = 1.6
ASSUMED_BLUR = 0.5
MIN_IMAGE = 64
MAX_KEYPOINTS = 150
DEPTH_WINDOW = 2          # half-size of the depth neighbourhood a keypoint must have
MAX_DEPTH_SPREAD = 0.03   # relative depth range allowed in it (rejects depth edges)
DESC_WIDTH = 4
DESC_BINS = 8
ORI_BINS = 36


@dataclass
class FeatureParams:
    contrast: float = 0.04        # refined |DoG| threshold is contrast / N_DOG
    edge_ratio: float = 10.0
    max_keypoints: int = MAX_KEYPOINTS
    peak_ratio: float = 0.8
    tau_f: float = 0.7            # absolute descriptor distance
    tau_px: float = 48.0
    tau_3d: float = 0.10
    max_candidates: int = 128
    max_matches: int = 64


@dataclass
class Pyramid:
    gaussians: list   # per octave: (N_GAUSS, h, w)
    dogs: list        # per octave: (N_DOG, h, w)

    def level_sigma(self, level):
        """Blur (in octave pixels) of gaussian ``level`` within an octave."""
        return SIGMA0 * 2.0 ** (np.asarray(level, dtype=float) / N_DOG)


def build_pyramid(image):
    """Gaussian and difference-of-Gaussian pyramid of a grayscale image in [0, 1]."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or min(img.shape) < MIN_IMAGE:
        raise ValueError(f"image must be 2-D and at least {MIN_IMAGE}x{MIN_IMAGE}, got {img.shape}")
    sig = SIGMA0 * 2.0 ** (np.arange(N_GAUSS) / N_DOG)
    base = gaussian_filter(img, np.sqrt(SIGMA0 ** 2 - ASSUMED_BLUR ** 2), mode="nearest")
    gaussians, dogs = [], []
    for o in range(N_OCTAVES):
        g = [base]
        for i in range(1, N_GAUSS):
            g.append(gaussian_filter(g[-1], np.sqrt(sig[i] ** 2 - sig[i - 1] ** 2), mode="nearest"))
        g = np.stack(g)
        gaussians.append(g)
        dogs.append(g[1:] - g[:-1])
        base = g[N_DOG][::2, ::2]
    return Pyramid(gaussians, dogs)


@dataclass
class FeatureSet:
    """Keypoints of one frame; ``xy`` and ``scale`` are in full-resolution pixels."""

    xy: np.ndarray
    octave: np.ndarray
    level: np.ndarray        # refined level within the octave
    scale: np.ndarray
    orientation: np.ndarray
    response: np.ndarray
    world: np.ndarray        # camera-space 3D point from the depth map
    descriptors: np.ndarray = field(default_factory=lambda: np.zeros((0, 128)))
    frame_id: int = 0

    @classmethod
    def empty(cls, frame_id=0):
        z = np.zeros(0)
        return cls(np.zeros((0, 2)), z.astype(np.int64), z, z, z, z, np.zeros((0, 3)),
                   np.zeros((0, 128)), frame_id)

    def __len__(self):
        return len(self.xy)

    def subset(self, idx):
        d = self.descriptors[idx] if len(self.descriptors) == len(self) else self.descriptors
        return FeatureSet(self.xy[idx], self.octave[idx], self.level[idx], self.scale[idx],
                          self.orientation[idx], self.response[idx], self.world[idx], d, self.frame_id)


def _gradients(img):
    gy, gx = np.gradient(img)
    return np.hypot(gx, gy), np.arctan2(gy, gx)


def _refine(dog, o, l, y, x, max_steps=5):
    """Quadratic sub-sample refinement; returns (l, y, x, offset, value) or None."""
    nl, h, w = dog.shape
    for _ in range(max_steps):
        lp, lm = min(l + 1, nl - 1), max(l - 1, 0)
        c = dog[l, y, x]
        dx = (dog[l, y, x + 1] - dog[l, y, x - 1]) / 2
        dy = (dog[l, y + 1, x] - dog[l, y - 1, x]) / 2
        ds = (dog[lp, y, x] - dog[lm, y, x]) / 2
        dxx = dog[l, y, x + 1] + dog[l, y, x - 1] - 2 * c
        dyy = dog[l, y + 1, x] + dog[l, y - 1, x] - 2 * c
        dss = dog[lp, y, x] + dog[lm, y, x] - 2 * c
        dxy = (dog[l, y + 1, x + 1] - dog[l, y + 1, x - 1] - dog[l, y - 1, x + 1] + dog[l, y - 1, x - 1]) / 4
        dxs = (dog[lp, y, x + 1] - dog[lp, y, x - 1] - dog[lm, y, x + 1] + dog[lm, y, x - 1]) / 4
        dys = (dog[lp, y + 1, x] - dog[lp, y - 1, x] - dog[lm, y + 1, x] + dog[lm, y - 1, x]) / 4
        H = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        g = np.array([dx, dy, ds])
        if lp == lm or dss == 0:
            H2 = H[:2, :2]
            if abs(np.linalg.det(H2)) < 1e-12:
                return None
            off = np.zeros(3)
            off[:2] = -np.linalg.solve(H2, g[:2])
        else:
            if abs(np.linalg.det(H)) < 1e-12:
                return None
            off = -np.linalg.solve(H, g)
        if np.all(np.abs(off[:2]) < 0.5):
            break
        x += int(np.rint(off[0])) if abs(off[0]) >= 0.5 else 0
        y += int(np.rint(off[1])) if abs(off[1]) >= 0.5 else 0
        if not (1 <= x < w - 1 and 1 <= y < h - 1):
            return None
    else:
        return None
    off[2] = np.clip(off[2], -0.5, 0.5)
    if (l == 0 and off[2] < 0) or (l == nl - 1 and off[2] > 0):
        off[2] = 0.0
    value = c + 0.5 * g @ off
    return l, y, x, off, value, (dxx, dyy, dxy)


def _orientations(mag, ang, x, y, sigma, peak_ratio):
    h, w = mag.shape
    s = 1.5 * sigma
    r = int(np.rint(3 * s))
    x0, x1 = max(int(np.rint(x)) - r, 0), min(int(np.rint(x)) + r + 1, w)
    y0, y1 = max(int(np.rint(y)) - r, 0), min(int(np.rint(y)) + r + 1, h)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    wgt = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * s * s)) * mag[y0:y1, x0:x1]
    b = np.floor(ang[y0:y1, x0:x1] * ORI_BINS / (2 * np.pi)).astype(np.int64) % ORI_BINS
    hist = np.bincount(b.ravel(), wgt.ravel(), ORI_BINS)
    k = np.array([1, 4, 6, 4, 1]) / 16.0
    hist = sum(k[i] * np.roll(hist, i - 2) for i in range(5))
    top = hist.max()
    if top <= 0:
        return []
    left, right = np.roll(hist, 1), np.roll(hist, -1)
    peaks = np.nonzero((hist > left) & (hist > right) & (hist >= peak_ratio * top))[0]
    peaks = peaks[np.argsort(-hist[peaks], kind="stable")][:2]
    out = []
    for p in peaks:
        denom = left[p] - 2 * hist[p] + right[p]
        d = 0.5 * (left[p] - right[p]) / denom if denom != 0 else 0.0
        out.append(((p + 0.5 + d) * 2 * np.pi / ORI_BINS) % (2 * np.pi))
    return out


def _depth_continuous(depth, x, y, octave=0):
    """All depth valid in the window around (x, y), without jumps between surfaces.

    The window grows with the octave so it covers the keypoint's support.
    """
    h, w = depth.shape
    ui, vi = int(np.rint(x)), int(np.rint(y))
    r = DEPTH_WINDOW * 2 ** octave
    if not (r <= ui < w - r and r <= vi < h - r):
        return False
    win = depth[vi - r:vi + r + 1, ui - r:ui + r + 1]
    if np.any(win <= 0):
        return False
    return win.max() - win.min() <= MAX_DEPTH_SPREAD * win.min()


def detect_keypoints(pyramid, frame, params=None):
    """Depth-valid DoG extrema with one or two orientations, strongest first, capped."""
    params = params or FeatureParams()
    thr = params.contrast / N_DOG
    edge = (params.edge_ratio + 1) ** 2 / params.edge_ratio
    cands = []
    for o, dog in enumerate(pyramid.dogs):
        if min(dog.shape[1:]) < 3:
            continue
        mx = maximum_filter(dog, size=3, mode="nearest")
        mn = minimum_filter(dog, size=3, mode="nearest")
        ext = ((dog == mx) & (dog > 0.5 * thr)) | ((dog == mn) & (dog < -0.5 * thr))
        ext[:, [0, -1], :] = False
        ext[:, :, [0, -1]] = False
        mags = [_gradients(g) for g in pyramid.gaussians[o]]
        for l, y, x in zip(*np.nonzero(ext)):
            ref = _refine(dog, o, int(l), int(y), int(x))
            if ref is None:
                continue
            l2, y2, x2, off, value, (dxx, dyy, dxy) = ref
            if abs(value) < thr:
                continue
            det = dxx * dyy - dxy * dxy
            if det <= 0 or (dxx + dyy) ** 2 / det >= edge:
                continue
            lev = l2 + off[2]
            xo, yo = x2 + off[0], y2 + off[1]
            xf, yf = xo * 2 ** o, yo * 2 ** o
            sig = SIGMA0 * 2.0 ** (lev / N_DOG)
            # no descriptor possible: drop before the cap so it does not take a slot
            if not _window_inside(dog.shape[1:], xo, yo, sig):
                continue
            if not _depth_continuous(frame.depth, xf, yf, o):
                continue
            z, _, _, ok = sample_depth(frame, np.array([xf]), np.array([yf]))
            if not ok[0]:
                continue
            gi = int(np.clip(np.rint(lev), 0, N_GAUSS - 1))
            for theta in _orientations(*mags[gi], xo, yo, sig, params.peak_ratio):
                cands.append((abs(value), o, lev, xf, yf, sig * 2 ** o, theta, value,
                              frame.intrinsics.unproject(xf, yf, z[0])))
    if not cands:
        return FeatureSet.empty(frame.index)
    # strongest first; ties broken by position then orientation for determinism
    cands.sort(key=lambda c: (-c[0], c[4], c[3], c[6]))
    cands = cands[:params.max_keypoints]
    return FeatureSet(np.array([[c[3], c[4]] for c in cands]), np.array([c[1] for c in cands]),
                      np.array([c[2] for c in cands]), np.array([c[5] for c in cands]),
                      np.array([c[6] for c in cands]), np.array([c[7] for c in cands]),
                      np.array([c[8] for c in cands]), np.zeros((0, 128)), frame.index)


def _window_radius(sigma):
    return int(np.ceil(3.0 * sigma * np.sqrt(2) * (DESC_WIDTH + 1) * 0.5))


def _window_inside(shape, x, y, sigma):
    h, w = shape
    r = _window_radius(sigma)
    xi, yi = int(np.rint(x)), int(np.rint(y))
    return xi - r >= 0 and yi - r >= 0 and xi + r < w and yi + r < h


def _descriptor(mag, ang, x, y, sigma, theta):
    d, n = DESC_WIDTH, DESC_BINS
    hist_w = 3.0 * sigma
    radius = _window_radius(sigma)
    xi, yi = int(np.rint(x)), int(np.rint(y))
    if not _window_inside(mag.shape, x, y, sigma):
        return None
    yy, xx = np.mgrid[yi - radius:yi + radius + 1, xi - radius:xi + radius + 1]
    dx, dy = xx - x, yy - y
    c, s = np.cos(theta), np.sin(theta)
    # rotate offsets by -theta into the keypoint frame
    xr = (c * dx + s * dy) / hist_w
    yr = (-s * dx + c * dy) / hist_w
    rbin = yr + d / 2 - 0.5
    cbin = xr + d / 2 - 0.5
    inside = (rbin > -1) & (rbin < d) & (cbin > -1) & (cbin < d)
    rbin, cbin = rbin[inside], cbin[inside]
    wgt = np.exp(-(xr[inside] ** 2 + yr[inside] ** 2) / (2 * (0.5 * d) ** 2)) * mag[yy[inside], xx[inside]]
    obin = ((ang[yy[inside], xx[inside]] - theta) % (2 * np.pi)) * n / (2 * np.pi)
    r0, c0, o0 = np.floor(rbin).astype(int), np.floor(cbin).astype(int), np.floor(obin).astype(int)
    fr, fc, fo = rbin - r0, cbin - c0, obin - o0
    hist = np.zeros((d + 2, d + 2, n))
    for ir in (0, 1):
        wr = fr if ir else 1 - fr
        for ic in (0, 1):
            wc = fc if ic else 1 - fc
            for io in (0, 1):
                wo = fo if io else 1 - fo
                np.add.at(hist, (r0 + 1 + ir, c0 + 1 + ic, (o0 + io) % n), wgt * wr * wc * wo)
    vec = hist[1:-1, 1:-1].ravel()
    norm = np.linalg.norm(vec)
    if norm <= 0:
        return None
    vec = np.minimum(vec / norm, 0.2)
    return vec / np.linalg.norm(vec)


def extract_descriptors(features, pyramid):
    """Attach unit-norm descriptors; keypoints whose window leaves the image are dropped."""
    if len(features) == 0:
        return FeatureSet.empty(features.frame_id)
    keep, descs = [], []
    cache = {}
    for k in range(len(features)):
        o = int(features.octave[k])
        gi = int(np.clip(np.rint(features.level[k]), 0, N_GAUSS - 1))
        if (o, gi) not in cache:
            cache[o, gi] = _gradients(pyramid.gaussians[o][gi])
        mag, ang = cache[o, gi]
        f = 2.0 ** o
        vec = _descriptor(mag, ang, features.xy[k, 0] / f, features.xy[k, 1] / f,
                          features.scale[k] / f, features.orientation[k])
        if vec is not None:
            keep.append(k)
            descs.append(vec)
    out = features.subset(np.array(keep, dtype=np.int64))
    out.descriptors = np.array(descs).reshape(-1, 128)
    return out


def compute_features(frame, params=None):
    """Detection plus description on one RGB-D frame."""
    pyr = build_pyramid(gray(frame.color))
    return extract_descriptors(detect_keypoints(pyr, frame, params), pyr)


# --- store ---------------------------------------------------------------------

_STORE_MAGIC = b"NRFS"
_STORE_HEADER = struct.Struct("<4sIq")
STORE_RECORD = np.dtype([("frame", "<i8"), ("canonical", "<f8", 3), ("world", "<f8", 3),
                         ("scale", "<f8"), ("orientation", "<f8"), ("descriptor", "<f8", 128)])


class FeatureStore:
    """Append-only history of canonical features; descriptors never change once stored."""

    def __init__(self):
        self._rec = np.zeros(0, dtype=STORE_RECORD)
        self.failed = 0

    def __len__(self):
        return len(self._rec)

    @property
    def canonical(self):
        return self._rec["canonical"]

    @property
    def world(self):
        return self._rec["world"]

    @property
    def descriptors(self):
        return self._rec["descriptor"]

    @property
    def frame(self):
        return self._rec["frame"]

    @property
    def scale(self):
        return self._rec["scale"]

    @property
    def orientation(self):
        return self._rec["orientation"]

    def frame_ids(self):
        return np.unique(self._rec["frame"])

    def indices_for_frame(self, frame_id):
        return np.nonzero(self._rec["frame"] == frame_id)[0]

    def append(self, frame_id, canonical, world, scale, orientation, descriptors):
        n = len(canonical)
        rec = np.zeros(n, dtype=STORE_RECORD)
        rec["frame"] = frame_id
        rec["canonical"] = canonical
        rec["world"] = world
        rec["scale"] = scale
        rec["orientation"] = orientation
        rec["descriptor"] = descriptors
        self._rec = np.concatenate([self._rec, rec])
        return np.arange(len(self._rec) - n, len(self._rec))

    def save(self, path):
        with open(path, "wb") as f:
            f.write(_STORE_HEADER.pack(_STORE_MAGIC, 1, len(self._rec)))
            f.write(self._rec.tobytes())

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if len(data) < _STORE_HEADER.size:
            raise ValueError(f"{path}: truncated feature store")
        magic, version, n = _STORE_HEADER.unpack_from(data)
        if magic != _STORE_MAGIC or version != 1:
            raise ValueError(f"{path}: not a feature store")
        body = data[_STORE_HEADER.size:]
        if len(body) != n * STORE_RECORD.itemsize:
            raise ValueError(f"{path}: expected {n} records")
        store = cls()
        store._rec = np.frombuffer(body, dtype=STORE_RECORD).copy()
        return store


def lift_and_store(store, features, volume, pose, buffer=None):
    """Map keypoints to canonical space through the inverse warp and append them.

    Seeds come from the rendered canonical buffer where it covers the
    keypoint, else from the rigid inverse. Failed inversions are dropped and
    counted in ``store.failed``. Returns the new store indices.
    """
    if len(features) == 0:
        return np.zeros(0, dtype=np.int64)
    seeds = pose.inverse().apply(features.world)
    if buffer is not None:
        h, w = buffer.depth.shape
        u = np.clip(np.rint(features.xy[:, 0]).astype(int), 0, w - 1)
        v = np.clip(np.rint(features.xy[:, 1]).astype(int), 0, h - 1)
        hit = buffer.valid[v, u]
        seeds[hit] = buffer.canonical[v[hit], u[hit]]
    inside = volume.contains(seeds)
    ok = np.zeros(len(features), dtype=bool)
    canon = np.zeros_like(seeds)
    if np.any(inside):
        x, good = invert_warp_points(volume, pose, features.world[inside], seeds[inside])
        canon[inside] = x
        ok[inside] = good
    store.failed += int((~ok).sum())
    if not np.any(ok):
        return np.zeros(0, dtype=np.int64)
    return store.append(features.frame_id, canon[ok], features.world[ok], features.scale[ok],
                        features.orientation[ok], features.descriptors[ok])


# --- matching --------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureMatch:
    source: int      # store index
    target: int      # index into the current FeatureSet
    distance: float
    frame: int       # history frame of the source


def mutual_best(dist):
    """Pairs (i, j) with j the nearest of i and i the nearest of j."""
    if dist.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    best_j = np.argmin(dist, axis=1)
    best_i = np.argmin(dist, axis=0)
    i = np.nonzero(best_i[best_j] == np.arange(dist.shape[0]))[0]
    return i, best_j[i]


def match_features(current, store, volume, prev_pose, intrinsics, params=None):
    """Matches of the current keypoints against every past frame in the store.

    History features are moved into the previous frame by the current
    deformation and ``prev_pose`` before the screen-space and 3D checks.
    Returns ``{frame_id: [FeatureMatch, ...]}``.
    """
    params = params or FeatureParams()
    out = {}
    if len(current) == 0 or len(store) == 0:
        return out
    for fid in store.frame_ids():
        idx = store.indices_for_frame(fid)
        dist = cdist(store.descriptors[idx], current.descriptors)
        si, tj = mutual_best(dist)
        d = dist[si, tj]
        src = idx[si]
        order = np.lexsort((src, d))[:params.max_candidates]
        order = order[:params.max_matches]
        src, tj, d = src[order], tj[order], d[order]
        keep = d <= params.tau_f
        inside = volume.contains(store.canonical[src])
        warped = np.zeros((len(src), 3))
        if np.any(inside):
            warped[inside] = warp_points(volume, prev_pose, store.canonical[src[inside]])
        keep &= inside
        u, v, z = intrinsics.project(warped)
        with np.errstate(invalid="ignore"):
            px = np.hypot(u - current.xy[tj, 0], v - current.xy[tj, 1])
            keep &= (z > 0) & (px <= params.tau_px)
        keep &= np.linalg.norm(warped - current.world[tj], axis=1) <= params.tau_3d
        out[int(fid)] = [FeatureMatch(int(s), int(t), float(dd), int(fid))
                         for s, t, dd in zip(src[keep], tj[keep], d[keep])]
    return out


def flatten_matches(per_frame):
    return [m for fid in sorted(per_frame) for m in per_frame[fid]]


def write_keypoint_overlay(path, color, features, radius=3):
    """Debug image: keypoints drawn as red crosses over the frame."""
    img = np.array(color, dtype=np.uint8, copy=True)
    h, w = img.shape[:2]
    for x, y in np.rint(features.xy).astype(int):
        for k in range(-radius, radius + 1):
            if 0 <= y < h and 0 <= x + k < w:
                img[y, x + k] = (255, 0, 0)
            if 0 <= y + k < h and 0 <= x < w:
                img[y + k, x] = (255, 0, 0)
    write_ppm(path, img)


__all__ = [
    "FeatureParams", "Pyramid", "FeatureSet", "FeatureStore", "FeatureMatch", "build_pyramid",
    "detect_keypoints", "extract_descriptors", "compute_features", "lift_and_store", "match_features",
    "mutual_best", "flatten_matches", "write_keypoint_overlay",
]
