"""Pinhole intrinsics, RGB-D frames and the on-disk frame format.

A frame directory holds ``sequence.txt`` (key=value intrinsics) and, per
frame, ``<stem>.pgm`` (binary 16-bit depth in millimetres, 0 = invalid,
big-endian samples as Netpbm prescribes) and ``<stem>.ppm`` (binary 8-bit
RGB) sharing a numeric stem.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        self.width, self.height = int(self.width), int(self.height)

    def project(self, points):
        points = np.asarray(points, dtype=float)
        z = points[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * points[..., 0] / z + self.cx
            v = self.fy * points[..., 1] / z + self.cy
        return u, v, z

    def unproject(self, u, v, z):
        """Camera-space points at pixel coordinates ``(u, v)`` and depth ``z``."""
        z = np.asarray(z, dtype=float)
        return np.stack([(np.asarray(u) - self.cx) / self.fx * z, (np.asarray(v) - self.cy) / self.fy * z, z],
                        axis=-1)

    def rays(self):
        """Ray directions (H, W, 3) with z = 1 through pixel centres (integer coordinates)."""
        u, v = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


@dataclass
class Frame:
    depth: np.ndarray          # (H, W) metres, 0 = invalid
    color: np.ndarray          # (H, W, 3) uint8
    intrinsics: Intrinsics
    index: int = 0

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.depth.shape != (h, w) or self.color.shape[:2] != (h, w):
            raise ValueError(f"frame {self.index}: image size does not match intrinsics {w}x{h}")


def gray(color):
    """ITU-R 601 luma in [0, 1]."""
    c = np.asarray(color, dtype=float) / 255.0
    return 0.299 * c[..., 0] + 0.587 * c[..., 1] + 0.114 * c[..., 2]


# --- netpbm -----------------------------------------------------------------

def _read_netpbm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise ValueError(f"{path}: truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1  # single whitespace before the raster
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise ValueError(f"{path}: unsupported netpbm type {magic!r}")
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h * channels
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if raster.size != count:
        raise ValueError(f"{path}: truncated raster")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return raster.reshape(shape).copy(), maxval


def write_pgm16(path, image):
    image = np.asarray(image)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(np.ascontiguousarray(image, dtype=">u2").tobytes())


def write_ppm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())


def read_pgm16(path):
    img, _ = _read_netpbm(path)
    return img


def read_ppm(path):
    img, maxval = _read_netpbm(path)
    if maxval != 255:
        img = np.rint(img.astype(float) * 255.0 / maxval).astype(np.uint8)
    return img.astype(np.uint8)


# --- sequences ----------------------------------------------------------------

def parse_key_values(text, source="<text>"):
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_sequence(directory, frames, digits=6):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    intr = frames[0].intrinsics
    lines = [f"fx={intr.fx!r}", f"fy={intr.fy!r}", f"cx={intr.cx!r}", f"cy={intr.cy!r}",
             f"width={intr.width}", f"height={intr.height}", "depth_unit=0.001",
             "frames=" + ",".join(f"{fr.index:0{digits}d}" for fr in frames)]
    (d / "sequence.txt").write_text("\n".join(lines) + "\n")
    for fr in frames:
        stem = f"{fr.index:0{digits}d}"
        mm = np.clip(np.rint(fr.depth * 1000.0), 0, 65535).astype(np.uint16)
        write_pgm16(d / f"{stem}.pgm", mm)
        write_ppm(d / f"{stem}.ppm", fr.color)


def read_intrinsics(directory):
    d = Path(directory)
    path = d / "sequence.txt"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    kv = parse_key_values(path.read_text(), str(path))
    try:
        intr = Intrinsics(float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
                          int(kv["width"]), int(kv["height"]))
    except KeyError as e:
        raise ValueError(f"{path}: missing key {e.args[0]}") from None
    return intr, kv


def list_frames(directory):
    """Frame stems in order: the ``frames`` key if present, else numeric stems on disk."""
    d = Path(directory)
    _, kv = read_intrinsics(d)
    if kv.get("frames"):
        return [s for s in kv["frames"].split(",") if s]
    stems = {p.stem for p in d.glob("*.pgm") if p.stem.isdigit()}
    return sorted(stems, key=int)


def read_frames(directory):
    """Yield frames of a sequence directory in order; a missing or corrupt file names its index."""
    d = Path(directory)
    intr, kv = read_intrinsics(d)
    unit = float(kv.get("depth_unit", "0.001"))
    for pos, stem in enumerate(list_frames(d)):
        try:
            depth = read_pgm16(d / f"{stem}.pgm").astype(float) * unit
            color = read_ppm(d / f"{stem}.ppm")
            yield Frame(depth, color, intr, int(stem))
        except (OSError, ValueError) as e:
            raise ValueError(f"frame {pos} ({stem}): {e}") from e
