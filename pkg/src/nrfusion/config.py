"""Flat key=value run configuration with every default pinned."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .camera import parse_key_values
from .correspond import CorrespondenceParams
from .features import FeatureParams
from .fusion import FusionParams
from .solver import SolverParams


@dataclass
class Config:
    # grid; origin "auto" centres the grid on the first frame's depth points
    grid_dims: tuple = (64, 64, 64)
    voxel_size: float = 0.01
    origin: str = "auto"
    # energy weights and solver
    w_d: float = 1.0
    w_s: float = 0.5
    w_r: float = 5.0
    flip_flop_iters: int = 4
    levels: int = 3
    pcg_tol: float = 1e-4
    pcg_max_iters: int = 50
    rel_tol: float = 1e-6
    reassociations: int = 3
    absorb_rigid: bool = True    # move the field's rigid part into the global pose after each solve
    # dense correspondences
    eps_d: float = 0.05
    eps_n: float = 0.5
    eps_v: float = 0.8
    # global pose
    icp_max_iters: int = 20
    icp_tol: float = 1e-6
    # fusion; mu = 0 means 4 voxels
    mu: float = 0.0
    w_max: float = 64.0
    k_min: int = 3
    # features
    use_features: bool = True
    max_keypoints: int = 150
    contrast: float = 0.04
    edge_ratio: float = 10.0
    tau_f: float = 0.7
    tau_px: float = 48.0
    tau_3d: float = 0.10
    max_frames: int = 0          # 0 = all

    def __post_init__(self):
        if len(self.grid_dims) != 3 or min(self.grid_dims) < 2:
            raise ValueError("grid_dims: need three sizes >= 2")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.reassociations < 1:
            raise ValueError("reassociations must be >= 1")
        if self.origin != "auto":
            _parse_floats(self.origin, 3, "origin")

    # sub-parameter views
    def solver(self):
        return SolverParams(self.w_d, self.w_s, self.w_r, self.flip_flop_iters, self.levels,
                            self.pcg_tol, self.pcg_max_iters, self.rel_tol)

    def correspondence(self):
        return CorrespondenceParams(self.eps_d, self.eps_n, self.eps_v)

    def fusion(self):
        return FusionParams(self.mu if self.mu > 0 else None, self.w_max, 1.0, self.k_min)

    def features(self):
        return FeatureParams(self.contrast, self.edge_ratio, self.max_keypoints, 0.8,
                             self.tau_f, self.tau_px, self.tau_3d)

    def origin_vector(self):
        return None if self.origin == "auto" else _parse_floats(self.origin, 3, "origin")

    @classmethod
    def from_text(cls, text, source="<config>"):
        kv = parse_key_values(text, source)
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in kv.items():
            if key not in fields:
                raise ValueError(f"{source}: unknown key {key!r}")
            values[key] = _convert(fields[key], raw, key)
        return cls(**values)

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text(), str(path))

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def _parse_floats(raw, n, key):
    parts = [p for p in str(raw).replace(" ", "").split(",") if p]
    if len(parts) != n:
        raise ValueError(f"{key}: expected {n} comma-separated numbers, got {raw!r}")
    return tuple(float(p) for p in parts)


def _convert(f, raw, key):
    default = f.default
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(x) for x in _parse_floats(raw, len(default), key))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"{key}: cannot parse {raw!r}") from None
