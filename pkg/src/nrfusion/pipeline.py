"""Per-frame reconstruction loop: track the pose, solve the deformation, fuse, grow."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .correspond import Correspondences, backproject_depth, find_dense_correspondences, sparse_to_constraints
from .features import FeatureStore, compute_features, flatten_matches, lift_and_store, match_features
from .fusion import advance_ages, expand_grid, integrate_frame
from .isosurface import extract_mesh, rasterize, rewarp_mesh
from .solver import absorb_rigid_motion, estimate_global_pose, solve_coarse_to_fine
from .volume import GlobalPose, create_grid, trilinear_anchors_batch

log = logging.getLogger(__name__)


@dataclass
class FrameReport:
    frame: int
    pose: dict
    n_dense: int = 0
    n_sparse: int = 0
    n_active: int = 0
    n_keypoints: int = 0
    n_stored: int = 0
    pose_degraded: bool = False
    icp_rms: list = field(default_factory=list)
    energy_initial: float = 0.0
    energy_final: float = 0.0
    anomalies: int = 0
    fused: int = 0
    added: int = 0
    isolated: int = 0
    seconds: float = 0.0

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True)


def auto_origin(frame, dims, voxel_size):
    """Grid origin centring the grid on the median observed point of a frame."""
    pts = frame.intrinsics.rays()[frame.depth > 0] * frame.depth[frame.depth > 0][:, None]
    if len(pts) == 0:
        raise ValueError(f"frame {frame.index}: no valid depth to place the grid")
    centre = np.median(pts, axis=0)
    return centre - 0.5 * voxel_size * (np.array(dims) - 1)


def filter_active(volume, corr):
    """Drop constraints that have a weighted anchor outside the active set or the grid."""
    if len(corr) == 0:
        return corr
    inside = volume.contains(corr.source)
    keep = inside.copy()
    if np.any(inside):
        idx, w = trilinear_anchors_batch(volume, corr.source[inside])
        keep[inside] = np.all(volume.active[idx] | (w == 0), axis=1)
    return corr.subset(keep)


class Reconstructor:
    """Incremental non-rigid reconstruction over a stream of RGB-D frames.

    Per frame: extract and render the model, estimate the global pose, match
    features, then repeat {render, associate, coarse-to-fine solve}; finally
    advance ages, store features, fuse and grow the active set.
    """

    def __init__(self, config=None, trace_sink=None):
        self.config = config or Config()
        self.trace_sink = trace_sink
        self.volume = None
        self.pose = GlobalPose()
        self.store = FeatureStore()
        self.reports = []
        self.n_frames = 0

    def _init_volume(self, frame):
        cfg = self.config
        origin = cfg.origin_vector()
        if origin is None:
            origin = auto_origin(frame, cfg.grid_dims, cfg.voxel_size)
        self.volume = create_grid(cfg.grid_dims, cfg.voxel_size, origin)

    def process(self, frame):
        t0 = time.perf_counter()
        if self.volume is None:
            self._init_volume(frame)
            report = self._first_frame(frame)
        else:
            report = self._track_frame(frame)
        report.n_active = int(self.volume.active.sum())
        report.seconds = time.perf_counter() - t0
        self.reports.append(report)
        self.n_frames += 1
        log.info("frame %d: dense %d sparse %d active %d E %.4g -> %.4g (%.2fs)", frame.index,
                 report.n_dense, report.n_sparse, report.n_active, report.energy_initial,
                 report.energy_final, report.seconds)
        return report

    def _features(self, frame):
        if not self.config.use_features:
            return None
        return compute_features(frame, self.config.features())

    def _first_frame(self, frame):
        vol = self.volume
        integrate_frame(vol, frame, self.pose, self.config.fusion(), bootstrap=True)
        grow = expand_grid(vol)
        report = FrameReport(frame.index, self.pose.to_dict(), added=grow.added)
        feats = self._features(frame)
        if feats is not None:
            report.n_keypoints = len(feats)
            report.n_stored = len(lift_and_store(self.store, feats, vol, self.pose))
        return report

    def _track_frame(self, frame):
        cfg = self.config
        vol = self.volume
        cparams = cfg.correspondence()
        sparams = cfg.solver()
        intr = frame.intrinsics
        fpts, fnrm, _, fnv = backproject_depth(frame)

        mesh = extract_mesh(vol, self.pose)
        buffer = rasterize(mesh, intr)
        res = estimate_global_pose(buffer, fpts, fnrm, fnv, intr, cparams, self.pose,
                                   cfg.icp_max_iters, cfg.icp_tol)
        prev_pose = self.pose
        self.pose = res.pose
        report = FrameReport(frame.index, {}, pose_degraded=res.degraded, icp_rms=res.rms)

        feats = self._features(frame)
        sparse = Correspondences.empty()
        if feats is not None:
            report.n_keypoints = len(feats)
            matches = flatten_matches(match_features(feats, self.store, vol, prev_pose, intr,
                                                     cfg.features()))
            sparse = filter_active(vol, sparse_to_constraints(matches, self.store, feats))

        first = None
        last = None
        for _ in range(cfg.reassociations):
            mesh = rewarp_mesh(mesh, vol, self.pose)
            buffer = rasterize(mesh, intr)
            dense = find_dense_correspondences(buffer, fpts, fnrm, fnv, intr, cparams)
            corr = Correspondences.concat(sparse, filter_active(vol, dense))
            report.n_dense, report.n_sparse = corr.n_dense, corr.n_sparse
            results = solve_coarse_to_fine(vol, self.pose, corr, sparams, self.trace_sink)
            report.anomalies += sum(len(r.anomalies) for r in results)
            fine = results[0]
            if first is None:
                first = results[-1].initial_energy
            last = fine.final_energy
        report.energy_initial, report.energy_final = first, last
        if cfg.absorb_rigid:
            self.pose = absorb_rigid_motion(vol, self.pose)

        advance_ages(vol, vol.active.copy())
        if feats is not None:
            mesh = rewarp_mesh(mesh, vol, self.pose)
            buffer = rasterize(mesh, intr)
            report.n_stored = len(lift_and_store(self.store, feats, vol, self.pose, buffer))
        report.fused = integrate_frame(vol, frame, self.pose, cfg.fusion()).updated
        grow = expand_grid(vol)
        report.added, report.isolated = grow.added, grow.isolated
        report.pose = self.pose.to_dict()
        return report

    def canonical_mesh(self):
        return extract_mesh(self.volume, GlobalPose())

    def deformed_mesh(self):
        return extract_mesh(self.volume, self.pose)


def reconstruct(frames, config=None, trace_sink=None, on_frame=None):
    """Run the loop over an iterable of frames; ``on_frame(j, reconstructor)`` after each."""
    rec = Reconstructor(config, trace_sink)
    limit = rec.config.max_frames
    for j, frame in enumerate(frames):
        if limit and j >= limit:
            break
        rec.process(frame)
        if on_frame is not None:
            on_frame(j, rec)
    if rec.n_frames == 0:
        raise ValueError("no frames to reconstruct")
    return rec
