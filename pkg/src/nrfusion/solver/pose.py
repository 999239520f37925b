"""Rigid global pose by projective point-to-plane ICP against the rendered model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from ..correspond import associate
from ..volume import GlobalPose

log = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 6
RCOND = 1e-3


@dataclass
class PoseResult:
    pose: object
    rms: list = field(default_factory=list)   # point-to-plane RMS per iteration
    iterations: int = 0
    n_correspondences: int = 0
    degraded: bool = False


def _rms(w, r):
    sw = np.sum(w)
    return float(np.sqrt(np.sum(w * r * r) / sw)) if sw > 0 else 0.0


def estimate_global_pose(buffer, frame_points, frame_normals, frame_nvalid, intrinsics, params,
                         prev_pose, max_iters=20, tol=1e-6):
    """Refine ``prev_pose`` so the model rendered in ``buffer`` aligns with the frame.

    ``buffer`` must have been rendered with ``prev_pose``. Fewer than six
    usable correspondences leave the pose unchanged and flag the result as
    degraded.
    """
    valid = buffer.valid
    inv = prev_pose.inverse()
    y = inv.apply(buffer.points[valid])
    ny = buffer.normals[valid] @ prev_pose.rotation   # R' n, row-wise
    pose = prev_pose.copy()
    result = PoseResult(pose)
    last = None
    for it in range(max_iters + 1):
        p = pose.apply(y)
        n = ny @ pose.rotation.T
        w, q, nq = associate(p, n, intrinsics, frame_points, frame_normals, frame_nvalid, params)
        keep = w > 0
        count = int(keep.sum())
        if count < MIN_CORRESPONDENCES:
            if it == 0:
                log.warning("pose: %d correspondences, keeping previous pose", count)
                result.degraded = True
                result.n_correspondences = count
            elif last is not None:
                pose = last
            break
        p, q, nq, w = p[keep], q[keep], nq[keep], w[keep]
        r = np.sum((p - q) * nq, axis=1)
        rms = _rms(w, r)
        if result.rms and rms > result.rms[-1]:
            # the linearised step made things worse: keep the previous estimate
            pose = last
            break
        result.n_correspondences = count
        converged = bool(result.rms) and result.rms[-1] - rms <= tol * result.rms[-1]
        result.rms.append(rms)
        if converged or rms == 0.0 or it == max_iters:
            break
        J = np.concatenate([np.cross(p, nq), nq], axis=1)
        sw = np.sqrt(w)
        # directions the data cannot see (e.g. spinning a sphere) are left alone
        x, *_ = np.linalg.lstsq(J * sw[:, None], -r * sw, rcond=RCOND)
        last = pose.copy()
        dr = Rotation.from_rotvec(x[:3]).as_matrix()
        pose = GlobalPose(dr @ pose.rotation, dr @ pose.translation + x[3:]).orthonormalize()
        result.iterations = it + 1
    result.pose = pose
    return result
