"""Closed-form per-node rotation update for fixed positions."""

from __future__ import annotations

import numpy as np

from .energy import active_edges

_RANK_EPS = 1e-12


def best_rotations(cov):
    """Rotations maximising tr(R' C) for a batch of 3x3 matrices C (proper, det +1)."""
    u, s, vt = np.linalg.svd(cov)
    det = np.linalg.det(u @ vt)
    d = np.ones((len(cov), 3))
    d[:, 2] = np.sign(det)
    d[d[:, 2] == 0, 2] = 1.0
    return (u * d[:, None, :]) @ vt, s


def update_rotations(volume, active=None):
    """Optimal rotation of every active node given current positions.

    Returns ``(nodes, matrices)``. Nodes whose neighbour covariance has rank
    below 2 keep their previous rotation.
    """
    active = volume.active if active is None else active
    nodes = np.nonzero(active)[0]
    prev = volume.rotation_matrices(nodes)
    if len(nodes) == 0:
        return nodes, prev
    local = -np.ones(volume.n_points, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    edges = active_edges(volume, active)
    cov = np.zeros((len(nodes), 3, 3))
    if len(edges):
        i, j = edges[:, 0], edges[:, 1]
        canon = volume.canonical_positions()
        e = volume.positions[i] - volume.positions[j]
        d = canon[i] - canon[j]
        # e_ji d_ji' equals e_ij d_ij', so both endpoints get the same term
        outer = e[:, :, None] * d[:, None, :]
        np.add.at(cov, local[i], outer)
        np.add.at(cov, local[j], outer)
    rots, s = best_rotations(cov)
    degenerate = s[:, 1] <= _RANK_EPS * np.maximum(s[:, 0], 1e-300)
    rots[degenerate] = prev[degenerate]
    return nodes, rots


def apply_rotation_update(volume, active=None):
    nodes, rots = update_rotations(volume, active)
    volume.set_rotation_matrices(nodes, rots)
    return nodes, rots


def rigid_fit(src, dst, weights=None):
    """Least-squares rotation Q and translation d with Q src + d ~ dst."""
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    ws = w.sum()
    cs = (w[:, None] * src).sum(axis=0) / ws
    cd = (w[:, None] * dst).sum(axis=0) / ws
    cov = ((dst - cd) * w[:, None]).T @ (src - cs)
    q, _ = best_rotations(cov[None])
    q = q[0]
    return q, cd - q @ cs


def absorb_rigid_motion(volume, pose, active=None):
    """Move the rigid part of the active field into the global pose; the warp is unchanged.

    With S(x) = R_p (sum a_i t_i) + T_p and the field's best rigid fit
    t_i ~ Q that_i + d, the field becomes Q'(t_i - d) and the pose
    (R_p Q, R_p d + T_p). Returns the new pose.
    """
    from ..volume import GlobalPose

    active = volume.active if active is None else active
    nodes = np.nonzero(active)[0]
    if len(nodes) < 3:
        return pose
    q, d = rigid_fit(volume.canonical_positions(nodes), volume.positions[nodes])
    volume.positions[nodes] = (volume.positions[nodes] - d) @ q
    volume.set_rotation_matrices(nodes, np.einsum("ba,kbc->kac", q, volume.rotation_matrices(nodes)))
    return GlobalPose(pose.rotation @ q, pose.rotation @ d + pose.translation).orthonormalize()
