"""Alternating position / rotation minimisation and its coarse-to-fine driver."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from ..volume import CORNER_OFFSETS, DeformableVolume, interpolate, trilinear_anchors_batch
from .energy import build_data_system, evaluate_energy, laplacian, regularizer_rhs
from .pcg import pcg_solve
from .rotations import apply_rotation_update

log = logging.getLogger(__name__)

# energy changes below this per residual term (about (1e-12 m)^2) are float noise
ROUNDOFF_PER_TERM = 1e-24


@dataclass
class FlipFlopResult:
    trace: list = field(default_factory=list)       # one dict per evaluation
    anomalies: list = field(default_factory=list)   # iterations where the energy rose
    pcg_iterations: int = 0
    frozen: int = 0                                  # nodes held fixed (unconstrained components)

    @property
    def initial_energy(self):
        return self.trace[0]["E_total"] if self.trace else 0.0

    @property
    def final_energy(self):
        return self.trace[-1]["E_total"] if self.trace else 0.0


def free_mask(lap, constrained):
    """Nodes in a connected component that holds at least one constraint."""
    n = lap.shape[0]
    if n == 0:
        return np.zeros(0, dtype=bool)
    _, labels = connected_components(lap, directed=False)
    has = np.zeros(labels.max() + 1, dtype=bool)
    has[labels[constrained]] = True
    return has[labels]


def flip_flop_solve(volume, pose, corr, params, level=0, trace_sink=None):
    """Minimise the alignment energy over the active positions and rotations in place.

    The position system matrix only depends on the constraints and the active
    set, so it is assembled once; each iteration rebuilds the right-hand side
    for the current rotations.
    """
    result = FlipFlopResult()
    e = evaluate_energy(volume, pose, corr, params)
    _record(result, trace_sink, level, 0, e, 0)
    if len(corr) == 0 or e.total == 0.0:
        return result

    data = build_data_system(volume, pose, corr, params)
    lap, edges = laplacian(volume, data)
    A = (2.0 * params.w_r * sp.kron(lap, sp.identity(3), format="csr") + data.BtB).tocsr()
    free = free_mask(lap, data.constrained)
    result.frozen = int((~free).sum())
    # unconstrained components share no edges or rows with free nodes, so no coupling term
    fidx = (3 * np.nonzero(free)[0][:, None] + np.arange(3)).ravel()
    A_ff = A[fidx][:, fidx].tocsr()
    free_nodes = data.nodes[free]

    floor = ROUNDOFF_PER_TERM * (data.BtB.shape[0] + len(corr) + 3 * len(edges))
    prev = e.total
    for it in range(1, params.flip_flop_iters + 1):
        b_reg, _ = regularizer_rhs(volume, data, edges, params)
        b = data.Btr + b_reg
        x0 = volume.positions[free_nodes].ravel()
        # solve for the increment so the tolerance is relative to the current residual
        r0 = b[fidx] - A_ff @ x0
        sol = pcg_solve(A_ff, r0, None, tol=params.pcg_tol, max_iters=params.pcg_max_iters)
        volume.positions[free_nodes] = (x0 + sol.x).reshape(-1, 3)
        result.pcg_iterations += sol.iterations
        apply_rotation_update(volume, free_mask_to_grid(volume, free_nodes))
        e = evaluate_energy(volume, pose, corr, params)
        _record(result, trace_sink, level, it, e, sol.iterations)
        if e.total > prev + 1e-9 * prev + floor:
            log.warning("level %d iteration %d: energy rose from %.6g to %.6g", level, it, prev, e.total)
            result.anomalies.append(it)
        if prev - e.total < params.rel_tol * prev:
            break
        prev = e.total
    return result


def free_mask_to_grid(volume, nodes):
    m = np.zeros(volume.n_points, dtype=bool)
    m[nodes] = True
    return m & volume.active


def _record(result, sink, level, it, e, pcg_its):
    row = {"level": level, "iteration": it, **e.as_dict(), "pcg_iterations": pcg_its}
    result.trace.append(row)
    if sink is not None:
        sink.write(json.dumps(row) + "\n")


# --- hierarchy ----------------------------------------------------------------

@dataclass
class Level:
    volume: DeformableVolume
    initial_positions: np.ndarray   # positions right after restriction


def coarsen(volume, corr):
    """Half-resolution copy of the deformation with its active set and initial state."""
    dims = np.array(volume.dims)
    if np.any(dims < 3):
        raise ValueError(f"grid {tuple(dims)} is too small for another level (coarsest must be at least 2^3)")
    cdims = dims // 2 + 1
    coarse = DeformableVolume(tuple(int(d) for d in cdims), 2.0 * volume.voxel_size, volume.origin)

    fine_ijk = volume.index_to_ijk(np.nonzero(volume.active)[0])
    base = np.minimum(fine_ijk // 2, cdims - 2)
    corners = (base[:, None, :] + CORNER_OFFSETS[None]).reshape(-1, 3)
    coarse.active[coarse.ijk_to_index(corners)] = True
    if len(corr):
        idx, w = trilinear_anchors_batch(coarse, corr.source)
        coarse.active[idx[w > 0]] = True

    canon_c = coarse.canonical_positions()
    lo = volume.origin
    hi = volume.upper_corner
    disp = volume.positions - volume.canonical_positions()
    coarse.positions = canon_c + interpolate(volume, disp, np.clip(canon_c, lo, hi))
    near = volume.ijk_to_index(np.minimum(2 * coarse.index_to_ijk(np.arange(coarse.n_points)), dims - 1))
    coarse.rotations = volume.rotations[near].copy()
    return coarse


def build_hierarchy(volume, corr, levels):
    """Levels from fine (index 0, the input volume itself) to coarse."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    out = [Level(volume, volume.positions.copy())]
    for _ in range(levels - 1):
        c = coarsen(out[-1].volume, corr)
        out.append(Level(c, c.positions.copy()))
    return out


def prolongate(coarse_level, fine):
    """Add the coarse position increment to the fine active points; copy nearest rotations."""
    coarse = coarse_level.volume
    delta = np.where(coarse.active[:, None], coarse.positions - coarse_level.initial_positions, 0.0)
    nodes = np.nonzero(fine.active)[0]
    if len(nodes) == 0:
        return
    fine.positions[nodes] += interpolate(coarse, delta, fine.canonical_positions(nodes))
    ijk = fine.index_to_ijk(nodes)
    cijk = np.minimum((ijk + 1) // 2, np.array(coarse.dims) - 1)
    fine.rotations[nodes] = coarse.rotations[coarse.ijk_to_index(cijk)]


def solve_coarse_to_fine(volume, pose, corr, params, trace_sink=None):
    """Flip-flop on every level from coarsest to finest; returns one result per level (fine first)."""
    levels = build_hierarchy(volume, corr, params.levels)
    results = [None] * len(levels)
    for k in range(len(levels) - 1, -1, -1):
        if k < len(levels) - 1:
            prolongate(levels[k + 1], levels[k].volume)
        results[k] = flip_flop_solve(levels[k].volume, pose, corr, params, level=k, trace_sink=trace_sink)
    return results
