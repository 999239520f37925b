"""Alignment energy over the active set and its normal equations in the positions.

E_total = w_s * E_sparse + w_d * E_dense + w_r * E_reg with

    E_dense  = sum_c w_c * ((S(p_c) - q_c) . n_c)^2
    E_sparse = sum_s w_s' * |S(f_s) - g_s|^2
    E_reg    = sum_{i in M} sum_{j in N_i} |(t_i - t_j) - R_i (that_i - that_j)|^2

where N_i is the 6-neighbourhood of i restricted to the active set M. For
fixed rotations E_total is quadratic in the stacked positions t (node-major,
``3 * k + axis``): E = t'At - 2b't + c.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..correspond import DENSE, SPARSE
from ..volume import trilinear_anchors_batch


class InternalInconsistencyError(RuntimeError):
    """A constraint references a grid point outside the active set."""


@dataclass
class SolverParams:
    w_d: float = 1.0
    w_s: float = 0.5
    w_r: float = 5.0
    flip_flop_iters: int = 4
    levels: int = 3
    pcg_tol: float = 1e-4
    pcg_max_iters: int = 50
    rel_tol: float = 1e-6


@dataclass
class EnergyTerms:
    total: float
    sparse: float
    dense: float
    reg: float

    def as_dict(self):
        return {"E_total": self.total, "E_dense": self.dense, "E_sparse": self.sparse, "E_reg": self.reg}


def constraint_anchors(volume, corr, active=None):
    """Trilinear anchors of constraint sources; raises if a weighted anchor is inactive."""
    if len(corr) == 0:
        return np.zeros((0, 8), dtype=np.int64), np.zeros((0, 8))
    idx, w = trilinear_anchors_batch(volume, corr.source)
    active = volume.active if active is None else active
    bad = (w > 0) & ~active[idx]
    if np.any(bad):
        k = int(np.nonzero(bad.any(axis=1))[0][0])
        raise InternalInconsistencyError(
            f"constraint {k} at {corr.source[k]} has an inactive anchor {idx[k][bad[k]][0]}")
    return idx, w


def active_edges(volume, active=None):
    active = volume.active if active is None else active
    return volume.neighbor_pairs(active)


def edge_rotations(volume, edges):
    """Rotation matrices of both endpoints of each edge, converted once per node."""
    nodes, inv = np.unique(edges, return_inverse=True)
    mats = volume.rotation_matrices(nodes)
    inv = inv.reshape(edges.shape)
    return mats[inv[:, 0]], mats[inv[:, 1]]


def regularizer_energy(volume, active=None, rotation_mats=None):
    """ARAP energy summed over both directions of every active edge."""
    edges = active_edges(volume, active)
    if len(edges) == 0:
        return 0.0
    i, j = edges[:, 0], edges[:, 1]
    canon = volume.canonical_positions()
    d = canon[i] - canon[j]
    e = volume.positions[i] - volume.positions[j]
    if rotation_mats is None:
        ri, rj = edge_rotations(volume, edges)
    else:
        ri, rj = rotation_mats[i], rotation_mats[j]
    ei = e - np.einsum("kab,kb->ka", ri, d)
    ej = -e + np.einsum("kab,kb->ka", rj, d)
    return float(np.sum(ei * ei) + np.sum(ej * ej))


def evaluate_energy(volume, pose, corr, params, active=None):
    """Direct evaluation of all energy terms (independent of the normal equations)."""
    dense = sparse = 0.0
    if len(corr):
        idx, w = constraint_anchors(volume, corr, active)
        warped = pose.apply(np.einsum("kc,kcd->kd", w, volume.positions[idx]))
        res = warped - corr.target
        dm = corr.kind == DENSE
        if np.any(dm):
            dense = float(np.sum(corr.weight[dm] * np.sum(res[dm] * corr.normal[dm], axis=1) ** 2))
        smask = corr.kind == SPARSE
        if np.any(smask):
            sparse = float(np.sum(corr.weight[smask] * np.sum(res[smask] ** 2, axis=1)))
    reg = regularizer_energy(volume, active)
    total = params.w_s * sparse + params.w_d * dense + params.w_r * reg
    return EnergyTerms(total, sparse, dense, reg)


@dataclass
class DataSystem:
    """Constraint part of the normal equations; fixed while the constraints are."""

    nodes: np.ndarray        # grid indices of the unknowns, in order
    local: np.ndarray        # grid index -> unknown index (-1 if not an unknown)
    BtB: sp.csr_matrix       # weighted B'B, 3n x 3n
    Btr: np.ndarray          # weighted B'r
    const: float
    constrained: np.ndarray  # per node: touched by at least one constraint


@dataclass
class NormalEquations:
    """(2 w_r L + B'B) t = b, with E = t'At - 2b't + const."""

    nodes: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    const: float
    laplacian: sp.csr_matrix
    BtB: sp.csr_matrix

    def gradient(self, t):
        return 2.0 * (self.A @ t - self.b)

    def energy(self, t):
        return float(t @ (self.A @ t) - 2.0 * self.b @ t + self.const)


def build_data_system(volume, pose, corr, params, active=None):
    """Weighted least-squares rows of the dense and sparse terms over the active positions."""
    active = volume.active if active is None else active
    nodes = np.nonzero(active)[0]
    n = len(nodes)
    local = -np.ones(volume.n_points, dtype=np.int64)
    local[nodes] = np.arange(n)
    constrained = np.zeros(n, dtype=bool)
    if len(corr) == 0:
        return DataSystem(nodes, local, sp.csr_matrix((3 * n, 3 * n)), np.zeros(3 * n), 0.0, constrained)

    idx, w = constraint_anchors(volume, corr, active)
    rt = pose.rotation.T
    rows, cols, vals, rhs, weights = [], [], [], [], []
    row0 = 0
    dm = np.nonzero(corr.kind == DENSE)[0]
    if len(dm):
        # ((R y + t) - q) . n  =  y . (R' n) - (q - t) . n
        nl = corr.normal[dm] @ pose.rotation
        s = np.sum((corr.target[dm] - pose.translation) * corr.normal[dm], axis=1)
        k = len(dm)
        r = np.repeat(np.arange(k), 24)
        c = (3 * local[idx[dm]][:, :, None] + np.arange(3)).reshape(k, 24)
        v = (w[dm][:, :, None] * nl[:, None, :]).reshape(k, 24)
        rows.append(r + row0)
        cols.append(c.ravel())
        vals.append(v.ravel())
        rhs.append(s)
        weights.append(params.w_d * corr.weight[dm])
        row0 += k
    smask = np.nonzero(corr.kind == SPARSE)[0]
    if len(smask):
        # |R y + t - f| = |y - R'(f - t)|
        g = (corr.target[smask] - pose.translation) @ rt.T
        k = len(smask)
        r = (3 * np.arange(k)[:, None, None] + np.arange(3)[None, None, :]).repeat(8, axis=1)
        c = 3 * local[idx[smask]][:, :, None] + np.arange(3)[None, None, :]
        v = np.broadcast_to(w[smask][:, :, None], (k, 8, 3))
        rows.append(r.ravel() + row0)
        cols.append(c.ravel())
        vals.append(v.ravel())
        rhs.append(g.ravel())
        weights.append(np.repeat(params.w_s * corr.weight[smask], 3))
        row0 += 3 * k
    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    keep = vals != 0
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    B = sp.csr_matrix((vals, (rows, cols)), shape=(row0, 3 * n))
    rhs = np.concatenate(rhs)
    weights = np.concatenate(weights)
    WB = sp.diags(weights) @ B
    BtB = (B.T @ WB).tocsr()
    Btr = WB.T @ rhs
    constrained[np.unique(cols) // 3] = True
    return DataSystem(nodes, local, BtB, Btr, float(np.sum(weights * rhs * rhs)), constrained)


def laplacian(volume, data):
    edges = active_edges(volume, data.local >= 0)
    n = len(data.nodes)
    i, j = data.local[edges[:, 0]], data.local[edges[:, 1]]
    adj = sp.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    adj = adj + adj.T
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return (sp.diags(deg) - adj).tocsr(), edges


def regularizer_rhs(volume, data, edges, params, rotation_mats=None):
    n = len(data.nodes)
    b = np.zeros((n, 3))
    if len(edges) == 0:
        return b.ravel(), 0.0
    i, j = edges[:, 0], edges[:, 1]
    canon = volume.canonical_positions()
    d = canon[i] - canon[j]
    if rotation_mats is None:
        ri, rj = edge_rotations(volume, edges)
        rsum = ri + rj
    else:
        rsum = rotation_mats[i] + rotation_mats[j]
    v = params.w_r * np.einsum("kab,kb->ka", rsum, d)
    np.add.at(b, data.local[i], v)
    np.add.at(b, data.local[j], -v)
    return b.ravel(), float(2.0 * params.w_r * np.sum(d * d))


def build_normal_equations(volume, pose, corr, params, data=None):
    """Stationarity system of E_total in the active positions for the current rotations."""
    if data is None:
        data = build_data_system(volume, pose, corr, params)
    lap, edges = laplacian(volume, data)
    A = (2.0 * params.w_r * sp.kron(lap, sp.identity(3), format="csr") + data.BtB).tocsr()
    b_reg, c_reg = regularizer_rhs(volume, data, edges, params)
    return NormalEquations(data.nodes, A, data.Btr + b_reg, data.const + c_reg, lap, data.BtB)
