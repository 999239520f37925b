import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrfusion.camera import Frame, Intrinsics
from nrfusion.correspond import (DENSE, SPARSE, CorrespondenceParams, Correspondences, backproject_depth,
                                 confidence, find_dense_correspondences, kernel, sparse_to_constraints)
from nrfusion.features import FeatureMatch, FeatureSet, FeatureStore
from nrfusion.fixtures import render, static_sphere_scene
from nrfusion.isosurface import GeometryBuffer

P = CorrespondenceParams()
INTR = Intrinsics(200.0, 200.0, 39.5, 29.5, 80, 60)


def plane_frame(z=1.0):
    depth = np.full((INTR.height, INTR.width), z)
    return Frame(depth, np.zeros(depth.shape + (3,), dtype=np.uint8), INTR)


def test_kernel_values():
    assert kernel(0.0, 0.3) == 1.0
    assert kernel(0.3, 0.3) == 0.0
    assert kernel(0.6, 0.3) == -1.0


def test_confidence_exact_values():
    assert confidence(0.0, 1.0, 1.0, P) == 1.0
    assert confidence(P.eps_d, 1.0, 1.0, P) == 4.0 / 9.0
    assert confidence(0.0, 1.0 - P.eps_n, 1.0, P) == 4.0 / 9.0
    assert confidence(0.0, 1.0, 1.0 - P.eps_v, P) == 4.0 / 9.0
    assert confidence(2 * P.eps_d, 1.0, 1.0, P) == 0.0
    assert confidence(0.0, 1.0 - 1.01 * P.eps_n, 1.0, P) == 0.0
    assert confidence(0.0, 1.0, 1.0 - 1.01 * P.eps_v, P) == 0.0


@given(st.floats(0, 0.2), st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 0.05))
@settings(max_examples=200)
def test_confidence_range_and_monotone(d, nd, vd, step):
    w = confidence(d, nd, vd, P)
    assert 0.0 <= w <= 1.0
    assert confidence(d + step, nd, vd, P) <= w
    assert confidence(d, nd - step, vd, P) <= w
    assert confidence(d, nd, vd - step, P) <= w


def test_silhouette_samples_always_excluded():
    vd = np.linspace(-1, 1 - P.eps_v, 50)
    assert np.all(confidence(np.zeros(50), np.ones(50), vd, P)[:-1] == 0)


def test_params_must_be_positive():
    with pytest.raises(ValueError):
        CorrespondenceParams(eps_d=0.0)


def test_backproject_plane_and_principal_point():
    frame = plane_frame(1.0)
    pts, nrm, valid, nvalid = backproject_depth(frame)
    assert valid.all()
    assert np.allclose(nrm[nvalid], [0, 0, -1], atol=1e-6)
    assert not nvalid[0].any() and not nvalid[:, -1].any()
    f = plane_frame(2.5)
    cx, cy = 40, 30
    intr = Intrinsics(200.0, 200.0, cx, cy, 80, 60)
    pts, *_ = backproject_depth(Frame(f.depth, f.color, intr))
    assert np.allclose(pts[cy, cx], [0, 0, 2.5])


def test_invalid_neighbour_invalidates_normal():
    frame = plane_frame(1.0)
    frame.depth[10, 10] = 0.0
    _, _, valid, nvalid = backproject_depth(frame)
    assert not valid[10, 10]
    assert not nvalid[10, 11] and not nvalid[9, 10] and not nvalid[10, 9] and not nvalid[11, 10]


def test_sphere_normals_match_analytic():
    frames, _ = render(static_sphere_scene(1))
    pts, nrm, _, nvalid = backproject_depth(frames[0])
    centre = np.array([0.0, 0.0, 1.0])
    outward = pts - centre
    outward /= np.linalg.norm(outward, axis=-1, keepdims=True)
    # interior pixels: away from the silhouette
    ray = -pts / np.maximum(np.linalg.norm(pts, axis=-1, keepdims=True), 1e-12)
    interior = nvalid & (np.sum(outward * ray, axis=-1) > 0.3)
    cos = np.sum(nrm[interior] * outward[interior], axis=1)
    assert interior.sum() > 1000
    assert np.degrees(np.arccos(np.clip(cos.min(), -1, 1))) < 2.0


def model_buffer(frame):
    pts, nrm, valid, nvalid = backproject_depth(frame)
    depth = np.where(nvalid, pts[..., 2], np.inf)
    return GeometryBuffer(depth, pts, nrm, pts.copy(), np.where(nvalid, 0, -1))


def test_dense_correspondences_self_match():
    frame = plane_frame(1.0)
    pts, nrm, _, nvalid = backproject_depth(frame)
    corr = find_dense_correspondences(model_buffer(frame), pts, nrm, nvalid, INTR, P)
    assert len(corr) == nvalid.sum()
    assert np.all(corr.kind == DENSE)
    assert np.allclose(corr.target, corr.source)
    # weight from the view term only: off-axis pixels are slightly below 1
    view = np.sum(corr.normal * -corr.target / np.linalg.norm(corr.target, axis=1)[:, None], axis=1)
    expect = ((1 + 1 + (1 - (1 - view) / P.eps_v)) / 3) ** 2
    assert np.allclose(corr.weight, expect, atol=1e-12)


def test_dense_correspondences_pruned_beyond_eps_d():
    frame = plane_frame(1.0)
    far = plane_frame(1.0 + 2 * P.eps_d)
    pts, nrm, _, nvalid = backproject_depth(far)
    corr = find_dense_correspondences(model_buffer(frame), pts, nrm, nvalid, INTR, P)
    assert len(corr) == 0


def test_correspondence_container_helpers():
    a = Correspondences(np.array([DENSE, SPARSE], dtype=np.int8), np.zeros((2, 3)), np.ones((2, 3)),
                        np.zeros((2, 3)), np.array([0.5, 1.0]))
    both = Correspondences.concat(a, Correspondences.empty(), a)
    assert len(both) == 4 and both.n_dense == 2 and both.n_sparse == 2
    assert len(both.subset(both.kind == SPARSE)) == 2
    assert len(Correspondences.concat()) == 0


def test_sparse_constraints_from_matches():
    store = FeatureStore()
    assert len(sparse_to_constraints([], store, None)) == 0
    canon = np.array([[0.0, 0.0, 1.0], [0.1, 0.0, 1.0]])
    store.append(0, canon, canon, np.ones(2), np.zeros(2), np.eye(2, 128))
    cur = FeatureSet(np.zeros((2, 2)), np.zeros(2, int), np.zeros(2), np.ones(2), np.zeros(2), np.ones(2),
                     canon + 0.01, np.eye(2, 128), 1)
    corr = sparse_to_constraints([FeatureMatch(1, 0, 0.0, 0), FeatureMatch(0, 1, 0.0, 0)], store, cur)
    assert np.all(corr.kind == SPARSE) and np.all(corr.weight == 1)
    assert np.allclose(corr.source, canon[[1, 0]])
    assert np.allclose(corr.target, canon + 0.01)
