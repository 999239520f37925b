import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrfusion.volume import (CORNER_OFFSETS, GlobalPose, InversionFailedError, OutOfBoundsError,
                             create_grid, euler_to_matrix, interpolate, invert_warp, invert_warp_points,
                             load_volume, matrix_to_euler, rotation_from_axis_angle, sample_tsdf,
                             save_volume, trilinear_anchors, trilinear_anchors_batch, warp_point,
                             warp_points)


def small_grid(dims=(5, 4, 6), h=0.1, origin=(0.2, -0.3, 1.0)):
    return create_grid(dims, h, origin)


def oracle_trilinear(vol, values, x):
    """Direct 8-term expansion, written independently of the library."""
    g = (np.asarray(x) - vol.origin) / vol.voxel_size
    i0 = np.minimum(np.floor(g).astype(int), np.array(vol.dims) - 2)
    f = g - i0
    out = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1]) * (f[2] if dz else 1 - f[2])
                i, j, k = i0[0] + dx, i0[1] + dy, i0[2] + dz
                out = out + w * values[i + vol.dims[0] * (j + vol.dims[1] * k)]
    return out


def random_interior(vol, rng, n):
    return vol.origin + rng.random((n, 3)) * (np.array(vol.dims) - 1) * vol.voxel_size


def test_create_grid_defaults():
    vol = create_grid((2, 2, 2), 1.0, (0, 0, 0))
    idx = vol.ijk_to_index([1, 1, 1])
    assert np.allclose(vol.positions[idx], [1, 1, 1])
    assert np.all(vol.tsdf == 0) and np.all(vol.weight == 0)
    assert np.all(vol.rotations == 0) and not vol.active.any() and np.all(vol.age == 0)
    assert np.array_equal(vol.positions, vol.canonical_positions())


@pytest.mark.parametrize("dims,h", [((0, 2, 2), 1.0), ((1, 2, 2), 1.0), ((2, 2, 2), 0.0), ((2, 2, 2), -1.0)])
def test_create_grid_rejects_bad_arguments(dims, h):
    with pytest.raises(ValueError):
        create_grid(dims, h)


def test_index_layout_is_x_fastest():
    vol = small_grid()
    assert vol.ijk_to_index([1, 0, 0]) == 1
    assert vol.ijk_to_index([0, 1, 0]) == vol.dims[0]
    assert vol.ijk_to_index([0, 0, 1]) == vol.dims[0] * vol.dims[1]
    idx = np.arange(vol.n_points)
    assert np.array_equal(vol.ijk_to_index(vol.index_to_ijk(idx)), idx)


def test_anchors_at_grid_point_and_cell_centre():
    vol = small_grid()
    p = vol.canonical_positions(vol.ijk_to_index([2, 1, 3]))
    pairs = trilinear_anchors(vol, p)
    weights = dict(pairs)
    assert weights[vol.ijk_to_index([2, 1, 3])] == pytest.approx(1.0)
    assert sum(w for _, w in pairs) == pytest.approx(1.0, abs=1e-12)
    centre = vol.canonical_positions(vol.ijk_to_index([1, 1, 1])) + 0.5 * vol.voxel_size
    _, w = trilinear_anchors_batch(vol, centre[None])
    assert np.allclose(w, 1 / 8, atol=1e-15)


def test_anchors_are_the_cell_corners():
    vol = small_grid()
    base = np.array([1, 2, 3])
    x = vol.canonical_positions(vol.ijk_to_index(base)) + np.array([0.3, 0.6, 0.1]) * vol.voxel_size
    idx, _ = trilinear_anchors_batch(vol, x[None])
    assert sorted(idx[0]) == sorted(vol.ijk_to_index(base + CORNER_OFFSETS))


def test_anchors_partition_unity_and_reproduce_position():
    vol = small_grid()
    rng = np.random.default_rng(0)
    x = random_interior(vol, rng, 10_000)
    idx, w = trilinear_anchors_batch(vol, x)
    assert np.all(w >= 0)
    assert np.max(np.abs(w.sum(axis=1) - 1)) < 1e-12
    rec = np.einsum("kc,kcd->kd", w, vol.canonical_positions()[idx])
    assert np.max(np.abs(rec - x)) < 1e-12


def test_upper_boundary_is_inside():
    vol = small_grid()
    idx, w = trilinear_anchors_batch(vol, vol.upper_corner[None])
    assert w.sum() == pytest.approx(1.0)
    assert vol.n_points - 1 in idx[0]


def test_out_of_bounds_is_an_error():
    vol = small_grid()
    with pytest.raises(OutOfBoundsError):
        trilinear_anchors(vol, vol.origin - 0.01)
    with pytest.raises(OutOfBoundsError):
        warp_point(vol, GlobalPose(), vol.upper_corner + 0.01)
    with pytest.raises(OutOfBoundsError):
        sample_tsdf(vol, vol.upper_corner + [0, 0, 1.0])


def test_warp_identity_and_translation():
    vol = small_grid()
    x = vol.origin + np.array([0.13, 0.21, 0.34])
    assert np.allclose(warp_point(vol, GlobalPose(), x), x, atol=1e-15)
    pose = GlobalPose(np.eye(3), [0, 0, 0.1])
    assert np.allclose(warp_point(vol, pose, x), x + [0, 0, 0.1], atol=1e-15)


def test_warp_matches_trilinear_oracle():
    vol = small_grid()
    rng = np.random.default_rng(1)
    vol.positions = vol.positions + rng.normal(scale=0.02, size=vol.positions.shape)
    pose = GlobalPose(rotation_from_axis_angle([1, 2, 3], 0.3), [0.1, -0.2, 0.05])
    for x in random_interior(vol, rng, 50):
        ref = pose.rotation @ oracle_trilinear(vol, vol.positions, x) + pose.translation
        assert np.max(np.abs(warp_point(vol, pose, x) - ref)) < 1e-12


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_warp_is_linear_in_positions(a, b, seed):
    vol = small_grid((3, 3, 3), 0.1, (0, 0, 0))
    rng = np.random.default_rng(seed)
    t1 = rng.normal(size=vol.positions.shape)
    t2 = rng.normal(size=vol.positions.shape)
    x = random_interior(vol, rng, 20)
    vol.positions = t1
    w1 = warp_points(vol, GlobalPose(), x)
    vol.positions = t2
    w2 = warp_points(vol, GlobalPose(), x)
    vol.positions = a * t1 + b * t2
    w = warp_points(vol, GlobalPose(), x)
    assert np.allclose(w, a * w1 + b * w2, atol=1e-9)


def test_invert_closed_forms():
    vol = small_grid()
    pose = GlobalPose(rotation_from_axis_angle([0, 1, 0], 0.2), [0.05, 0.0, -0.1])
    x = vol.origin + np.array([0.21, 0.17, 0.29])
    y = pose.apply(x)
    assert np.allclose(invert_warp(vol, pose, y, x + 0.03), pose.rotation.T @ (y - pose.translation), atol=1e-9)
    d = np.array([0.02, -0.01, 0.015])
    vol.positions = vol.positions + d
    y = pose.apply(x + d)
    got = invert_warp(vol, pose, y, x)
    assert np.allclose(got, pose.rotation.T @ (y - pose.translation) - d, atol=1e-9)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_invert_round_trip_smooth_field(seed):
    rng = np.random.default_rng(seed)
    vol = small_grid((6, 6, 6), 0.1, (0, 0, 0))
    c = vol.canonical_positions()
    k = rng.normal(size=(3, 3))
    vol.positions = c + 0.04 * np.sin(c @ k + rng.random(3))  # < 0.5 voxel per cell
    pose = GlobalPose(rotation_from_axis_angle(rng.normal(size=3), 0.2), rng.normal(scale=0.1, size=3))
    lo, hi = vol.origin + 0.1, vol.upper_corner - 0.1
    x = lo + rng.random((30, 3)) * (hi - lo)
    y = warp_points(vol, pose, x)
    seed_pts = np.clip(x + rng.normal(size=x.shape) * 0.4 * vol.voxel_size / np.sqrt(3), vol.origin, vol.upper_corner)
    got, ok = invert_warp_points(vol, pose, y, seed_pts)
    assert ok.all()
    assert np.max(np.linalg.norm(warp_points(vol, pose, got) - y, axis=1)) <= 1e-6


def test_invert_failure_raises():
    vol = small_grid()
    y = vol.upper_corner + 5.0  # unreachable
    with pytest.raises(InversionFailedError):
        invert_warp(vol, GlobalPose(), y, vol.origin + 0.1)
    with pytest.raises(OutOfBoundsError):
        invert_warp(vol, GlobalPose(), y, vol.origin - 1.0)


def test_sample_tsdf_constant_node_and_linear():
    vol = small_grid()
    vol.tsdf[:] = 0.3
    x = vol.origin + np.array([0.11, 0.07, 0.23])
    assert sample_tsdf(vol, x)[0] == pytest.approx(0.3, abs=1e-15)
    rng = np.random.default_rng(2)
    vol.tsdf = rng.normal(size=vol.n_points)
    vol.weight = rng.random(vol.n_points)
    vol.color = rng.random((vol.n_points, 3)) * 255
    i = vol.ijk_to_index([2, 2, 2])
    d, w, c = sample_tsdf(vol, vol.canonical_positions(i))
    assert (d, w) == pytest.approx((vol.tsdf[i], vol.weight[i]))
    assert np.allclose(c, vol.color[i])
    vol.tsdf = vol.canonical_positions()[:, 2].copy()
    for p in random_interior(vol, rng, 100):
        assert abs(sample_tsdf(vol, p)[0] - p[2]) < 1e-12


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_sample_reproduces_per_cell_trilinear_fields(seed):
    rng = np.random.default_rng(seed)
    vol = small_grid((4, 4, 4), 0.1, (0, 0, 0))
    vol.tsdf = rng.normal(size=vol.n_points)
    for p in random_interior(vol, rng, 20):
        assert abs(sample_tsdf(vol, p)[0] - oracle_trilinear(vol, vol.tsdf, p)) < 1e-12


def test_interpolate_vector_values():
    vol = small_grid()
    x = random_interior(vol, np.random.default_rng(3), 5)
    assert np.allclose(interpolate(vol, vol.canonical_positions(), x), x, atol=1e-12)


def test_euler_convention_is_z_y_x():
    a, b, c = 0.1, -0.4, 0.7
    rx = rotation_from_axis_angle([1, 0, 0], a)
    ry = rotation_from_axis_angle([0, 1, 0], b)
    rz = rotation_from_axis_angle([0, 0, 1], c)
    assert np.allclose(euler_to_matrix([a, b, c]), rz @ ry @ rx, atol=1e-14)
    m = euler_to_matrix(np.array([[a, b, c], [0.3, 1.2, -2.0]]))
    assert np.allclose(euler_to_matrix(matrix_to_euler(m)), m, atol=1e-12)


def test_global_pose_algebra():
    rng = np.random.default_rng(4)
    p = GlobalPose(rotation_from_axis_angle(rng.normal(size=3), 1.0), rng.normal(size=3))
    q = GlobalPose(rotation_from_axis_angle(rng.normal(size=3), -0.5), rng.normal(size=3))
    x = rng.normal(size=(10, 3))
    assert np.allclose(p.inverse().apply(p.apply(x)), x)
    assert np.allclose(p.compose(q).apply(x), p.apply(q.apply(x)))
    noisy = GlobalPose(p.rotation + 1e-3 * rng.normal(size=(3, 3)), p.translation).orthonormalize()
    assert np.allclose(noisy.rotation.T @ noisy.rotation, np.eye(3), atol=1e-12)
    assert np.linalg.det(noisy.rotation) == pytest.approx(1.0)
    assert np.allclose(GlobalPose.from_dict(p.to_dict()).rotation, p.rotation)


def test_snapshot_round_trip(tmp_path):
    vol = small_grid()
    rng = np.random.default_rng(5)
    vol.tsdf = rng.normal(size=vol.n_points)
    vol.weight = rng.random(vol.n_points)
    vol.color = rng.random((vol.n_points, 3)) * 255
    vol.positions = vol.positions + rng.normal(scale=0.01, size=vol.positions.shape)
    vol.rotations = rng.normal(size=vol.rotations.shape)
    vol.age = rng.integers(0, 9, vol.n_points)
    vol.active = rng.random(vol.n_points) < 0.5
    save_volume(vol, tmp_path / "v.bin")
    back = load_volume(tmp_path / "v.bin")
    assert back.dims == vol.dims and back.voxel_size == vol.voxel_size
    assert np.array_equal(back.origin, vol.origin)
    for name in ("tsdf", "weight", "color", "positions", "rotations", "age", "active"):
        assert np.array_equal(getattr(back, name), getattr(vol, name)), name


def test_snapshot_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_volume(p)
