import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrfusion.camera import Frame, Intrinsics
from nrfusion.fusion import (FusionParams, advance_ages, expand_grid, integrate_frame, sample_depth,
                             surface_ring)
from nrfusion.volume import GlobalPose, create_grid, rotation_from_axis_angle

INTR = Intrinsics(100.0, 100.0, 39.5, 29.5, 80, 60)
WIDE = FusionParams(mu=1.0)


def flat(depth, rgb=(0, 0, 0)):
    col = np.zeros((INTR.height, INTR.width, 3), dtype=np.uint8)
    col[:] = rgb
    return Frame(np.full((INTR.height, INTR.width), float(depth)), col, INTR)


def one_voxel(age=3):
    """2x2x2 grid near the optical axis at z = 1; only node 0 is eligible."""
    vol = create_grid((2, 2, 2), 0.01, (0.0, 0.0, 1.0))
    vol.active[0] = True
    vol.age[0] = age
    return vol


def test_empty_voxel_takes_the_sample():
    vol = one_voxel()
    integrate_frame(vol, flat(1.02), GlobalPose(), WIDE)
    assert vol.tsdf[0] == pytest.approx(0.02, abs=1e-15) and vol.weight[0] == 1.0


def test_running_average_hand_values():
    vol = one_voxel()
    vol.tsdf[0], vol.weight[0] = 0.5, 1.0
    integrate_frame(vol, flat(1.7), GlobalPose(), WIDE)
    assert vol.tsdf[0] == pytest.approx(0.6, abs=1e-15) and vol.weight[0] == 2.0
    # binary-exact values: no rounding anywhere
    vol.tsdf[0], vol.weight[0] = 0.25, 1.0
    integrate_frame(vol, flat(1.75), GlobalPose(), WIDE)
    assert vol.tsdf[0] == 0.5 and vol.weight[0] == 2.0
    vol.tsdf[0], vol.weight[0] = -0.5, 3.0
    integrate_frame(vol, flat(1.5), GlobalPose(), WIDE)
    assert vol.tsdf[0] == (3 * -0.5 + 0.5) / 4 and vol.weight[0] == 4.0


def test_colour_is_averaged_and_clamped():
    vol = one_voxel()
    vol.color[0], vol.weight[0] = (100.0, 200.0, 0.0), 1.0
    integrate_frame(vol, flat(1.0, (200, 0, 255)), GlobalPose(), WIDE)
    assert np.array_equal(vol.color[0], [150.0, 100.0, 127.5])
    assert np.all((vol.color >= 0) & (vol.color <= 255))


@pytest.mark.parametrize("age,changes", [(0, False), (2, False), (3, True), (7, True)])
def test_age_gate(age, changes):
    vol = one_voxel(age)
    integrate_frame(vol, flat(1.25), GlobalPose(), WIDE)
    assert (vol.weight[0] > 0) == changes
    assert np.all(vol.weight[1:] == 0)


def test_inactive_points_never_written():
    vol = one_voxel()
    vol.age[:] = 10
    before = vol.tsdf.copy()
    integrate_frame(vol, flat(1.25), GlobalPose(), WIDE)
    assert np.all(vol.weight[~vol.active] == 0) and np.array_equal(vol.tsdf[~vol.active], before[~vol.active])


def test_truncation_and_occlusion():
    vol = one_voxel()
    p = FusionParams()        # mu = 4 voxels = 0.04
    integrate_frame(vol, flat(1.5), GlobalPose(), p)
    assert vol.tsdf[0] == pytest.approx(0.04)
    vol = one_voxel()
    stats = integrate_frame(vol, flat(0.9), GlobalPose(), p)   # voxel 0.1 behind the surface
    assert stats.occluded == 1 and vol.weight[0] == 0
    vol = one_voxel()
    integrate_frame(vol, flat(0.97), GlobalPose(), p)           # inside the band
    assert vol.tsdf[0] == pytest.approx(-0.03) and vol.weight[0] == 1


def test_outside_frustum_and_invalid_depth_skipped():
    vol = one_voxel()
    stats = integrate_frame(vol, flat(1.2), GlobalPose(np.eye(3), [5.0, 0, 0]), WIDE)
    assert stats.outside == 1 and vol.weight[0] == 0
    stats = integrate_frame(vol, flat(0.0), GlobalPose(), WIDE)
    assert stats.outside == 1 and vol.weight[0] == 0


def test_weight_is_capped():
    vol = one_voxel()
    p = FusionParams(mu=1.0, w_max=5.0)
    for _ in range(9):
        integrate_frame(vol, flat(1.1), GlobalPose(), p)
    assert vol.weight[0] == 5.0
    assert vol.tsdf[0] == pytest.approx(0.1, abs=1e-12)


def test_voxel_centres_follow_the_deformation():
    vol = one_voxel()
    vol.positions[0] += [0.0, 0.0, 0.05]
    integrate_frame(vol, flat(1.25), GlobalPose(), WIDE)
    assert vol.tsdf[0] == pytest.approx(0.2, abs=1e-12)


def test_bootstrap_writes_every_observed_point():
    vol = create_grid((3, 3, 3), 0.01, (-0.01, -0.01, 1.0))
    stats = integrate_frame(vol, flat(1.01), GlobalPose(), FusionParams(), bootstrap=True)
    assert stats.updated == vol.n_points
    assert np.allclose(vol.tsdf, 1.01 - vol.canonical_positions()[:, 2])


@given(st.lists(st.floats(0.9, 1.3), min_size=2, max_size=6), st.randoms(use_true_random=False))
@settings(max_examples=50, deadline=None)
def test_order_permutation_stability(depths, rnd):
    a, b = one_voxel(), one_voxel()
    perm = list(depths)
    rnd.shuffle(perm)
    for d in depths:
        integrate_frame(a, flat(d), GlobalPose(), WIDE)
    for d in perm:
        integrate_frame(b, flat(d), GlobalPose(), WIDE)
    assert abs(a.tsdf[0] - b.tsdf[0]) < 1e-6 and a.weight[0] == b.weight[0]


def test_sample_depth_bilinear_and_fallback():
    depth = np.add.outer(np.arange(60) * 0.01, np.arange(80) * 0.001) + 1.0
    frame = Frame(depth, np.zeros((60, 80, 3), dtype=np.uint8), INTR)
    u, v = np.array([10.25, 3.5]), np.array([7.75, 20.0])
    z, _, _, ok = sample_depth(frame, u, v)
    assert ok.all() and np.allclose(z, 1.0 + v * 0.01 + u * 0.001, atol=1e-12)
    frame.depth[7, 11] = 0.0      # a bilinear neighbour of (10.25, 7.75); the nearest pixel is (8, 10)
    z, _, _, ok = sample_depth(frame, u[:1], v[:1])
    assert ok[0] and z[0] == depth[8, 10]
    frame.depth[8, 10] = 0.0
    z, vi, ui, ok = sample_depth(frame, np.array([10.0]), np.array([8.0]))
    assert not ok[0] and z[0] == 0.0


# --- ages and expansion -------------------------------------------------------------


def test_advance_ages():
    vol = create_grid((2, 2, 2), 0.1)
    solved = np.zeros(vol.n_points, dtype=bool)
    solved[[0, 3]] = True
    for k in range(3):
        advance_ages(vol, solved)
    assert vol.age[0] == 3 and vol.age[3] == 3 and vol.age[1] == 0


def sphere_volume(n=16, radius=0.25):
    vol = create_grid((n, n, n), 1.0 / (n - 1), (-0.5, -0.5, -0.5))
    vol.tsdf = np.linalg.norm(vol.canonical_positions(), axis=1) - radius
    vol.weight[:] = 1.0
    return vol


def test_expand_from_nothing_is_identity():
    vol = sphere_volume()
    stats = expand_grid(vol)
    assert stats.added == vol.active.sum() > 0
    assert np.array_equal(vol.active, surface_ring(vol))
    assert np.all(vol.positions == vol.canonical_positions()) and np.all(vol.rotations == 0)
    # no growth: a second call changes nothing
    before = (vol.active.copy(), vol.positions.copy())
    again = expand_grid(vol)
    assert again.added == 0 and again.removed == 0
    assert np.array_equal(vol.active, before[0]) and np.array_equal(vol.positions, before[1])


def grow(vol, radius):
    vol.tsdf = np.linalg.norm(vol.canonical_positions(), axis=1) - radius


def test_uniform_translation_extrapolates_exactly():
    vol = sphere_volume(radius=0.2)
    expand_grid(vol)
    shift = np.array([0.03, -0.01, 0.02])
    vol.positions[vol.active] += shift
    grow(vol, 0.3)
    stats = expand_grid(vol)
    assert stats.added > 0 and stats.isolated == 0
    act = vol.active
    assert np.allclose(vol.positions[act] - vol.canonical_positions()[act], shift, atol=1e-12)
    assert np.all(vol.rotations[act] == 0)


def test_rigid_field_extrapolates_exactly():
    vol = sphere_volume(radius=0.2)
    expand_grid(vol)
    q = rotation_from_axis_angle([1, 1, 0], 0.3)
    d = np.array([0.01, 0.02, 0.0])
    old = vol.active.copy()
    vol.positions[old] = vol.canonical_positions()[old] @ q.T + d
    vol.set_rotation_matrices(np.nonzero(old)[0], np.repeat(q[None], old.sum(), axis=0))
    keep = vol.rotations[old][0].copy()
    grow(vol, 0.32)
    expand_grid(vol)
    new = vol.active & ~old
    assert new.any()
    assert np.allclose(vol.positions[new], vol.canonical_positions()[new] @ q.T + d, atol=1e-12)
    assert np.allclose(vol.rotations[new], keep, atol=1e-12)


def test_disconnected_new_points_start_at_identity():
    vol = sphere_volume(radius=0.15)
    expand_grid(vol)
    vol.positions = vol.canonical_positions() + 0.05
    c = vol.canonical_positions()
    # a second, far-away blob appears
    vol.tsdf = np.minimum(np.linalg.norm(c, axis=1) - 0.15, np.linalg.norm(c - [0.35, 0.35, 0.35], axis=1) - 0.08)
    stats = expand_grid(vol)
    assert stats.isolated > 0
    far = vol.active & (np.linalg.norm(c - [0.35, 0.35, 0.35], axis=1) < 0.1)
    assert np.all(vol.positions[far] == c[far])
