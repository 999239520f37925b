import pytest

from nrfusion.config import Config


def test_defaults_are_the_documented_values():
    c = Config()
    assert (c.w_d, c.w_s, c.w_r) == (1.0, 0.5, 5.0)
    assert (c.eps_d, c.eps_n, c.eps_v) == (0.05, 0.5, 0.8)
    assert (c.k_min, c.w_max, c.max_keypoints) == (3, 64.0, 150)
    assert (c.tau_f, c.tau_px, c.tau_3d) == (0.7, 48.0, 0.10)
    assert c.fusion().truncation(c.voxel_size) == pytest.approx(4 * c.voxel_size)


def test_text_round_trip():
    c = Config(grid_dims=(32, 40, 48), voxel_size=0.02, use_features=False, origin="0.1,-0.2,0.5")
    back = Config.from_text(c.to_text())
    assert back == c
    assert back.origin_vector() == (0.1, -0.2, 0.5)


def test_comments_blank_lines_and_types():
    c = Config.from_text("# run\n\nlevels = 2  # coarse-to-fine\nuse_features=no\nw_r=2.5\n")
    assert c.levels == 2 and c.use_features is False and c.w_r == 2.5


@pytest.mark.parametrize("text", [
    "bogus=1", "levels=two", "grid_dims=1,2", "use_features=maybe", "voxel_size=-1", "no equals sign",
    "origin=1,2", "reassociations=0",
])
def test_bad_config_is_rejected(text):
    with pytest.raises(ValueError):
        Config.from_text(text)


def test_sub_parameter_views():
    c = Config(w_r=2.0, levels=2, eps_d=0.03, mu=0.05, tau_3d=0.04)
    assert c.solver().w_r == 2.0 and c.solver().levels == 2
    assert c.correspondence().eps_d == 0.03
    assert c.fusion().truncation(0.01) == 0.05
    assert c.features().tau_3d == 0.04
