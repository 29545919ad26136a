import numpy as np
import pytest
from matplotlib import colormaps
from PIL import Image

from tacrep.errors import ConfigError
from tacrep.fields import FieldPair
from tacrep.render import field_arrows, normal_to_rgb, render_field, save_rendering


def _pair(h=16, w=16, shear=(1.0, 0.0)):
    normal = np.linspace(0.0, 1.0, h * w).reshape(h, w)
    return FieldPair(normal, np.broadcast_to(np.asarray(shear, dtype=np.float32), (h, w, 2)))


def test_field_arrows_subsample_and_skip_short():
    shear = np.zeros((8, 8, 2))
    shear[..., 0] = 1.0
    arrows = field_arrows(shear, stride=4)
    assert [(a.x, a.y) for a in arrows] == [(2.0, 2.0), (6.0, 2.0), (2.0, 6.0), (6.0, 6.0)]
    assert all(a.length == 1.0 for a in arrows)
    assert field_arrows(np.zeros((8, 8, 2)), stride=4) == []
    assert len(field_arrows(shear, stride=4, gain=0.1)) == 0
    with pytest.raises(ConfigError):
        field_arrows(shear, stride=0)


def test_constant_normal_maps_to_colormap_centre():
    rgb = normal_to_rgb(np.full((3, 4), 2.0))
    assert rgb.shape == (3, 4, 3) and rgb.dtype == np.uint8
    centre = (np.asarray(colormaps["viridis"](0.5)[:3]) * 255).round().astype(np.uint8)
    np.testing.assert_array_equal(rgb[1, 1], centre)


def test_normal_range_is_clipped():
    rgb = normal_to_rgb(np.array([[-5.0, 0.0, 5.0]]), vrange=(0.0, 1.0))
    np.testing.assert_array_equal(rgb[0, 0], rgb[0, 1])


def test_render_is_deterministic_and_scales():
    a = render_field(_pair(), stride=4)
    b = render_field(_pair(), stride=4)
    assert a.tobytes() == b.tobytes()
    big = render_field(_pair(), stride=4, scale=3)
    assert big.size == (48, 48)
    flat = render_field(_pair(shear=(0.0, 0.0)), stride=4)
    assert flat.tobytes() == Image.fromarray(normal_to_rgb(_pair().normal_field)).tobytes()
    with pytest.raises(ConfigError):
        render_field(_pair(), scale=0)


def test_arrows_are_drawn_in_white():
    image = np.asarray(render_field(_pair(shear=(0.0, 1.0)), stride=8))
    assert (image == 255).all(axis=-1).any()


def test_save_rendering(tmp_path):
    path = save_rendering(render_field(_pair()), tmp_path / "sub" / "w.png")
    with Image.open(path) as img:
        assert img.size == (16, 16)
        assert img.format == "PNG"
