import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import front_camera, random_scene
from splat_oed.render import (
    ALPHA_MIN,
    Splat2D,
    activity_map,
    composite,
    kernel_alpha,
    project,
    project_scene,
    read_ppm,
    render,
    render_with_transmittance,
    to_bytes,
    write_image,
    write_ppm,
)
from splat_oed.scene import Gaussian, Image, Scene, look_at
from splat_oed.sh import C0


def _splat(mean, color, depth=1.0, opacity=0.5, cov=((1.0, 0.0), (0.0, 1.0))):
    return Splat2D(np.array(mean, float), np.array(cov, float), depth, opacity, np.array(color, float))


def test_two_splat_composite_exact():
    c1, c2 = np.array([0.3, 0.6, 0.9]), np.array([0.8, 0.1, 0.4])
    s1, s2 = _splat((0, 0), c1), _splat((0, 0), c2, depth=2.0)
    out = composite([s1, s2], (0.0, 0.0), alphas=[0.5, 0.5])
    assert np.array_equal(out, 0.5 * c1 + 0.25 * c2)
    # the kernel at the mean is the base opacity
    assert np.array_equal(composite([s1, s2], (0.0, 0.0)), 0.5 * c1 + 0.25 * c2)


def test_composite_background_and_clamp():
    s = _splat((0, 0), (1, 1, 1), opacity=1.0)
    out = composite([s], (0, 0), background=(0, 0, 1))
    assert np.allclose(out, [0.999, 0.999, 0.999 + 0.001])
    assert kernel_alpha(_splat((0, 0), (1, 1, 1), opacity=0.003), (0, 0)) == 0.0
    assert kernel_alpha(s, (100, 100)) == 0.0


def test_early_stop():
    # after four 0.999 splats T = 1e-12 < 1e-4, so the fifth is never blended
    splats = [_splat((0, 0), (0, 0, 0), opacity=1.0) for _ in range(3)] + [_splat((0, 0), (1, 0, 0), opacity=1.0)]
    out = composite(splats, (0, 0))
    assert out[0] == 0.0


def test_projection_of_centered_gaussian():
    cam = look_at("c", (0, -4, 0), (0, 0, 0), 33, 21, 60.0, up=(0, 0, 1))
    g = Gaussian([0, 0, 0], [1, 0, 0, 0], np.log([0.2, 0.2, 0.2]), 0.0, [[0, 0, 0]])
    s = project(g, cam)
    assert np.allclose(s.mean2d, [cam.cx, cam.cy])
    assert math.isclose(s.depth, 4.0)
    # isotropic: cov2d = (f * 0.2 / 4)^2 I + low-pass floor
    expect = (cam.fx * 0.2 / 4.0) ** 2 + 0.3
    assert np.allclose(s.cov2d, expect * np.eye(2))
    assert np.allclose(s.color, 0.5)


def test_projection_culls_behind_and_offscreen():
    cam = look_at("c", (0, -4, 0), (0, 0, 0), 16, 16)
    behind = Gaussian([0, -6, 0], [1, 0, 0, 0], [-2, -2, -2], 0.0, [[0, 0, 0]])
    aside = Gaussian([30, 0, 0], [1, 0, 0, 0], [-2, -2, -2], 0.0, [[0, 0, 0]])
    assert project(behind, cam) is None
    assert project(aside, cam) is None


@given(st.integers(0, 1000))
@settings(max_examples=15, deadline=None)
def test_kernel_matches_reference_compositor(seed):
    scene = random_scene(seed, 6)
    cam = front_camera(12, 10)
    img, t_final = render_with_transmittance(scene, cam)
    proj = project_scene(scene, cam)
    order = proj.sorted_indices()
    splats = [Splat2D(proj.mean2d[i], proj.cov2d[i], proj.depth[i], proj.opacity[i], proj.color[i], i)
              for i in order]
    for row in range(cam.height):
        for col in range(cam.width):
            ref = composite(splats, (col + 0.5, row + 0.5), scene.background)
            assert np.allclose(img[row, col], ref, atol=1e-12)
    assert np.all((t_final >= 0) & (t_final <= 1))


def test_render_empty_scene_is_background():
    cam = front_camera(8, 6)
    img = render(Scene.empty(background=(0.2, 0.4, 0.6)), cam)
    assert np.allclose(img.pixels, [0.2, 0.4, 0.6])


def test_render_deterministic_and_in_range():
    scene, cam = random_scene(7, 20, sh_degree=2), front_camera(24, 20)
    a, b = render(scene, cam), render(scene, cam)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1


def test_dc_colour_is_shifted_and_clamped():
    cam = front_camera(16, 16)
    g = Gaussian([0, 0, 0], [1, 0, 0, 0], [-0.5] * 3, 10.0, [[(0.9 - 0.5) / C0, 5.0, -5.0]])
    p = project(g, cam)
    assert np.allclose(p.color, [0.9, 1.0, 0.0])


def test_activity_map_codes():
    scene, cam = random_scene(3, 5), front_camera()
    act = activity_map(scene, cam)
    assert act.shape == (16, 16, 5)
    assert set(np.unique(act)) <= {0, 1, 2}


def test_ppm_roundtrip_and_rounding(tmp_path):
    px = np.zeros((2, 3, 3))
    px[0, 0] = [0.5 / 255, 1.5 / 255, 1.0]
    img = Image(px)
    assert list(to_bytes(img)[0, 0]) == [1, 2, 255]
    write_ppm(img, tmp_path / "a.ppm")
    back = read_ppm(tmp_path / "a.ppm")
    assert np.array_equal(to_bytes(back), to_bytes(img))
    write_image(img, tmp_path / "b.ppm")
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_ppm_errors(tmp_path):
    with pytest.raises(OSError, match="nope"):
        read_ppm(tmp_path / "nope.ppm")
    (tmp_path / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "bad.ppm")


def test_alpha_threshold_constant():
    assert ALPHA_MIN == 1 / 255
