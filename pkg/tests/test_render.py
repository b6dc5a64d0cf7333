from __future__ import annotations

import numpy as np
import pytest
from conftest import random_params
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_rasterize

from safa_motion_kit.model import ParamSet, decode
from safa_motion_kit.render import (
    ImageGrid,
    bilinear_sample,
    project,
    project_jacobian,
    rasterize,
    rasterize_screen,
    render_3d_motion,
    render_normal_map,
    render_reenactment,
)


def random_soup(rng, n_faces):
    """Random triangles in [-1.2, 1.2]^2 with mixed orientation and depth."""
    points = rng.uniform(-1.2, 1.2, (3 * n_faces, 2))
    depth = rng.uniform(-1.0, 1.0, 3 * n_faces)
    faces = np.arange(3 * n_faces).reshape(n_faces, 3)
    attrs = rng.normal(size=(3 * n_faces, 3))
    return points, depth, faces, attrs


class TestGrid:
    def test_pixel_centres(self):
        g = ImageGrid(2, 4)
        np.testing.assert_allclose(g.x_centers(), [-0.75, -0.25, 0.25, 0.75])
        np.testing.assert_allclose(g.y_centers(), [-0.5, 0.5])

    def test_to_pixels_inverts_centres(self):
        g = ImageGrid(5, 7)
        pix = g.to_pixels(g.pixel_centers())
        rows, cols = np.mgrid[0:5, 0:7]
        np.testing.assert_allclose(pix[..., 0], cols, atol=1e-12)
        np.testing.assert_allclose(pix[..., 1], rows, atol=1e-12)


class TestProjection:
    def test_weak_perspective(self):
        v = np.array([[1.0, 2.0, 3.0]])
        p, z = project(v, 0.5, [0.1, -0.2])
        np.testing.assert_allclose(p, [[0.6, 0.8]])
        assert z[0] == 3.0

    def test_jacobian_finite_difference(self, rng):
        v = rng.normal(size=(4, 3))
        s, t = 0.8, np.array([0.1, 0.2])
        jac = project_jacobian(v, s)
        h = 1e-6
        fd = (project(v, s + h, t)[0] - project(v, s - h, t)[0]) / (2 * h)
        np.testing.assert_allclose(jac["scale"], fd, atol=1e-9)
        e = np.zeros(3)
        e[0] = h
        fd = (project(v + e, s, t)[0] - project(v - e, s, t)[0]) / (2 * h)
        np.testing.assert_allclose(fd, np.tile(jac["vertex"][:, 0], (4, 1)), atol=1e-9)


class TestRasterize:
    def test_single_triangle_constant_attribute(self):
        g = ImageGrid(16, 16)
        pts = np.array([[-0.8, -0.8], [0.8, -0.8], [0.0, 0.8]])
        img = rasterize_screen(pts, np.zeros(3), np.array([[0, 2, 1]]), np.full((3, 2), 3.25), g, cull_backfaces=False)
        assert img.coverage.sum() > 0
        assert np.all(img.data[img.coverage > 0] == 3.25)
        assert np.all(img.data[img.coverage == 0] == 0.0)

    def test_face_on_pixel_centre_edge_is_covered(self):
        """Inclusive edge test: a pixel centre on an edge counts as inside."""
        g = ImageGrid(4, 4)
        pts = np.array([[-0.25, -0.25], [0.25, -0.25], [-0.25, 0.25]])
        img = rasterize_screen(pts, np.zeros(3), np.array([[0, 1, 2]]), np.ones(3), g, cull_backfaces=False)
        assert img.coverage[1, 1] == 1.0  # centre (-0.25, -0.25) is a vertex
        assert img.coverage.sum() == 3.0

    def test_depth_nearer_wins(self):
        g = ImageGrid(8, 8)
        pts = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]] * 2)
        faces = np.array([[0, 2, 1], [3, 5, 4]])
        depth = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
        attrs = np.array([0.0, 0, 0, 1, 1, 1])
        img = rasterize_screen(pts, depth, faces, attrs, g, cull_backfaces=False)
        assert np.all(img.face_index[img.coverage > 0] == 1)

    def test_depth_tie_keeps_lower_index(self):
        g = ImageGrid(8, 8)
        pts = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]] * 2)
        faces = np.array([[0, 2, 1], [3, 5, 4]])
        img = rasterize_screen(pts, np.zeros(6), faces, np.zeros(6), g, cull_backfaces=False)
        assert np.all(img.face_index[img.coverage > 0] == 0)

    def test_culling_drops_clockwise(self):
        g = ImageGrid(8, 8)
        pts = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
        ccw = rasterize_screen(pts, np.zeros(3), np.array([[0, 1, 2]]), np.ones(3), g)
        cw = rasterize_screen(pts, np.zeros(3), np.array([[0, 2, 1]]), np.ones(3), g)
        assert ccw.coverage.sum() > 0 and cw.coverage.sum() == 0

    def test_face_mask(self, rng):
        pts, depth, faces, attrs = random_soup(rng, 6)
        mask = np.array([True, False] * 3)
        img = rasterize_screen(pts, depth, faces, attrs, ImageGrid(24, 24), mask, cull_backfaces=False)
        assert not np.any(np.isin(img.face_index, np.flatnonzero(~mask)))

    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("cull", [True, False])
    def test_brute_force_oracle(self, seed, cull):
        rng = np.random.default_rng(seed)
        pts, depth, faces, attrs = random_soup(rng, int(rng.integers(1, 12)))
        img = rasterize_screen(pts, depth, faces, attrs, ImageGrid(20, 24), cull_backfaces=cull)
        data, winner = brute_rasterize(pts, depth, faces, attrs, 20, 24, cull=cull)
        assert np.array_equal(img.face_index, winner)
        np.testing.assert_allclose(img.data, data, atol=1e-12, rtol=0)

    def test_barycentric_sum_reproduces_position(self, rng):
        """Interpolating vertex positions returns the pixel centre itself."""
        g = ImageGrid(32, 32)
        pts, depth, faces, _ = random_soup(rng, 5)
        img = rasterize_screen(pts, depth, faces, pts, g, cull_backfaces=False)
        cov = img.coverage > 0
        np.testing.assert_allclose(img.data[cov], g.pixel_centers()[cov], atol=1e-12)

    def test_half_turn_flips_normal_z(self, toy_model):
        """A 180 degree turn about y faces the mesh away: z of every normal flips sign.

        Front faces become back faces, so culling must be off to see them.
        """
        g = ImageGrid(48, 48)
        rest = ParamSet.zeros(toy_model)
        pose = np.zeros(toy_model.num_pose)
        pose[1] = np.pi
        turned = rest.replace(pose=pose)
        a = render_normal_map(toy_model, rest, g, cull_backfaces=False)
        b = render_normal_map(toy_model, turned, g, cull_backfaces=False)
        # mirrored in x on screen; compare at matching pixels
        mirrored = b.data[:, ::-1]
        both = (a.coverage > 0) & (b.coverage[:, ::-1] > 0)
        assert both.sum() > 50
        assert np.all(a.data[both, 2] > 0)
        np.testing.assert_allclose(mirrored[both, 2], -a.data[both, 2], atol=1e-9)
        assert render_normal_map(toy_model, turned, g).coverage.sum() == 0

    def test_mesh_rasterize_matches_screen(self, toy_model, rng):
        p = random_params(toy_model, rng, pose_sigma=0.1)
        mesh = decode(toy_model, p)
        g = ImageGrid(32, 32)
        a = rasterize(mesh, p.camera_scale, p.camera_translation, mesh.vertices, g)
        pts, z = project(mesh.vertices, p.camera_scale, p.camera_translation)
        b = rasterize_screen(pts, z, mesh.faces, mesh.vertices, g)
        assert np.array_equal(a.data, b.data)


class TestBilinear:
    def test_identity_grid_exact(self, rng):
        img = rng.uniform(size=(9, 13, 3))
        out = bilinear_sample(img, ImageGrid(9, 13).pixel_centers())
        assert np.array_equal(out, img)

    def test_midpoint_average(self):
        img = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = bilinear_sample(img, np.array([[0.0, 0.0]]))
        np.testing.assert_allclose(out, [1.5])

    def test_border_clamp(self):
        img = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = bilinear_sample(img, np.array([[-5.0, -5.0], [5.0, 5.0]]))
        np.testing.assert_allclose(out, [0.0, 3.0])

    @given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_linear_image_reproduced(self, x, y):
        """Bilinear interpolation is exact on affine images inside the border."""
        g = ImageGrid(10, 10)
        c = g.pixel_centers()
        img = (2.0 * c[..., 0] - 0.5 * c[..., 1] + 0.1)[..., None]
        x, y = np.clip([x, y], -0.9, 0.9)
        out = bilinear_sample(img, np.array([[x, y]]))
        np.testing.assert_allclose(out[0, 0], 2.0 * x - 0.5 * y + 0.1, atol=1e-12)


class TestRenderedMaps:
    def test_reenactment_same_params_samples_source(self, toy_model, rng):
        g = ImageGrid(32, 32)
        p = ParamSet.zeros(toy_model, 1.2)
        image = np.broadcast_to([0.2, 0.4, 0.6], (32, 32, 3))
        out = render_reenactment(toy_model, p, p, image, g)
        np.testing.assert_allclose(out.data[out.coverage > 0], np.broadcast_to([0.2, 0.4, 0.6], (int(out.coverage.sum()), 3)), atol=1e-15)

    def test_3d_motion_identity(self, toy_model, rng):
        g = ImageGrid(32, 32)
        p = random_params(toy_model, rng, pose_sigma=0.1)
        field, cov = render_3d_motion(toy_model, p, p, g)
        assert cov.sum() > 0
        assert np.array_equal(field, g.pixel_centers())

    def test_3d_motion_translation(self, toy_model):
        g = ImageGrid(32, 32)
        src = ParamSet.zeros(toy_model)
        drv = src.replace(camera_translation=[0.25, -0.125])
        field, cov = render_3d_motion(toy_model, src, drv, g)
        disp = field - g.pixel_centers()
        np.testing.assert_allclose(disp[cov > 0], np.broadcast_to([-0.25, 0.125], (int(cov.sum()), 2)), atol=1e-12)
        assert np.all(disp[cov == 0] == 0.0)

    def test_normal_map_unit_inside(self, toy_model):
        n = render_normal_map(toy_model, ParamSet.zeros(toy_model), ImageGrid(32, 32))
        lengths = np.linalg.norm(n.data[n.coverage > 0], axis=1)
        assert np.all(lengths <= 1.0 + 1e-12) and np.all(lengths > 0.5)
