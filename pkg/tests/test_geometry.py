import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicepath.gcode import PrinterProfile, travel_length, validate_layer
from slicepath.geometry import (
    EXTRUSION_PER_MM,
    BadMagic,
    EmptyContour,
    OpenContour,
    ShapeSpec,
    SliceContour,
    TriangleMesh,
    TruncatedFile,
    UnknownShape,
    parse_stl,
    polygon_signed_area,
    rasterize,
    read_pgm,
    slice_mesh,
    synth_sample,
    write_binary_stl,
    write_pgm,
)

ASCII_CUBE = """solid cube
{facets}endsolid cube
"""


def _cube_triangles():
    # unit cube (0,0,0)-(1,1,1), two triangles per face
    quads = [
        [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)],  # bottom
        [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],  # top
        [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)],  # front
        [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)],  # right
        [(1, 1, 0), (0, 1, 0), (0, 1, 1), (1, 1, 1)],  # back
        [(0, 1, 0), (0, 0, 0), (0, 0, 1), (0, 1, 1)],  # left
    ]
    triangles = []
    for a, b, c, d in quads:
        triangles.append([a, b, c])
        triangles.append([a, c, d])
    return np.asarray(triangles, dtype=float)


def ascii_cube_text():
    facets = []
    for tri in _cube_triangles():
        facets.append("facet normal 0 0 0\n outer loop\n")
        for v in tri:
            facets.append(f"  vertex {v[0]:g} {v[1]:g} {v[2]:g}\n")
        facets.append(" endloop\nendfacet\n")
    return ASCII_CUBE.format(facets="".join(facets))


def cube_mesh():
    return TriangleMesh(_cube_triangles())


def cylinder_mesh(n=64, r=1.0, height=1.0):
    tris = []
    angles = [2 * math.pi * k / n for k in range(n)]
    for k in range(n):
        a0, a1 = angles[k], angles[(k + 1) % n]
        p0 = (r * math.cos(a0), r * math.sin(a0), 0.0)
        p1 = (r * math.cos(a1), r * math.sin(a1), 0.0)
        q0 = (r * math.cos(a0), r * math.sin(a0), height)
        q1 = (r * math.cos(a1), r * math.sin(a1), height)
        tris.append([p0, p1, q1])
        tris.append([p0, q1, q0])
        tris.append([(0, 0, 0), p1, p0])  # bottom cap fan
        tris.append([(0, 0, height), q0, q1])  # top cap fan
    return TriangleMesh(np.asarray(tris, dtype=float))


def hollow_box_mesh(outer=4.0, inner=2.0, height=1.0):
    """Vertical walls only: outer square tube plus inner square tube."""

    def walls(half):
        corners = [(-half, -half), (half, -half), (half, half), (-half, half)]
        tris = []
        for k in range(4):
            (x0, y0), (x1, y1) = corners[k], corners[(k + 1) % 4]
            p0, p1 = (x0, y0, 0.0), (x1, y1, 0.0)
            q0, q1 = (x0, y0, height), (x1, y1, height)
            tris.append([p0, p1, q1])
            tris.append([p0, q1, q0])
        return tris

    return TriangleMesh(np.asarray(walls(outer / 2) + walls(inner / 2), dtype=float))


class TestParseStl:
    def test_binary_single_triangle(self):
        tri = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]], dtype=float)
        data = write_binary_stl(TriangleMesh(tri))
        mesh = parse_stl(data)
        assert len(mesh.triangles) == 1
        assert np.allclose(mesh.triangles[0], tri[0])

    def test_ascii_cube(self):
        mesh = parse_stl(ascii_cube_text().encode())
        assert len(mesh.triangles) == 12
        flat = mesh.triangles.reshape(-1, 3)
        assert np.allclose(flat.min(axis=0), [0, 0, 0])
        assert np.allclose(flat.max(axis=0), [1, 1, 1])

    def test_truncated_binary(self):
        data = write_binary_stl(cube_mesh())
        with pytest.raises(TruncatedFile):
            parse_stl(data[:-30])

    def test_declared_count_beyond_payload(self):
        data = bytearray(write_binary_stl(cube_mesh()))
        struct.pack_into("<I", data, 80, 500)
        with pytest.raises(TruncatedFile):
            parse_stl(bytes(data))

    def test_bad_magic_on_garbage(self):
        with pytest.raises(BadMagic):
            parse_stl(b"not an stl at all")

    def test_degenerate_triangles_dropped_and_counted(self):
        tris = np.vstack(
            [
                _cube_triangles(),
                [[[0, 0, 0], [1, 1, 1], [2, 2, 2]]],  # zero area
            ]
        )
        mesh = parse_stl(write_binary_stl(TriangleMesh(tris)))
        assert len(mesh.triangles) == 12
        assert mesh.degenerate_dropped == 1


class TestSliceMesh:
    def test_cube_midheight_square(self):
        contour = slice_mesh(cube_mesh(), 0.5)
        assert len(contour.loops) == 1
        assert contour.perimeter() == pytest.approx(4.0, abs=1e-9)

    def test_cylinder_inscribed_polygon_perimeter(self):
        contour = slice_mesh(cylinder_mesh(64), 0.5)
        assert len(contour.loops) == 1
        expected = 2 * 64 * math.sin(math.pi / 64)
        assert contour.perimeter() == pytest.approx(expected, abs=1e-9)

    def test_z_outside_rejected(self):
        with pytest.raises(ValueError):
            slice_mesh(cube_mesh(), -0.5)
        with pytest.raises(ValueError):
            slice_mesh(cube_mesh(), 1.5)

    def test_hole_orientation_normalized(self):
        contour = slice_mesh(hollow_box_mesh(), 0.5)
        areas = sorted(polygon_signed_area(loop) for loop in contour.loops)
        assert len(areas) == 2
        assert areas[0] == pytest.approx(-4.0, abs=1e-9)  # inner 2x2 hole, negative
        assert areas[1] == pytest.approx(16.0, abs=1e-9)  # outer 4x4, positive

    def test_open_contour_reports_gap(self):
        tri = TriangleMesh(np.array([[[0, 0, 0], [4, 0, 0], [0, 0, 4]]], dtype=float))
        with pytest.raises(OpenContour):
            slice_mesh(tri, 1.0)


def square_contour(side=10.0):
    half = side / 2
    loop = np.array(
        [[-half, -half], [half, -half], [half, half], [-half, half], [-half, -half]]
    )
    return SliceContour((loop,))


class TestRasterize:
    def test_square_fill_fraction(self):
        image = rasterize(square_contour())
        frame_px = 0.9 * 224
        expected = frame_px**2 / 224**2
        actual = image.pixels.mean()
        assert actual == pytest.approx(expected, rel=0.02)

    def test_pixel_area_matches_polygon_area(self):
        image = rasterize(square_contour(side=7.3))
        area = image.pixels.sum() * image.pixel_pitch**2
        assert area == pytest.approx(7.3**2, rel=0.02)

    def test_annulus_center_empty(self):
        theta = np.linspace(0, 2 * math.pi, 129)
        outer = np.column_stack([4 * np.cos(theta), 4 * np.sin(theta)])
        inner = np.column_stack([2 * np.cos(theta), 2 * np.sin(theta)])[::-1]
        image = rasterize(SliceContour((outer, inner)))
        assert image.pixels[112, 112] == 0.0
        assert image.pixels[112, 112 + 84] == 1.0  # inside the ring at r=3

    def test_rotation_gives_transpose(self):
        # L-shaped asymmetric contour
        loop = np.array(
            [[0, 0], [6, 0], [6, 2], [2, 2], [2, 8], [0, 8], [0, 0]], dtype=float
        )
        rotated = np.column_stack([loop[:, 1], loop[:, 0]])[::-1]  # mirror = 90deg + flip
        a = rasterize(SliceContour((loop,)))
        b = rasterize(SliceContour((rotated,)))
        mismatch = np.abs(a.pixels - b.pixels.T).mean()
        assert mismatch < 0.01  # identical up to 1px boundary effects

    def test_empty_contour(self):
        with pytest.raises(EmptyContour):
            rasterize(SliceContour(()))


class TestPgm:
    def test_round_trip(self, tmp_path, rng):
        image = rasterize(square_contour())
        path = tmp_path / "slice.pgm"
        write_pgm(image, path)
        back = read_pgm(path)
        assert np.array_equal(back.pixels, image.pixels)
        assert back.pixel_pitch == image.pixel_pitch
        assert back.origin == image.origin

    def test_truncated_payload(self, tmp_path):
        image = rasterize(square_contour())
        path = tmp_path / "slice.pgm"
        write_pgm(image, path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(TruncatedFile):
            read_pgm(path)


class TestSynthSample:
    def test_square_rectilinear_travel_length(self):
        spec = ShapeSpec("square", "rectilinear", density=1.0, size=1.0, line_width=0.25)
        _, toolpath = synth_sample(spec, rng_seed=0)
        assert travel_length(toolpath.keypoints) == pytest.approx(10.0, abs=1e-6)

    def test_circle_concentric_total_length(self):
        spec = ShapeSpec("circle", "concentric", density=1.0, size=2.0, line_width=0.2)
        _, toolpath = synth_sample(spec, rng_seed=0)
        # deposited length = sum of the 5 shell circumferences
        deposited = toolpath.keypoints[-1].e / EXTRUSION_PER_MM
        assert deposited == pytest.approx(6 * math.pi, rel=0.01)
        # nozzle path additionally hops 4 times between shells (0.2 each)
        expected_travel = 6 * math.pi + 4 * 0.2
        assert travel_length(toolpath.keypoints) == pytest.approx(expected_travel, rel=0.01)

    def test_same_seed_identical(self):
        spec = ShapeSpec("annulus", "rectilinear", density=0.6, angle_deg=30.0)
        contour_a, path_a = synth_sample(spec, rng_seed=42)
        contour_b, path_b = synth_sample(spec, rng_seed=42)
        assert all(np.array_equal(x, y) for x, y in zip(contour_a.loops, contour_b.loops))
        assert path_a == path_b

    def test_different_seed_differs(self):
        spec = ShapeSpec("rectangle", "rectilinear")
        _, path_a = synth_sample(spec, rng_seed=1)
        _, path_b = synth_sample(spec, rng_seed=2)
        assert path_a != path_b

    def test_unknown_shape(self):
        with pytest.raises(UnknownShape):
            ShapeSpec("hexagon")
        with pytest.raises(UnknownShape):
            ShapeSpec("square", "honeycomb")

    @pytest.mark.parametrize("shape", ["square", "rectangle", "circle", "annulus", "c_shape"])
    @pytest.mark.parametrize("infill", ["rectilinear", "concentric"])
    def test_toolpaths_validate_with_monotone_e(self, shape, infill):
        spec = ShapeSpec(shape, infill, density=0.5, angle_deg=15.0)
        _, toolpath = synth_sample(spec, rng_seed=7)
        profile = PrinterProfile(build_min=(-500, -500), build_max=(500, 500))
        report = validate_layer(toolpath.keypoints, profile)
        assert report.ok, report.summary()

    def test_contour_matches_infill_region(self):
        contour, toolpath = synth_sample(ShapeSpec("circle", size=30.0), rng_seed=3)
        min_x, min_y, max_x, max_y = contour.bounds()
        xs = [p.x for p in toolpath.keypoints]
        ys = [p.y for p in toolpath.keypoints]
        assert min(xs) >= min_x - 1e-6 and max(xs) <= max_x + 1e-6
        assert min(ys) >= min_y - 1e-6 and max(ys) <= max_y + 1e-6


@settings(max_examples=20, deadline=None)
@given(
    shape=st.sampled_from(["square", "rectangle", "circle", "annulus", "c_shape"]),
    infill=st.sampled_from(["rectilinear", "concentric"]),
    density=st.floats(min_value=0.2, max_value=1.0),
    angle=st.floats(min_value=0.0, max_value=180.0),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_synth_always_monotone(shape, infill, density, angle, seed):
    spec = ShapeSpec(shape, infill, density=density, angle_deg=angle)
    _, toolpath = synth_sample(spec, rng_seed=seed)
    es = [p.e for p in toolpath.keypoints]
    assert all(b >= a for a, b in zip(es, es[1:]))
