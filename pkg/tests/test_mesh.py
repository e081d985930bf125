"""Mesh parsing, normalization, volume/inertia oracles, surface sampling."""
import numpy as np
import pytest

from geodex import mesh as M
from geodex.errors import (BadSpec, DegenerateExtent, EmptyMesh,
                           NonPositiveVolume, ParseError)

CUBE_OBJ = """\
# unit cube
v -0.5 -0.5 -0.5
v -0.5 -0.5 0.5
v -0.5 0.5 -0.5
v -0.5 0.5 0.5
v 0.5 -0.5 -0.5
v 0.5 -0.5 0.5
v 0.5 0.5 -0.5
v 0.5 0.5 0.5
f 1 2 4 3
f 5 7 8 6
f 1 5 6 2
f 3 4 8 7
f 1 3 7 5
f 2 6 8 4
"""

CUBE_OFF = """\
OFF
8 6 12
-0.5 -0.5 -0.5
-0.5 -0.5 0.5
-0.5 0.5 -0.5
-0.5 0.5 0.5
0.5 -0.5 -0.5
0.5 -0.5 0.5
0.5 0.5 -0.5
0.5 0.5 0.5
4 0 1 3 2
4 4 6 7 5
4 0 4 5 1
4 2 3 7 6
4 0 2 6 4
4 1 5 7 3
"""

TRI_STL = """\
solid tri
facet normal 0 0 1
  outer loop
    vertex 0 0 0
    vertex 1 0 0
    vertex 0 1 0
  endloop
endfacet
endsolid tri
"""


def unit_cube():
    return M.parse_mesh(CUBE_OBJ, "obj", name="cube")


class TestParsers:
    def test_obj_fans_quads(self):
        m = unit_cube()
        assert m.vertices.shape == (8, 3)
        assert m.faces.shape == (12, 3)  # 6 quads fanned to 12 triangles

    def test_off_matches_obj(self):
        a = unit_cube()
        b = M.parse_mesh(CUBE_OFF, "off", name="cube")
        np.testing.assert_array_equal(a.vertices, b.vertices)
        np.testing.assert_array_equal(a.faces, b.faces)

    def test_stl_single_facet(self):
        m = M.parse_mesh(TRI_STL, "stl", name="tri")
        assert m.faces.shape == (1, 3)
        np.testing.assert_allclose(m.face_normals[0], [0, 0, 1])

    def test_parse_errors(self):
        with pytest.raises(ParseError):
            M.parse_mesh("v 1 2\nf 1 2 3\n", "obj")       # short vertex
        with pytest.raises(ParseError):
            M.parse_mesh("v 1 2 3\nf 0 1 2\n", "obj")     # 1-based indices
        with pytest.raises(ParseError):
            M.parse_mesh("v 1 2 3\nf 1 2 9\n", "obj")     # out of range
        with pytest.raises(ParseError):
            M.parse_mesh("not an off file", "off")
        with pytest.raises(ParseError):
            M.parse_mesh(CUBE_OBJ, "ply")                 # unknown format
        with pytest.raises(EmptyMesh):
            M.parse_mesh("v 1 2 3\n", "obj")              # vertices, no faces

    def test_line_numbers_reported(self):
        with pytest.raises(ParseError) as exc:
            M.parse_mesh("v 0 0 0\nv 1 0 0\nf 1 2 7\n", "obj")
        assert "line 3" in str(exc.value)

    def test_degenerate_faces_dropped(self):
        text = CUBE_OBJ + "f 1 1 2\n"  # repeated vertex: zero-area face
        m = M.parse_mesh(text, "obj", name="cube")
        assert m.faces.shape == (12, 3)
        assert m.dropped_faces == 1


class TestRoundTrip:
    def test_obj_serialize_parse_identity(self):
        m = unit_cube()
        again = M.parse_mesh(M.serialize_obj(m), "obj", name="cube")
        np.testing.assert_array_equal(m.vertices, again.vertices)
        np.testing.assert_array_equal(m.faces, again.faces)

    def test_save_load_file(self, tmp_path):
        m = M.procedural_object({"kind": "ellipsoid", "rx": 1.0, "ry": 1.3,
                                 "rz": 0.8, "subdivision": 2})
        path = tmp_path / "e.obj"
        M.save_obj(path, m)
        again = M.load_mesh(path)
        np.testing.assert_array_equal(m.vertices, again.vertices)
        np.testing.assert_array_equal(m.faces, again.faces)

    def test_load_unknown_extension(self, tmp_path):
        p = tmp_path / "m.xyz"
        p.write_text("whatever")
        with pytest.raises(ParseError):
            M.load_mesh(p)


class TestNormalizeScale:
    def test_shortest_side_rule(self):
        m = M.procedural_object({"kind": "box", "ax": 0.10, "ay": 0.20,
                                 "az": 0.10})
        lo, hi = M.aabb(M.normalize_scale(m))
        np.testing.assert_allclose(hi - lo, [0.057, 0.114, 0.057], atol=1e-12)

    def test_longest_cap_rule(self):
        # 0.10 x 0.30 x 0.10: shortest-side rule would give a longest of
        # 0.171 > 0.13, so the cap wins: scale = 0.13 / 0.30
        m = M.procedural_object({"kind": "box", "ax": 0.10, "ay": 0.30,
                                 "az": 0.10})
        lo, hi = M.aabb(M.normalize_scale(m))
        s = 0.130 / 0.30
        np.testing.assert_allclose(hi - lo, [0.10 * s, 0.130, 0.10 * s],
                                   atol=1e-12)

    def test_centered_and_idempotent(self):
        m = M.procedural_object({"kind": "box", "ax": 1.0, "ay": 2.0,
                                 "az": 1.5})
        m = M.Mesh(vertices=m.vertices + 3.0, faces=m.faces,
                   face_normals=m.face_normals, name=m.name)
        n1 = M.normalize_scale(m)
        lo, hi = M.aabb(n1)
        np.testing.assert_allclose(lo + hi, np.zeros(3), atol=1e-12)
        n2 = M.normalize_scale(n1)
        np.testing.assert_allclose(n1.vertices, n2.vertices, atol=1e-12)

    def test_degenerate_extent(self):
        flat = M.Mesh(vertices=np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                      faces=np.array([[0, 1, 2]]),
                      face_normals=np.array([[0.0, 0, 1]]), name="flat")
        with pytest.raises(DegenerateExtent):
            M.normalize_scale(flat)


class TestVolumeAndInertia:
    def test_cube_volume_exact(self):
        assert M.mesh_volume(unit_cube()) == pytest.approx(1.0, abs=1e-12)

    def test_cuboid_inertia_closed_form(self):
        # solid box a x b x c, mass m: I_xx = m (b^2 + c^2) / 12, etc.
        a, b, c, mass = 0.08, 0.12, 0.05, 0.3
        m = M.procedural_object({"kind": "box", "ax": a, "ay": b, "az": c})
        inertia = M.inertia_tensor(m, mass)
        expect = mass / 12.0 * np.diag(
            [b * b + c * c, a * a + c * c, a * a + b * b])
        assert np.abs(inertia - expect).max() < 1e-9

    def test_cube_inertia_ma2_over_6(self):
        a, mass = 0.06, 0.2
        m = M.procedural_object({"kind": "box", "ax": a, "ay": a, "az": a})
        inertia = M.inertia_tensor(m, mass)
        np.testing.assert_allclose(inertia, mass * a * a / 6.0 * np.eye(3),
                                   atol=1e-9)

    def test_ellipsoid_volume_converges(self):
        # inscribed triangulation approaches 4/3 pi rx ry rz from below
        rx, ry, rz = 0.9, 1.1, 0.7
        exact = 4.0 / 3.0 * np.pi * rx * ry * rz
        vols = [M.mesh_volume(M.procedural_object(
            {"kind": "ellipsoid", "rx": rx, "ry": ry, "rz": rz,
             "subdivision": s})) for s in (2, 3, 4)]
        errs = [exact - v for v in vols]
        assert all(e > 0 for e in errs)
        assert errs[1] < errs[0] / 3.0 and errs[2] < errs[1] / 3.0

    def test_cylinder_volume_converges(self):
        r, h = 0.5, 1.2
        exact = np.pi * r * r * h
        v = M.mesh_volume(M.procedural_object(
            {"kind": "cylinder", "r": r, "h": h, "subdivision": 5}))
        assert abs(exact - v) / exact < 0.01

    def test_sphere_inertia_converges(self):
        # solid sphere: I = 2/5 m r^2; subdivision-4 mesh within 1%
        r, mass = 0.05, 0.4
        m = M.procedural_object({"kind": "ellipsoid", "rx": r, "ry": r,
                                 "rz": r, "subdivision": 4})
        inertia = M.inertia_tensor(m, mass)
        expect = 0.4 * mass * r * r
        assert abs(inertia[0, 0] - expect) / expect < 0.01
        assert np.abs(inertia - np.diag(np.diag(inertia))).max() < 1e-12

    def test_inverted_mesh_rejected(self):
        m = unit_cube()
        flipped = M.Mesh(vertices=m.vertices,
                         faces=m.faces[:, ::-1].copy(),
                         face_normals=-m.face_normals, name="inside-out")
        with pytest.raises(NonPositiveVolume):
            M.inertia_tensor(flipped, 0.2)


class TestSampling:
    def test_consumes_exactly_three_draws(self):
        m = unit_cube()
        rng1 = np.random.default_rng(42)
        rng2 = np.random.default_rng(42)
        M.sample_surface(m, 64, rng1)
        for _ in range(3):
            rng2.random(64)
        assert rng1.random() == rng2.random()

    def test_points_on_surface_normals_unit(self):
        m = unit_cube()
        cloud = M.sample_surface(m, 512, np.random.default_rng(0))
        assert np.abs(cloud.points).max() <= 0.5 + 1e-12
        on_face = np.isclose(np.abs(cloud.points), 0.5, atol=1e-12)
        assert on_face.any(axis=1).all()
        np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0,
                                   atol=1e-12)

    def test_area_weighting(self):
        # box 1 x 2 x 2: the two +-x faces carry area 8 of 16 total
        m = M.procedural_object({"kind": "box", "ax": 1.0, "ay": 2.0,
                                 "az": 2.0})
        cloud = M.sample_surface(m, 20000, np.random.default_rng(1))
        frac_x = np.mean(np.isclose(np.abs(cloud.points[:, 0]), 0.5,
                                    atol=1e-9))
        expect = 8.0 / 16.0
        assert abs(frac_x - expect) < 4.0 * np.sqrt(expect * (1 - expect)
                                                    / 20000)

    def test_normals_match_face_geometry(self):
        m = unit_cube()
        cloud = M.sample_surface(m, 256, np.random.default_rng(2))
        for p, n in zip(cloud.points, cloud.normals):
            axis = np.argmax(np.abs(n))
            assert np.isclose(abs(p[axis]), 0.5, atol=1e-12)
            assert np.isclose(abs(n[axis]), 1.0, atol=1e-12)

    def test_deterministic_given_stream(self):
        m = unit_cube()
        a = M.sample_surface(m, 128, np.random.default_rng(7))
        b = M.sample_surface(m, 128, np.random.default_rng(7))
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.normals, b.normals)

    def test_bad_cloud_size(self):
        with pytest.raises(BadSpec):
            M.sample_surface(unit_cube(), 0, np.random.default_rng(0))


class TestProcedural:
    def test_names_are_deterministic(self):
        spec = {"kind": "superellipsoid", "rx": 1.0, "ry": 1.35, "rz": 0.85,
                "e1": 0.5, "e2": 0.5, "subdivision": 3}
        assert (M.procedural_object(spec).name
                == "superellipsoid_1x1.35x0.85_e0.5x0.5_s3")
        assert M.procedural_object(
            {"kind": "box", "ax": 1.0, "ay": 2.28, "az": 1.0}
        ).name == "box_1x2.28x1"

    def test_identical_specs_identical_meshes(self):
        spec = {"kind": "cylinder", "r": 1.0, "h": 2.1, "subdivision": 3}
        a = M.procedural_object(spec)
        b = M.procedural_object(spec)
        np.testing.assert_array_equal(a.vertices, b.vertices)
        np.testing.assert_array_equal(a.faces, b.faces)

    def test_closed_surfaces(self):
        # every edge of a closed orientable triangulation appears exactly
        # twice, once in each direction
        for spec in [{"kind": "box", "ax": 1, "ay": 2, "az": 3},
                     {"kind": "ellipsoid", "rx": 1, "ry": 1.2, "rz": 0.7,
                      "subdivision": 2},
                     {"kind": "cylinder", "r": 0.8, "h": 1.5,
                      "subdivision": 2},
                     {"kind": "superellipsoid", "rx": 1, "ry": 1.1, "rz": 0.9,
                      "e1": 0.6, "e2": 0.8, "subdivision": 2}]:
            m = M.procedural_object(spec)
            directed = set()
            for f in m.faces:
                for k in range(3):
                    e = (int(f[k]), int(f[(k + 1) % 3]))
                    assert e not in directed, f"{m.name}: repeated edge {e}"
                    directed.add(e)
            for e in directed:
                assert (e[1], e[0]) in directed, f"{m.name}: open edge {e}"

    def test_bad_specs(self):
        with pytest.raises(BadSpec):
            M.procedural_object({"kind": "moebius"})
        with pytest.raises(BadSpec):
            M.procedural_object({"kind": "box", "ax": -1, "ay": 1, "az": 1})
        with pytest.raises(BadSpec):
            M.procedural_object({"kind": "ellipsoid", "rx": 1, "ry": 1,
                                 "rz": 1, "subdivision": 0})
        with pytest.raises(BadSpec):
            M.procedural_object("box_1x1x1")
