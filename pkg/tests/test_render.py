import numpy as np
import pytest

from deepfeedback.geometry import Pose6DoF, axis_angle_to_quat, identity_quat, random_unit_quat
from deepfeedback.render import (
    Camera,
    Light,
    ObjParseError,
    TriangleMesh,
    decode_pnm,
    dump_obj,
    encode_pnm,
    lambertian_shade,
    load_obj,
    make_primitive,
    rasterize,
    rasterize_faces,
    silhouette_energy,
)
from oracles import brute_force_silhouette

CAM32 = Camera.default(32, 50.0)


def _at(z, q=None):
    return Pose6DoF(identity_quat() if q is None else q, np.array([0.0, 0.0, z]))


def test_obj_quad_fans_into_two_triangles():
    m = load_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_index_forms_and_negative_indices():
    text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\nf 1/1 2/1/1 3//1\nf -3 -2 -1\n"
    m = load_obj(text)
    assert m.faces.tolist() == [[0, 1, 2], [0, 1, 2]]


def test_obj_drops_degenerate_faces():
    m = load_obj("v 0 0 0\nv 1 0 0\nv 2 0 0\nv 0 1 0\nf 1 2 3\nf 1 2 4\n")
    assert m.faces.tolist() == [[0, 1, 3]]


@pytest.mark.parametrize(
    "text, line",
    [
        ("v 0 0 0\nv 1 0 0\nf 1 2 9\n", 3),
        ("v 0 0\n", 1),
        ("v 0 0 0\nv 1 0 0\nv 0 1 0\n# c\nf 1 x 3\n", 5),
        ("v 0 0 0\nf 0 1 1\n", 2),
    ],
)
def test_obj_errors_carry_line_numbers(text, line):
    with pytest.raises(ObjParseError) as ei:
        load_obj(text)
    assert ei.value.lineno == line


def test_obj_round_trip_is_exact():
    m = make_primitive("icosphere", 0.7, subdiv=1)
    back = load_obj(dump_obj(m))
    assert np.array_equal(back.vertices, m.vertices) and np.array_equal(back.faces, m.faces)


def test_primitive_counts():
    assert make_primitive("cube").faces.shape == (12, 3)
    assert make_primitive("icosphere", subdiv=2).faces.shape == (320, 3)
    cyl = make_primitive("cylinder", segments=16)
    assert cyl.vertices.shape == (34, 3) and cyl.faces.shape == (64, 3)
    with pytest.raises(ValueError):
        make_primitive("torus")


def test_primitives_are_closed_and_outward():
    for kind in ("cube", "icosphere", "cylinder"):
        m = make_primitive(kind)
        centers = m.vertices[m.faces].mean(axis=1)
        assert np.all(np.sum(m.face_normals() * centers, axis=1) > 0), kind
        edges = np.sort(np.concatenate([m.faces[:, [0, 1]], m.faces[:, [1, 2]], m.faces[:, [2, 0]]]), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        assert np.all(counts == 2), kind


def test_empty_mesh_and_behind_camera_render_blank():
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)))
    assert not rasterize(empty, _at(-2.0), CAM32).any()
    cube = make_primitive("cube", 0.5)
    assert not rasterize(cube, _at(2.0), CAM32).any()


def test_cube_silhouette_is_a_centered_square():
    cam = Camera(10.0, 10.0, 16.0, 16.0, 32, 32)
    cube = make_primitive("cube", 1.0)
    # front face at depth 1.5 spans 16 +- 10 * 0.5 / 1.5, centers 13.5 .. 18.5
    img = rasterize(cube, _at(-2.0), cam)
    rows, cols = np.nonzero(img)
    assert img.sum() == 36
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (13, 18, 13, 18)


def test_moving_away_shrinks_silhouette():
    cube = make_primitive("cube", 0.5)
    near = rasterize(cube, _at(-1.5), CAM32).sum()
    far = rasterize(cube, _at(-3.0), CAM32).sum()
    assert far < near


def test_shared_edges_are_drawn_exactly_once():
    # two triangles sharing a diagonal that passes through pixel centers
    cam = Camera(8.0, 8.0, 8.0, 8.0, 16, 16)
    z = -1.0
    corners = np.array([[-0.5, 0.5], [0.5, 0.5], [0.5, -0.5], [-0.5, -0.5]]) * (7.0 / 8.0) / 1.0
    v = np.c_[corners, np.full(4, z)]
    both = TriangleMesh(v, [[0, 1, 2], [0, 2, 3]])
    m1 = TriangleMesh(v, [[0, 1, 2]])
    m2 = TriangleMesh(v, [[0, 2, 3]])
    p = Pose6DoF.identity()
    a, b, ab = (rasterize(m, p, cam) for m in (m1, m2, both))
    assert not np.any((a > 0) & (b > 0))
    assert np.array_equal((a + b) > 0, ab > 0)


def test_rasterizer_matches_brute_force_on_random_meshes():
    rng = np.random.default_rng(7)
    for _ in range(10):
        v = rng.uniform(-0.5, 0.5, size=(12, 3))
        f = rng.integers(0, 12, size=(15, 3))
        mesh = TriangleMesh(v, f)
        pose = Pose6DoF(random_unit_quat(rng), np.array([0.0, 0.0, -1.5]))
        got = rasterize(mesh, pose, CAM32) > 0
        assert np.array_equal(got, brute_force_silhouette(mesh, pose, CAM32))


def test_zbuffer_keeps_nearest_and_lower_index_on_ties():
    cam = Camera(8.0, 8.0, 8.0, 8.0, 16, 16)
    quad = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    near = np.c_[quad * 0.5, np.full(4, -1.0)]
    far = np.c_[quad * 3, np.full(4, -3.0)]
    mesh = TriangleMesh(np.r_[far, near], [[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]])
    depth = rasterize(mesh, Pose6DoF.identity(), cam, "depth")
    assert depth[8, 8] == pytest.approx(1.0)
    assert depth[0, 0] == pytest.approx(3.0)
    tri_cam = np.array([near[:3], near[:3]])
    u, v, _ = cam.project(near[:3])
    tri_uv = np.stack([np.c_[u, v]] * 2)
    fid, _ = rasterize_faces(tri_uv, tri_cam, cam)
    assert set(np.unique(fid)) == {-1, 0}


def test_lambertian_facing_light_and_falloff():
    n = np.array([[0.0, 0.0, 1.0]])
    p = np.zeros((1, 3))
    d = Light("directional", (0.0, 0.0, -1.0))
    assert lambertian_shade(p, n, d, 0.8)[0] == pytest.approx(0.8)
    assert lambertian_shade(p, -n, d, 0.8)[0] == 0.0
    pt = Light("point", (0.0, 0.0, 2.0))
    assert lambertian_shade(p, n, pt, 1.0)[0] == pytest.approx(0.25)
    with pytest.raises(ValueError):
        Light("directional", (0.0, 0.0, -2.0))


def test_lambertian_render_is_flat_per_face():
    cube = make_primitive("cube", 0.5)
    img = rasterize(cube, _at(-1.5), CAM32, "lambertian", light=Light("directional", (0.0, 0.0, -1.0)))
    assert img.shape == (3, 32, 32) and img.dtype == np.float32
    vals = np.unique(img[0][img[0] > 0])
    assert np.allclose(vals, 0.8)
    assert np.array_equal(img[0] > 0, rasterize(cube, _at(-1.5), CAM32) > 0)


def test_silhouette_energy_counts_differing_pixels():
    a = np.zeros((4, 4))
    b = a.copy()
    b[0, :2] = 1
    assert silhouette_energy(a, a) == 0.0
    assert silhouette_energy(a, b) == 2 / 16
    with pytest.raises(ValueError):
        silhouette_energy(a, np.zeros((3, 3)))


def test_pnm_round_trip():
    rng = np.random.default_rng(0)
    sil = (rng.random((5, 7)) > 0.5).astype(np.float32)
    assert np.array_equal(decode_pnm(encode_pnm(sil)), sil)
    rgb = rng.random((3, 4, 6))
    back = decode_pnm(encode_pnm(rgb, 65535))
    assert back.shape == (3, 4, 6)
    assert np.max(np.abs(back - rgb)) <= 0.5 / 65535 + 1e-7
    assert encode_pnm(sil).startswith(b"P5\n7 5\n255\n")


def test_pnm_rejects_truncation():
    data = encode_pnm(np.zeros((4, 4)))
    with pytest.raises(ValueError, match="truncated"):
        decode_pnm(data[:-1])
    with pytest.raises(ValueError):
        decode_pnm(b"P3\n1 1\n255\n0 0 0")


def test_render_is_deterministic():
    m = make_primitive("cylinder", 0.5)
    pose = np.r_[axis_angle_to_quat([1, 2, 3], 33.0), 0.05, -0.02, -1.5]
    a = rasterize(m, pose, CAM32)
    b = rasterize(m, pose, CAM32)
    assert a.tobytes() == b.tobytes()
