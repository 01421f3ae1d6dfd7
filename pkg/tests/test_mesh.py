import numpy as np
import pytest
from hypothesis import given, strategies as st

from toothmatch.exceptions import DegenerateInputError, MeshFormatError
from toothmatch.mesh import (LabeledMesh, compute_geometry, load_mesh, read_obj, read_ply, save_mesh,
                             scene_frame, write_ply)
from toothmatch.synth import icosphere

from conftest import strip_mesh

TETRA_V = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
TETRA_F = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])


def tetra(labels=(0, 0, 1, 1), inst=(-1, -1, 0, 0)):
    return LabeledMesh(TETRA_V, TETRA_F, labels, inst, "upper")


def test_valid_mesh_is_read_only():
    m = tetra()
    assert m.n_faces == 4
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0


@pytest.mark.parametrize("faces,err", [
    ([[0, 1, 9]], MeshFormatError),
    ([[0, 0, 1]], MeshFormatError),
    ([[0, 1, 2, 3]], MeshFormatError),
])
def test_bad_faces_rejected(faces, err):
    with pytest.raises(err):
        LabeledMesh(TETRA_V, faces, [0], [-1])


def test_collinear_face_is_degenerate():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(DegenerateInputError):
        LabeledMesh(v, [[0, 1, 2]], [0], [-1])


def test_tiny_area_below_epsilon_is_degenerate():
    # squared area 0.25 * (1e-7)^2 is far below 1e-12
    v = np.array([[0.0, 0, 0], [1e-7, 0, 0], [0, 1, 0]])
    with pytest.raises(DegenerateInputError):
        LabeledMesh(v, [[0, 1, 2]], [0], [-1])


@pytest.mark.parametrize("labels,inst", [
    ((0, 0, 1, 1), (0, -1, 0, 0)),      # gingiva face with an instance
    ((0, 0, 1, 1), (-1, -1, -1, 0)),    # tooth face without an instance
    ((0, 0, 1, 2), (-1, -1, 0, 0)),     # one instance, two classes
    ((0, 0, 1), (-1, -1, 0)),           # length mismatch
    ((0, 0, 1, 17), (-1, -1, 0, 1)),    # label out of range
])
def test_label_invariants(labels, inst):
    with pytest.raises(MeshFormatError):
        tetra(labels, inst)


def test_unknown_jaw():
    with pytest.raises(MeshFormatError):
        LabeledMesh(TETRA_V, TETRA_F, [0] * 4, [-1] * 4, "middle")


def test_face_centers_are_vertex_means():
    g = compute_geometry(tetra())
    np.testing.assert_array_equal(g.centers, TETRA_V[TETRA_F].mean(axis=1))
    assert g.areas[0] == pytest.approx(0.5)
    assert g.areas[3] == pytest.approx(np.sqrt(3) / 2)


def test_normals_on_icosphere():
    v, f = icosphere(3)
    m = LabeledMesh(v, f, np.zeros(len(f), int), -np.ones(len(f), int))
    g = compute_geometry(m)
    np.testing.assert_allclose(np.linalg.norm(g.normals, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(g.vertex_normals, axis=1), 1.0, atol=1e-12)
    # outward: face normals agree with the radial direction of the face center
    radial = g.centers / np.linalg.norm(g.centers, axis=1, keepdims=True)
    assert np.min(np.einsum("ij,ij->i", g.normals, radial)) > 0.98
    assert np.min(np.einsum("ij,ij->i", g.vertex_normals, v)) > 0.999


def test_scene_frame():
    s = scene_frame(tetra())
    assert s.diagonal == pytest.approx(np.sqrt(3.0), abs=1e-15)
    np.testing.assert_array_equal(s.arch_axis, [1.0, 0.0, 0.0])
    s2 = scene_frame(tetra(), arch_axis=(2.0, 0.0, 0.0))
    assert np.linalg.norm(s2.arch_axis) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("ext", ["obj", "ply"])
def test_round_trip(tmp_path, ext):
    m = strip_mesh(5, jitter=0.1, seed=2)
    m = LabeledMesh(m.vertices.astype(np.float32), m.faces, m.face_labels, m.face_instance_ids, "lower")
    path, side = tmp_path / f"m.{ext}", tmp_path / "m.json"
    save_mesh(m, path, side)
    back = load_mesh(path, side)
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)
    np.testing.assert_array_equal(back.face_labels, m.face_labels)
    assert back.jaw == "lower"


def test_obj_quads_and_garbage_rejected(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(MeshFormatError):
        read_obj(p)
    p.write_text("v 0 0 zero\n")
    with pytest.raises(MeshFormatError):
        read_obj(p)


def test_obj_tolerates_slash_indices(tmp_path):
    p = tmp_path / "s.obj"
    p.write_text("# c\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\n")
    v, f = read_obj(p)
    assert f.tolist() == [[0, 1, 2]]


def test_ply_header_checked(tmp_path):
    p = tmp_path / "a.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
    with pytest.raises(MeshFormatError):
        read_ply(p)


def test_sidecar_length_mismatch(tmp_path):
    m = strip_mesh(3)
    save_mesh(m, tmp_path / "m.obj", tmp_path / "m.json")
    other = strip_mesh(4)
    write_ply(tmp_path / "n.ply", other.vertices, other.faces)
    with pytest.raises(MeshFormatError, match="face_labels"):
        load_mesh(tmp_path / "n.ply", tmp_path / "m.json")


@given(st.permutations(list(range(12))))
def test_geometry_follows_face_permutation(order):
    m = strip_mesh(6, jitter=0.2, seed=5)
    g = compute_geometry(m)
    gp = compute_geometry(m.permuted(order))
    np.testing.assert_array_equal(gp.centers, g.centers[list(order)])
    np.testing.assert_array_equal(gp.normals, g.normals[list(order)])


@given(st.floats(0.1, 50.0), st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_scene_diagonal_scales(s, t):
    m = strip_mesh(4, jitter=0.1)
    d = scene_frame(m).diagonal
    assert scene_frame(m.scaled(s)).diagonal == pytest.approx(s * d, rel=1e-12)
    assert scene_frame(m.translated(t)).diagonal == pytest.approx(d, rel=1e-9)
