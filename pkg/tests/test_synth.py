import numpy as np
import pytest
from hypothesis import given, strategies as st

from toothmatch.exceptions import SchemaError
from toothmatch.fhm import FDI_POSITION
from toothmatch.mesh import validate_mesh
from toothmatch.projection import bilinear_sample, rescale_coords
from toothmatch.synth import (ArchSpec, PerturbSpec, class_at_position, class_embedding_matrix, generate_arch,
                              icosphere, perfect_prediction, perturb, synth_embedding_grid,
                              third_molar_flip_case)


@pytest.mark.parametrize("jaw", ["upper", "lower"])
def test_full_arch_is_ordered_and_bijective(jaw):
    mesh, gt = generate_arch(ArchSpec(jaw=jaw, seed=5, tooth_faces=40, gingiva_faces=300))
    validate_mesh(mesh)
    assert sorted(gt.labels.tolist()) == list(range(1, 17))
    # one instance per class and one class per instance
    for iid in range(16):
        assert np.unique(mesh.face_labels[mesh.face_instance_ids == iid]).size == 1
    pos = FDI_POSITION[jaw]
    by_pos = sorted(range(16), key=lambda i: pos[int(gt.labels[i])])
    xs = gt.centers3d[by_pos, 0]
    assert np.all(np.diff(xs) > 0)
    assert np.all(mesh.face_instance_ids[mesh.face_labels == 0] == -1)


def test_missing_third_molars():
    mesh, gt = generate_arch(ArchSpec(teeth_present=[c for c in range(1, 17) if c not in (8, 16)], seed=2,
                                      tooth_faces=40, gingiva_faces=300))
    assert gt.n_teeth == 14
    assert not np.isin([8, 16], mesh.face_labels).any()


def test_generation_is_deterministic():
    spec = ArchSpec(seed=9, crowding_jitter=0.2, tooth_faces=40, gingiva_faces=300)
    (m1, g1), (m2, g2) = generate_arch(spec), generate_arch(spec)
    assert m1.vertices.tobytes() == m2.vertices.tobytes()
    assert m1.faces.tobytes() == m2.faces.tobytes()
    assert g1.centers3d.tobytes() == g2.centers3d.tobytes()
    m3, _ = generate_arch(ArchSpec(seed=10, crowding_jitter=0.2, tooth_faces=40, gingiva_faces=300))
    assert m3.vertices.tobytes() != m1.vertices.tobytes()


def test_vertices_survive_float32():
    mesh, _ = generate_arch(ArchSpec(seed=1, tooth_faces=20, gingiva_faces=50))
    np.testing.assert_array_equal(mesh.vertices.astype(np.float32).astype(np.float64), mesh.vertices)


@pytest.mark.parametrize("doc, field", [
    ({"jaw": "middle"}, "jaw"),
    ({"teeth_present": [0, 3]}, "teeth_present"),
    ({"teeth_present": "all"}, "teeth_present"),
    ({"crowding_jitter": 0.7}, "crowding_jitter"),
    ({"tooth_faces": 4}, "tooth_faces"),
    ({"seed": 1.5}, "seed"),
    ({"colour": "red"}, "colour"),
])
def test_spec_errors_name_the_field(doc, field):
    with pytest.raises(SchemaError, match=f"^{field}"):
        ArchSpec.from_dict(doc)


def test_spec_round_trip():
    spec = ArchSpec(jaw="lower", teeth_present=(3, 1, 2), seed=4)
    assert spec.teeth_present == (1, 2, 3)
    assert ArchSpec.from_dict(spec.as_dict()) == spec


def test_class_at_position_inverts_fdi():
    for jaw in ("upper", "lower"):
        cap = class_at_position(jaw)
        assert sorted(cap) == list(range(16))
        assert all(FDI_POSITION[jaw][c] == p for p, c in cap.items())


def test_icosphere_is_closed_and_outward():
    v, f = icosphere(2, radius=3.0)
    assert len(f) == 20 * 4 ** 2
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 3.0)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    n = np.cross(b - a, c - a)
    assert np.all(np.einsum("ij,ij->i", n, (a + b + c) / 3) > 0)
    # closed surface: every edge used exactly twice
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_perturb_identity_at_zero(small_arch):
    s = small_arch
    pred = perfect_prediction(s.gt, s.geom, s.cmap)
    same = perturb(pred, PerturbSpec(seed=4), s.scene)
    for name in ("mask_logits", "class_logits", "objectness", "centers3d", "centers2d", "valid"):
        np.testing.assert_array_equal(getattr(same, name), getattr(pred, name))


@given(st.floats(0.0, 0.9), st.integers(0, 1000))
def test_perturb_flip_count_and_drift(small_arch, rate, seed):
    s = small_arch
    pred = perfect_prediction(s.gt, s.geom, s.cmap)
    out = perturb(pred, PerturbSpec(mask_flip_rate=rate, center_drift=0.03, seed=seed), s.scene)
    valid = pred.valid
    changed = np.any(out.mask_logits[valid] != pred.mask_logits[valid], axis=0)
    assert changed.sum() == round(rate * pred.n_faces)
    np.testing.assert_array_equal(out.mask_logits[~valid], pred.mask_logits[~valid])
    d = np.linalg.norm(out.centers3d[valid] - pred.centers3d[valid], axis=1)
    np.testing.assert_allclose(d, 0.03 * s.scene.diagonal, rtol=1e-9)


def test_perturb_confusion(small_arch):
    s = small_arch
    pred = perfect_prediction(s.gt, s.geom, s.cmap)
    out = perturb(pred, PerturbSpec(class_confusion=(8, 7, 1.0)), s.scene)
    top = np.argmax(out.class_logits[pred.valid], axis=1)
    expected = np.where(s.gt.labels == 8, 7, s.gt.labels)
    np.testing.assert_array_equal(top, expected)
    none = perturb(pred, PerturbSpec(class_confusion=(8, 7, 0.0)), s.scene)
    np.testing.assert_array_equal(none.class_logits, pred.class_logits)


def test_class_embeddings_orthonormal():
    e = class_embedding_matrix(64, seed=3)
    np.testing.assert_allclose(e @ e.T, np.eye(17), atol=1e-12)


def test_onehot_embedding_grid(small_arch):
    s = small_arch
    grid = synth_embedding_grid(s.mesh, s.cmap, (48, 48), channels=32, smoothing=0.0, geom=s.geom)
    emb = class_embedding_matrix(32, 0)
    values = grid.values.reshape(32, -1).T
    norms = np.linalg.norm(values, axis=1)
    # unsmoothed cells hold either nothing or exactly one class embedding
    occupied = norms > 0
    assert occupied.any() and np.allclose(norms[occupied], 1.0)
    nearest = np.argmax(values[occupied] @ emb.T, axis=1)
    np.testing.assert_allclose(values[occupied], emb[nearest], atol=1e-12)
    # sampling at face coordinates recovers tooth classes for most tooth faces
    ep = bilinear_sample(grid, rescale_coords(s.cmap, (48, 48)))
    guess = np.argmax(emb @ ep, axis=0)
    teeth = s.mesh.face_labels > 0
    assert np.mean(guess[teeth] == s.mesh.face_labels[teeth]) > 0.5


def test_random_embedding_grid_is_seeded(small_arch):
    s = small_arch
    a = synth_embedding_grid(s.mesh, s.cmap, (8, 8), mode="random", channels=4, seed=2)
    b = synth_embedding_grid(s.mesh, s.cmap, (8, 8), mode="random", channels=4, seed=2)
    assert a.values.tobytes() == b.values.tobytes() and a.values.shape == (4, 8, 8)
    with pytest.raises(SchemaError):
        synth_embedding_grid(s.mesh, s.cmap, (8, 8), mode="nope")


def test_flip_case_shape():
    case = third_molar_flip_case()
    assert case.gt.n_teeth == 15 and 16 not in case.gt.labels
    assert len(case.chain) == 5
    assert int(case.pred.valid.sum()) == 15
    tops = np.argmax(case.pred.class_logits[list(case.chain)], axis=1)
    np.testing.assert_array_equal(tops, case.gt.labels[list(case.chain[1:]) + [case.chain[-1] + 1]])
