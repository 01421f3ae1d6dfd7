import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from toothmatch.mesh import LabeledMesh, compute_geometry, scene_frame
from toothmatch.projection import project_occlusal
from toothmatch.synth import ArchSpec, generate_arch

settings.register_profile("repo", max_examples=40, deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])


class Scene:
    def __init__(self, mesh, gt):
        self.mesh = mesh
        self.gt = gt
        self.geom = compute_geometry(mesh)
        self.scene = scene_frame(mesh)
        self.cmap = project_occlusal(mesh, self.geom)


@pytest.fixture(scope="session")
def small_arch():
    mesh, gt = generate_arch(ArchSpec(jaw="upper", seed=3, tooth_faces=40, gingiva_faces=400))
    return Scene(mesh, gt)


@pytest.fixture(scope="session")
def arch16():
    mesh, gt = generate_arch(ArchSpec(jaw="upper", seed=11))
    return Scene(mesh, gt)


def strip_mesh(n=6, jitter=0.0, seed=0):
    """A flat zig-zag strip of 2n triangles, optionally jittered; one tooth instance per quad."""
    rng = np.random.default_rng(seed)
    xs = np.arange(n + 1, dtype=np.float64)
    verts = np.array([[x, y, 0.0] for x in xs for y in (0.0, 1.0)])
    verts[:, :2] += rng.uniform(-jitter, jitter, size=(verts.shape[0], 2))
    verts[:, 2] += rng.uniform(-jitter, jitter, size=verts.shape[0])
    faces = []
    for i in range(n):
        a, b, c, d = 2 * i, 2 * i + 1, 2 * i + 2, 2 * i + 3
        faces += [(a, c, b), (b, c, d)]
    faces = np.array(faces)
    labels = np.repeat(np.arange(1, n + 1), 2)
    inst = np.repeat(np.arange(n), 2)
    return LabeledMesh(verts, faces, labels, inst, "upper")
