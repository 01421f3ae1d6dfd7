"""Labeled triangle meshes: representation, file I/O, per-face geometry and scene frame.

Class ids follow the 17-class scheme used throughout the package: 0 is gingiva,
1..16 are the per-jaw tooth classes T1..T16. Gingiva faces carry instance id -1.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateInputError, MeshFormatError

N_CLASSES = 17
MAX_FACES = 200_000
DEGENERATE_EPS = 1e-12  # squared-area threshold
JAWS = ("upper", "lower")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class LabeledMesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_labels: np.ndarray
    face_instance_ids: np.ndarray
    jaw: str = "upper"

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, np.float64))
        object.__setattr__(self, "faces", _frozen(self.faces, np.int64))
        object.__setattr__(self, "face_labels", _frozen(self.face_labels, np.int64))
        object.__setattr__(self, "face_instance_ids", _frozen(self.face_instance_ids, np.int64))
        validate_mesh(self)

    @property
    def n_faces(self):
        return self.faces.shape[0]

    def scaled(self, s):
        return LabeledMesh(self.vertices * s, self.faces, self.face_labels, self.face_instance_ids, self.jaw)

    def translated(self, t):
        return LabeledMesh(self.vertices + np.asarray(t, dtype=np.float64), self.faces,
                           self.face_labels, self.face_instance_ids, self.jaw)

    def permuted(self, order):
        """Return the mesh with faces reordered so that new face ``p`` is old face ``order[p]``."""
        order = np.asarray(order)
        return LabeledMesh(self.vertices, self.faces[order], self.face_labels[order],
                           self.face_instance_ids[order], self.jaw)


@dataclass(frozen=True, eq=False)
class FaceGeometry:
    centers: np.ndarray        # (M, 3)
    normals: np.ndarray        # (M, 3) unit
    vertex_normals: np.ndarray  # (V, 3) unit
    areas: np.ndarray          # (M,)


@dataclass(frozen=True)
class SceneFrame:
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    diagonal: float
    arch_axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))


def validate_mesh(mesh):
    v, f = mesh.vertices, mesh.faces
    if v.ndim != 2 or v.shape[1] != 3:
        raise MeshFormatError(f"vertices must be (V, 3), got {v.shape}")
    if f.ndim != 2 or f.shape[1] != 3:
        raise MeshFormatError(f"faces must be (M, 3) triangles, got {f.shape}")
    m = f.shape[0]
    if m < 1:
        raise MeshFormatError("mesh has no faces")
    if m > MAX_FACES:
        raise MeshFormatError(f"mesh has {m} faces, limit is {MAX_FACES}")
    if not np.all(np.isfinite(v)):
        raise MeshFormatError("non-finite vertex coordinates")
    if f.min() < 0 or f.max() >= v.shape[0]:
        raise MeshFormatError("face references a vertex index out of range")
    if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
        raise MeshFormatError("face with repeated vertex index")
    sq = _squared_areas(v, f)
    bad = np.flatnonzero(sq <= DEGENERATE_EPS)
    if bad.size:
        raise DegenerateInputError(f"{bad.size} degenerate face(s), first at index {bad[0]}")
    if mesh.face_labels.shape != (m,):
        raise MeshFormatError(f"face_labels has length {mesh.face_labels.shape[0]}, mesh has {m} faces")
    if mesh.face_instance_ids.shape != (m,):
        raise MeshFormatError(
            f"face_instance_ids has length {mesh.face_instance_ids.shape[0]}, mesh has {m} faces")
    if mesh.face_labels.min() < 0 or mesh.face_labels.max() >= N_CLASSES:
        raise MeshFormatError("face label outside 0..16")
    if mesh.face_instance_ids.min() < -1:
        raise MeshFormatError("instance ids must be >= -1")
    if mesh.jaw not in JAWS:
        raise MeshFormatError(f"jaw must be one of {JAWS}, got {mesh.jaw!r}")
    _check_instance_labels(mesh.face_labels, mesh.face_instance_ids)


def _check_instance_labels(labels, inst):
    gingiva = labels == 0
    if np.any(inst[gingiva] != -1):
        raise MeshFormatError("gingiva faces must have instance id -1")
    if np.any(inst[~gingiva] < 0):
        raise MeshFormatError("tooth faces must have an instance id >= 0")
    for iid in np.unique(inst[inst >= 0]):
        if np.unique(labels[inst == iid]).size != 1:
            raise MeshFormatError(f"instance {iid} mixes class labels")


def _squared_areas(v, f):
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return 0.25 * np.einsum("ij,ij->i", cross, cross)


def compute_geometry(mesh):
    """Face centers, winding-oriented face normals and area-weighted vertex normals."""
    v, f = mesh.vertices, mesh.faces
    tri = v[f]
    centers = tri.mean(axis=1)
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(cross, axis=1)
    if np.any(0.25 * norm * norm <= DEGENERATE_EPS):
        raise DegenerateInputError("degenerate face while computing normals")
    normals = cross / norm[:, None]
    # |cross| = 2 * area, so summing raw cross products weights by area
    acc = np.zeros_like(v)
    for c in range(3):
        np.add.at(acc, f[:, c], cross)
    vn = np.linalg.norm(acc, axis=1)
    vertex_normals = np.divide(acc, vn[:, None], out=np.zeros_like(acc), where=vn[:, None] > 0)
    return FaceGeometry(centers=centers, normals=normals, vertex_normals=vertex_normals, areas=0.5 * norm)


def scene_frame(mesh, arch_axis=(1.0, 0.0, 0.0)):
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if not diag > 0:
        raise DegenerateInputError("mesh has zero spatial extent")
    axis = np.asarray(arch_axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return SceneFrame(bbox_min=lo, bbox_max=hi, diagonal=diag, arch_axis=axis)


# ---------------------------------------------------------------- file I/O

def read_obj(path):
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    if len(parts) != 4:
                        raise ValueError("only triangular faces are supported")
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if min(idx) < 1:
                        raise ValueError("OBJ indices are 1-based and positive")
                    faces.append([i - 1 for i in idx])
            except ValueError as exc:
                raise MeshFormatError(f"{path}:{lineno}: {exc}") from exc
    if not verts or not faces:
        raise MeshFormatError(f"{path}: no vertices or faces found")
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)


def write_obj(path, vertices, faces):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y, z in np.asarray(vertices, dtype=np.float32).astype(np.float64).tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in np.asarray(faces, dtype=np.int64) + 1:
            fh.write(f"f {a} {b} {c}\n")


def read_ply(path):
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise MeshFormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = memoryview(data)[end + len(b"end_header\n"):]
    n_vert = n_face = None
    fmt = None
    vprops, fprop = [], None
    current = None
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
            else:
                raise MeshFormatError(f"{path}: unsupported element {current!r}")
        elif parts[0] == "property":
            if current == "vertex":
                vprops.append((parts[1], parts[2]))
            elif current == "face":
                fprop = parts[1:]
    if fmt != "binary_little_endian":
        raise MeshFormatError(f"{path}: only binary_little_endian PLY is supported")
    if vprops != [("float", "x"), ("float", "y"), ("float", "z")]:
        raise MeshFormatError(f"{path}: vertex properties must be float x, y, z")
    if fprop is None or fprop[0] != "list" or fprop[1] not in ("uchar", "uint8") or fprop[2] not in ("int", "int32"):
        raise MeshFormatError(f"{path}: face property must be 'list uchar int vertex_indices'")
    if n_vert is None or n_face is None:
        raise MeshFormatError(f"{path}: missing vertex or face element")
    vbytes = 12 * n_vert
    fbytes = 13 * n_face
    if len(body) < vbytes + fbytes:
        raise MeshFormatError(f"{path}: truncated payload")
    verts = np.frombuffer(body[:vbytes], dtype="<f4").reshape(n_vert, 3).astype(np.float64)
    rec = np.frombuffer(body[vbytes:vbytes + fbytes], dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))]))
    if np.any(rec["n"] != 3):
        raise MeshFormatError(f"{path}: only triangular faces are supported")
    return verts, rec["idx"].astype(np.int64)


def write_ply(path, vertices, faces):
    v = np.ascontiguousarray(vertices, dtype="<f4")
    f = np.asarray(faces)
    rec = np.empty(f.shape[0], dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))]))
    rec["n"] = 3
    rec["idx"] = f
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {v.shape[0]}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {f.shape[0]}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(v.tobytes())
        fh.write(rec.tobytes())


def read_sidecar(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise MeshFormatError(f"{path}: sidecar must be a JSON object")
    for key in ("jaw", "face_labels", "face_instance_ids"):
        if key not in doc:
            raise MeshFormatError(f"{path}: missing field {key!r}")
    if doc["jaw"] not in JAWS:
        raise MeshFormatError(f"{path}: field 'jaw' must be 'upper' or 'lower'")
    for key in ("face_labels", "face_instance_ids"):
        vals = doc[key]
        if not isinstance(vals, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in vals):
            raise MeshFormatError(f"{path}: field {key!r} must be a list of integers")
    return doc


def write_sidecar(path, mesh):
    doc = {
        "jaw": mesh.jaw,
        "face_labels": [int(x) for x in mesh.face_labels],
        "face_instance_ids": [int(x) for x in mesh.face_instance_ids],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_mesh(path, sidecar):
    """Read an OBJ or binary PLY mesh together with its JSON label sidecar."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        verts, faces = read_obj(path)
    elif ext == ".ply":
        verts, faces = read_ply(path)
    else:
        raise MeshFormatError(f"{path}: unsupported mesh extension {ext!r}")
    doc = read_sidecar(sidecar)
    m = faces.shape[0]
    for key in ("face_labels", "face_instance_ids"):
        if len(doc[key]) != m:
            raise MeshFormatError(f"{sidecar}: {key} has {len(doc[key])} entries, mesh has {m} faces")
    return LabeledMesh(verts, faces, doc["face_labels"], doc["face_instance_ids"], doc["jaw"])


def save_mesh(mesh, path, sidecar):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        write_obj(path, mesh.vertices, mesh.faces)
    elif ext == ".ply":
        write_ply(path, mesh.vertices, mesh.faces)
    else:
        raise MeshFormatError(f"{path}: unsupported mesh extension {ext!r}")
    write_sidecar(sidecar, mesh)
