"""Tensor container files and weight bundles.

A tensor file is one UTF-8 JSON header line followed by a newline and the raw
little-endian row-major payload::

    {"dtype":"f32","shape":[128,5000],"order":"row-major","endian":"little"}\\n<bytes>

A weight bundle is a directory holding one tensor file per parameter plus a
``manifest.json`` that names each tensor's role and shape.
"""

import json
import os

import numpy as np

from .exceptions import SchemaError

_DTYPES = {"f32": "<f4", "f64": "<f8", "i32": "<i4", "i64": "<i8"}
MANIFEST = "manifest.json"


def write_tensor(path, array, dtype="f32"):
    if dtype not in _DTYPES:
        raise SchemaError(f"unsupported tensor dtype {dtype!r}")
    arr = np.ascontiguousarray(array, dtype=_DTYPES[dtype])
    header = {"dtype": dtype, "shape": list(arr.shape), "order": "row-major", "endian": "little"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(arr.tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.find(b"\n")
    if nl < 0:
        raise SchemaError(f"{path}: missing tensor header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: bad tensor header ({exc})") from exc
    if header.get("order", "row-major") != "row-major" or header.get("endian", "little") != "little":
        raise SchemaError(f"{path}: only row-major little-endian tensors are supported")
    dtype = header.get("dtype")
    if dtype not in _DTYPES:
        raise SchemaError(f"{path}: unsupported dtype {dtype!r}")
    shape = tuple(int(s) for s in header.get("shape", []))
    payload = data[nl + 1:]
    expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[dtype]).itemsize
    if len(payload) != expected:
        raise SchemaError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(shape).astype(np.float64 if dtype[0] == "f" else np.int64)


def write_bundle(directory, tensors, roles, meta=None):
    """Write ``tensors`` (name -> array) into ``directory`` with a manifest.

    ``roles`` maps each tensor name to a short human-readable role string.
    """
    os.makedirs(directory, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        fname = name + ".tensor"
        arr = np.asarray(tensors[name])
        write_tensor(os.path.join(directory, fname), arr)
        entries[name] = {"file": fname, "role": roles.get(name, ""), "shape": list(arr.shape)}
    manifest = {"format": "toothmatch-weights/1", "meta": meta or {}, "tensors": entries}
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_bundle(directory):
    """Return ``(tensors, meta)`` from a bundle directory, checking shapes against the manifest."""
    path = os.path.join(directory, MANIFEST)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(manifest.get("tensors"), dict):
        raise SchemaError(f"{path}: manifest lacks a 'tensors' table")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr = read_tensor(os.path.join(directory, entry["file"]))
        if list(arr.shape) != list(entry.get("shape", arr.shape)):
            raise SchemaError(f"{path}: tensor {name!r} has shape {arr.shape}, manifest says {entry['shape']}")
        tensors[name] = arr
    return tensors, manifest.get("meta", {})
