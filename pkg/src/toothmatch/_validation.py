"""Input validation helpers shared by the estimators and the functional API."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ShapeError


def check_matrix(x, name, shape=None, allow_inf=False):
    """Return ``x`` as a 2-D float64 array, checking finiteness and (optionally) shape.

    ``shape`` entries may be ``None`` to leave that axis unconstrained.
    """
    try:
        arr = check_array(
            x,
            dtype=np.float64,
            ensure_all_finite="allow-nan" if allow_inf else True,
            ensure_min_samples=0,
            ensure_min_features=0,
        )
    except ValueError as exc:
        raise ShapeError(f"{name}: {exc}") from exc
    if allow_inf and np.isnan(arr).any():
        raise ShapeError(f"{name}: NaN entries")
    if shape is not None:
        for axis, want in enumerate(shape):
            if want is not None and arr.shape[axis] != want:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
    return arr


def check_vector(x, name, length=None):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"{name}: expected a 1-D array, got shape {arr.shape}")
    if length is not None and arr.shape[0] != length:
        raise ShapeError(f"{name}: expected length {length}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name}: non-finite entries")
    return arr


def check_points(x, name, n=None, dim=3):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ShapeError(f"{name}: expected (n, {dim}) array, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ShapeError(f"{name}: expected {n} rows, got {arr.shape[0]}")
    return arr


def check_labels(labels, name, n_classes, length=None):
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ShapeError(f"{name}: expected a 1-D label vector")
    if not np.issubdtype(arr.dtype, np.integer):
        if arr.size and not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ShapeError(f"{name}: labels must be integers")
        arr = arr.astype(np.int64)
    if length is not None and arr.shape[0] != length:
        raise ShapeError(f"{name}: expected length {length}, got {arr.shape[0]}")
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ShapeError(f"{name}: labels must lie in 0..{n_classes - 1}")
    return arr.astype(np.int64)
