"""Occlusal-view face-to-pixel mapping, grid rescaling, bilinear sampling and guidance maps."""

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateInputError, ShapeError

DEFAULT_IMAGE_SIZE = (1024, 1024)
DEFAULT_MARGIN = 0.05
DEFAULT_EMBED_CHANNELS = 256


@dataclass(frozen=True, eq=False)
class CoordinateMap:
    image_size: tuple      # (H, W)
    coords: np.ndarray     # (M, 2) continuous (y, x) pixel coordinates

    def __post_init__(self):
        h, w = (int(s) for s in self.image_size)
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2:
            raise ShapeError(f"coords must be (M, 2), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ShapeError("coords contain NaN or Inf")
        object.__setattr__(self, "image_size", (h, w))
        object.__setattr__(self, "coords", c)

    def __len__(self):
        return self.coords.shape[0]


@dataclass(frozen=True, eq=False)
class EmbeddingGrid:
    values: np.ndarray  # (C_e, H', W')

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] < 1:
            raise ShapeError(f"embedding grid must be (C_e, H', W') with C_e >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ShapeError("embedding grid contains NaN or Inf")
        object.__setattr__(self, "values", v)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def grid_size(self):
        return self.values.shape[1:]


@dataclass(frozen=True, eq=False)
class OcclusalCamera:
    """Affine map from world xy to pixel (row, col) for a fixed image size."""

    image_size: tuple
    x_range: tuple
    y_range: tuple

    def project(self, points):
        pts = np.asarray(points, dtype=np.float64)
        h, w = self.image_size
        (x0, x1), (y0, y1) = self.x_range, self.y_range
        col = (pts[..., 0] - x0) / (x1 - x0) * (w - 1)
        row = (y1 - pts[..., 1]) / (y1 - y0) * (h - 1)
        return np.stack([row, col], axis=-1)


def occlusal_camera(geom, image_size=DEFAULT_IMAGE_SIZE, margin=DEFAULT_MARGIN):
    h, w = (int(s) for s in image_size)
    if h < 2 or w < 2:
        raise ShapeError(f"image size must be at least 2x2, got {(h, w)}")
    xy = geom.centers[:, :2]
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    ext = hi - lo
    if not np.all(ext > 0):
        raise DegenerateInputError("face centers have zero extent in x or y")
    lo = lo - margin * ext
    hi = hi + margin * ext
    return OcclusalCamera((h, w), (float(lo[0]), float(hi[0])), (float(lo[1]), float(hi[1])))


def project_occlusal(mesh, geom, image_size=DEFAULT_IMAGE_SIZE, margin=DEFAULT_MARGIN):
    """Orthographic top-down projection of every face center.

    The xy bounding box of the face centers, widened by ``margin`` of its extent
    on each side, fills the pixel rectangle. x runs along columns; y along rows
    with row 0 at the largest y. Nothing is culled: every face gets a pixel.
    """
    del mesh  # faces are already summarised by ``geom``
    cam = occlusal_camera(geom, image_size, margin)
    return CoordinateMap(cam.image_size, cam.project(geom.centers))


def rescale_coords(cmap, grid_size):
    h, w = cmap.image_size
    gh, gw = (int(s) for s in grid_size)
    if min(h, w, gh, gw) < 2:
        raise ShapeError("image and grid sizes must be at least 2x2")
    scale = np.array([(gh - 1) / (h - 1), (gw - 1) / (w - 1)])
    return CoordinateMap((gh, gw), cmap.coords * scale)


def bilinear_sample(grid, cmap):
    """Sample ``grid`` at every (y, x) of ``cmap``; returns ``(C_e, M)``.

    Coordinates are clamped to the grid before interpolation.
    """
    values = grid.values if isinstance(grid, EmbeddingGrid) else np.asarray(grid, dtype=np.float64)
    _, gh, gw = values.shape
    coords = cmap.coords if isinstance(cmap, CoordinateMap) else np.asarray(cmap, dtype=np.float64)
    y = np.clip(coords[:, 0], 0.0, gh - 1)
    x = np.clip(coords[:, 1], 0.0, gw - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), gh - 2) if gh > 1 else np.zeros(y.shape, np.int64)
    x0 = np.minimum(np.floor(x).astype(np.int64), gw - 2) if gw > 1 else np.zeros(x.shape, np.int64)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    wy = y - y0
    wx = x - x0
    top = values[:, y0, x0] * (1 - wx) + values[:, y0, x1] * wx
    bot = values[:, y1, x0] * (1 - wx) + values[:, y1, x1] * wx
    return top * (1 - wy) + bot * wy


def default_sigma(image_size):
    return 0.02 * min(image_size)


def guidance_weights(centers2d, cmap, sigma):
    """Per-instance Gaussian weights ``(K, M)`` around each 2D center."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    c = np.asarray(centers2d, dtype=np.float64).reshape(-1, 2)
    coords = cmap.coords if isinstance(cmap, CoordinateMap) else np.asarray(cmap, dtype=np.float64)
    d2 = ((coords[None, :, :] - c[:, None, :]) ** 2).sum(axis=2)
    return np.exp(-d2 / (2.0 * sigma * sigma))


def guidance_map(centers2d, cmap, sigma=None):
    """Max over instances of the per-instance Gaussian weights; zeros when there are no centers."""
    if sigma is None:
        sigma = default_sigma(cmap.image_size)
    m = len(cmap.coords) if isinstance(cmap, CoordinateMap) else len(cmap)
    c = np.asarray(centers2d, dtype=np.float64).reshape(-1, 2)
    if c.shape[0] == 0:
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        return np.zeros(m)
    return guidance_weights(c, cmap, sigma).max(axis=0)
