"""
Sparse label simulation.

Converts a dense multiclass mask (0 = background, 1 = disc rim, 2 = cup) into
one of five sparse annotation styles: points, grid, contours, skeleton and
regions. Pixels nobody would have annotated carry UNANNOTATED (255).

Every technique annotates the background class as well as the objects, and
every technique finishes by dropping annotated pixels whose class disagrees
with the dense mask, so a sparse label never contradicts its source.
All randomness comes from a numpy Generator seeded by the caller.
"""

import logging
import math
import warnings

import numpy as np
from scipy import ndimage
from skimage import measure
from skimage.data import binary_blobs
from skimage.morphology import disk, skeletonize
from skimage.segmentation import slic

from config import UNANNOTATED
from core.errors import RangeError, SparseLabelWarning
from schemas import SparsifyParams

log = logging.getLogger(__name__)


def _classes(y: np.ndarray) -> list[int]:
    return [int(c) for c in np.unique(y)]


def _empty_like(y: np.ndarray) -> np.ndarray:
    return np.full(y.shape, UNANNOTATED, dtype=np.uint8)


def _check_label(y: np.ndarray) -> None:
    if y.ndim != 2:
        raise RangeError(f"dense label must be a 2-D grid, got shape {y.shape}")
    if min(y.shape) < 8:
        raise RangeError(f"dense label must be at least 8x8, got {y.shape}")


def clip_to_dense(sparse: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Reset annotated pixels that disagree with the dense label."""
    out = sparse.copy()
    out[(out != UNANNOTATED) & (out != y)] = UNANNOTATED
    return out


def dilate_labels(sparse: np.ndarray, y: np.ndarray, radius: int) -> np.ndarray:
    """Grow every annotated class by a disk of `radius`, keeping only pixels of that class in `y`."""
    if radius <= 0:
        return clip_to_dense(sparse, y)
    footprint = disk(radius)
    out = _empty_like(y)
    for c in _classes(sparse):
        if c == UNANNOTATED:
            continue
        grown = ndimage.binary_dilation(sparse == c, structure=footprint)
        out[grown & (y == c)] = c
    return out


def _downscale(y: np.ndarray, factor: int) -> np.ndarray:
    # centre pixel of each factor x factor cell
    offset = factor // 2
    return y[offset::factor, offset::factor]


def _upscale(small: np.ndarray, factor: int, shape: tuple[int, int]) -> np.ndarray:
    # block i spans rows [i * factor, (i + 1) * factor), which contains its centre sample
    big = np.repeat(np.repeat(small, factor, axis=0), factor, axis=1)
    out = np.full(shape, UNANNOTATED, dtype=np.uint8)
    h = min(shape[0], big.shape[0])
    w = min(shape[1], big.shape[1])
    out[:h, :w] = big[:h, :w]
    return out


def blob_filter(mask: np.ndarray, coverage: float, seed: int, blob_size: float = 0.1) -> np.ndarray:
    """
    Keep the part of a binary mask that falls inside random rounded blobs.

    The blob field comes from `skimage.data.binary_blobs` on a square of the
    larger side, with `volume_fraction=coverage`, cut back to the mask shape.
    """
    if not 0 < coverage <= 1:
        raise RangeError(f"blob coverage must lie in (0, 1], got {coverage}")
    mask = mask.astype(bool)
    if coverage >= 1 or not mask.any():
        return mask.copy()
    h, w = mask.shape
    blobs = binary_blobs(length=max(h, w), blob_size_fraction=blob_size, n_dim=2,
                         volume_fraction=coverage, rng=seed)
    return mask & blobs[:h, :w]


def _filter_annotated(sparse: np.ndarray, coverage: float, seed: int, blob_size: float) -> np.ndarray:
    keep = blob_filter(sparse != UNANNOTATED, coverage, seed, blob_size)
    out = _empty_like(sparse)
    out[keep] = sparse[keep]
    return out


def sparsify_points(y: np.ndarray, n_points: int, point_size: int = 3, seed: int = 0,
                    dilate_radius: int = 1) -> np.ndarray:
    """
    Annotate `n_points` randomly chosen cells of the downscaled label.

    Cells are taken from one seeded permutation, so for a fixed seed the
    selection for n is a prefix of the selection for n + 1.
    """
    _check_label(y)
    if n_points < 1 or point_size < 1:
        raise RangeError(f"points needs a count >= 1 and point_size >= 1, got {n_points} and {point_size}")
    small = _downscale(y, point_size)
    if n_points > small.size:
        raise RangeError(f"{n_points} points exceed the {small.size} cells of the downscaled label")

    rng = np.random.default_rng(seed)
    order = rng.permutation(small.size)[:int(n_points)]
    sparse_small = np.full(small.shape, UNANNOTATED, dtype=np.uint8)
    sparse_small.flat[order] = small.flat[order]

    if point_size == 1:
        sparse = sparse_small
    else:
        sparse = _upscale(sparse_small, point_size, y.shape)
    return dilate_labels(sparse, y, dilate_radius)


def sparsify_grid(y: np.ndarray, p_grid: float, point_size: int = 3, grid_spacing: int = 4,
                  seed: int = 0, dilate_radius: int = 0, blob_size: float = 0.1) -> np.ndarray:
    """Annotate the points of a regular lattice, then keep those inside blobs covering p_grid."""
    _check_label(y)
    if not 0 < p_grid <= 1:
        raise RangeError(f"grid density must lie in (0, 1], got {p_grid}")
    if grid_spacing >= min(y.shape):
        raise RangeError(f"grid spacing {grid_spacing} leaves no lattice points on a {y.shape} label")
    small = _downscale(y, point_size)
    lattice = np.zeros(small.shape, dtype=bool)
    offset = grid_spacing // 2
    lattice[offset::grid_spacing, offset::grid_spacing] = True
    if not lattice.any():
        raise RangeError(f"grid spacing {grid_spacing} with point size {point_size} yields no lattice points")

    sparse_small = np.where(lattice, small, UNANNOTATED).astype(np.uint8)
    sparse = sparse_small if point_size == 1 else _upscale(sparse_small, point_size, y.shape)
    sparse = dilate_labels(sparse, y, dilate_radius)
    return _filter_annotated(sparse, p_grid, seed, blob_size)


def contour_polylines(y: np.ndarray, erode_radius: int) -> list[tuple[int, np.ndarray]]:
    """Marching-squares contours of every class region after erosion, as (class, polyline) pairs."""
    footprint = disk(erode_radius) if erode_radius > 0 else None
    polylines = []
    for c in _classes(y):
        region = y == c
        if footprint is not None:
            # border_value=1 stops regions touching the image edge from eroding there
            region = ndimage.binary_erosion(region, structure=footprint, border_value=1)
        if not region.any():
            continue
        for line in measure.find_contours(region.astype(float), 0.5):
            polylines.append((c, line))
    return polylines


def _rasterize(line: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    pts = np.rint(line).astype(int)
    pts[:, 0] = np.clip(pts[:, 0], 0, shape[0] - 1)
    pts[:, 1] = np.clip(pts[:, 1], 0, shape[1] - 1)
    pts = np.unique(pts, axis=0)
    return pts[:, 0], pts[:, 1]


def sparsify_contours(y: np.ndarray, p_contours: float, erode_radius: int = 3, dilate_radius: int = 0,
                      seed: int = 0) -> np.ndarray:
    """Draw a random p_contours share of the eroded class contours."""
    _check_label(y)
    if not 0 < p_contours <= 1:
        raise RangeError(f"contours density must lie in (0, 1], got {p_contours}")
    polylines = contour_polylines(y, erode_radius)
    sparse = _empty_like(y)
    if not polylines:
        return sparse

    rng = np.random.default_rng(seed)
    keep = math.ceil(p_contours * len(polylines))
    chosen = np.sort(rng.choice(len(polylines), size=keep, replace=False))
    for idx in chosen:
        c, line = polylines[idx]
        rows, cols = _rasterize(line, y.shape)
        sparse[rows, cols] = c
    return dilate_labels(sparse, y, dilate_radius)


def sparsify_skeleton(y: np.ndarray, p_skeleton: float, dilate_radius: int = 1, seed: int = 0,
                      blob_size: float = 0.1) -> np.ndarray:
    """Skeletonize every class region, dilate, then keep the part inside blobs covering p_skeleton."""
    _check_label(y)
    if not 0 < p_skeleton <= 1:
        raise RangeError(f"skeleton density must lie in (0, 1], got {p_skeleton}")
    sparse = _empty_like(y)
    for c in _classes(y):
        sparse[skeletonize(y == c)] = c
    sparse = dilate_labels(sparse, y, dilate_radius)
    return _filter_annotated(sparse, p_skeleton, seed, blob_size)


def superpixels(y: np.ndarray, compactness: float = 1.0, region_scale: float = 12.0) -> np.ndarray:
    side = min(y.shape) / region_scale
    n_segments = max(1, round(y.size / (side * side)))
    return slic(y.astype(float), n_segments=n_segments, compactness=compactness,
                channel_axis=None, start_label=1, enforce_connectivity=True)


def pure_regions(y: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Ids of superpixels covering a single dense class."""
    ids = np.unique(segments)
    lo = ndimage.minimum(y, labels=segments, index=ids)
    hi = ndimage.maximum(y, labels=segments, index=ids)
    return ids[np.asarray(lo) == np.asarray(hi)]


def sparsify_regions(y: np.ndarray, p_regions: float, compactness: float = 1.0, seed: int = 0,
                     region_scale: float = 12.0) -> np.ndarray:
    """Fully annotate a random p_regions share of the single-class superpixels."""
    _check_label(y)
    if not 0 < p_regions <= 1:
        raise RangeError(f"regions density must lie in (0, 1], got {p_regions}")
    segments = superpixels(y, compactness, region_scale)
    pure = pure_regions(y, segments)
    sparse = _empty_like(y)
    if pure.size == 0:
        log.warning("⚠️ No single-class superpixel found; returning an empty sparse label")
        warnings.warn("regions sparsification found no single-class superpixel", SparseLabelWarning)
        return sparse

    rng = np.random.default_rng(seed)
    keep = math.ceil(p_regions * pure.size)
    chosen = rng.choice(pure, size=keep, replace=False)
    selected = np.isin(segments, chosen)
    sparse[selected] = y[selected]
    return sparse


def sparsify(y: np.ndarray, params: SparsifyParams) -> np.ndarray:
    """Dispatch to the technique named in `params`."""
    if params.technique == "points":
        return sparsify_points(y, int(params.density), params.point_size, params.seed, params.dilate_radius)
    if params.technique == "grid":
        return sparsify_grid(y, params.density, params.point_size, params.grid_spacing, params.seed,
                             blob_size=params.blob_size)
    if params.technique == "contours":
        return sparsify_contours(y, params.density, params.erode_radius, params.contour_dilate_radius, params.seed)
    if params.technique == "skeleton":
        return sparsify_skeleton(y, params.density, params.dilate_radius, params.seed, params.blob_size)
    if params.technique == "regions":
        return sparsify_regions(y, params.density, params.compactness, params.seed, params.region_scale)
    raise RangeError(f"unknown sparsification technique {params.technique!r}")
