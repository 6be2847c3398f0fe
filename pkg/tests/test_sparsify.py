import math

import numpy as np
import pytest
from scipy import ndimage

from config import UNANNOTATED
from conftest import make_disc_mask
from core.errors import RangeError
from core.sparsify import (
    blob_filter,
    contour_polylines,
    pure_regions,
    sparsify,
    sparsify_contours,
    sparsify_grid,
    sparsify_points,
    sparsify_regions,
    sparsify_skeleton,
    superpixels,
)
from schemas import TECHNIQUES, SparsifySizes

DENSITIES = {
    "points": [1, 5, 13, 25, 50],
    "grid": [0.1, 0.25, 0.5, 0.75, 1.0],
    "contours": [0.1, 0.25, 0.5, 0.75, 1.0],
    "skeleton": [0.1, 0.25, 0.5, 0.75, 1.0],
    "regions": [0.1, 0.25, 0.5, 0.75, 1.0],
}


def annotated(sparse: np.ndarray) -> np.ndarray:
    return sparse != UNANNOTATED


def test_every_technique_is_label_consistent():
    sizes = SparsifySizes()
    masks = [make_disc_mask(64), make_disc_mask(64, disc=0.25, cup=0.1, center=(28, 36))]
    for y in masks:
        for technique in TECHNIQUES:
            for density in DENSITIES[technique]:
                for seed in range(10):
                    sparse = sparsify(y, sizes.params(technique, density, seed))
                    assert sparse.shape == y.shape
                    assert sparse.dtype == np.uint8
                    mask = annotated(sparse)
                    assert (sparse[mask] == y[mask]).all(), (technique, density, seed)


def test_same_seed_is_bit_identical(disc_mask):
    sizes = SparsifySizes()
    for technique in TECHNIQUES:
        a = sparsify(disc_mask, sizes.params(technique, DENSITIES[technique][2], 7))
        b = sparsify(disc_mask, sizes.params(technique, DENSITIES[technique][2], 7))
        assert np.array_equal(a, b)


def test_points_are_nested_under_a_fixed_seed(disc_mask):
    previous = annotated(sparsify_points(disc_mask, 1, seed=3))
    for n in (2, 5, 13, 25, 50):
        current = annotated(sparsify_points(disc_mask, n, seed=3))
        assert (current | previous == current).all()
        previous = current


def test_single_point_annotates_one_class(disc_mask):
    for seed in range(10):
        sparse = sparsify_points(disc_mask, 1, seed=seed)
        classes = set(np.unique(sparse[annotated(sparse)]).tolist())
        assert len(classes) == 1


def test_full_point_selection_is_the_dense_label(disc_mask):
    sparse = sparsify_points(disc_mask, disc_mask.size, point_size=1, seed=0, dilate_radius=0)
    assert np.array_equal(sparse, disc_mask)


def test_points_beyond_downscaled_size_are_rejected(disc_mask):
    with pytest.raises(RangeError):
        sparsify_points(disc_mask, 22 * 22, point_size=3)


def test_grid_half_density_keeps_about_half():
    y = make_disc_mask(256)
    full = annotated(sparsify_grid(y, 1.0, point_size=1, grid_spacing=4, seed=0)).sum()
    halves = [annotated(sparsify_grid(y, 0.5, point_size=1, grid_spacing=4, seed=s)).sum() for s in range(3)]
    assert abs(np.mean(halves) - full / 2) <= 0.2 * full / 2


def test_grid_full_density_annotates_every_lattice_point(disc_mask):
    sparse = sparsify_grid(disc_mask, 1.0, point_size=1, grid_spacing=4, seed=0)
    lattice = np.zeros(disc_mask.shape, dtype=bool)
    lattice[2::4, 2::4] = True
    assert np.array_equal(annotated(sparse), lattice)


def test_grid_without_lattice_points_is_rejected(disc_mask):
    with pytest.raises(RangeError):
        sparsify_grid(disc_mask, 0.5, grid_spacing=64)


def test_contour_of_a_disk_is_one_interior_ring():
    y = make_disc_mask(64)
    y[y == 2] = 1
    sparse = sparsify_contours(y, 1.0, erode_radius=2, dilate_radius=0, seed=0)
    ring = sparse == 1
    assert ring.any()
    _, n = ndimage.label(ring, structure=np.ones((3, 3)))
    assert n == 1
    interior = ndimage.binary_erosion(y == 1)
    assert interior[ring].all()


def test_contours_keep_ceiling_share_of_polylines():
    y = np.zeros((64, 64), dtype=np.uint8)
    for r, c in ((8, 8), (8, 40), (40, 8), (40, 40)):
        y[r:r + 14, c:c + 14] = 1
    polylines = contour_polylines(y, erode_radius=3)
    assert len(polylines) == 8

    sparse = sparsify_contours(y, 0.5, erode_radius=3, dilate_radius=0, seed=5)
    rings = sum(ndimage.label(sparse == c, structure=np.ones((3, 3)))[1] for c in (0, 1))
    assert rings == math.ceil(0.5 * len(polylines))


def test_contours_of_background_only_label_are_empty():
    y = np.zeros((32, 32), dtype=np.uint8)
    assert not annotated(sparsify_contours(y, 1.0)).any()


def test_skeleton_of_a_thin_line_is_the_line():
    y = np.zeros((64, 64), dtype=np.uint8)
    y[32, 10:50] = 1
    sparse = sparsify_skeleton(y, 1.0, dilate_radius=0, seed=0)
    assert np.array_equal(sparse == 1, y == 1)


def test_skeleton_at_full_density_ignores_seed(disc_mask):
    a = sparsify_skeleton(disc_mask, 1.0, seed=0)
    b = sparsify_skeleton(disc_mask, 1.0, seed=99)
    assert np.array_equal(a, b)


def test_regions_select_ceiling_share_of_pure_regions(disc_mask):
    segments = superpixels(disc_mask)
    pure = pure_regions(disc_mask, segments)
    sparse = sparsify_regions(disc_mask, 0.25, seed=4)
    chosen = np.unique(segments[annotated(sparse)])
    assert len(chosen) == math.ceil(0.25 * len(pure))
    # selected regions are annotated whole
    for sid in chosen:
        assert annotated(sparse)[segments == sid].all()


def test_regions_on_uniform_label_cover_requested_share():
    y = np.ones((64, 64), dtype=np.uint8)
    sparse = sparsify_regions(y, 0.5, seed=0)
    assert abs(annotated(sparse).mean() - 0.5) < 0.1


def test_full_density_annotates_all_classes(disc_mask):
    sizes = SparsifySizes()
    for technique in ("grid", "skeleton", "regions"):
        sparse = sparsify(disc_mask, sizes.params(technique, 1.0, 0))
        assert set(np.unique(sparse[annotated(sparse)]).tolist()) == {0, 1, 2}, technique


def test_blob_filter_edge_cases():
    mask = np.ones((128, 128), dtype=bool)
    assert np.array_equal(blob_filter(mask, 1.0, seed=0), mask)
    assert not blob_filter(np.zeros_like(mask), 0.5, seed=0).any()
    share = blob_filter(mask, 0.5, seed=0).mean()
    assert 0.45 <= share <= 0.55


def test_blob_filter_rejects_bad_coverage():
    with pytest.raises(RangeError):
        blob_filter(np.ones((16, 16), dtype=bool), 0.0, seed=0)


def test_small_or_flat_labels_are_rejected():
    with pytest.raises(RangeError):
        sparsify_points(np.zeros((4, 4), dtype=np.uint8), 1)
    with pytest.raises(RangeError):
        sparsify_points(np.zeros((16,), dtype=np.uint8), 1)


def test_skeleton_of_a_square_is_a_diagonal_cross():
    y = np.zeros((41, 41), dtype=np.uint8)
    y[10:31, 10:31] = 1
    sparse = sparsify_skeleton(y, 1.0, dilate_radius=1, seed=0)
    square = annotated(sparse) & (y == 1)

    def near(r, c):
        return square[r - 1:r + 2, c - 1:c + 2].any()

    assert near(20, 20)
    for r, c in ((15, 15), (15, 25), (25, 15), (25, 25)):
        assert near(r, c), (r, c)
    # edge midpoints lie off the medial axis
    for r, c in ((11, 20), (29, 20), (20, 11), (20, 29)):
        assert not square[r, c], (r, c)
    assert square.sum() < 0.5 * 21 * 21


def test_blob_filter_is_seeded_and_fits_any_shape():
    mask = np.ones((40, 96), dtype=bool)
    a, b = blob_filter(mask, 0.4, seed=3), blob_filter(mask, 0.4, seed=3)
    assert a.shape == mask.shape and np.array_equal(a, b)
    assert not np.array_equal(a, blob_filter(mask, 0.4, seed=4))
    shares = [blob_filter(np.ones((128, 128), dtype=bool), 0.3, seed=s).mean() for s in range(3)]
    assert all(0.25 <= share <= 0.35 for share in shares)


def annotated_pixels(y, technique, density, seeds=range(3)):
    sizes = SparsifySizes()
    return np.mean([annotated(sparsify(y, sizes.params(technique, density, s))).sum() for s in seeds])


@pytest.mark.parametrize("density", [0.25, 0.5, 1.0])
def test_contours_annotate_fewer_pixels_than_skeleton(density):
    y = make_disc_mask(128)
    assert annotated_pixels(y, "contours", density) < annotated_pixels(y, "skeleton", density)


@pytest.mark.parametrize("density", [0.25, 0.5, 1.0])
def test_regions_annotate_the_most_pixels(density):
    y = make_disc_mask(128)
    regions = annotated_pixels(y, "regions", density)
    for technique in ("grid", "contours", "skeleton"):
        assert regions > annotated_pixels(y, technique, density), technique
