import numpy as np
import pytest
from PIL import Image

from config import CUP, DISC_RIM
from conftest import make_disc_mask, tiny_synth_spec
from core.data import (
    DatasetBundle,
    Sample,
    concat_bundles,
    crop_around_disc,
    generate_synthetic,
    load_dataset,
    read_mask,
    resize_pair,
    save_dataset,
    split_support_query,
    write_mask,
)
from core.errors import DatasetError
from schemas import CropSpec


def test_synthetic_samples_are_reproducible():
    spec = tiny_synth_spec()
    a = generate_synthetic(spec, count=3)
    b = generate_synthetic(spec, count=3)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert np.array_equal(x.image, y.image)
        assert np.array_equal(x.dense, y.dense)


def test_synthetic_samples_have_all_classes():
    for s in generate_synthetic(tiny_synth_spec(), count=5):
        assert s.image.shape == (32, 32, 3)
        assert s.image.dtype == np.float32
        assert set(np.unique(s.dense).tolist()) == {0, 1, 2}


def test_offsets_give_disjoint_ids():
    spec = tiny_synth_spec()
    a = {s.id for s in generate_synthetic(spec, count=4, offset=0)}
    b = {s.id for s in generate_synthetic(spec, count=4, offset=4)}
    assert not a & b


def test_split_is_disjoint_and_complete(tiny_bundle):
    ids_s = {s.id for s in tiny_bundle.support}
    ids_q = {s.id for s in tiny_bundle.query}
    assert not ids_s & ids_q
    assert len(ids_s | ids_q) == 12
    assert len(tiny_bundle.support) == 6


def test_overlapping_bundle_is_rejected():
    s = Sample("a", np.zeros((8, 8, 1), np.float32), np.zeros((8, 8), np.uint8))
    with pytest.raises(DatasetError):
        DatasetBundle("bad", (s,), (s,))


def test_split_keeps_one_support_image():
    samples = [Sample(f"x{i}", np.zeros((8, 8, 1), np.float32), np.zeros((8, 8), np.uint8)) for i in range(3)]
    bundle = split_support_query(samples, 0.01, seed=0, name="small")
    assert len(bundle.support) == 1 and len(bundle.query) == 2


def test_save_and_load_round_trip(tmp_path):
    samples = generate_synthetic(tiny_synth_spec(), count=6)
    assert save_dataset(samples, tmp_path, "train") == 6
    bundle = load_dataset(tmp_path, "train", image_size=32, support_fraction=0.5, seed=0)
    loaded = {s.id: s for s in bundle.samples}
    for s in samples:
        assert np.array_equal(loaded[s.id].dense, s.dense)
        assert np.allclose(loaded[s.id].image, s.image)


def test_unpaired_files_are_rejected(tmp_path):
    samples = generate_synthetic(tiny_synth_spec(), count=2)
    save_dataset(samples, tmp_path, "train")
    (tmp_path / "train" / "masks" / f"{samples[0].id}.png").unlink()
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, "train")


def test_missing_split_gives_empty_bundle(tmp_path):
    bundle = load_dataset(tmp_path, "nothing")
    assert len(bundle) == 0


def test_mask_with_unknown_values_is_rejected(tmp_path):
    path = tmp_path / "m.png"
    Image.fromarray(np.full((8, 8), 7, dtype=np.uint8), mode="L").save(path)
    with pytest.raises(DatasetError):
        read_mask(path)


def test_sparse_mask_round_trip_keeps_sentinel(tmp_path):
    sparse = np.full((16, 16), 255, dtype=np.uint8)
    sparse[4:8, 4:8] = 1
    write_mask(tmp_path / "s.png", sparse)
    assert np.array_equal(read_mask(tmp_path / "s.png", allow_unannotated=True), sparse)


def test_crop_contains_whole_disc():
    dense = make_disc_mask(128, disc=0.1, cup=0.05)
    image = np.zeros((128, 128, 3), dtype=np.float32)
    crop_img, crop = crop_around_disc(image, dense, CropSpec(), index=3)
    assert crop_img.shape[:2] == crop.shape
    assert (crop > 0).sum() == (dense > 0).sum()
    assert crop.shape[0] < 128 and crop.shape[1] < 128


def test_directory_dataset_is_cropped_around_the_disc(tmp_path):
    dense = make_disc_mask(128, disc=0.12, cup=0.05)
    image = np.zeros((128, 128, 3), dtype=np.float32)
    image[dense > 0] = 0.8
    save_dataset([Sample(f"u{i}", image, dense) for i in range(2)], tmp_path, "train")

    tight = CropSpec(v_pad_mean=0, v_pad_std=0, h_pad_mean=0, h_pad_std=0)
    cropped = load_dataset(tmp_path, "train", image_size=32, crop=tight)
    uncropped = load_dataset(tmp_path, "train", image_size=32)
    for s in cropped.samples:
        # a circle fills about pi / 4 of its bounding box
        assert 0.6 < (s.dense > 0).mean() < 0.9
        assert s.dense.shape == (32, 32)
    for s in uncropped.samples:
        assert (s.dense > 0).mean() < 0.1


def test_directory_crop_follows_the_disc_bounds(tmp_path):
    dense = make_disc_mask(96, disc=0.1, cup=0.04, center=(30, 60))
    save_dataset([Sample("a", np.zeros((96, 96, 3), dtype=np.float32), dense)], tmp_path, "test")
    spec = CropSpec(seed=4)
    bundle = load_dataset(tmp_path, "test", image_size=96, support_fraction=0.5, crop=spec)
    crop_img, crop = crop_around_disc(np.zeros((96, 96, 3), dtype=np.float32), dense, spec, index=0)
    assert crop.shape[0] < 96 and crop.shape[1] < 96
    loaded = bundle.samples[0].dense
    assert np.array_equal(loaded, resize_pair(crop_img, crop, 96)[1])
    # the off-centre disc ends up near the middle of the crop
    rows, cols = np.nonzero(loaded > 0)
    assert abs(rows.mean() / 96 - 0.5) < 0.2 and abs(cols.mean() / 96 - 0.5) < 0.2
    assert (loaded == CUP).any() and (loaded == DISC_RIM).any()


def test_crop_without_disc_is_rejected():
    with pytest.raises(DatasetError):
        crop_around_disc(np.zeros((16, 16, 3)), np.zeros((16, 16), np.uint8), CropSpec())


def test_concat_prefixes_ids(tiny_bundle):
    other = DatasetBundle("other", tiny_bundle.support, tiny_bundle.query)
    merged = concat_bundles([tiny_bundle, other], name="both")
    assert len(merged) == 2 * len(tiny_bundle)
    assert merged.support[0].id.startswith("tiny/")
