"""
Dataset ingestion and synthesis.

Directory layout (one directory per split):

    <root>/<split>/images/<id>.png   RGB or grayscale fundus crop
    <root>/<split>/masks/<id>.png    8-bit mask: 0 background, 1 disc rim, 2 cup

Images and masks are paired by filename stem. Masks are always scaled with
nearest-neighbour sampling so no new class values appear.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.draw import ellipse

from config import CUP, DISC_RIM, UNANNOTATED, VALID_MASK_VALUES
from core.errors import DatasetError
from schemas import CropSpec, SynthSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Sample:
    """One image with its dense label. `image` is H x W x L float32 in [0, 1]."""
    id: str
    image: np.ndarray = field(repr=False)
    dense: np.ndarray = field(repr=False)

    @property
    def channels(self) -> int:
        return self.image.shape[2]


@dataclass(frozen=True)
class DatasetBundle:
    name: str
    support: tuple[Sample, ...] = ()
    query: tuple[Sample, ...] = ()

    def __post_init__(self):
        overlap = {s.id for s in self.support} & {s.id for s in self.query}
        if overlap:
            raise DatasetError(f"support and query of {self.name} share images: {sorted(overlap)[:5]}")

    @property
    def samples(self) -> tuple[Sample, ...]:
        return self.support + self.query

    def __len__(self) -> int:
        return len(self.support) + len(self.query)

    def identity(self) -> dict:
        return {
            "name": self.name,
            "support": [s.id for s in self.support],
            "query": [s.id for s in self.query],
        }


def concat_bundles(bundles: Sequence[DatasetBundle], name: str | None = None) -> DatasetBundle:
    """Concatenate bundles; ids are prefixed with the source bundle name to stay unique."""
    def renamed(bundle: DatasetBundle, samples: Iterable[Sample]) -> tuple[Sample, ...]:
        return tuple(Sample(f"{bundle.name}/{s.id}", s.image, s.dense) for s in samples)

    if len(bundles) == 1:
        return bundles[0]
    support: tuple[Sample, ...] = ()
    query: tuple[Sample, ...] = ()
    for b in bundles:
        support += renamed(b, b.support)
        query += renamed(b, b.query)
    return DatasetBundle(name or "+".join(b.name for b in bundles), support, query)


# --- Mask IO ---

def read_mask(path: Path, allow_unannotated: bool = False) -> np.ndarray:
    mask = np.asarray(Image.open(path))
    if mask.ndim != 2:
        raise DatasetError(f"mask {path} must be single-channel, got shape {mask.shape}")
    allowed = set(VALID_MASK_VALUES) | ({UNANNOTATED} if allow_unannotated else set())
    unknown = set(np.unique(mask).tolist()) - allowed
    if unknown:
        raise DatasetError(f"mask {path} contains unknown values {sorted(unknown)}")
    return mask.astype(np.uint8)


def write_mask(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def read_image(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def write_image(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def resize_pair(image: np.ndarray, dense: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Resize to size x size: bilinear for the image, nearest for the mask."""
    if image.shape[:2] == (size, size) and dense.shape == (size, size):
        return image, dense
    u8 = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    if u8.shape[2] == 1:
        resized = np.asarray(Image.fromarray(u8[:, :, 0], mode="L").resize((size, size), Image.BILINEAR))[:, :, None]
    else:
        resized = np.asarray(Image.fromarray(u8, mode="RGB").resize((size, size), Image.BILINEAR))
    mask = np.asarray(Image.fromarray(dense.astype(np.uint8), mode="L").resize((size, size), Image.NEAREST))
    return resized.astype(np.float32) / 255.0, mask.astype(np.uint8)


# --- Cropping ---

def crop_around_disc(image: np.ndarray, dense: np.ndarray, spec: CropSpec,
                     index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """
    Crop to the tight disc bounding box plus random padding on each side.

    Padding is drawn per side from normal(mean, std) as a fraction of the box
    height (vertical) or width (horizontal), clamped at zero and at the image
    border. The draw is seeded by (spec.seed, index).
    """
    rows, cols = np.nonzero(np.isin(dense, (DISC_RIM, CUP)))
    if rows.size == 0:
        raise DatasetError("cannot crop around the disc: the label has no disc pixels")
    top, bottom = int(rows.min()), int(rows.max())
    left, right = int(cols.min()), int(cols.max())
    box_h, box_w = bottom - top + 1, right - left + 1

    rng = np.random.default_rng([spec.seed, index])
    pad_top, pad_bottom = np.maximum(rng.normal(spec.v_pad_mean, spec.v_pad_std, size=2), 0) * box_h
    pad_left, pad_right = np.maximum(rng.normal(spec.h_pad_mean, spec.h_pad_std, size=2), 0) * box_w

    r0 = max(0, top - int(round(pad_top)))
    r1 = min(dense.shape[0], bottom + 1 + int(round(pad_bottom)))
    c0 = max(0, left - int(round(pad_left)))
    c1 = min(dense.shape[1], right + 1 + int(round(pad_right)))
    return image[r0:r1, c0:c1], dense[r0:r1, c0:c1]


# --- Directory datasets ---

def split_support_query(samples: Sequence[Sample], support_fraction: float, seed: int,
                        name: str) -> DatasetBundle:
    """Seeded disjoint split into support and query."""
    ordered = sorted(samples, key=lambda s: s.id)
    if not ordered:
        return DatasetBundle(name)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ordered))
    n_support = min(len(ordered), max(1, int(round(support_fraction * len(ordered)))))
    support = tuple(ordered[i] for i in sorted(order[:n_support]))
    query = tuple(ordered[i] for i in sorted(order[n_support:]))
    return DatasetBundle(name, support, query)


def load_dataset(root: Path, split: str, image_size: int = 128, support_fraction: float = 0.5,
                 seed: int = 0, crop: CropSpec | None = None) -> DatasetBundle:
    """
    Read `<root>/<split>/{images,masks}` into a support/query bundle.

    With a `crop`, every pair is cut around its disc before resizing; the
    padding draw for the i-th sample (sorted by id) is seeded by (crop.seed, i).
    """
    split_dir = Path(root) / split
    name = f"{Path(root).name}/{split}"
    images = {p.stem: p for p in sorted((split_dir / "images").glob("*.png"))}
    masks = {p.stem: p for p in sorted((split_dir / "masks").glob("*.png"))}
    if not images and not masks:
        log.warning(f"⚠️ No images found under {split_dir}; returning an empty bundle")
        return DatasetBundle(name)

    unmatched = sorted(set(images) ^ set(masks))
    if unmatched:
        raise DatasetError(f"images and masks do not pair up in {split_dir}: {unmatched}")

    samples = []
    for i, stem in enumerate(sorted(images)):
        image = read_image(images[stem])
        dense = read_mask(masks[stem])
        if image.shape[:2] != dense.shape:
            raise DatasetError(f"image and mask sizes differ for {stem}: {image.shape[:2]} vs {dense.shape}")
        if crop is not None:
            image, dense = crop_around_disc(image, dense, crop, index=i)
        image, dense = resize_pair(image, dense, image_size)
        samples.append(Sample(stem, image, dense))
    log.info(f"📂 Loaded {len(samples)} samples from {split_dir}")
    return split_support_query(samples, support_fraction, seed, name)


def save_dataset(samples: Iterable[Sample], root: Path, split: str) -> int:
    split_dir = Path(root) / split
    count = 0
    for sample in samples:
        write_image(split_dir / "images" / f"{sample.id}.png", sample.image)
        write_mask(split_dir / "masks" / f"{sample.id}.png", sample.dense)
        count += 1
    return count


# --- Synthetic fundus crops ---

BACKGROUND_RGB = np.array([0.55, 0.22, 0.10])
DISC_RGB = np.array([0.86, 0.56, 0.30])
CUP_RGB = np.array([0.96, 0.84, 0.58])


def _synthetic_canvas(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    size = spec.canvas_size
    cy, cx = size / 2 + rng.uniform(-0.05, 0.05, size=2) * size
    r = rng.uniform(*spec.disc_radius) * size
    ry, rx = r, r * rng.uniform(0.9, 1.1)
    ratio = rng.uniform(*spec.cup_ratio)
    oy, ox = rng.uniform(-1, 1, size=2) * (1 - ratio) * 0.4 * np.array([ry, rx])

    dense = np.zeros((size, size), dtype=np.uint8)
    disc = np.zeros_like(dense, dtype=bool)
    disc[ellipse(cy, cx, ry, rx, shape=dense.shape)] = True
    cup = np.zeros_like(disc)
    cup[ellipse(cy + oy, cx + ox, ratio * ry, ratio * rx, shape=dense.shape)] = True
    dense[disc] = DISC_RIM
    dense[cup & disc] = CUP

    jitter = lambda: rng.normal(0, spec.color_jitter, size=3)
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 32)
    texture = texture / (np.abs(texture).max() + 1e-8) * spec.texture_noise
    yy, xx = np.mgrid[:size, :size]
    falloff = 1 - 0.25 * (((yy - cy) ** 2 + (xx - cx) ** 2) / (size / 2) ** 2)

    image = (BACKGROUND_RGB + jitter())[None, None, :] * (1 + texture)[:, :, None] * falloff[:, :, None]
    disc_soft = ndimage.gaussian_filter(disc.astype(float), 1.5)[:, :, None]
    cup_soft = ndimage.gaussian_filter((cup & disc).astype(float), 1.5)[:, :, None]
    image = image * (1 - disc_soft) + (DISC_RGB + jitter()) * disc_soft
    image = image * (1 - cup_soft) + (CUP_RGB + jitter()) * cup_soft
    image = image + rng.normal(0, spec.pixel_noise, size=image.shape)
    return np.clip(image, 0, 1), dense


def generate_synthetic(spec: SynthSpec, count: int | None = None, offset: int = 0,
                       prefix: str = "synth") -> list[Sample]:
    """
    Generate disc-centred synthetic fundus crops.

    Image i is drawn from a generator seeded by (spec.seed, offset + i), so
    regenerating with the same spec is bit-identical and different offsets
    give disjoint image sets.
    """
    samples = []
    for i in range(spec.count if count is None else count):
        index = offset + i
        rng = np.random.default_rng([spec.seed, index])
        canvas, dense = _synthetic_canvas(spec, rng)
        image, dense = crop_around_disc(canvas, dense, spec.crop, index=index)
        image, dense = resize_pair(image, dense, spec.image_size)
        # quantize so a save/load round trip reproduces the pixels exactly
        image = np.rint(image * 255.0).astype(np.uint8).astype(np.float32) / 255.0
        samples.append(Sample(f"{prefix}_{index:05d}", image, dense))
    return samples


def synthetic_bundle(spec: SynthSpec, count: int, offset: int, name: str, support_fraction: float = 0.5,
                     seed: int = 0) -> DatasetBundle:
    return split_support_query(generate_synthetic(spec, count, offset, prefix=name), support_fraction, seed, name)
