import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from skimage.draw import disk

# Add project root to path
project_root = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(project_root))

from config import CUP, DISC_RIM  # noqa: E402
from core.data import DatasetBundle, Sample, synthetic_bundle  # noqa: E402
from core.net import init_network  # noqa: E402
from schemas import SynthSpec  # noqa: E402


def make_disc_mask(size: int = 64, disc: float = 0.3, cup: float = 0.14, center=None) -> np.ndarray:
    """Concentric disc and cup on a background, the shape every fundus crop roughly has."""
    cy, cx = center or (size / 2, size / 2)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[disk((cy, cx), disc * size, shape=mask.shape)] = DISC_RIM
    mask[disk((cy, cx), cup * size, shape=mask.shape)] = CUP
    return mask


def tiny_synth_spec(**overrides) -> SynthSpec:
    return SynthSpec(**{"count": 12, "image_size": 32, "canvas_size": 64, **overrides})


@pytest.fixture
def disc_mask():
    return make_disc_mask()


@pytest.fixture
def tiny_bundle():
    return synthetic_bundle(tiny_synth_spec(), count=12, offset=0, name="tiny", support_fraction=0.5, seed=0)


@pytest.fixture
def tiny_net():
    """Single-level network small enough for finite differences, in double precision."""
    return init_network(channels=1, classes=2, embed_dim=2, width=2, levels=1, seed=0).double()


@pytest.fixture
def rgb_net():
    return init_network(channels=3, classes=3, embed_dim=4, width=4, levels=2, seed=0)


def random_batch(n_support: int, n_query: int, size: int = 8, channels: int = 1, classes: int = 2,
                 sparse_fraction: float = 0.3, seed: int = 0, dtype=torch.float64):
    """Random (sx, sy, qx, qy) with a mix of annotated and unannotated support pixels."""
    g = torch.Generator().manual_seed(seed)
    sx = torch.rand(n_support, channels, size, size, generator=g, dtype=dtype)
    qx = torch.rand(n_query, channels, size, size, generator=g, dtype=dtype)
    dense_s = torch.randint(0, classes, (n_support, size, size), generator=g)
    keep = torch.rand(n_support, size, size, generator=g) < sparse_fraction
    sy = torch.where(keep, dense_s, torch.full_like(dense_s, 255))
    qy = torch.randint(0, classes, (n_query, size, size), generator=g)
    return sx, sy, qx, qy


def toy_bundle(n_support: int, n_query: int, size: int = 16, name: str = "toy") -> DatasetBundle:
    """Bundle of plain samples; images are flat noise, masks a centred disc."""
    rng = np.random.default_rng(0)
    mask = make_disc_mask(size)

    def sample(prefix: str, i: int) -> Sample:
        return Sample(f"{prefix}{i:03d}", rng.random((size, size, 3)).astype(np.float32), mask)

    return DatasetBundle(name, tuple(sample("s", i) for i in range(n_support)),
                         tuple(sample("q", i) for i in range(n_query)))
