#!/usr/bin/env python3
"""
preview_sparse_labels.py

Render a technique x density grid of sparse labels for one dense mask.

Usage:

# Preview a synthetic sample
python scripts/preview_sparse_labels.py --out sparse_preview.png

# Preview a mask from a dataset directory
python scripts/preview_sparse_labels.py --mask data/train/masks/img_001.png --out preview.png --seed 3
"""

import argparse
import logging
import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(project_root))

import matplotlib  # noqa: E402

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from config import UNANNOTATED  # noqa: E402
from core.data import generate_synthetic, read_mask  # noqa: E402
from core.sparsify import sparsify  # noqa: E402
from schemas import TECHNIQUES, SparsifySizes, SynthSpec  # noqa: E402

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
log = logging.getLogger("preview_sparse_labels")

DENSITIES = {
    "points": [5, 20, 50],
    "grid": [0.25, 0.5, 1.0],
    "contours": [0.25, 0.5, 1.0],
    "skeleton": [0.25, 0.5, 1.0],
    "regions": [0.25, 0.5, 1.0],
}
# background, rim, cup, then light grey for unannotated
COLORS = ListedColormap(["#3b1f0e", "#d98c4a", "#f5e3a0", "#dddddd"])


def _display(label: np.ndarray) -> np.ndarray:
    out = label.astype(np.int16).copy()
    out[label == UNANNOTATED] = 3
    return out


def render(dense: np.ndarray, seed: int, sizes: SparsifySizes, out: Path) -> None:
    n_cols = 1 + max(len(v) for v in DENSITIES.values())
    fig, axes = plt.subplots(len(TECHNIQUES), n_cols, figsize=(2.2 * n_cols, 2.2 * len(TECHNIQUES)))
    for row, technique in enumerate(TECHNIQUES):
        axes[row, 0].imshow(_display(dense), cmap=COLORS, vmin=0, vmax=3, interpolation="nearest")
        axes[row, 0].set_ylabel(technique)
        for col, density in enumerate(DENSITIES[technique], start=1):
            sparse = sparsify(dense, sizes.params(technique, density, seed))
            share = float((sparse != UNANNOTATED).mean())
            axes[row, col].imshow(_display(sparse), cmap=COLORS, vmin=0, vmax=3, interpolation="nearest")
            axes[row, col].set_title(f"{density:g} ({share:.1%})", fontsize=8)
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out, dpi=110)
    plt.close(fig)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--mask", type=Path, help="Dense mask PNG; a synthetic sample is used when omitted.")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, default=Path("sparse_preview.png"))
    args = parser.parse_args()

    if args.mask:
        dense = read_mask(args.mask)
    else:
        dense = generate_synthetic(SynthSpec(seed=args.seed), count=1)[0].dense
    render(dense, args.seed, SparsifySizes(), args.out)
    log.info(f"🟢 Preview written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
