"""
Declarative configuration sweeps.

A sweep expands the `sweep.grid` section into the cartesian product of its
dotted keys, adds `sweep.samples` seeded random draws from `sweep.random`,
and runs every variant into its own sub-directory.
"""

import itertools
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

import config
from core.pipeline import resolve_output_dir, run_pipeline, set_dotted
from core.report import read_jsonl
from schemas import RunConfig, SweepConfig

log = logging.getLogger(__name__)


def expand_sweep(sweep: SweepConfig) -> list[dict[str, Any]]:
    """Every variant as a mapping of dotted key -> value."""
    keys = sorted(sweep.grid)
    variants = []
    if keys:
        variants = [dict(zip(keys, values)) for values in itertools.product(*(sweep.grid[k] for k in keys))]
    if sweep.samples and sweep.random:
        rng = np.random.default_rng(sweep.seed)
        base = variants or [{}]
        for i in range(sweep.samples):
            drawn = {k: sweep.random[k].draw(rng, integer=k in sweep.integer_keys, decimals=None)
                     for k in sorted(sweep.random)}
            variants.append({**base[i % len(base)], **drawn})
    return variants


def variant_config(cfg: RunConfig, overrides: dict[str, Any], out_dir: Path) -> RunConfig:
    mapping = cfg.model_dump(mode="json", exclude={"sweep"})
    for key, value in overrides.items():
        set_dotted(mapping, key, value)
    mapping["output_dir"] = str(out_dir)
    mapping["stages"] = list(cfg.sweep.stages)
    return RunConfig.model_validate(mapping)


def run_sweep(cfg: RunConfig) -> pd.DataFrame:
    """Run every variant and write a results table ranked by best validation IoU."""
    root = resolve_output_dir(cfg) / "sweep"
    variants = expand_sweep(cfg.sweep)
    if not variants:
        log.warning("⚠️ Sweep section defines no variants; nothing to run")
        return pd.DataFrame()

    rows = []
    for i, overrides in enumerate(variants):
        out_dir = root / f"variant_{i:03d}"
        variant = variant_config(cfg, overrides, out_dir)
        log.info(f"🔁 Sweep variant {i + 1}/{len(variants)}: {overrides}")
        run_pipeline(variant)
        manifest_path = out_dir / config.CHECKPOINT_MANIFEST
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
        metrics = read_jsonl(out_dir / config.METRICS_FILE)
        rows.append({
            "variant": i,
            **{k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in overrides.items()},
            "val_iou": manifest.get("val_iou"),
            "test_iou": mean_iou_of(metrics),
            "fingerprint": variant.fingerprint(),
            "output_dir": str(out_dir),
        })

    table = pd.DataFrame(rows).sort_values(["val_iou", "variant"], ascending=[False, True], na_position="last")
    root.mkdir(parents=True, exist_ok=True)
    table.to_csv(root / config.SWEEP_RESULTS, index=False)
    log.info(f"📊 Sweep results for {len(rows)} variants written to {root / config.SWEEP_RESULTS}")
    return table


def mean_iou_of(rows: list[dict]) -> float | None:
    if not rows:
        return None
    return float(np.mean([(r["iou_od"] + r["iou_oc"]) / 2 for r in rows]))
