"""
CSV summary tables and static plots from a metric stream.

Every emitted file carries the run fingerprint: a `fingerprint` column in
CSV tables and a PNG text chunk in plots.
"""

import json
import logging
from pathlib import Path
from typing import Iterable

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from core.metrics import records_frame, summarize  # noqa: E402
from core.profiling import summarize_timings  # noqa: E402

log = logging.getLogger(__name__)

SKIP_KEYS = ["learner", "dataset", "shots", "technique", "density"]


def read_jsonl(path: Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path: Path, rows: Iterable[dict]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            count += 1
    return count


def _stamp(df: pd.DataFrame, fingerprint: str) -> pd.DataFrame:
    df = df.copy()
    df["fingerprint"] = fingerprint
    return df


def _save(fig, path: Path, fingerprint: str) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"fingerprint": fingerprint})
    plt.close(fig)


def plot_means(overall: pd.DataFrame, path: Path, fingerprint: str) -> None:
    """Bar chart of OD and OC mean IoU per learner and dataset with CI error bars."""
    labels = [f"{r.learner}\n{r.dataset}" for r in overall.itertuples()]
    x = range(len(labels))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(labels)), 4))
    for offset, prefix, name in ((-0.2, "od", "OD"), (0.2, "oc", "OC")):
        means = overall[f"{prefix}_mean"]
        err = [means - overall[f"{prefix}_lo"], overall[f"{prefix}_hi"] - means]
        ax.bar([i + offset for i in x], means, width=0.4, yerr=err, capsize=3, label=name)
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.legend()
    _save(fig, path, fingerprint)


def plot_shots_density(df: pd.DataFrame, out_dir: Path, fingerprint: str) -> list[Path]:
    """One figure per technique: mean IoU against shots, one line per density and learner."""
    paths = []
    for technique, group in df.groupby("technique", sort=True):
        fig, ax = plt.subplots(figsize=(5, 4))
        curves = group.groupby(["learner", "density", "shots"], sort=True)["mean_iou"].mean().reset_index()
        for (learner, density), curve in curves.groupby(["learner", "density"], sort=True):
            ax.plot(curve["shots"], curve["mean_iou"], marker="o", label=f"{learner} d={density:g}")
        ax.set_title(technique)
        ax.set_xlabel("shots")
        ax.set_ylabel("mean IoU")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=6)
        path = out_dir / f"shots_density_{technique}.png"
        _save(fig, path, fingerprint)
        paths.append(path)
    return paths


def build_report(metrics_path: Path, out_dir: Path, fingerprint: str,
                 timing_paths: Iterable[Path] = (), skipped_path: Path | None = None) -> list[Path]:
    """Summarize a metrics JSON-lines file (and optional timing files) into `out_dir`.

    Grid cells listed in `skipped_path` are counted per learner, dataset, shots,
    technique and density in `summary_skipped.csv`.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = read_jsonl(metrics_path)
    written: list[Path] = []
    if not rows:
        log.warning(f"⚠️ No metric records in {metrics_path}; nothing to report")
    else:
        overall, best = summarize(rows)
        _stamp(overall, fingerprint).to_csv(out_dir / "summary_overall.csv", index=False)
        _stamp(best, fingerprint).to_csv(out_dir / "summary_best.csv", index=False)
        written += [out_dir / "summary_overall.csv", out_dir / "summary_best.csv"]
        plot_means(overall, out_dir / "mean_iou.png", fingerprint)
        written.append(out_dir / "mean_iou.png")
        written += plot_shots_density(records_frame(rows), out_dir, fingerprint)

    timings = [row for path in timing_paths for row in read_jsonl(path)]
    if timings:
        _stamp(summarize_timings(timings), fingerprint).to_csv(out_dir / "summary_timings.csv", index=False)
        written.append(out_dir / "summary_timings.csv")

    skipped = read_jsonl(skipped_path) if skipped_path is not None else []
    if skipped:
        counts = (pd.DataFrame(skipped)
                  .groupby(SKIP_KEYS, sort=True)
                  .agg(cells=("seed", "size"), queries=("queries", "sum"))
                  .reset_index())
        _stamp(counts, fingerprint).to_csv(out_dir / "summary_skipped.csv", index=False)
        written.append(out_dir / "summary_skipped.csv")
        log.warning(f"⚠️ {len(skipped)} grid cells were skipped and are missing from the summaries")
    log.info(f"📊 Report written to {out_dir} ({len(written)} files)")
    return written
