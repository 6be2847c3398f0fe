"""IoU over class groups, confidence intervals and summary tables."""

from typing import Iterable

import numpy as np
import pandas as pd
from scipy.stats import norm

from config import OC_GROUP, OD_GROUP
from core.errors import ContractError, RangeError
from schemas import MetricRecord


def iou(pred: np.ndarray, gt: np.ndarray, group: Iterable[int], empty_value: float = 1.0) -> float:
    """
    Intersection over union of the pixels whose class lies in `group`.

    When neither map contains the group the union is empty and `empty_value`
    is returned.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    classes = list(group)
    p, g = np.isin(pred, classes), np.isin(gt, classes)
    union = np.count_nonzero(p | g)
    if union == 0:
        return float(empty_value)
    return np.count_nonzero(p & g) / union


def od_oc_iou(pred: np.ndarray, gt: np.ndarray, empty_value: float = 1.0) -> tuple[float, float]:
    """(disc IoU over rim and cup, cup IoU)."""
    return iou(pred, gt, OD_GROUP, empty_value), iou(pred, gt, OC_GROUP, empty_value)


def mean_ci(values: Iterable[float], level: float = 0.95, clip: bool = True) -> tuple[float, float, float]:
    """Normal-approximation interval mean +- z * s / sqrt(n), clipped to [0, 1] unless `clip` is off."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise RangeError("mean_ci needs at least one value")
    if not 0 < level < 1:
        raise RangeError(f"confidence level must lie in (0, 1), got {level}")
    mean = float(arr.mean())
    if arr.size == 1:
        return mean, mean, mean
    half = float(norm.ppf(0.5 + level / 2)) * float(arr.std()) / np.sqrt(arr.size)
    if not clip:
        return mean, mean - half, mean + half
    return mean, max(0.0, mean - half), min(1.0, mean + half)


def records_frame(records: Iterable[MetricRecord | dict]) -> pd.DataFrame:
    rows = [r.model_dump() if isinstance(r, MetricRecord) else dict(r) for r in records]
    df = pd.DataFrame(rows)
    if df.empty:
        return df
    df["mean_iou"] = (df["iou_od"] + df["iou_oc"]) / 2
    return df


def _ci_columns(values: pd.Series, prefix: str) -> dict:
    mean, lo, hi = mean_ci(values)
    return {f"{prefix}_mean": mean, f"{prefix}_lo": lo, f"{prefix}_hi": hi}


def summarize(records: Iterable[MetricRecord | dict]) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Overall-mean and best-mean tables per (learner, dataset).

    The overall table averages every record. The best table keeps the
    (shots, technique, density) triple with the highest mean of
    (iou_od + iou_oc) / 2 and reports its OD and OC means with intervals.
    """
    df = records_frame(records)
    if df.empty:
        return pd.DataFrame(), pd.DataFrame()

    overall, best = [], []
    for (learner, dataset), group in df.groupby(["learner", "dataset"], sort=True):
        overall.append({
            "learner": learner, "dataset": dataset, "n": len(group),
            **_ci_columns(group["iou_od"], "od"),
            **_ci_columns(group["iou_oc"], "oc"),
            **_ci_columns(group["mean_iou"], "iou"),
        })
        triples = group.groupby(["shots", "technique", "density"], sort=True)["mean_iou"].mean()
        shots, technique, density = triples.idxmax()
        winner = group[(group["shots"] == shots) & (group["technique"] == technique) & (group["density"] == density)]
        best.append({
            "learner": learner, "dataset": dataset,
            "shots": int(shots), "technique": technique, "density": float(density), "n": len(winner),
            **_ci_columns(winner["iou_od"], "od"),
            **_ci_columns(winner["iou_oc"], "oc"),
            **_ci_columns(winner["mean_iou"], "iou"),
        })
    return pd.DataFrame(overall), pd.DataFrame(best)
