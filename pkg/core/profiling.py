"""
Wall-clock profiling of few-shot inference.

Inference time is support overhead (tuning or prototypes) plus query
prediction plus metric computation. Prediction time is the forward pass
alone, reported per image. The first repetition of every cell is a warm-up
and is discarded. Measurements run with a single torch thread on a monotonic
clock.
"""

import logging
import time
from contextlib import contextmanager

import numpy as np
import pandas as pd
import torch

from core.data import DatasetBundle
from core.episodes import EpisodeSpec, derive_seed, materialize
from core.learners.inference import make_predictor
from core.learners.registry import LearnerSpec
from core.metrics import mean_ci, od_oc_iou
from core.net import MiniUNet
from schemas import ProfileConfig, SparsifySizes, TimingRecord, TrainConfig

log = logging.getLogger(__name__)


@contextmanager
def single_thread():
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def _episode(bundle: DatasetBundle, shots: int, n_query: int, cfg: ProfileConfig, sizes: SparsifySizes):
    rng = np.random.default_rng([cfg.seed, shots])
    support = tuple(int(i) for i in rng.choice(len(bundle.support), size=min(shots, len(bundle.support)), replace=False))
    query = tuple(i % len(bundle.query) for i in range(n_query))
    spec = EpisodeSpec(support, query, cfg.technique, cfg.density, derive_seed(cfg.seed, shots, n_query))
    return materialize(bundle, spec, sizes)


def profile_inference(model: MiniUNet, learner: LearnerSpec, bundle: DatasetBundle, cfg: ProfileConfig,
                      train: TrainConfig, sizes: SparsifySizes, fingerprint: str = "",
                      device: str = "cpu") -> list[TimingRecord]:
    """
    Time overhead, prediction and metric computation per (shots, batch size) cell.

    Every cell predicts the same query set, sized to the largest configured
    batch, so only the chunking of support and queries varies along a row.
    """
    dtype = next(model.parameters()).dtype
    n_query = max(cfg.batch_sizes)
    records = []
    with single_thread():
        for shots in cfg.shots:
            episode = _episode(bundle, shots, n_query, cfg, sizes)
            sx, sy, qx, _ = episode.tensors(device, dtype)
            for batch_size in cfg.batch_sizes:
                for rep in range(cfg.reps + 1):
                    predictor = make_predictor(learner, model, train)
                    predictor.batch_size = batch_size
                    t0 = time.perf_counter()
                    predictor.prepare(sx, sy)
                    t1 = time.perf_counter()
                    pred = predictor.predict(qx).cpu().numpy()
                    t2 = time.perf_counter()
                    for p, gt in zip(pred, episode.query_dense):
                        od_oc_iou(p, gt)
                    t3 = time.perf_counter()
                    if rep == 0:
                        continue
                    records.append(TimingRecord(
                        learner=learner.id, kind="inference", shots=episode.shots, batch_size=batch_size,
                        rep=rep, overhead_time=t1 - t0, predict_time=t2 - t1, metric_time=t3 - t2,
                        total_time=t3 - t0, per_image_time=(t2 - t1) / len(pred), images=len(pred),
                        fingerprint=fingerprint,
                    ))
                log.info(f"⏱️ {learner.id} shots={shots} batch={batch_size}: "
                         f"median {np.median([r.total_time for r in records[-cfg.reps:]]):.4f}s")
    return records


def profile_prediction(model: MiniUNet, learner: LearnerSpec, bundle: DatasetBundle, cfg: ProfileConfig,
                       train: TrainConfig, sizes: SparsifySizes, fingerprint: str = "",
                       device: str = "cpu") -> list[TimingRecord]:
    """
    Per-image forward time with support overhead and metrics excluded.

    The predictor is prepared once on the smallest configured support outside
    the timed section; only `predict` is timed.
    """
    dtype = next(model.parameters()).dtype
    shots = min(cfg.shots)
    records = []
    with single_thread():
        for batch_size in cfg.batch_sizes:
            episode = _episode(bundle, shots, batch_size, cfg, sizes)
            sx, sy, qx, _ = episode.tensors(device, dtype)
            predictor = make_predictor(learner, model, train)
            predictor.batch_size = batch_size
            predictor.prepare(sx, sy)
            for rep in range(cfg.reps + 1):
                t0 = time.perf_counter()
                predictor.predict(qx)
                elapsed = time.perf_counter() - t0
                if rep == 0:
                    continue
                records.append(TimingRecord(
                    learner=learner.id, kind="prediction", shots=0, batch_size=batch_size, rep=rep,
                    predict_time=elapsed, total_time=elapsed, per_image_time=elapsed / qx.shape[0],
                    images=qx.shape[0], fingerprint=fingerprint,
                ))
    return records


def summarize_timings(records: list[TimingRecord | dict]) -> pd.DataFrame:
    """Median and mean interval of every timing column per (learner, kind, shots, batch size) cell."""
    df = pd.DataFrame([r.model_dump() if isinstance(r, TimingRecord) else dict(r) for r in records])
    if df.empty:
        return df
    rows = []
    for (learner, kind, shots, batch_size), group in df.groupby(["learner", "kind", "shots", "batch_size"], sort=True):
        row = {"learner": learner, "kind": kind, "shots": shots, "batch_size": batch_size, "reps": len(group)}
        for column in ("overhead_time", "predict_time", "metric_time", "total_time", "per_image_time"):
            _, lo, hi = mean_ci(group[column], clip=False)
            row[f"{column}_median"] = float(group[column].median())
            row[f"{column}_lo"], row[f"{column}_hi"] = max(0.0, lo), hi
        rows.append(row)
    return pd.DataFrame(rows)
