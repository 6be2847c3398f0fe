import logging
import time

import numpy as np
from tqdm import tqdm

from core.data import DatasetBundle
from core.episodes import enumerate_eval_grid, materialize
from core.errors import ContractError
from core.learners.inference import make_predictor
from core.learners.registry import LearnerSpec
from core.metrics import od_oc_iou
from core.net import MiniUNet
from schemas import EvalGrid, MetricRecord, SkippedCell, SparsifySizes, TrainConfig

log = logging.getLogger(__name__)


def evaluate_grid(model: MiniUNet, learner: LearnerSpec, bundle: DatasetBundle, grid: EvalGrid,
                  sizes: SparsifySizes, train: TrainConfig, fingerprint: str = "", mode: str | None = None,
                  device: str = "cpu", skipped: list[SkippedCell] | None = None) -> list[MetricRecord]:
    """Run every grid cell on `bundle` and return one record per evaluated query image.

    Cells whose supports the learner rejects are left out of the records. When
    `skipped` is given, one `SkippedCell` per such cell is appended to it.
    """
    dtype = next(model.parameters()).dtype
    descriptors = enumerate_eval_grid(bundle, grid, mode)
    records: list[MetricRecord] = []
    n_skipped = 0
    for d in tqdm(descriptors, desc=f"eval {bundle.name}", leave=False):
        episode = materialize(bundle, d.spec, sizes)
        sx, sy, qx, _ = episode.tensors(device, dtype)
        predictor = make_predictor(learner, model, train)
        t0 = time.perf_counter()
        try:
            predictor.prepare(sx, sy)
        except ContractError as e:
            log.warning(f"⚠️ Skipping {d.shots}-shot {d.technique}@{d.density}: {e}")
            n_skipped += 1
            if skipped is not None:
                skipped.append(SkippedCell(
                    learner=learner.id, dataset=bundle.name, shots=d.shots, technique=d.technique,
                    density=d.density, seed=d.spec.seed, queries=len(episode.query_ids), reason=str(e),
                    fingerprint=fingerprint,
                ))
            continue
        t1 = time.perf_counter()
        pred = predictor.predict(qx).cpu().numpy()
        per_image = (time.perf_counter() - t1) / len(pred)

        for image_id, p, gt in zip(episode.query_ids, pred, episode.query_dense):
            od, oc = od_oc_iou(p, gt)
            records.append(MetricRecord(
                learner=learner.id, dataset=bundle.name, shots=d.shots, technique=d.technique,
                density=d.density, seed=d.spec.seed, image_id=image_id, iou_od=od, iou_oc=oc,
                overhead_time=t1 - t0, predict_time=per_image, fingerprint=fingerprint,
            ))
    if n_skipped:
        log.warning(f"⚠️ {n_skipped} of {len(descriptors)} cells on {bundle.name} were skipped")
    return records


def mean_iou(records: list[MetricRecord]) -> float:
    if not records:
        return 0.0
    return float(np.mean([r.mean_iou for r in records]))
