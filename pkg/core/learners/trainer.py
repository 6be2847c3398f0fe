"""
Meta-training and supervised training loops.

Original mode draws `iterations` fresh episodes per epoch; Omni mode replays
a fixed schedule in a new order every epoch. Both use Adam with a step
learning-rate schedule. Each epoch appends one JSON line to the training log.
"""

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from tqdm import tqdm

from core.data import DatasetBundle, Sample
from core.episodes import EpisodeSpec, OmniSchedule, build_omni_schedule, derive_seed, materialize, sample_original_batch
from core.errors import ConfigError, DivergenceError
from core.learners.registry import LearnerSpec
from core.learners.steps import supervised_step
from core.net import MiniUNet
from schemas import OmniConfig, SparsifySizes, TrainConfig

log = logging.getLogger(__name__)

Validator = Callable[[MiniUNet], float]


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float | None = None
    best_state: dict | None = field(default=None, repr=False)
    schedule: OmniSchedule | None = None

    @property
    def steps_per_epoch(self) -> list[int]:
        return [h["steps"] for h in self.history]


def _optimizer(model: MiniUNet, cfg: TrainConfig):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.optimizer.lr, betas=cfg.optimizer.betas,
                           weight_decay=cfg.optimizer.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.optimizer.step_size, gamma=cfg.optimizer.gamma)
    return opt, sched


def _append_jsonl(path: Path | None, row: dict) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def _non_finite_grads(model: MiniUNet) -> list[str]:
    return [n for n, p in model.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]


def _close_epoch(model: MiniUNet, result: TrainResult, row: dict, cfg: TrainConfig,
                 validate: Validator | None, log_path: Path | None) -> dict:
    """Validate, track the best state, log the epoch row. Returns the new last-good state."""
    if validate is not None and (row["epoch"] + 1) % cfg.validate_every == 0:
        model.eval()
        row["val_iou"] = float(validate(model))
        if result.best_val is None or row["val_iou"] > result.best_val:
            result.best_val, result.best_epoch = row["val_iou"], row["epoch"]
            result.best_state = copy.deepcopy(model.state_dict())
    result.history.append(row)
    _append_jsonl(log_path, row)
    log.info(f"📈 Epoch {row['epoch'] + 1}/{cfg.epochs}: loss={row['loss']:.4f} val_iou={row['val_iou']}")
    return copy.deepcopy(model.state_dict())


def _finish(model: MiniUNet, result: TrainResult, cfg: TrainConfig) -> TrainResult:
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    else:
        result.best_epoch = cfg.epochs - 1
    model.eval()
    return result


def _epoch_specs(learner: LearnerSpec, bundle: DatasetBundle, cfg: TrainConfig, omni: OmniConfig,
                 schedule: OmniSchedule | None, epoch: int) -> Iterable[EpisodeSpec]:
    if learner.mode == "omni":
        return list(schedule.iter_epoch(epoch))
    return [sample_original_batch(bundle, cfg.batch_size, omni, epoch * cfg.iterations + i, cfg.seed)
            for i in range(cfg.iterations)]


def meta_train(model: MiniUNet, learner: LearnerSpec, bundle: DatasetBundle, cfg: TrainConfig,
               omni: OmniConfig, sizes: SparsifySizes, schedule: OmniSchedule | None = None,
               validate: Validator | None = None, log_path: Path | None = None,
               device: str = "cpu", fingerprint: str = "") -> TrainResult:
    """
    Train `model` in place with the learner's step function.

    The model ends holding the best-validation parameters (or the last epoch's
    when no validator is given). A non-finite loss or gradient restores the
    last good epoch and raises DivergenceError.
    """
    if learner.step is None:
        raise ConfigError(f"learner {learner.id} has no meta-training step; use sl_train")
    if learner.mode == "omni" and schedule is None:
        schedule = build_omni_schedule(bundle, omni, cfg.batch_size)

    torch.manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    optimizer, scheduler = _optimizer(model, cfg)
    result = TrainResult(schedule=schedule)
    last_good = copy.deepcopy(model.state_dict())
    step_index = 0

    log.info(f"🟢 Meta-training {learner.id} ({learner.mode} mode) for {cfg.epochs} epochs on {bundle.name}")
    for epoch in range(cfg.epochs):
        model.train()
        specs = _epoch_specs(learner, bundle, cfg, omni, schedule, epoch)
        losses = []
        for spec in tqdm(specs, desc=f"epoch {epoch + 1}/{cfg.epochs}", leave=False):
            batch = materialize(bundle, spec, sizes).tensors(device, dtype)
            try:
                loss = learner.step(model, batch, cfg)
            except DivergenceError as e:
                model.load_state_dict(last_good)
                raise DivergenceError(str(e), step=step_index, offending=e.offending, epoch=epoch) from e
            optimizer.zero_grad()
            loss.backward()
            offending = _non_finite_grads(model)
            if offending:
                model.load_state_dict(last_good)
                raise DivergenceError("non-finite outer gradient", step=step_index, offending=offending, epoch=epoch)
            optimizer.step()
            losses.append(loss.item())
            step_index += 1
        scheduler.step()

        row = {
            "epoch": epoch,
            "steps": len(losses),
            "loss": float(np.mean(losses)) if losses else math.nan,
            "lr": optimizer.param_groups[0]["lr"],
            "val_iou": None,
            "fingerprint": fingerprint,
        }
        last_good = _close_epoch(model, result, row, cfg, validate, log_path)

    return _finish(model, result, cfg)


def sl_train(model: MiniUNet, samples: list[Sample], cfg: TrainConfig, validate: Validator | None = None,
             log_path: Path | None = None, device: str = "cpu", fingerprint: str = "") -> TrainResult:
    """Plain supervised training on dense labels, same optimizer and logging as meta-training."""
    if not samples:
        raise ConfigError("supervised training needs at least one sample")
    torch.manual_seed(cfg.seed)
    dtype = next(model.parameters()).dtype
    optimizer, scheduler = _optimizer(model, cfg)
    images = torch.from_numpy(np.stack([s.image for s in samples]).transpose(0, 3, 1, 2).copy()).to(device, dtype)
    dense = torch.from_numpy(np.stack([s.dense for s in samples]).astype(np.int64)).to(device)
    result = TrainResult()
    last_good = copy.deepcopy(model.state_dict())
    step_index = 0

    log.info(f"🟢 Supervised training for {cfg.epochs} epochs on {len(samples)} images")
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.from_numpy(np.random.default_rng(derive_seed(cfg.seed, epoch)).permutation(len(samples)))
        losses = []
        for idx in tqdm(order.split(cfg.batch_size), desc=f"epoch {epoch + 1}/{cfg.epochs}", leave=False):
            try:
                loss = supervised_step(model, images[idx], dense[idx])
            except DivergenceError as e:
                model.load_state_dict(last_good)
                raise DivergenceError(str(e), step=step_index, epoch=epoch) from e
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            step_index += 1
        scheduler.step()

        row = {"epoch": epoch, "steps": len(losses), "loss": float(np.mean(losses)),
               "lr": optimizer.param_groups[0]["lr"], "val_iou": None, "fingerprint": fingerprint}
        last_good = _close_epoch(model, result, row, cfg, validate, log_path)

    return _finish(model, result, cfg)
