"""Learner ids mapped to their family, training mode and step function."""

from dataclasses import dataclass
from typing import Callable, Literal

import torch

from core.errors import ConfigError
from core.learners import steps
from core.net import MiniUNet
from schemas import TrainConfig

StepFn = Callable[[MiniUNet, steps.EpisodeBatch, TrainConfig], torch.Tensor]


@dataclass(frozen=True)
class LearnerSpec:
    id: str
    family: Literal["weasel", "protoseg", "sl"]
    mode: Literal["original", "omni", "supervised"]
    step: StepFn | None
    averaged: bool = False

    @property
    def head(self) -> str:
        return "embed" if self.family == "protoseg" else "seg"


def _weasel(model, batch, cfg: TrainConfig):
    return steps.weasel_step(model, batch, cfg.inner_lr, first_order=cfg.first_order,
                             per_annotated=cfg.per_annotated_norm)


def _o_weasel(model, batch, cfg: TrainConfig):
    return steps.o_weasel_step(model, batch, cfg.inner_lr, cfg.batch_size, first_order=cfg.first_order,
                               per_annotated=cfg.per_annotated_norm)


def _eo_weasel(model, batch, cfg: TrainConfig):
    return steps.eo_weasel_step(model, batch, cfg.inner_lr, cfg.batch_size, first_order=cfg.first_order,
                                per_annotated=cfg.per_annotated_norm)


def _protoseg(model, batch, cfg: TrainConfig):
    return steps.protoseg_step(model, batch)


def _o_protoseg(model, batch, cfg: TrainConfig):
    return steps.o_protoseg_step(model, batch, cfg.batch_size)


def _eo_protoseg(model, batch, cfg: TrainConfig):
    return steps.eo_protoseg_step(model, batch, cfg.batch_size, macro=cfg.macro_prototypes)


LEARNERS: dict[str, LearnerSpec] = {
    "weasel": LearnerSpec("weasel", "weasel", "original", _weasel),
    "protoseg": LearnerSpec("protoseg", "protoseg", "original", _protoseg),
    "o_weasel": LearnerSpec("o_weasel", "weasel", "omni", _o_weasel),
    "o_protoseg": LearnerSpec("o_protoseg", "protoseg", "omni", _o_protoseg),
    "eo_weasel": LearnerSpec("eo_weasel", "weasel", "omni", _eo_weasel),
    "eo_protoseg": LearnerSpec("eo_protoseg", "protoseg", "omni", _eo_protoseg, averaged=True),
    "sl_baseline": LearnerSpec("sl_baseline", "sl", "supervised", None),
}


def get_learner(learner_id: str) -> LearnerSpec:
    try:
        return LEARNERS[learner_id]
    except KeyError:
        raise ConfigError(f"unknown learner {learner_id!r}; expected one of {sorted(LEARNERS)}") from None
