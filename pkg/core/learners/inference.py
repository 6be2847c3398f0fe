"""
Inference on a few-shot task.

A predictor splits the work into `prepare` (everything that depends on the
support set: tuning a clone or computing prototypes) and `predict` (query
images only), so the two phases can be timed separately.
"""

import copy
import logging
from abc import ABC, abstractmethod

import torch

from core.errors import ContractError
from core.learners.losses import sce_loss
from core.learners.prototypes import PrototypeSet, avg_class_prototypes, class_prototypes, query_probs
from core.learners.registry import LearnerSpec
from core.net import MiniUNet, forward_embed, forward_seg
from schemas import TrainConfig

log = logging.getLogger(__name__)


def _split(x: torch.Tensor, batch_size: int | None):
    return x.split(batch_size or x.shape[0])


def labels_from_probs(probs: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, so ties go to the lowest class
    return probs.argmax(dim=1)


class Predictor(ABC):
    def __init__(self, model: MiniUNet, batch_size: int | None = None):
        self.model = model
        self.batch_size = batch_size

    @abstractmethod
    def prepare(self, support_images: torch.Tensor, support_sparse: torch.Tensor) -> None:
        ...

    @abstractmethod
    def _probs(self, images: torch.Tensor) -> torch.Tensor:
        ...

    @torch.no_grad()
    def predict(self, query_images: torch.Tensor) -> torch.Tensor:
        """Label maps (Q, H, W), predicted in chunks of `batch_size`."""
        return torch.cat([labels_from_probs(self._probs(x)) for x in _split(query_images, self.batch_size)])


class WeaselPredictor(Predictor):
    """Tunes a private copy of the network on the sparse support with plain SGD."""

    def __init__(self, model: MiniUNet, inner_lr: float, tune_epochs: int, batch_size: int | None = None,
                 per_annotated: bool = False):
        super().__init__(model, batch_size)
        self.inner_lr = inner_lr
        self.tune_epochs = tune_epochs
        self.per_annotated = per_annotated
        self.tuned: MiniUNet | None = None

    def prepare(self, support_images, support_sparse):
        tuned = copy.deepcopy(self.model)
        tuned.train()
        optimizer = torch.optim.SGD(tuned.parameters(), lr=self.inner_lr)
        for _ in range(self.tune_epochs):
            for x, y in zip(_split(support_images, self.batch_size), _split(support_sparse, self.batch_size)):
                loss = sce_loss(forward_seg(tuned, x), y, self.per_annotated)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
        tuned.eval()
        self.tuned = tuned

    def _probs(self, images):
        if self.tuned is None:
            raise ContractError("prepare() must run before predict()")
        return forward_seg(self.tuned, images)


class ProtoPredictor(Predictor):
    """Prototypes from the support; queries classified by distance."""

    def __init__(self, model: MiniUNet, averaged: bool = False, batch_size: int | None = None, macro: bool = False):
        super().__init__(model, batch_size)
        self.averaged = averaged
        self.macro = macro
        self.prototypes: PrototypeSet | None = None

    @torch.no_grad()
    def prepare(self, support_images, support_sparse):
        chunks = [(forward_embed(self.model, x), y) for x, y in
                  zip(_split(support_images, self.batch_size), _split(support_sparse, self.batch_size))]
        if self.averaged:
            protos = avg_class_prototypes(chunks, self.model.classes, macro=self.macro)
        else:
            protos = class_prototypes(torch.cat([e for e, _ in chunks]), support_sparse, self.model.classes)
        if not protos.present.any():
            raise ContractError("support has no annotated pixel of any class; cannot classify queries")
        self.prototypes = protos

    def predict(self, query_images):
        if self.prototypes is None:
            raise ContractError("prepare() must run before predict()")
        if self.averaged:
            return super().predict(query_images)
        # batch-shaped prototypes are paired with the whole query set at once
        with torch.no_grad():
            return labels_from_probs(self._probs(query_images))

    def _probs(self, images):
        return query_probs(forward_embed(self.model, images), self.prototypes)


class SLPredictor(Predictor):
    """Supervised baseline: the support is ignored."""

    def prepare(self, support_images, support_sparse):
        return None

    def _probs(self, images):
        return forward_seg(self.model, images)


def make_predictor(learner: LearnerSpec, model: MiniUNet, cfg: TrainConfig) -> Predictor:
    model.eval()
    if learner.family == "weasel":
        return WeaselPredictor(model, cfg.inner_lr, cfg.tune_epochs, cfg.batch_size, cfg.per_annotated_norm)
    if learner.family == "protoseg":
        return ProtoPredictor(model, learner.averaged, cfg.batch_size, cfg.macro_prototypes)
    return SLPredictor(model, cfg.batch_size)


def weasel_infer(model: MiniUNet, support_images: torch.Tensor, support_sparse: torch.Tensor,
                 query_images: torch.Tensor, inner_lr: float, tune_epochs: int,
                 batch_size: int | None = None) -> torch.Tensor:
    predictor = WeaselPredictor(model, inner_lr, tune_epochs, batch_size)
    predictor.prepare(support_images, support_sparse)
    return predictor.predict(query_images)


def protoseg_infer(model: MiniUNet, support_images: torch.Tensor, support_sparse: torch.Tensor,
                   query_images: torch.Tensor, averaged: bool = False,
                   batch_size: int | None = None) -> torch.Tensor:
    predictor = ProtoPredictor(model, averaged, batch_size)
    predictor.prepare(support_images, support_sparse)
    return predictor.predict(query_images)
