"""Cross-entropy losses over probability maps (B, C, H, W)."""

import torch
import torch.nn.functional as F

from config import LOG_EPS, UNANNOTATED
from core.errors import ContractError


def _check(pred: torch.Tensor, labels: torch.Tensor) -> None:
    if pred.ndim != 4 or labels.ndim != 3:
        raise ContractError(f"expected pred (B, C, H, W) and labels (B, H, W), got {tuple(pred.shape)} and {tuple(labels.shape)}")
    if pred.shape[0] != labels.shape[0] or pred.shape[2:] != labels.shape[1:]:
        raise ContractError(f"prediction {tuple(pred.shape)} and labels {tuple(labels.shape)} disagree")


def _nll(pred: torch.Tensor, labels: torch.Tensor, per_annotated: bool = False) -> torch.Tensor:
    # UNANNOTATED pixels come back from nll_loss as zeros
    pixels = F.nll_loss(torch.log(pred.clamp_min(LOG_EPS)), labels.long(), ignore_index=UNANNOTATED, reduction="none")
    per_image = pixels.sum(dim=(1, 2))
    if per_annotated:
        annotated = (labels != UNANNOTATED).sum(dim=(1, 2)).clamp_min(1)
        per_image = per_image / annotated.to(per_image.dtype)
    else:
        per_image = per_image / (labels.shape[1] * labels.shape[2])
    return per_image.mean()


def sce_loss(pred: torch.Tensor, sparse: torch.Tensor, per_annotated: bool = False) -> torch.Tensor:
    """
    Sparse cross-entropy.

    Unannotated pixels contribute nothing. The sum is divided by the total
    pixel count N, or by the annotated count when `per_annotated` is set,
    then averaged over the batch.
    """
    _check(pred, sparse)
    return _nll(pred, sparse, per_annotated)


def ce_loss(pred: torch.Tensor, dense: torch.Tensor) -> torch.Tensor:
    """Dense cross-entropy over every pixel, batch averaged."""
    _check(pred, dense)
    if (dense == UNANNOTATED).any():
        raise ContractError("dense labels must not contain the unannotated sentinel")
    return _nll(pred, dense)


def proto_loss(probs: torch.Tensor, dense: torch.Tensor) -> torch.Tensor:
    return ce_loss(probs, dense)
