"""
Class prototypes and distance-based class probabilities.

Prototypes are mean embeddings of the annotated pixels of each class. A
`PrototypeSet` is either batch-shaped (one prototype row per support element)
or averaged (a single row shared by every query).
"""

import math
from dataclasses import dataclass
from typing import Iterable

import torch
import torch.nn.functional as F

from config import UNANNOTATED
from core.errors import ContractError


@dataclass(frozen=True)
class PrototypeSet:
    vectors: torch.Tensor   # (P, C, M)
    counts: torch.Tensor    # (P, C) annotated pixels behind each prototype
    averaged: bool = False

    @property
    def present(self) -> torch.Tensor:
        return self.counts > 0

    @property
    def batch_size(self) -> int:
        return self.vectors.shape[0]

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[1]


def _class_sums(embeddings: torch.Tensor, sparse: torch.Tensor, num_classes: int) -> tuple[torch.Tensor, torch.Tensor]:
    if embeddings.ndim != 4 or sparse.ndim != 3:
        raise ContractError(f"expected embeddings (B, M, H, W) and labels (B, H, W), got {tuple(embeddings.shape)} and {tuple(sparse.shape)}")
    if embeddings.shape[0] != sparse.shape[0] or embeddings.shape[2:] != sparse.shape[1:]:
        raise ContractError(f"embeddings {tuple(embeddings.shape)} and labels {tuple(sparse.shape)} disagree")
    annotated = sparse != UNANNOTATED
    target = torch.where(annotated, sparse, torch.zeros_like(sparse))
    onehot = F.one_hot(target, num_classes).to(embeddings.dtype) * annotated.unsqueeze(-1).to(embeddings.dtype)
    sums = torch.einsum("bmhw,bhwc->bcm", embeddings, onehot)
    counts = onehot.sum(dim=(1, 2))
    return sums, counts


def class_prototypes(embeddings: torch.Tensor, sparse: torch.Tensor, num_classes: int) -> PrototypeSet:
    """Per-element prototypes, shape (B, C, M). Classes without annotated pixels are absent."""
    sums, counts = _class_sums(embeddings, sparse, num_classes)
    return PrototypeSet(sums / counts.clamp_min(1).unsqueeze(-1), counts)


def avg_class_prototypes(chunks: Iterable[tuple[torch.Tensor, torch.Tensor]], num_classes: int,
                         macro: bool = False) -> PrototypeSet:
    """
    One prototype per class over every support chunk, shape (1, C, M).

    The default micro-average divides the total embedding sum of a class by
    its total annotated count. With `macro`, per-element prototypes are
    averaged instead, over the elements where the class is present.
    """
    total_sums = total_counts = None
    for embeddings, sparse in chunks:
        sums, counts = _class_sums(embeddings, sparse, num_classes)
        if macro:
            sums = sums / counts.clamp_min(1).unsqueeze(-1)
            counts_used = (counts > 0).to(sums.dtype)
            sums = sums * counts_used.unsqueeze(-1)
            counts = counts_used
        chunk_sums, chunk_counts = sums.sum(dim=0), counts.sum(dim=0)
        total_sums = chunk_sums if total_sums is None else total_sums + chunk_sums
        total_counts = chunk_counts if total_counts is None else total_counts + chunk_counts
    if total_sums is None:
        raise ContractError("averaged prototypes need at least one support chunk")
    vectors = total_sums / total_counts.clamp_min(1).unsqueeze(-1)
    return PrototypeSet(vectors.unsqueeze(0), total_counts.unsqueeze(0), averaged=True)


def proto_probs(embeddings: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    """
    Softmax over classes of the negative Euclidean distance to each prototype.

    Absent classes receive probability 0. A row with no present class at all
    falls back to a uniform distribution.
    """
    b_q, m = embeddings.shape[0], embeddings.shape[1]
    if protos.vectors.shape[2] != m:
        raise ContractError(f"prototype depth {protos.vectors.shape[2]} does not match embedding depth {m}")
    if not protos.averaged and protos.batch_size != b_q:
        raise ContractError(
            f"batch-shaped prototypes ({protos.batch_size}) need a query batch of the same size, got {b_q}; "
            "use lcm_broadcast_probs or averaged prototypes instead"
        )
    vectors = protos.vectors.expand(b_q, -1, -1) if protos.averaged else protos.vectors
    present = protos.present.expand(b_q, -1) if protos.averaged else protos.present

    diff = embeddings.unsqueeze(1) - vectors[:, :, :, None, None]       # (B, C, M, H, W)
    dist = torch.sqrt((diff * diff).sum(dim=2).clamp_min(1e-12))         # (B, C, H, W)
    logits = -dist
    mask = present[:, :, None, None].expand_as(logits)
    none_present = ~present.any(dim=1)
    if none_present.any():
        mask = mask | none_present[:, None, None, None]
        logits = torch.where(none_present[:, None, None, None], torch.zeros_like(logits), logits)
    logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=1)


def lcm_broadcast_probs(embeddings: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    """
    Match mismatched batch sizes by repeating both sides to their least common multiple.

    Expanded element i pairs query i mod B_q with prototype row i mod B_s; the
    probabilities of all copies of a query are averaged back into one map.
    """
    if protos.averaged:
        return proto_probs(embeddings, protos)
    b_q, b_s = embeddings.shape[0], protos.batch_size
    size = math.lcm(b_q, b_s)
    expanded = PrototypeSet(
        protos.vectors.repeat(size // b_s, 1, 1),
        protos.counts.repeat(size // b_s, 1),
    )
    probs = proto_probs(embeddings.repeat(size // b_q, 1, 1, 1), expanded)
    return probs.view(size // b_q, b_q, *probs.shape[1:]).mean(dim=0)


def query_probs(embeddings: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    """proto_probs when the batches line up, the LCM path otherwise."""
    if protos.averaged or protos.batch_size == embeddings.shape[0]:
        return proto_probs(embeddings, protos)
    return lcm_broadcast_probs(embeddings, protos)
