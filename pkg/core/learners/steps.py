"""
Meta-training steps.

Every step takes the network and one episode batch `(sx, sy, qx, qy)` (support
images, sparse support labels, query images, dense query labels) and returns
the outer loss with its autograd graph attached to the network parameters.
`step_gradients` turns that loss into a gradient dict.
"""

import torch

from core.errors import DivergenceError
from core.learners.losses import ce_loss, proto_loss, sce_loss
from core.learners.prototypes import avg_class_prototypes, class_prototypes, query_probs
from core.net import MiniUNet, forward_embed, forward_seg, inner_update, loss_gradients, named_params

EpisodeBatch = tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]


def _chunks(batch_size: int | None, *tensors: torch.Tensor):
    size = batch_size or tensors[0].shape[0]
    return zip(*(t.split(size) for t in tensors))


def _finite(loss: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite {what} loss: {loss.item()}")
    return loss


def step_gradients(model: MiniUNet, loss: torch.Tensor, params=None) -> dict[str, torch.Tensor]:
    """Gradient of a step loss wrt the network parameters (zeros where unused)."""
    params = named_params(model) if params is None else params
    return dict(loss_gradients(params, loss, create_graph=False))


# --- WeaSeL family ---

def weasel_step(model: MiniUNet, batch: EpisodeBatch, inner_lr: float, params=None,
                first_order: bool = False, per_annotated: bool = False) -> torch.Tensor:
    """One differentiable inner update on the whole support, then query cross-entropy."""
    sx, sy, qx, qy = batch
    params = named_params(model) if params is None else params
    support_loss = _finite(sce_loss(forward_seg(model, sx, params), sy, per_annotated), "support")
    grads = loss_gradients(params, support_loss, create_graph=not first_order)
    adapted = inner_update(params, grads, inner_lr)
    return _finite(ce_loss(forward_seg(model, qx, adapted), qy), "query")


def o_weasel_step(model: MiniUNet, batch: EpisodeBatch, inner_lr: float, batch_size: int, params=None,
                  first_order: bool = False, per_annotated: bool = False) -> torch.Tensor:
    """Sequential inner updates, one per support sub-batch of at most `batch_size`."""
    sx, sy, qx, qy = batch
    adapted = named_params(model) if params is None else params
    for k, (cx, cy) in enumerate(_chunks(batch_size, sx, sy)):
        support_loss = _finite(sce_loss(forward_seg(model, cx, adapted), cy, per_annotated), "support")
        grads = loss_gradients(adapted, support_loss, create_graph=not first_order)
        adapted = inner_update(adapted, grads, inner_lr, step=k)
    return _finite(ce_loss(forward_seg(model, qx, adapted), qy), "query")


def eo_weasel_step(model: MiniUNet, batch: EpisodeBatch, inner_lr: float, batch_size: int, params=None,
                   first_order: bool = False, per_annotated: bool = False) -> torch.Tensor:
    """Support losses of every sub-batch are summed at the original parameters; one inner update."""
    sx, sy, qx, qy = batch
    params = named_params(model) if params is None else params
    total = None
    for cx, cy in _chunks(batch_size, sx, sy):
        loss = sce_loss(forward_seg(model, cx, params), cy, per_annotated)
        total = loss if total is None else total + loss
    total = _finite(total, "accumulated support")
    grads = loss_gradients(params, total, create_graph=not first_order)
    adapted = inner_update(params, grads, inner_lr)
    return _finite(ce_loss(forward_seg(model, qx, adapted), qy), "query")


# --- ProtoSeg family ---

def _embed(model: MiniUNet, x: torch.Tensor, batch_size: int | None, params) -> torch.Tensor:
    return torch.cat([forward_embed(model, cx, params) for (cx,) in _chunks(batch_size, x)])


def protoseg_step(model: MiniUNet, batch: EpisodeBatch, params=None) -> torch.Tensor:
    """Batch-shaped prototypes from the support, distance softmax on the query, cross-entropy."""
    sx, sy, qx, qy = batch
    protos = class_prototypes(forward_embed(model, sx, params), sy, model.classes)
    probs = query_probs(forward_embed(model, qx, params), protos)
    return _finite(proto_loss(probs, qy), "prototype")


def o_protoseg_step(model: MiniUNet, batch: EpisodeBatch, batch_size: int, params=None) -> torch.Tensor:
    """Support embedded in sub-batches and concatenated before computing batch-shaped prototypes."""
    sx, sy, qx, qy = batch
    protos = class_prototypes(_embed(model, sx, batch_size, params), sy, model.classes)
    probs = query_probs(_embed(model, qx, batch_size, params), protos)
    return _finite(proto_loss(probs, qy), "prototype")


def eo_protoseg_step(model: MiniUNet, batch: EpisodeBatch, batch_size: int, params=None,
                     macro: bool = False) -> torch.Tensor:
    """Averaged prototypes accumulated over support sub-batches; any query batch size works."""
    sx, sy, qx, qy = batch
    chunks = ((forward_embed(model, cx, params), cy) for cx, cy in _chunks(batch_size, sx, sy))
    protos = avg_class_prototypes(chunks, model.classes, macro=macro)
    probs = query_probs(_embed(model, qx, batch_size, params), protos)
    return _finite(proto_loss(probs, qy), "prototype")


# --- Supervised baseline ---

def supervised_step(model: MiniUNet, images: torch.Tensor, dense: torch.Tensor) -> torch.Tensor:
    return _finite(ce_loss(forward_seg(model, images), dense), "supervised")
