"""
Compact encoder-decoder segmentation network and its differentiation helpers.

The network is held as an ordinary torch module. Meta-learners never mutate
it during a step: they pass an explicit parameter dict through
`forward_seg` / `forward_embed`, and `inner_update` returns a new dict whose
tensors stay attached to the autograd graph of the originals.
"""

import logging
import warnings
from collections import OrderedDict

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from config import PARAM_BUDGET
from core.errors import ContractError, DivergenceError, ParameterBudgetWarning
from schemas import NetConfig

log = logging.getLogger(__name__)


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each followed by group normalization and ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.GroupNorm(_groups(out_ch), out_ch),
            nn.ReLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.GroupNorm(_groups(out_ch), out_ch),
            nn.ReLU(),
        )

    def forward(self, x):
        return self.conv(x)


class UpBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, out_ch, kernel_size=2, stride=2)
        self.conv = ConvBlock(out_ch * 2, out_ch)

    def forward(self, x, skip):
        x = self.up(x)
        dy, dx = skip.shape[2] - x.shape[2], skip.shape[3] - x.shape[3]
        if dy or dx:
            x = F.pad(x, [dx // 2, dx - dx // 2, dy // 2, dy - dy // 2])
        return self.conv(torch.cat([x, skip], dim=1))


class MiniUNet(nn.Module):
    """
    U-shaped network with a C-way segmentation head and an M-deep embedding head.

    Level i has width `width * 2**i`; the deepest level is the bottleneck.
    Both heads are 1x1 convolutions on the last decoder feature map, so
    embeddings have the input's spatial size.
    """

    def __init__(self, channels: int = 3, classes: int = 3, embed_dim: int = 16, width: int = 16, levels: int = 4):
        super().__init__()
        self.channels = channels
        self.classes = classes
        self.embed_dim = embed_dim
        widths = [width * 2 ** i for i in range(levels)]
        self.encoders = nn.ModuleList(
            [ConvBlock(channels, widths[0])] + [ConvBlock(widths[i - 1], widths[i]) for i in range(1, levels)]
        )
        self.pool = nn.MaxPool2d(2)
        self.decoders = nn.ModuleList([UpBlock(widths[i], widths[i - 1]) for i in range(levels - 1, 0, -1)])
        self.seg_head = nn.Conv2d(widths[0], classes, kernel_size=1)
        self.embed_head = nn.Conv2d(widths[0], embed_dim, kernel_size=1)

    def features(self, x):
        skips = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = self.pool(x)
            x = enc(x)
            skips.append(x)
        skips.pop()
        for dec in self.decoders:
            x = dec(x, skips.pop())
        return x

    def forward(self, x, head: str = "seg"):
        feats = self.features(x)
        if head == "embed":
            return self.embed_head(feats)
        return self.seg_head(feats)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def manifest(model: nn.Module) -> dict[str, list[int]]:
    """Parameter name -> shape."""
    return {name: list(p.shape) for name, p in model.named_parameters()}


def init_network(cfg: NetConfig | None = None, **overrides) -> MiniUNet:
    """Build a MiniUNet with deterministic initialization under `cfg.seed`."""
    cfg = (cfg or NetConfig()).model_copy(update=overrides)
    # fork_rng keeps the caller's global torch RNG state untouched
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = MiniUNet(cfg.channels, cfg.classes, cfg.embed_dim, cfg.width, cfg.levels)

    count = param_count(model)
    if count >= PARAM_BUDGET:
        log.warning(f"⚠️ Network has {count:,} parameters, over the {PARAM_BUDGET:,} budget")
        warnings.warn(f"network has {count} parameters (budget {PARAM_BUDGET})", ParameterBudgetWarning)
    else:
        log.debug(f"Network initialized with {count:,} parameters")
    return model


def named_params(model: nn.Module) -> OrderedDict[str, torch.Tensor]:
    return OrderedDict(model.named_parameters())


def _check_input(model: MiniUNet, x: torch.Tensor) -> None:
    if x.ndim != 4:
        raise ContractError(f"expected an image batch of shape (B, L, H, W), got {tuple(x.shape)}")
    if x.shape[1] != model.channels:
        raise ContractError(f"network expects {model.channels} input channels, got {x.shape[1]}")


def _call(model: MiniUNet, x: torch.Tensor, params, head: str) -> torch.Tensor:
    _check_input(model, x)
    if params is None:
        return model(x, head=head)
    return functional_call(model, params, (x,), {"head": head})


def forward_seg(model: MiniUNet, x: torch.Tensor, params=None) -> torch.Tensor:
    """Per-pixel class probabilities, shape (B, C, H, W)."""
    return torch.softmax(_call(model, x, params, "seg"), dim=1)


def forward_embed(model: MiniUNet, x: torch.Tensor, params=None) -> torch.Tensor:
    """Per-pixel embeddings, shape (B, M, H, W)."""
    return _call(model, x, params, "embed")


def loss_gradients(params, loss: torch.Tensor, create_graph: bool = True) -> OrderedDict[str, torch.Tensor]:
    """
    Gradient of `loss` wrt every tensor in `params`.

    Parameters the loss does not reach (the unused head) get a zero gradient.
    With `create_graph` the gradients are differentiable, which is what lets
    an outer loss reach the pre-update parameters through `inner_update`.
    """
    names = list(params)
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        return OrderedDict((n, torch.zeros_like(t)) for n, t in zip(names, tensors))
    grads = torch.autograd.grad(loss, tensors, create_graph=create_graph, allow_unused=True)
    return OrderedDict(
        (n, torch.zeros_like(t) if g is None else g) for n, t, g in zip(names, tensors, grads)
    )


def inner_update(params, grads, lr: float, step: int | None = None) -> OrderedDict[str, torch.Tensor]:
    """One plain gradient-descent step: theta - lr * grad, returned as a new dict."""
    if set(params) != set(grads):
        raise ContractError("gradient names do not match the parameter manifest")
    offending = [n for n, g in grads.items() if not torch.isfinite(g).all()]
    if offending:
        raise DivergenceError("non-finite gradient in inner update", step=step, offending=offending)
    out = OrderedDict()
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        out[name] = p - lr * g
    return out
