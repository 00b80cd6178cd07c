"""U-Net backbone, per-scale segmentation heads, reconstruction block.

The encoder performs four stride-2 downsamplings (two convolutions each);
the decoder mirrors them with skip connections.  Three decoder stages are
exposed for variational reasoning: (4C, H/4), (2C, H/2), (C, H).  The
bottleneck width is capped at 8C.  Stochasticity lives entirely in
:mod:`udaseg.variational`; everything here is deterministic given weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_CLASSES = 4
RECON_EPS = 1e-7


@dataclass
class FeatureMapSet:
    """Decoder feature maps at (H/4, 4C), (H/2, 2C), (H, C), coarse to fine."""

    coarse: torch.Tensor
    mid: torch.Tensor
    fine: torch.Tensor

    def scales(self):
        return (self.coarse, self.mid, self.fine)


class SegmentationOutput:
    """Per-class logits with softmax probabilities and the argmax label map.

    hard_mask is computed on first access; training paths only touch the
    probabilities.
    """

    def __init__(self, logits: torch.Tensor, probabilities: torch.Tensor):
        self.logits = logits
        self.probabilities = probabilities

    @property
    def hard_mask(self) -> torch.Tensor:
        return self.logits.argmax(dim=1)


def init_xavier(module: nn.Module, generator: torch.Generator | None = None):
    """Xavier-uniform weights and zero biases for every conv/linear layer."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _norm(channels: int, kind: str) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(math.gcd(4, channels), channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm kind {kind!r}")


def _conv_block(cin: int, cout: int, norm: str, stride: int = 1) -> nn.Sequential:
    """Two 3x3 convolutions; the first optionally strided for downsampling."""
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        _norm(cout, norm),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        _norm(cout, norm),
        nn.ReLU(inplace=True),
    )


class _Up(nn.Module):
    """Nearest 2x upsampling, skip concatenation, double conv."""

    def __init__(self, cin: int, c_skip: int, cout: int, norm: str):
        super().__init__()
        self.block = _conv_block(cin + c_skip, cout, norm)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.block(torch.cat([x, skip], dim=1))


class UNetBackbone(nn.Module):
    """Shared encoder-decoder producing the three variational feature scales."""

    def __init__(self, base_channels: int = 16, in_channels: int = 1, norm: str = "group"):
        super().__init__()
        c = base_channels
        self.base_channels = c
        self.stem = _conv_block(in_channels, c, norm)
        self.down1 = _conv_block(c, 2 * c, norm, stride=2)
        self.down2 = _conv_block(2 * c, 4 * c, norm, stride=2)
        self.down3 = _conv_block(4 * c, 8 * c, norm, stride=2)
        self.down4 = _conv_block(8 * c, 8 * c, norm, stride=2)
        self.up3 = _Up(8 * c, 8 * c, 8 * c, norm)
        self.up2 = _Up(8 * c, 4 * c, 4 * c, norm)
        self.up1 = _Up(4 * c, 2 * c, 2 * c, norm)
        self.up0 = _Up(2 * c, c, c, norm)

    @property
    def scale_channels(self) -> tuple[int, int, int]:
        c = self.base_channels
        return (4 * c, 2 * c, c)

    def forward(self, images: torch.Tensor) -> FeatureMapSet:
        if images.ndim != 4:
            raise ValueError(f"expected a rank-4 image batch, got shape {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"input spatial size must be a multiple of 4, got {h}x{w}")
        e0 = self.stem(images)
        e1 = self.down1(e0)
        e2 = self.down2(e1)
        e3 = self.down3(e2)
        e4 = self.down4(e3)
        d3 = self.up3(e4, e3)
        coarse = self.up2(d3, e2)
        mid = self.up1(coarse, e1)
        fine = self.up0(mid, e0)
        return FeatureMapSet(coarse=coarse, mid=mid, fine=fine)

    encode = forward


class SegHead(nn.Module):
    """Single convolution from a latent sample to 4-class logits."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, NUM_CLASSES, 3, padding=1)

    def forward(self, z: torch.Tensor) -> SegmentationOutput:
        logits = self.conv(z)
        return SegmentationOutput(logits=logits, probabilities=F.softmax(logits, dim=1))


class ReconstructionBlock(nn.Module):
    """Seven convolutions mapping (segmentation probabilities, latent) to an image.

    Source passes the one-hot ground truth, target the predicted softmax;
    both are concatenated with the finest-scale latent so one network with a
    fixed input width serves both domains.  Output is sigmoid-bounded and
    clamped to [RECON_EPS, 1 - RECON_EPS] so the Bernoulli cross-entropy is
    always finite.  upsample_steps interleaves nearest 2x upsamplings after
    the leading convolutions when the inputs sit below the image resolution.
    """

    N_LAYERS = 7

    def __init__(self, seg_channels: int, latent_channels: int, hidden: int, upsample_steps: int = 0):
        super().__init__()
        if upsample_steps > self.N_LAYERS - 2:
            raise ValueError("too many upsampling steps for a 7-layer block")
        cin = seg_channels + latent_channels
        convs = [nn.Conv2d(cin, hidden, 3, padding=1)]
        convs += [nn.Conv2d(hidden, hidden, 3, padding=1) for _ in range(self.N_LAYERS - 2)]
        convs += [nn.Conv2d(hidden, 1, 3, padding=1)]
        self.convs = nn.ModuleList(convs)
        self.upsample_steps = upsample_steps

    def forward(self, seg_probs: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if seg_probs.shape[-2:] != z.shape[-2:]:
            raise ValueError(
                f"segmentation/latent spatial mismatch: {tuple(seg_probs.shape[-2:])} vs {tuple(z.shape[-2:])}"
            )
        x = torch.cat([seg_probs, z], dim=1)
        for i, conv in enumerate(self.convs[:-1]):
            x = F.relu(conv(x))
            if i < self.upsample_steps:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = torch.sigmoid(self.convs[-1](x))
        return x.clamp(RECON_EPS, 1.0 - RECON_EPS)
