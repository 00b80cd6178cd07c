"""Per-scale variational reasoning and the coarse-to-fine latent chain.

Each backbone scale gets a mean head and a log-variance head.  Sampling
runs coarse to fine: the previous scale's sample is upsampled and a 1x1
convolution emits additive corrections to the next scale's Gaussian
parameters before that scale is sampled.  With the correction weights at
zero the chain reduces elementwise to independent per-scale sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LOGVAR_CLAMP = 10.0


@dataclass
class LatentGaussian:
    """Elementwise Gaussian parameters (mu, log variance) for one scale."""

    mu: torch.Tensor
    logvar: torch.Tensor
    scale_index: int  # 1 = coarsest, 3 = finest

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError(f"mu/logvar shape mismatch: {tuple(self.mu.shape)} vs {tuple(self.logvar.shape)}")
        if not torch.isfinite(self.logvar).all():
            raise ValueError("logvar must be finite")

    @property
    def var(self) -> torch.Tensor:
        return self.logvar.exp()


@dataclass
class MultiScaleLatents:
    """Corrected Gaussians and their samples for the three scales, coarse to fine."""

    gaussians: tuple
    samples: tuple

    def __post_init__(self):
        for g, z in zip(self.gaussians, self.samples):
            if g.mu.shape != z.shape:
                raise ValueError("sample shape must equal its Gaussian's shape")


class VariationalHead(nn.Module):
    """Two parallel single 1x1 convolutions mapping a feature map to (mu, logvar)."""

    def __init__(self, channels: int, scale_index: int, clamp: float = LOGVAR_CLAMP):
        super().__init__()
        self.mu_conv = nn.Conv2d(channels, channels, 1)
        self.logvar_conv = nn.Conv2d(channels, channels, 1)
        self.scale_index = scale_index
        self.clamp = clamp

    def forward(self, feature: torch.Tensor) -> LatentGaussian:
        mu = self.mu_conv(feature)
        logvar = self.logvar_conv(feature).clamp(-self.clamp, self.clamp)
        return LatentGaussian(mu=mu, logvar=logvar, scale_index=self.scale_index)


def reparameterize(g: LatentGaussian, noise: torch.Tensor) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * noise, with noise ~ N(0, I)."""
    if noise.shape != g.mu.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != gaussian shape {tuple(g.mu.shape)}")
    return g.mu + (0.5 * g.logvar).exp() * noise


class SequentialChain(nn.Module):
    """Coarse-to-fine sampling with additive Gaussian-parameter correction.

    channels lists the per-scale widths, coarse to fine.  For scales 2 and 3
    the previous sample is nearest-upsampled 2x and a 1x1 convolution emits
    (delta_mu, delta_logvar); the corrected parameters are what downstream
    losses consume.  Corrections can be disabled, which zeroes and freezes
    the 1x1 convolutions so sampling is exactly the independent baseline.
    """

    def __init__(self, channels: tuple[int, int, int], clamp: float = LOGVAR_CLAMP, enabled: bool = True):
        super().__init__()
        self.corrections = nn.ModuleList(
            [nn.Conv2d(channels[k], 2 * channels[k + 1], 1) for k in range(2)]
        )
        self.clamp = clamp
        self.enabled = enabled
        if not enabled:
            self.disable_corrections()

    def disable_corrections(self):
        """Zero and freeze the correction convolutions (independent-sampling ablation)."""
        self.enabled = False
        for conv in self.corrections:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
            conv.weight.requires_grad_(False)
            conv.bias.requires_grad_(False)

    def forward(self, gaussians, noises) -> MultiScaleLatents:
        """Sample the three scales given pre-drawn standard-normal noises.

        gaussians and noises are ordered coarse to fine, spatial sizes
        doubling between adjacent scales.
        """
        if len(gaussians) != 3 or len(noises) != 3:
            raise ValueError("expected exactly three scales")
        for a, b in zip(gaussians[:-1], gaussians[1:]):
            ha, hb = a.mu.shape[-2:], b.mu.shape[-2:]
            if (2 * ha[0], 2 * ha[1]) != (hb[0], hb[1]):
                raise ValueError(f"adjacent scales must halve spatially: {ha} -> {hb}")

        corrected = [gaussians[0]]
        z = reparameterize(gaussians[0], noises[0])
        samples = [z]
        for k in (1, 2):
            g = gaussians[k]
            up = F.interpolate(z, scale_factor=2, mode="nearest")
            delta = self.corrections[k - 1](up)
            d_mu, d_logvar = delta.chunk(2, dim=1)
            g = LatentGaussian(
                mu=g.mu + d_mu,
                logvar=(g.logvar + d_logvar).clamp(-self.clamp, self.clamp),
                scale_index=g.scale_index,
            )
            z = reparameterize(g, noises[k])
            corrected.append(g)
            samples.append(z)
        return MultiScaleLatents(gaussians=tuple(corrected), samples=tuple(samples))


def draw_noises(gaussians, generator: torch.Generator) -> list[torch.Tensor]:
    """Standard-normal noise tensors matching each scale's Gaussian shape."""
    return [
        torch.randn(g.mu.shape, generator=generator, dtype=g.mu.dtype, device=g.mu.device)
        for g in gaussians
    ]
