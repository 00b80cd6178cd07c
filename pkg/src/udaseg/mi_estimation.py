"""Mutual-information estimation between segmentation and reconstruction.

A contrastive triplet is built at the middle resolution: processed
reconstruction features as anchor, processed multi-scale segmentation
features as positive, and a batch-shifted reconstruction as negative.
Three estimators score the coupling: a global estimator on concatenated
feature maps, a local estimator matching a pooled code against every
spatial location, and a prior matcher driving the positive's code toward
a standard normal.  All three feed one weighted MI loss.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

PRIOR_PROB_EPS = 1e-6


@dataclass
class ContrastiveTriplet:
    """Anchor / positive / negative feature maps sharing one spatial grid."""

    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor

    def __post_init__(self):
        if not (self.anchor.shape[-2:] == self.positive.shape[-2:] == self.negative.shape[-2:]):
            raise ValueError("triplet members must share spatial dimensions")


@dataclass
class MIScores:
    """Scalar global / local / prior scores in nats."""

    global_score: torch.Tensor
    local_score: torch.Tensor
    prior_score: torch.Tensor


def mi_score(pos_pair_score: torch.Tensor, neg_pair_score: torch.Tensor) -> torch.Tensor:
    """Softplus surrogate for the joint-vs-product divergence.

    Returns E[-softplus(-T_joint)] - E[softplus(T_product)]: equal to
    -2 ln 2 when T is identically zero and approaching 0 from below as the
    scorer separates the pairings perfectly.
    """
    return (-F.softplus(-pos_pair_score)).mean() - F.softplus(neg_pair_score).mean()


def shuffle_batch(x: torch.Tensor) -> torch.Tensor:
    """Circular shift by one along the batch axis: (1,2,...,n) -> (2,...,n,1).

    Deterministic and a guaranteed derangement for batch > 1.
    """
    if x.shape[0] == 1:
        warnings.warn("batch of 1: the negative equals the anchor input and contributes no contrast")
        return x
    return torch.roll(x, shifts=-1, dims=0)


class TripletEncoder(nn.Module):
    """Fuses the per-scale segmentation maps and the reconstruction at H/2.

    The coarse probabilities are nearest-upsampled 2x, the fine ones
    average-downsampled 2x, and the three maps concatenated; the
    reconstruction image is average-downsampled to the same grid.  Anchor
    and negative share a two-convolution path, the positive gets three.
    """

    def __init__(self, base_channels: int, seg_classes: int = 4):
        super().__init__()
        w = 2 * base_channels
        self.anchor_path = nn.Sequential(
            nn.Conv2d(1, w, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w, w, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.positive_path = nn.Sequential(
            nn.Conv2d(3 * seg_classes, w, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w, w, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w, w, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.out_channels = w

    def fuse_scales(self, seg_probs) -> torch.Tensor:
        coarse, mid, fine = seg_probs
        up = F.interpolate(coarse, scale_factor=2, mode="nearest")
        down = F.avg_pool2d(fine, 2)
        return torch.cat([up, mid, down], dim=1)

    def forward(self, seg_probs, recon: torch.Tensor) -> ContrastiveTriplet:
        fused = self.fuse_scales(seg_probs)
        recon_mid = F.avg_pool2d(recon, 2)
        return ContrastiveTriplet(
            anchor=self.anchor_path(recon_mid),
            positive=self.positive_path(fused),
            negative=self.anchor_path(shuffle_batch(recon_mid)),
        )


class GlobalMIEstimator(nn.Module):
    """Scores channel-concatenated (positive, anchor) and (positive, negative) maps."""

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(2 * in_channels, width, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.head = nn.Linear(width, 1)

    def _score(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        x = self.convs(torch.cat([a, b], dim=1))
        return self.head(x.mean(dim=(2, 3))).squeeze(1)

    def forward(self, triplet: ContrastiveTriplet) -> torch.Tensor:
        joint = self._score(triplet.positive, triplet.anchor)
        product = self._score(triplet.positive, triplet.negative)
        return mi_score(joint, product)


class LocalMIEstimator(nn.Module):
    """Matches a pooled anchor code against every location of the positive map.

    The anchor (or negative) is average-pooled and sent through fully
    connected layers; the resulting code is broadcast over the positive's
    grid, concatenated per location, and scored by two 1x1 convolutions.
    Per-location scores are averaged per sample before the pair objective.
    """

    def __init__(self, in_channels: int, width: int):
        super().__init__()
        c = in_channels
        self.encode = nn.Sequential(nn.Linear(c, c), nn.ReLU(inplace=True), nn.Linear(c, c))
        self.score_convs = nn.Sequential(
            nn.Conv2d(2 * c, width, 1), nn.ReLU(inplace=True),
            nn.Conv2d(width, 1, 1),
        )

    def _score(self, code_source: torch.Tensor, positive: torch.Tensor) -> torch.Tensor:
        code = self.encode(code_source.mean(dim=(2, 3)))
        grid = code[:, :, None, None].expand(-1, -1, *positive.shape[-2:])
        per_loc = self.score_convs(torch.cat([positive, grid], dim=1))
        return per_loc.mean(dim=(1, 2, 3))

    def forward(self, triplet: ContrastiveTriplet) -> torch.Tensor:
        joint = self._score(triplet.anchor, triplet.positive)
        product = self._score(triplet.negative, triplet.positive)
        return mi_score(joint, product)


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x

    @staticmethod
    def backward(ctx, grad):
        return -grad


class PriorMatcher(nn.Module):
    """Adversarial matching of the positive's code to a standard normal.

    The positive map is pooled and sent through fully connected layers to a
    code c; a discriminator d scores codes against true normal draws and
    the returned value is E[log d(n)] + E[log(1 - d(c))].  The code enters
    the discriminator through a gradient-sign reversal so that one joint
    optimizer sharpens d while driving the encoder's codes toward the
    prior.  The forward value is unaffected by the reversal.
    """

    def __init__(self, in_channels: int, code_dim: int):
        super().__init__()
        c = in_channels
        self.encode = nn.Sequential(nn.Linear(c, c), nn.ReLU(inplace=True), nn.Linear(c, code_dim))
        self.discriminator = nn.Sequential(nn.Linear(code_dim, c), nn.ReLU(inplace=True), nn.Linear(c, 1))
        self.code_dim = code_dim

    def code(self, positive: torch.Tensor) -> torch.Tensor:
        return self.encode(positive.mean(dim=(2, 3)))

    def forward(self, positive: torch.Tensor, normal_samples: torch.Tensor) -> torch.Tensor:
        c = _ReverseGrad.apply(self.code(positive))
        d_c = torch.sigmoid(self.discriminator(c)).clamp(PRIOR_PROB_EPS, 1.0 - PRIOR_PROB_EPS)
        d_n = torch.sigmoid(self.discriminator(normal_samples)).clamp(PRIOR_PROB_EPS, 1.0 - PRIOR_PROB_EPS)
        return d_n.log().mean() + (1.0 - d_c).log().mean()

    def draw_normal(self, batch: int, generator: torch.Generator, dtype=None, device=None) -> torch.Tensor:
        return torch.randn(batch, self.code_dim, generator=generator, dtype=dtype, device=device)


def mi_loss(scores: MIScores, alpha: float = 0.5, beta: float = 1.0, gamma: float = 0.1):
    """Negated weighted sum of the three scores (minimizing maximizes MI)."""
    for name in ("global_score", "local_score", "prior_score"):
        v = getattr(scores, name)
        t = v if torch.is_tensor(v) else torch.as_tensor(float(v))
        if not torch.isfinite(t).all():
            raise ValueError(f"non-finite MI score: {name}")
    return -(alpha * scores.global_score + beta * scores.local_score + gamma * scores.prior_score)


# ---------------------------------------------------------------------------
# Correlated-Gaussian sanity harness
# ---------------------------------------------------------------------------

class PairScorer(nn.Module):
    """Small MLP scoring (u, v) pairs for the 1-D estimator harness."""

    def __init__(self, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2, hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, 1),
        )

    def forward(self, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([u, v], dim=1)).squeeze(1)


def correlated_gaussian_harness(
    rho: float,
    steps: int = 2000,
    seed: int = 0,
    batch: int = 128,
    hidden: int = 64,
    lr: float = 1e-3,
    eval_batches: int = 50,
    eval_batch: int = 2048,
) -> float:
    """Train a pair scorer on v = rho*u + sqrt(1-rho^2)*w and return its final score.

    Fresh samples are drawn every step, so at rho = 0 the trained score
    settles near -2 ln 2.  The analytic MI -0.5 ln(1 - rho^2) orders the
    scores across rho values.
    """
    from .backbone import init_xavier

    gen = torch.Generator().manual_seed(seed)
    model = PairScorer(hidden)
    init_xavier(model, gen)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    mix = (1.0 - rho * rho) ** 0.5

    def draw(n):
        u = torch.randn(n, 1, generator=gen)
        w = torch.randn(n, 1, generator=gen)
        return u, rho * u + mix * w

    for _ in range(steps):
        u, v = draw(batch)
        score = mi_score(model(u, v), model(u, shuffle_batch(v)))
        opt.zero_grad()
        (-score).backward()
        opt.step()

    with torch.no_grad():
        vals = []
        for _ in range(eval_batches):
            u, v = draw(eval_batch)
            vals.append(float(mi_score(model(u, v), model(u, shuffle_batch(v)))))
    return sum(vals) / len(vals)
