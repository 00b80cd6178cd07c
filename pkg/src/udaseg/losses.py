"""Closed-form loss terms and their weighted total.

Every function here is a pure map from tensors to a 0-dim tensor, usable
both inside the training graph and standalone under float64 for the
verification suite in :mod:`udaseg.oracle`.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

PROB_EPS = 1e-7


@dataclass
class LossWeights:
    """Weights of the total loss and of the MI sub-loss.

    c1..c4 scale reconstruction / segmentation / MI / domain-discrepancy;
    alpha, beta, gamma weight the global / local / prior MI scores.
    c2_target defaults to 0 because the target domain carries no labels.
    """

    c1: float = 1e-2
    c2: float = 1.0
    c3: float = 1e-1
    c4: float = 1e-5
    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 0.1
    c2_target: float = 0.0

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and v >= 0):
                raise ValueError(f"loss weight {f.name} must be a nonnegative real, got {v!r}")


@dataclass
class LossBreakdown:
    """Named per-domain loss terms plus the weighted total (nats)."""

    recon_source: float
    seg_source: float
    mi_source: float
    recon_target: float
    seg_target: float
    mi_target: float
    domain: float
    total: float

    def as_floats(self) -> "LossBreakdown":
        vals = {
            f.name: float(getattr(self, f.name).detach()) if torch.is_tensor(getattr(self, f.name)) else float(getattr(self, f.name))
            for f in fields(self)
        }
        return LossBreakdown(**vals)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _check_finite(name: str, t: torch.Tensor):
    if not torch.isfinite(t).all():
        raise ValueError(f"non-finite values in {name}")


def kl_gaussian(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean KL divergence of elementwise N(mu, e^logvar) against N(0, 1).

    Returns the per-element average of 0.5 * (sigma^2 + mu^2 - log sigma^2 - 1).
    """
    if mu.shape != logvar.shape:
        raise ValueError(f"mu/logvar shape mismatch: {tuple(mu.shape)} vs {tuple(logvar.shape)}")
    _check_finite("mu", mu)
    _check_finite("logvar", logvar)
    # mean distributes over the sum, avoiding full-size intermediates
    return 0.5 * (logvar.exp().mean() + mu.square().mean() - logvar.mean() - 1.0)


def bernoulli_ce(x: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Mean Bernoulli cross-entropy between intensities x and reconstruction r.

    r must lie strictly inside (0, 1); the reconstruction head guarantees
    this with a sigmoid clamped at PROB_EPS.
    """
    if x.shape != r.shape:
        raise ValueError(f"x/r shape mismatch: {tuple(x.shape)} vs {tuple(r.shape)}")
    rmin, rmax = float(r.detach().min()), float(r.detach().max())
    if rmin <= 0.0 or rmax >= 1.0:
        raise ValueError(f"reconstruction values must be strictly inside (0,1), got range [{rmin}, {rmax}]")
    return -(x * r.log() + (1.0 - x) * (1.0 - r).log()).mean()


def recon_loss(x: torch.Tensor, r: torch.Tensor, latents) -> torch.Tensor:
    """Reconstruction objective: cross-entropy plus the per-scale KL terms.

    The KL contributions are summed (not averaged) over the scales so each
    scale's prior constraint carries equal weight.
    """
    kl = x.new_zeros(())
    for g in latents.gaussians:
        kl = kl + kl_gaussian(g.mu, g.logvar)
    return bernoulli_ce(x, r) + kl


def seg_ce(y_onehot: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel categorical cross-entropy, probabilities clamped at PROB_EPS.

    y_onehot and probs are (batch, classes, H, W); the sum runs over the
    class axis and the mean over batch and pixels.  Reduces to the binary
    cross-entropy form when classes == 2.
    """
    if y_onehot.shape != probs.shape:
        raise ValueError(f"label/prediction shape mismatch: {tuple(y_onehot.shape)} vs {tuple(probs.shape)}")
    return -(y_onehot * probs.clamp_min(PROB_EPS).log()).sum(dim=1).mean()


def one_hot(mask: torch.Tensor, num_classes: int = 4) -> torch.Tensor:
    """Integer label map (B, H, W) -> one-hot (B, C, H, W) float tensor."""
    if mask.min() < 0 or mask.max() >= num_classes:
        raise ValueError(f"label values outside [0, {num_classes - 1}]")
    oh = torch.nn.functional.one_hot(mask.long(), num_classes)
    return oh.permute(0, 3, 1, 2).contiguous()


def domain_kernel(mu_s: torch.Tensor, var_s: torch.Tensor, mu_t: torch.Tensor, var_t: torch.Tensor) -> torch.Tensor:
    """Gaussian product kernel between two diagonal Gaussians, averaged per element.

    Per latent element this equals the integral of N(z; mu_s, var_s) *
    N(z; mu_t, var_t) over z:
        (2*pi)^(-1/2) * exp(-0.5 * [(mu_s-mu_t)^2/(var_s+var_t) + log(var_s+var_t)])
    """
    if not (var_s.min() > 0 and var_t.min() > 0):
        raise ValueError("variances must be strictly positive")
    vsum = var_s + var_t
    expo = -0.5 * ((mu_s - mu_t).pow(2) / vsum + vsum.log())
    norm = (2.0 * torch.pi) ** -0.5
    return (norm * expo.exp()).mean()


def _kernel_mean(mu_a, var_a, mu_b, var_b) -> torch.Tensor:
    """Element-averaged kernel per row pair; exp(-0.5 log vsum) folded into rsqrt."""
    vsum = var_a + var_b
    k = ((mu_a - mu_b).square() / (-2.0 * vsum)).exp() * vsum.rsqrt()
    return (2.0 * torch.pi) ** -0.5 * k.mean(dim=-1)


def _pairwise_kernel_sum(mu_a, var_a, mu_b, var_b) -> torch.Tensor:
    """Sum over all batch pairs (i, j) of the element-averaged kernel."""
    m = mu_a.shape[0]
    return _kernel_mean(
        mu_a.reshape(m, 1, -1), var_a.reshape(m, 1, -1),
        mu_b.reshape(1, mu_b.shape[0], -1), var_b.reshape(1, var_b.shape[0], -1),
    ).sum()


def _pairwise_kernel_sum_sym(mu, var) -> torch.Tensor:
    """Within-batch pair sum exploiting k(i, j) = k(j, i): triangle pairs only."""
    m = mu.shape[0]
    mu, var = mu.reshape(m, -1), var.reshape(m, -1)
    iu, ju = torch.triu_indices(m, m)
    k = _kernel_mean(mu[iu], var[iu], mu[ju], var[ju])
    weight = torch.where(iu == ju, 1.0, 2.0).to(k.dtype)
    return (k * weight).sum()


def domain_distance(source_gaussians, target_gaussians) -> torch.Tensor:
    """Squared L2 distance between the two batches' latent Gaussian mixtures.

    For each scale, with batch size M, computes
        (1/M^2) * sum_ij [k(S_i,S_j) + k(T_i,T_j) - 2 k(S_i,T_j)]
    and sums the per-scale values.  Accepts single gaussians or sequences
    of per-scale gaussians (anything with .mu / .logvar).
    """
    if not isinstance(source_gaussians, (list, tuple)):
        source_gaussians = [source_gaussians]
        target_gaussians = [target_gaussians]
    if len(source_gaussians) != len(target_gaussians):
        raise ValueError("source/target must provide the same number of scales")
    total = None
    for gs, gt in zip(source_gaussians, target_gaussians):
        if gs.mu.shape != gt.mu.shape:
            raise ValueError(f"latent shape mismatch: {tuple(gs.mu.shape)} vs {tuple(gt.mu.shape)}")
        m = gs.mu.shape[0]
        vs, vt = gs.logvar.exp(), gt.logvar.exp()
        ss = _pairwise_kernel_sum_sym(gs.mu, vs)
        tt = _pairwise_kernel_sum_sym(gt.mu, vt)
        st = _pairwise_kernel_sum(gs.mu, vs, gt.mu, vt)
        d = (ss + tt - 2.0 * st) / (m * m)
        total = d if total is None else total + d
    return total


def total_loss(
    recon_source, seg_source, mi_source, recon_target, seg_target, mi_target, domain,
    weights: LossWeights,
) -> LossBreakdown:
    """Weighted sum of the per-domain terms plus the domain discrepancy.

    The target segmentation term is scaled by c2_target (0 by default:
    no target labels exist under the adaptation protocol).
    """
    parts = dict(
        recon_source=recon_source, seg_source=seg_source, mi_source=mi_source,
        recon_target=recon_target, seg_target=seg_target, mi_target=mi_target,
        domain=domain,
    )
    for name, v in parts.items():
        t = v if torch.is_tensor(v) else torch.as_tensor(float(v))
        if not torch.isfinite(t).all():
            raise ValueError(f"non-finite loss term: {name}")
    w = weights
    total = (
        w.c1 * recon_source + w.c2 * seg_source + w.c3 * mi_source
        + w.c1 * recon_target + w.c2_target * seg_target + w.c3 * mi_target
        + w.c4 * domain
    )
    return LossBreakdown(total=total, **parts)
