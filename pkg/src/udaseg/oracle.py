"""Independent numerical verification of every closed form used in training.

Three families of oracles live here, all deliberately implemented through
different machinery than the code they check:

* adaptive quadrature (scipy) for the Gaussian KL and the squared-L2
  mixture distance, checking :mod:`udaseg.losses`;
* exact enumeration over small discrete joint distributions for the
  KL-decomposition inequality chain behind the training objective;
* central finite differences against autograd for every loss term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.integrate import quad

MARGIN_TOL = -1e-9


# ---------------------------------------------------------------------------
# Quadrature oracles for the closed-form losses
# ---------------------------------------------------------------------------

def _normal_pdf(z, mu, var):
    return math.exp(-0.5 * (z - mu) ** 2 / var) / math.sqrt(2.0 * math.pi * var)


def quad_kl_to_std_normal(mu: float, var: float) -> float:
    """KL(N(mu, var) || N(0, 1)) by adaptive quadrature of q log(q/p)."""
    if var <= 0:
        raise ValueError("variance must be positive")
    sd = math.sqrt(var)
    lo = min(mu - 40.0 * sd, -40.0)
    hi = max(mu + 40.0 * sd, 40.0)

    def integrand(z):
        q = _normal_pdf(z, mu, var)
        if q == 0.0:
            return 0.0
        logp = -0.5 * z * z - 0.5 * math.log(2.0 * math.pi)
        logq = -0.5 * (z - mu) ** 2 / var - 0.5 * math.log(2.0 * math.pi * var)
        return q * (logq - logp)

    val, _ = quad(integrand, lo, hi, points=[mu, 0.0], limit=400, epsabs=1e-12, epsrel=1e-12)
    return val


def quad_l2_mixture_distance(source_params, target_params) -> float:
    """Integral of (q_S(z) - q_T(z))^2 where q_D is an equal-weight Gaussian mixture.

    Each parameter list holds (mu, var) pairs, one per batch element.
    This is the quantity the batched kernel sum in
    :func:`udaseg.losses.domain_distance` computes in closed form.
    """
    source_params = [(float(m), float(v)) for m, v in source_params]
    target_params = [(float(m), float(v)) for m, v in target_params]
    for _, v in source_params + target_params:
        if v <= 0:
            raise ValueError("variance must be positive")

    def mixture(z, params):
        return sum(_normal_pdf(z, m, v) for m, v in params) / len(params)

    spans = [(m - 40.0 * math.sqrt(v), m + 40.0 * math.sqrt(v)) for m, v in source_params + target_params]
    lo = min(s[0] for s in spans)
    hi = max(s[1] for s in spans)
    means = sorted({m for m, _ in source_params + target_params})

    def integrand(z):
        return (mixture(z, source_params) - mixture(z, target_params)) ** 2

    val, _ = quad(integrand, lo, hi, points=means, limit=500, epsabs=1e-13, epsrel=1e-12)
    return val


def analytic_gaussian_mi(rho: float) -> float:
    """Mutual information of a bivariate normal with correlation rho: -0.5 ln(1 - rho^2)."""
    if not -1.0 < rho < 1.0:
        raise ValueError("correlation must lie strictly inside (-1, 1)")
    return -0.5 * math.log(1.0 - rho * rho)


# ---------------------------------------------------------------------------
# Exact verification of the KL inequality chain on discrete joints
# ---------------------------------------------------------------------------

class BoundViolationError(AssertionError):
    """Raised when a verified inequality margin falls below tolerance."""


@dataclass
class DiscreteJoint:
    """Normalized probability table over (x, y, z) with at most 4 states per axis."""

    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 3:
            raise ValueError("joint table must be 3-dimensional (x, y, z)")
        if any(n < 1 or n > 4 for n in self.table.shape):
            raise ValueError(f"axis sizes must lie in 1..4, got {self.table.shape}")
        if self.table.min() < 0:
            raise ValueError("probabilities must be nonnegative")
        if abs(self.table.sum() - 1.0) > 1e-12:
            raise ValueError(f"table must sum to 1 within 1e-12, got {self.table.sum()!r}")

    @classmethod
    def random(cls, rng: np.random.Generator, shape=(3, 3, 3), min_prob=1e-4) -> "DiscreteJoint":
        """Strictly positive random joint; rejection keeps every cell above min_prob."""
        n = int(np.prod(shape))
        while True:
            flat = rng.dirichlet(np.ones(n))
            if flat.min() >= min_prob:
                return cls(flat.reshape(shape))

    @classmethod
    def independent_z(cls, rng: np.random.Generator, shape=(3, 3, 3), min_prob=1e-4) -> "DiscreteJoint":
        """Random joint where z is independent of (x, y)."""
        while True:
            xy = rng.dirichlet(np.ones(shape[0] * shape[1])).reshape(shape[0], shape[1])
            z = rng.dirichlet(np.ones(shape[2]))
            table = xy[:, :, None] * z[None, None, :]
            if table.min() >= min_prob:
                return cls(table)


@dataclass
class BoundReport:
    """All exactly-computed quantities of the inequality chain, in nats.

    lhs >= rhs_mid >= rhs_low is the verified chain, where

    * lhs       = E_{q(x,y)} KL(q(z|x,y) || p(z|x,y))
    * rhs_mid   = KL(q(x,y,z) || p(x,y,z)) + E_{q(x,y)} log[p(x,y)/q(x,y)]
    * rhs_low   = recon_error + info_sub - H_q(z) + E_{q(x,y)} log[p(x,y)/q(x,y)]

    with recon_error = E_q log(q/p) - E_q log q + E_{q(z)} log p(z) and the
    entropy substitution info_sub = 2 H_q(z) - H_q(x,y,z) that the chain
    uses in place of the ordinary mutual information.  The first step is an
    exact identity in expectation; the second step's slack equals
    KL(q(z) || p(z)) and vanishes when q(z) matches p(z).
    """

    lhs: float
    rhs_mid: float
    rhs_low: float
    margin_mid: float = field(init=False)
    margin_low: float = field(init=False)
    recon_error: float = 0.0
    h_z: float = 0.0
    h_xy: float = 0.0
    h_xyz: float = 0.0
    mi_xy_z: float = 0.0
    info_sub: float = 0.0
    log_ratio: float = 0.0
    kl_joint: float = 0.0
    kl_z: float = 0.0

    def __post_init__(self):
        self.margin_mid = self.lhs - self.rhs_mid
        self.margin_low = self.rhs_mid - self.rhs_low


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _kl(q: np.ndarray, p: np.ndarray) -> float:
    return float((q * (np.log(q) - np.log(p))).sum())


def mutual_information_xy_z(table: np.ndarray) -> float:
    """Standard mutual information between the pair (x, y) and z, by exact summation."""
    table = np.asarray(table, dtype=np.float64)
    q_xy = table.sum(axis=2)
    q_z = table.sum(axis=(0, 1))
    return _entropy(q_xy.ravel()) + _entropy(q_z) - _entropy(table.ravel())


def brute_force_bound_check(q: DiscreteJoint, p: DiscreteJoint) -> BoundReport:
    """Verify the KL inequality chain by exact summation over a discrete joint.

    Both tables must be strictly positive; the conditional-KL side is
    evaluated per (x, y) and the chain in expectation over q(x, y).
    Raises BoundViolationError if either margin drops below -1e-9.
    """
    if q.table.shape != p.table.shape:
        raise ValueError("q and p must share a support")
    if q.table.min() <= 0.0 or p.table.min() <= 0.0:
        raise ValueError("zero probability cell: instance must be regenerated strictly positive")

    qt, pt = q.table, p.table
    q_xy, p_xy = qt.sum(axis=2), pt.sum(axis=2)
    q_z, p_z = qt.sum(axis=(0, 1)), pt.sum(axis=(0, 1))

    # expected conditional KL, evaluated per (x, y) then averaged under q(x, y)
    lhs = 0.0
    for i in range(qt.shape[0]):
        for j in range(qt.shape[1]):
            q_cond = qt[i, j] / q_xy[i, j]
            p_cond = pt[i, j] / p_xy[i, j]
            lhs += q_xy[i, j] * _kl(q_cond, p_cond)

    kl_joint = _kl(qt.ravel(), pt.ravel())
    log_ratio = float((q_xy * (np.log(p_xy) - np.log(q_xy))).sum())
    rhs_mid = kl_joint + log_ratio

    h_xyz = _entropy(qt.ravel())
    h_z = _entropy(q_z)
    h_xy = _entropy(q_xy.ravel())
    e_qz_log_pz = float((q_z * np.log(p_z)).sum())
    recon_error = kl_joint + h_xyz + e_qz_log_pz

    info_sub = 2.0 * h_z - h_xyz
    rhs_low = recon_error + info_sub - h_z + log_ratio

    report = BoundReport(
        lhs=lhs, rhs_mid=rhs_mid, rhs_low=rhs_low,
        recon_error=recon_error, h_z=h_z, h_xy=h_xy, h_xyz=h_xyz,
        mi_xy_z=mutual_information_xy_z(qt), info_sub=info_sub,
        log_ratio=log_ratio, kl_joint=kl_joint, kl_z=_kl(q_z, p_z),
    )
    if report.margin_mid < MARGIN_TOL or report.margin_low < MARGIN_TOL:
        raise BoundViolationError(
            f"inequality chain violated: margins ({report.margin_mid:.3e}, {report.margin_low:.3e})"
        )
    return report


def run_bound_suite(n_instances: int, seed: int, shape=(3, 3, 3)) -> list[BoundReport]:
    """Check n random strictly-positive (q, p) pairs; returns every report."""
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(n_instances):
        q = DiscreteJoint.random(rng, shape)
        p = DiscreteJoint.random(rng, shape)
        reports.append(brute_force_bound_check(q, p))
    return reports


# ---------------------------------------------------------------------------
# Finite-difference gradient checks
# ---------------------------------------------------------------------------

def autograd_gradients(loss_fn, params) -> list[torch.Tensor]:
    """Analytic gradients of loss_fn() with respect to params (zeros where unused)."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    return [
        p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        for p in params
    ]


def finite_diff_gradients(loss_fn, params, eps: float, coords=None) -> list[torch.Tensor]:
    """Central finite differences of loss_fn() along the selected coordinates.

    coords maps param index -> flat coordinate indices; defaults to every
    coordinate of every parameter.  Parameters are perturbed in place under
    no_grad and restored exactly.
    """
    grads = [torch.zeros_like(p) for p in params]
    with torch.no_grad():
        for pi, p in enumerate(params):
            flat = p.view(-1)
            idxs = range(flat.numel()) if coords is None else coords.get(pi, [])
            for i in idxs:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(loss_fn())
                flat[i] = orig - eps
                f_minus = float(loss_fn())
                flat[i] = orig
                grads[pi].view(-1)[i] = (f_plus - f_minus) / (2.0 * eps)
    return grads


def max_relative_error(analytic, numeric, coords=None, floor: float = 1e-6) -> float:
    """Worst |a - n| / max(|a|, |n|, floor) over the checked coordinates."""
    worst = 0.0
    for pi, (a, n) in enumerate(zip(analytic, numeric)):
        af, nf = a.view(-1), n.view(-1)
        idxs = range(af.numel()) if coords is None else coords.get(pi, [])
        for i in idxs:
            av, nv = float(af[i]), float(nf[i])
            err = abs(av - nv) / max(abs(av), abs(nv), floor)
            worst = max(worst, err)
    return worst


def sample_coords(params, max_per_param: int, rng: np.random.Generator) -> dict:
    """Pick up to max_per_param random flat coordinates from every parameter.

    Every parameter tensor contributes at least one coordinate, so each
    module of a model under test is exercised.
    """
    coords = {}
    for pi, p in enumerate(params):
        n = p.numel()
        if n <= max_per_param:
            coords[pi] = list(range(n))
        else:
            coords[pi] = sorted(rng.choice(n, size=max_per_param, replace=False).tolist())
    return coords


def grad_check(loss_fn, params, eps: float = 1e-5, coords=None, fd_loss_fn=None, fd_params=None) -> float:
    """Max relative error between autograd and central differences.

    When fd_loss_fn/fd_params are given, the finite differences run on that
    separate (typically float64) copy of the computation, so lower-precision
    analytic gradients are judged against a higher-precision numeric oracle.
    """
    analytic = autograd_gradients(loss_fn, params)
    numeric = finite_diff_gradients(
        fd_loss_fn or loss_fn, fd_params if fd_params is not None else params, eps, coords
    )
    return max_relative_error(analytic, numeric, coords)


# ---------------------------------------------------------------------------
# Gradient-check suite over the full model's loss terms
# ---------------------------------------------------------------------------

GRAD_TERMS = ("recon_source", "seg_source", "mi_source", "recon_target", "mi_target", "domain", "total")


def build_tiny_problem(seed: int = 0, dtype=torch.float64, image_size: int = 16, batch: int = 2):
    """A miniature model plus one fixed step's inputs and pre-drawn noise.

    With the noise frozen, every loss term is a deterministic differentiable
    function of the parameters, as finite differencing requires.
    """
    from .config import ModelConfig
    from .losses import LossWeights
    from .trainer import UdaModel, draw_step_noise

    gen = torch.Generator().manual_seed(seed)
    mcfg = ModelConfig(base_channels=2, norm="none", recon_hidden=4, est_width=2, prior_code_dim=4)
    model = UdaModel(mcfg).to(dtype)
    model.initialize(gen)
    x_s = torch.rand((batch, 1, image_size, image_size), generator=gen, dtype=dtype)
    y_s = torch.randint(0, 4, (batch, image_size, image_size), generator=gen)
    x_t = torch.rand((batch, 1, image_size, image_size), generator=gen, dtype=dtype)
    noises, normals = draw_step_noise(model, (image_size, image_size), batch, gen, dtype, need_normals=True)
    return model, (x_s, y_s), x_t, LossWeights(), noises, normals


def run_grad_suite(seed: int = 0, max_coords: int = 2, eps: float = 1e-5, image_size: int = 16) -> dict:
    """Per-term max relative FD error on a tiny float64 model.

    Finite differences run over up to max_coords sampled coordinates of
    every parameter tensor, so each module is exercised.  The target
    segmentation term is a constant zero under the label-free protocol and
    is not checked.
    """
    from .trainer import compute_losses

    model, src, tgt, weights, noises, normals = build_tiny_problem(seed, torch.float64, image_size)
    params = [p for p in model.parameters() if p.requires_grad]
    coords = sample_coords(params, max_coords, np.random.default_rng(seed))
    errors = {}
    for term in GRAD_TERMS:
        def loss_fn(term=term):
            return getattr(compute_losses(model, src, tgt, weights, noises, normals), term)

        errors[term] = grad_check(loss_fn, params, eps=eps, coords=coords)
    return errors


def single_precision_total_check(seed: int = 0, max_coords: int = 2, eps: float = 1e-5, image_size: int = 8) -> float:
    """Float32 analytic total-loss gradients against a float64 FD oracle."""
    import copy

    from .trainer import compute_losses

    model32, (x_s, y_s), x_t, weights, noises, normals = build_tiny_problem(seed, torch.float32, image_size)
    model64 = copy.deepcopy(model32).to(torch.float64)
    src64 = (x_s.double(), y_s)
    tgt64 = x_t.double()
    noises64 = [n.double() for n in noises]
    normals64 = normals.double()

    params32 = [p for p in model32.parameters() if p.requires_grad]
    params64 = [p for p in model64.parameters() if p.requires_grad]
    coords = sample_coords(params32, max_coords, np.random.default_rng(seed))

    def loss32():
        return compute_losses(model32, (x_s, y_s), x_t, weights, noises, normals).total

    def loss64():
        return compute_losses(model64, src64, tgt64, weights, noises64, normals64).total

    return grad_check(loss32, params32, eps=eps, coords=coords, fd_loss_fn=loss64, fd_params=params64)
