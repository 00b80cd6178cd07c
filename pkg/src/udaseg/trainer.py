"""Joint optimization loop for the two-domain segmentation model.

One Adam optimizer updates every parameter (backbone, variational heads,
latent chain, segmentation heads, reconstruction block, MI estimators)
from a single weighted total loss.  Source batches carry labels, target
batches never do.  The learning rate decays 10% after every epoch and an
epoch is one full pass over the source dataset; target batches cycle
independently.  All randomness flows through one explicit torch.Generator
so identical (config, seed) runs are reproducible.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import losses, phantom
from .backbone import ReconstructionBlock, SegHead, UNetBackbone, init_xavier
from .config import DataConfig, ModelConfig, TrainConfig, config_text, read_config
from .mi_estimation import (
    GlobalMIEstimator, LocalMIEstimator, MIScores, PriorMatcher, TripletEncoder, mi_loss,
)
from .metrics import MetricsReport, evaluate_masks
from .variational import LatentGaussian, SequentialChain, VariationalHead

DTYPES = {"float32": torch.float32, "float64": torch.float64}
LOSS_FIELDS = (
    "recon_source", "seg_source", "mi_source",
    "recon_target", "seg_target", "mi_target", "domain", "total",
)


class UdaModel(nn.Module):
    """Backbone, per-scale variational blocks, heads, and MI estimators."""

    def __init__(self, cfg: ModelConfig, chain_enabled: bool = True):
        super().__init__()
        self.cfg = cfg
        self.channels_last = False
        self.backbone = UNetBackbone(cfg.base_channels, norm=cfg.norm)
        chans = self.backbone.scale_channels  # (4C, 2C, C), coarse to fine
        self.var_heads = nn.ModuleList(
            [VariationalHead(c, scale_index=i + 1, clamp=cfg.logvar_clamp) for i, c in enumerate(chans)]
        )
        self.chain = SequentialChain(chans, clamp=cfg.logvar_clamp, enabled=chain_enabled)
        self.seg_heads = nn.ModuleList([SegHead(c) for c in chans])
        self.recon = ReconstructionBlock(
            seg_channels=4, latent_channels=chans[-1], hidden=cfg.recon_hidden_channels
        )
        self.triplet_encoder = TripletEncoder(cfg.base_channels)
        w = self.triplet_encoder.out_channels
        self.global_mi = GlobalMIEstimator(w, cfg.est_width_channels)
        self.local_mi = LocalMIEstimator(w, cfg.est_width_channels)
        self.prior_matcher = PriorMatcher(w, cfg.prior_code_dimension)

    def initialize(self, generator: torch.Generator):
        init_xavier(self, generator)
        if not self.chain.enabled:
            self.chain.disable_corrections()

    def use_channels_last(self):
        """NHWC weight layout: much faster oneDNN kernels at these widths (float32)."""
        self.to(memory_format=torch.channels_last)
        self.channels_last = True
        return self

    def _batch_layout(self, x: torch.Tensor) -> torch.Tensor:
        return x.contiguous(memory_format=torch.channels_last) if self.channels_last else x

    def encode_to_latents(self, images: torch.Tensor, noises):
        feats = self.backbone(images)
        gaussians = [head(f) for head, f in zip(self.var_heads, feats.scales())]
        return self.chain(gaussians, noises)

    def segment_scales(self, latents):
        return [head(z) for head, z in zip(self.seg_heads, latents.samples)]

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> torch.Tensor:
        """Deterministic finest-scale hard masks (latents taken at their means)."""
        feats = self.backbone(self._batch_layout(images))
        gaussians = [head(f) for head, f in zip(self.var_heads, feats.scales())]
        zeros = [torch.zeros_like(g.mu) for g in gaussians]
        latents = self.chain(gaussians, zeros)
        return self.seg_heads[-1](latents.samples[-1]).hard_mask


def _slice_gaussians(latents, lo, hi):
    return [
        LatentGaussian(mu=g.mu[lo:hi], logvar=g.logvar[lo:hi], scale_index=g.scale_index)
        for g in latents.gaussians
    ]


def _downsample_labels(masks: torch.Tensor, factor: int) -> torch.Tensor:
    """Nearest-neighbor label downsampling for the coarser segmentation heads."""
    if factor == 1:
        return masks
    return masks[:, ::factor, ::factor]


def _multi_scale_seg_loss(masks: torch.Tensor, seg_outputs) -> torch.Tensor:
    """Cross-entropy averaged over the three scales (coarse, mid, fine)."""
    total = None
    for out in seg_outputs:
        factor = masks.shape[-1] // out.probabilities.shape[-1]
        y = losses.one_hot(_downsample_labels(masks, factor)).to(out.probabilities.dtype)
        term = losses.seg_ce(y, out.probabilities)
        total = term if total is None else total + term
    return total / len(seg_outputs)


def compute_losses(model: UdaModel, source_batch, target_batch, weights, noises, normals) -> losses.LossBreakdown:
    """Pure loss evaluation for one step; fields stay attached to the graph.

    Both domains run through the shared network in a single stacked forward.
    The pre-drawn noise tensors are shared between the domains, so identical
    inputs produce identical latents (and an exactly zero domain term).
    """
    x_s, y_s = source_batch
    x_t = target_batch
    use_target = x_t is not None
    if use_target and x_t.shape != x_s.shape:
        raise ValueError(f"domain batch shapes differ: {tuple(x_s.shape)} vs {tuple(x_t.shape)}")
    b = x_s.shape[0]
    compute_mi = weights.c3 > 0

    stacked = torch.cat([x_s, x_t], dim=0) if use_target else x_s
    feats = model.backbone(model._batch_layout(stacked))
    gaussians = [head(f) for head, f in zip(model.var_heads, feats.scales())]
    step_noises = [torch.cat([n, n], dim=0) for n in noises] if use_target else noises
    latents = model.chain(gaussians, step_noises)
    seg_outputs = model.segment_scales(latents)

    src_g = _slice_gaussians(latents, 0, b)
    y_onehot = losses.one_hot(y_s).to(x_s.dtype)
    z_fine = latents.samples[-1]
    if use_target:
        tgt_g = _slice_gaussians(latents, b, 2 * b)
        probs_fine_t = seg_outputs[-1].probabilities[b:]
        recon_in = torch.cat([y_onehot, probs_fine_t], dim=0)
    else:
        recon_in = y_onehot
    recon_out = model.recon(recon_in, z_fine)

    kl_s = sum(losses.kl_gaussian(g.mu, g.logvar) for g in src_g)
    recon_s = losses.bernoulli_ce(x_s, recon_out[:b]) + kl_s
    seg_s = _multi_scale_seg_loss(y_s, [_split_seg(o, 0, b) for o in seg_outputs])

    zero = x_s.new_zeros(())
    recon_t = seg_t = mi_t = domain = zero
    mi_s = zero
    if compute_mi:
        mi_s = _domain_mi(model, seg_outputs, recon_out, 0, b, normals, weights)
    if use_target:
        kl_t = sum(losses.kl_gaussian(g.mu, g.logvar) for g in tgt_g)
        recon_t = losses.bernoulli_ce(x_t, recon_out[b:]) + kl_t
        if compute_mi:
            mi_t = _domain_mi(model, seg_outputs, recon_out, b, 2 * b, normals, weights)
        if weights.c4 > 0:
            domain = losses.domain_distance(src_g, tgt_g)

    return losses.total_loss(recon_s, seg_s, mi_s, recon_t, seg_t, mi_t, domain, weights)


def draw_step_noise(model: UdaModel, image_shape, batch: int, generator, dtype, need_normals: bool):
    """Per-step latent noises (one per scale, coarse to fine) plus prior draws."""
    h, w = image_shape
    noises = []
    for k, c in enumerate(model.backbone.scale_channels):
        f = 4 >> k  # spatial factor: 4, 2, 1
        noises.append(torch.randn((batch, c, h // f, w // f), generator=generator, dtype=dtype))
    normals = model.prior_matcher.draw_normal(batch, generator, dtype=dtype) if need_normals else None
    return noises, normals


def uda_step(model: UdaModel, optimizer, source_batch, target_batch, weights, generator) -> losses.LossBreakdown:
    """One joint update from a labeled source batch and an unlabeled target batch.

    Raises ValueError naming the offending term if any loss goes non-finite.
    """
    x_s, _ = source_batch
    noises, normals = draw_step_noise(
        model, x_s.shape[-2:], x_s.shape[0], generator, x_s.dtype, need_normals=weights.c3 > 0
    )
    breakdown = compute_losses(model, source_batch, target_batch, weights, noises, normals)
    optimizer.zero_grad()
    breakdown.total.backward()
    optimizer.step()
    return breakdown.as_floats()


def _split_seg(out, lo, hi):
    from .backbone import SegmentationOutput

    return SegmentationOutput(logits=out.logits[lo:hi], probabilities=out.probabilities[lo:hi])


def _domain_mi(model: UdaModel, seg_outputs, recon_out, lo, hi, normals, weights) -> torch.Tensor:
    probs = [o.probabilities[lo:hi] for o in seg_outputs]
    triplet = model.triplet_encoder(probs, recon_out[lo:hi])
    scores = MIScores(
        global_score=model.global_mi(triplet),
        local_score=model.local_mi(triplet),
        prior_score=model.prior_matcher(triplet.positive, normals),
    )
    return mi_loss(scores, weights.alpha, weights.beta, weights.gamma)


@dataclass
class RunLog:
    """Per-step loss rows, per-epoch metric rows, and emitted artifact paths."""

    steps: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    checkpoint_path: str = ""
    out_dir: str = ""

    def add_step(self, step: int, epoch: int, lr: float, breakdown: losses.LossBreakdown):
        if self.steps and step <= self.steps[-1]["step"]:
            raise ValueError("steps must be strictly increasing")
        row = {"step": step, "epoch": epoch, "lr": lr}
        row.update({k: getattr(breakdown, k) for k in LOSS_FIELDS})
        self.steps.append(row)

    def add_metrics(self, epoch: int, split: str, report: MetricsReport):
        row = {"epoch": epoch, "split": split}
        row.update(report.to_csv_row())
        self.metrics.append(row)

    def steps_csv(self) -> str:
        cols = ["step", "epoch", "lr", *LOSS_FIELDS]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for row in self.steps:
            buf.write(",".join(_csv_cell(row[c]) for c in cols) + "\n")
        return buf.getvalue()

    def metrics_csv(self) -> str:
        if not self.metrics:
            return ""
        cols = list(self.metrics[0].keys())
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for row in self.metrics:
            buf.write(",".join(_csv_cell(row.get(c)) for c in cols) + "\n")
        return buf.getvalue()

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "runlog.csv").write_text(self.steps_csv())
        if self.metrics:
            (out / "metrics.csv").write_text(self.metrics_csv())
        self.out_dir = str(out)


def _csv_cell(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------

@dataclass
class TensorDataset:
    images: torch.Tensor            # (N, 1, H, W)
    masks: torch.Tensor | None      # (N, H, W) int64


def _to_tensors(ds: phantom.DomainDataset, dtype) -> TensorDataset:
    images = torch.as_tensor(
        np.stack([s.image for s in ds.samples])[:, None, :, :], dtype=dtype
    )
    masks = None
    if ds.has_labels:
        masks = torch.as_tensor(np.stack([s.mask for s in ds.samples]).astype(np.int64))
    return TensorDataset(images=images, masks=masks)


def build_datasets(data: DataConfig):
    """(source_train, target_train, source_val, target_test) per the data config.

    Target training data never exposes labels; the target test split keeps
    them for evaluation only.
    """
    if data.mode == "phantom":
        src_cfg = phantom.PhantomConfig(
            image_size=data.image_size, n_train=data.n_train, n_test=data.n_test,
            seed=data.data_seed, domain_style=data.source_style,
        )
        tgt_cfg = phantom.PhantomConfig(
            image_size=data.image_size, n_train=data.n_train, n_test=data.n_test,
            seed=data.data_seed, domain_style=data.target_style,
        )
        src_train, src_val = phantom.phantom_train_test(src_cfg)
        tgt_train, tgt_test = phantom.phantom_train_test(tgt_cfg)
        tgt_train = phantom.without_labels(tgt_train, domain_tag="target")
        return src_train, tgt_train, src_val, tgt_test
    if data.mode == "disk":
        src_train = phantom.load_dataset(data.source_dir, has_labels=True, domain_tag="source")
        tgt_train = phantom.load_dataset(data.target_dir, has_labels=False, domain_tag="target")
        src_val = (
            phantom.load_dataset(data.source_val_dir, has_labels=True, domain_tag="source")
            if data.source_val_dir else None
        )
        tgt_test = (
            phantom.load_dataset(data.target_test_dir, has_labels=True, domain_tag="target")
            if data.target_test_dir else None
        )
        return src_train, tgt_train, src_val, tgt_test
    raise ValueError(f"unknown data mode {data.mode!r}")


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

def evaluate(model: UdaModel, dataset, batch_size: int = 16, spacing: float = 1.0) -> MetricsReport:
    """Finest-scale predictions against ground truth over a labeled dataset."""
    if isinstance(dataset, phantom.DomainDataset):
        if not dataset.has_labels:
            raise ValueError("evaluation needs a labeled dataset")
        dtype = next(model.parameters()).dtype
        dataset = _to_tensors(dataset, dtype)
    preds, gts = [], []
    model.eval()
    for lo in range(0, dataset.images.shape[0], batch_size):
        batch = dataset.images[lo : lo + batch_size]
        pred = model.predict(batch).cpu().numpy()
        preds.extend(pred)
        gts.extend(dataset.masks[lo : lo + batch_size].numpy())
    model.train()
    return evaluate_masks(preds, gts, spacing=spacing)


def train(cfg: TrainConfig, out_dir=None, quiet: bool = False) -> RunLog:
    """Run the full optimization schedule and return (and optionally write) the log."""
    cfg.validate()
    dtype = DTYPES[cfg.dtype]
    gen = torch.Generator().manual_seed(cfg.seed)

    src_train, tgt_train, src_val, tgt_test = build_datasets(cfg.data)
    src = _to_tensors(src_train, dtype)
    tgt = _to_tensors(tgt_train, dtype) if cfg.use_target else None

    n_src = src.images.shape[0]
    if cfg.batch_size > n_src:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds source size {n_src}")
    if tgt is not None:
        if cfg.batch_size > tgt.images.shape[0]:
            raise ValueError(f"batch_size {cfg.batch_size} exceeds target size {tgt.images.shape[0]}")
        if tgt.images.shape[-2:] != src.images.shape[-2:]:
            raise ValueError("source and target image sizes differ")

    model = UdaModel(cfg.model, chain_enabled=cfg.chain_enabled).to(dtype)
    model.initialize(gen)
    if dtype == torch.float32:
        model.use_channels_last()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_init)

    log = RunLog()
    steps_per_epoch = n_src // cfg.batch_size
    if steps_per_epoch < 1:
        raise ValueError("source dataset smaller than one batch")

    tgt_order = None
    tgt_ptr = 0

    def next_target():
        nonlocal tgt_order, tgt_ptr
        n = tgt.images.shape[0]
        if tgt_order is None or tgt_ptr + cfg.batch_size > n:
            tgt_order = torch.randperm(n, generator=gen)
            tgt_ptr = 0
        idx = tgt_order[tgt_ptr : tgt_ptr + cfg.batch_size]
        tgt_ptr += cfg.batch_size
        return tgt.images[idx]

    step = 0
    t0 = time.time()
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = torch.randperm(n_src, generator=gen)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            source_batch = (src.images[idx], src.masks[idx])
            target_batch = next_target() if tgt is not None else None
            breakdown = uda_step(model, optimizer, source_batch, target_batch, cfg.weights, gen)
            step += 1
            log.add_step(step, epoch, lr, breakdown)
        last = log.steps[-1]
        if not quiet:
            print(
                f"epoch {epoch + 1}/{cfg.epochs} lr={lr:.3e} total={last['total']:.4f} "
                f"seg_s={last['seg_source']:.4f} ({time.time() - t0:.0f}s)"
            )
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            _log_eval(log, model, epoch, src_val, tgt_test, cfg, quiet)
    if not cfg.eval_every or cfg.epochs % cfg.eval_every:
        _log_eval(log, model, cfg.epochs - 1, src_val, tgt_test, cfg, quiet)

    if out_dir is not None:
        log.write(out_dir)
        ckpt = Path(out_dir) / "checkpoint-final.npz"
        save_checkpoint(model, cfg, ckpt)
        log.checkpoint_path = str(ckpt)
        (Path(out_dir) / "config.txt").write_text(config_text(cfg))
        for row in log.metrics:
            if row["epoch"] == cfg.epochs - 1:
                name = f"report_{row['split']}.json"
                (Path(out_dir) / name).write_text(json.dumps(row, indent=2, sort_keys=True))
    return log


def _log_eval(log, model, epoch, src_val, tgt_test, cfg, quiet):
    for split, ds in (("source_val", src_val), ("target_test", tgt_test)):
        if ds is None:
            continue
        report = evaluate(model, ds)
        log.add_metrics(epoch, split, report)
        if not quiet:
            print(f"  [{split}] mean dice {report.mean_dice:.2f}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: UdaModel, cfg: TrainConfig, path):
    """Single npz archive of named weight arrays plus the config fingerprint."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["config_text"] = np.frombuffer(config_text(cfg).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[UdaModel, TrainConfig]:
    with np.load(path) as data:
        text = bytes(data["config_text"]).decode()
        cfg = read_config(text=text)
        model = UdaModel(cfg.model, chain_enabled=cfg.chain_enabled).to(DTYPES[cfg.dtype])
        state = {
            k[len("param/"):]: torch.as_tensor(data[k])
            for k in data.files if k.startswith("param/")
        }
    model.load_state_dict(state)
    return model, cfg
