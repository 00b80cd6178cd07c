"""Command-line entry point: data generation, training, evaluation, sanity suites.

Every command writes only under its --out/--report destinations and exits
zero only when all of its internal assertions passed.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np


def _cmd_gen_data(args) -> int:
    from .phantom import PhantomConfig, generate_phantom, save_dataset

    cfg = PhantomConfig(
        image_size=args.size, n_train=args.n, n_test=0, seed=args.seed, domain_style=args.style
    )
    ds = generate_phantom(cfg)
    save_dataset(
        ds, args.out,
        manifest=dict(image_size=cfg.image_size, n_train=cfg.n_train, n_test=cfg.n_test,
                      seed=cfg.seed, domain_style=cfg.domain_style),
    )
    print(f"wrote {len(ds)} samples under {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .config import apply_variant, read_config
    from .trainer import train

    cfg = read_config(args.config)
    if args.variant:
        apply_variant(cfg, args.variant)
    log = train(cfg, out_dir=args.out)
    print(f"run artifacts under {args.out} ({len(log.steps)} steps)")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import evaluate_masks
    from .phantom import DomainDataset, DomainSample, LoadError, load_dataset, _read_gray, VALID_LABELS
    from .trainer import evaluate, load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    data_root = Path(args.data)
    if args.labels and Path(args.labels) != data_root / "masks":
        ds = load_dataset(args.data, has_labels=False)
        labels_dir = Path(args.labels)
        samples = []
        img_files = sorted(p for p in (data_root / "images").iterdir() if p.suffix.lower() == ".png")
        for sample, path in zip(ds.samples, img_files):
            mpath = labels_dir / path.name
            if not mpath.exists():
                raise LoadError(f"image without matching mask: {path}")
            mask = _read_gray(mpath)
            bad = set(np.unique(mask)) - VALID_LABELS
            if bad:
                raise LoadError(f"label value {sorted(bad)[0]} outside {sorted(VALID_LABELS)} in {mpath}")
            samples.append(DomainSample(image=sample.image, mask=mask.astype(np.uint8)))
        ds = DomainDataset(samples=samples, domain_tag="target", has_labels=True)
    else:
        ds = load_dataset(args.data, has_labels=True)
    report = evaluate(model, ds)
    Path(args.report).write_text(report.to_json())
    print(f"mean dice {report.mean_dice:.2f} over {report.n_samples} samples -> {args.report}")
    return 0


def _cmd_mi_sanity(args) -> int:
    from .mi_estimation import correlated_gaussian_harness
    from .oracle import analytic_gaussian_mi

    rhos = (0.0, 0.5, 0.9)
    seeds = [args.seed + i for i in range(args.seeds)]
    means = {}
    for rho in rhos:
        vals = [correlated_gaussian_harness(rho, steps=args.steps, seed=s) for s in seeds]
        means[rho] = sum(vals) / len(vals)
        print(f"rho={rho:.1f} analytic MI={analytic_gaussian_mi(rho):.4f} "
              f"score={means[rho]:+.4f} (seeds {seeds})")
    ordered = means[0.9] > means[0.5] > means[0.0]
    base = -2.0 * math.log(2.0)
    band = base - 0.05 <= means[0.0] <= base + 0.10
    print(f"ordering {'holds' if ordered else 'VIOLATED'}; "
          f"rho=0 score {means[0.0]:+.4f} vs -2ln2 = {base:+.4f} ({'in' if band else 'OUT OF'} band)")
    return 0 if ordered and band else 1


def _cmd_bound_check(args) -> int:
    from .oracle import run_bound_suite

    reports = run_bound_suite(args.instances, args.seed)
    margins = np.array([[r.margin_mid, r.margin_low] for r in reports])
    ok = int((margins.min(axis=1) >= -1e-9).sum())
    print(f"{ok}/{len(reports)} margins >= 0")
    edges = np.array([-1e-9, 1e-12, 1e-6, 1e-3, 1e-2, 1e-1, 1.0, np.inf])
    hist, _ = np.histogram(margins[:, 1], bins=edges)
    for lo, hi, n in zip(edges[:-1], edges[1:], hist):
        print(f"  lower-step margin in [{lo:.0e}, {hi:.0e}): {n}")
    worst = min(reports, key=lambda r: min(r.margin_mid, r.margin_low))
    print(f"worst instance: margin_mid={worst.margin_mid:.3e} margin_low={worst.margin_low:.3e} "
          f"(kl_z={worst.kl_z:.3e})")
    if args.report:
        payload = [
            dict(lhs=r.lhs, rhs_mid=r.rhs_mid, rhs_low=r.rhs_low,
                 margin_mid=r.margin_mid, margin_low=r.margin_low, kl_z=r.kl_z)
            for r in reports
        ]
        Path(args.report).write_text(json.dumps(payload, indent=2))
    return 0 if ok == len(reports) else 1


def _cmd_grad_check(args) -> int:
    from .oracle import run_grad_suite, single_precision_total_check

    errors = run_grad_suite(seed=args.seed)
    worst = max(errors.values())
    for term, err in errors.items():
        print(f"{term:>14}: max rel err {err:.3e}")
    err32 = single_precision_total_check(seed=args.seed)
    print(f"{'total (f32)':>14}: max rel err {err32:.3e}")
    ok = worst < 1e-5 and err32 < 1e-3
    print(f"gradient checks {'passed' if ok else 'FAILED'} "
          f"(float64 worst {worst:.3e} < 1e-5, float32 total {err32:.3e} < 1e-3)")
    return 0 if ok else 1


def _cmd_plot(args) -> int:
    from .viz import plot_loss_curves, plot_overlays

    written = plot_loss_curves(args.runlog, args.out)
    run_dir = Path(args.runlog).parent
    ckpt = run_dir / "checkpoint-final.npz"
    if ckpt.exists():
        from .config import read_config
        from .trainer import build_datasets, load_checkpoint

        model, _ = load_checkpoint(ckpt)
        cfg = read_config(run_dir / "config.txt") if (run_dir / "config.txt").exists() else None
        if cfg is not None:
            import torch

            _, _, _, tgt_test = build_datasets(cfg.data)
            if tgt_test is not None:
                images = np.stack([s.image for s in tgt_test.samples[:6]])
                batch = torch.as_tensor(images[:, None], dtype=next(model.parameters()).dtype)
                preds = model.predict(batch).cpu().numpy()
                gts = np.stack([s.mask for s in tgt_test.samples[:6]])
                written += plot_overlays(images, preds, gts, args.out)
    else:
        print("no checkpoint next to the runlog; emitting loss curves only")
    print(f"wrote {len(written)} figures under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="udaseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--style", choices=("A", "B"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=("full", "no_mi", "no_adapt", "baseline"), default="")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root containing images/")
    p.add_argument("--labels", default="", help="masks directory (default <data>/masks)")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("mi-sanity", help="correlated-Gaussian estimator ordering check")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds to average")
    p.set_defaults(fn=_cmd_mi_sanity)

    p = sub.add_parser("bound-check", help="verify the KL inequality chain on random discrete joints")
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default="", help="optional JSON report path")
    p.set_defaults(fn=_cmd_bound_check)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_grad_check)

    p = sub.add_parser("plot", help="loss curves and segmentation overlays from a runlog")
    p.add_argument("--runlog", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # single-line reason, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
