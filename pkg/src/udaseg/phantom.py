"""Synthetic two-domain cardiac-style dataset plus a directory-layout loader.

Each sample shows a randomly placed concentric structure on a noisy
background: a ring (class 1) around an inner disk (class 2) with an
adjacent crescent (class 3).  The two domain styles share geometry exactly
and differ only in their intensity transforms, so any adaptation gain is
attributable to the alignment machinery rather than shape differences.

Disk layout: ``<root>/{images,masks}/NNNN.png`` with zero-padded numeric
names plus a ``manifest`` file of ``key=value`` lines.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, zoom

CLASS_NAMES = {0: "background", 1: "MYO", 2: "LV", 3: "RV"}
VALID_LABELS = frozenset(CLASS_NAMES)
IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff"}
FOREGROUND_THRESHOLD = 0.30
MIN_IMAGE_SIZE = 16


class LoadError(RuntimeError):
    """Raised when a dataset directory is missing, mismatched, or invalid."""


@dataclass
class PhantomConfig:
    image_size: int = 64
    n_train: int = 200
    n_test: int = 50
    seed: int = 0
    domain_style: str = "A"

    def __post_init__(self):
        if self.image_size <= 0 or self.image_size % 4:
            raise ValueError(f"image_size must be a positive multiple of 4, got {self.image_size}")
        if self.image_size < MIN_IMAGE_SIZE:
            raise ValueError(f"image_size must be at least {MIN_IMAGE_SIZE} to fit the phantom geometry")
        if self.domain_style not in ("A", "B"):
            raise ValueError(f"domain_style must be 'A' or 'B', got {self.domain_style!r}")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("sample counts must be nonnegative")

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_test


@dataclass
class DomainSample:
    """One image in [0, 1] with an optional integer label map."""

    image: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise ValueError("image and mask must share spatial dimensions")
            if not set(np.unique(self.mask)).issubset(VALID_LABELS):
                raise ValueError(f"mask values must lie in {sorted(VALID_LABELS)}")


@dataclass
class DomainDataset:
    samples: list
    domain_tag: str
    has_labels: bool

    def __post_init__(self):
        if self.domain_tag not in ("source", "target"):
            raise ValueError(f"domain_tag must be 'source' or 'target', got {self.domain_tag!r}")
        if self.has_labels:
            if any(s.mask is None for s in self.samples):
                raise ValueError("has_labels=True requires a mask on every sample")
        else:
            # an unlabeled dataset never exposes masks, even if built from labeled samples
            self.samples = [DomainSample(image=s.image, mask=None) for s in self.samples]

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


def without_labels(dataset: DomainDataset, domain_tag: str | None = None) -> DomainDataset:
    """Labeled dataset -> unlabeled view (masks stripped)."""
    return DomainDataset(
        samples=list(dataset.samples),
        domain_tag=domain_tag or dataset.domain_tag,
        has_labels=False,
    )


def _sample_geometry(rng: np.random.Generator, size: int):
    s = size / 64.0
    r_lv = max(rng.uniform(5.0, 8.0) * s, 2.0)
    myo_th = max(rng.uniform(2.5, 4.5) * s, 1.5)
    r_out = r_lv + myo_th
    rv_w = max(rng.uniform(3.0, 5.5) * s, 1.5)
    rv_half = rng.uniform(0.55, 0.95)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    margin = r_out + rv_w + max(2.0 * s, 1.5)
    hi = size - 1 - margin
    if hi <= margin:
        raise ValueError(f"image_size {size} too small for the phantom geometry")
    cy = rng.uniform(margin, hi)
    cx = rng.uniform(margin, hi)
    return dict(r_lv=r_lv, r_out=r_out, rv_w=rv_w, rv_half=rv_half, theta=theta, cy=cy, cx=cx)


def _render_base(rng: np.random.Generator, size: int):
    """Style-independent geometry, label map, and base intensity image."""
    geo = _sample_geometry(rng, size)
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    d = np.hypot(yy - geo["cy"], xx - geo["cx"])
    ang = np.arctan2(yy - geo["cy"], xx - geo["cx"])
    angdiff = (ang - geo["theta"] + np.pi) % (2.0 * np.pi) - np.pi

    lv = d <= geo["r_lv"]
    myo = (d > geo["r_lv"]) & (d <= geo["r_out"])
    rv = (d > geo["r_out"]) & (d <= geo["r_out"] + geo["rv_w"]) & (np.abs(angdiff) <= geo["rv_half"])

    mask = np.zeros((size, size), dtype=np.uint8)
    mask[myo] = 1
    mask[lv] = 2
    mask[rv] = 3

    levels = dict(bg=0.12, myo=0.45, lv=0.85, rv=0.66)
    jitter = {k: rng.uniform(-0.04, 0.04) for k in levels}
    image = np.full((size, size), levels["bg"] + jitter["bg"])
    image[myo] = levels["myo"] + jitter["myo"]
    image[lv] = levels["lv"] + jitter["lv"]
    image[rv] = levels["rv"] + jitter["rv"]
    image = gaussian_filter(image, sigma=max(0.7 * size / 64.0, 0.5))
    image = image + rng.normal(0.0, 0.01, image.shape)
    return np.clip(image, 0.0, 1.0), mask


def apply_domain_transform(image: np.ndarray, style: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Map a base image in [0, 1] to one of the two domain appearances.

    Style A: gamma 0.7 plus additive Gaussian noise (sigma 0.02).
    Style B: intensity inversion on the foreground (above 0.30), a smooth
    multiplicative bias field in [0.8, 1.2], gamma 1.5, noise sigma 0.05.
    Output is clipped to [0, 1] and keeps the input's shape.
    """
    if rng is None:
        rng = np.random.default_rng()
    img = np.asarray(image, dtype=np.float64)
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("input intensities must lie in [0, 1]")
    if style == "A":
        out = img ** 0.7 + rng.normal(0.0, 0.02, img.shape)
    elif style == "B":
        out = img.copy()
        fg = out > FOREGROUND_THRESHOLD
        out[fg] = 1.0 - out[fg]
        grid = rng.uniform(0.0, 1.0, (4, 4))
        field = zoom(grid, np.array(img.shape) / 4.0, order=3)
        span = field.max() - field.min()
        field = (field - field.min()) / span if span > 0 else np.full_like(field, 0.5)
        out = out * (0.8 + 0.4 * field)
        out = np.clip(out, 0.0, 1.0) ** 1.5
        out = out + rng.normal(0.0, 0.05, img.shape)
    else:
        raise ValueError(f"unknown domain style {style!r}")
    return np.clip(out, 0.0, 1.0)


def generate_phantom(config: PhantomConfig) -> DomainDataset:
    """Deterministic dataset of n_train + n_test labeled samples.

    Geometry and base rendering depend only on (seed, sample index), so the
    two styles of the same config produce identical masks.  Style A is
    tagged source and style B target by convention.
    """
    children = np.random.SeedSequence(config.seed).spawn(config.n_total)
    samples = []
    for child in children:
        base_rng, transform_rng = (np.random.default_rng(s) for s in child.spawn(2))
        base, mask = _render_base(base_rng, config.image_size)
        image = apply_domain_transform(base, config.domain_style, transform_rng)
        samples.append(DomainSample(image=image, mask=mask))
    tag = "source" if config.domain_style == "A" else "target"
    return DomainDataset(samples=samples, domain_tag=tag, has_labels=True)


def phantom_train_test(config: PhantomConfig) -> tuple[DomainDataset, DomainDataset]:
    """Split one generated dataset into its leading train and trailing test parts."""
    full = generate_phantom(config)
    mk = lambda part: DomainDataset(samples=part, domain_tag=full.domain_tag, has_labels=True)
    return mk(full.samples[: config.n_train]), mk(full.samples[config.n_train :])


# ---------------------------------------------------------------------------
# Disk layout
# ---------------------------------------------------------------------------

def save_dataset(dataset: DomainDataset, root, manifest: dict | None = None):
    """Write images/ (and masks/ when labeled) plus a key=value manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if dataset.has_labels:
        (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(dataset.samples):
        name = f"{i:04d}.png"
        img = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(root / "images" / name)
        if dataset.has_labels:
            Image.fromarray(sample.mask.astype(np.uint8), mode="L").save(root / "masks" / name)
    lines = dict(manifest or {})
    lines.setdefault("n_samples", len(dataset.samples))
    lines.setdefault("domain_tag", dataset.domain_tag)
    lines.setdefault("has_labels", dataset.has_labels)
    with open(root / "manifest", "w") as fh:
        for k in sorted(lines):
            fh.write(f"{k}={lines[k]}\n")


def _read_gray(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def load_dataset(directory, has_labels: bool, domain_tag: str = "source") -> DomainDataset:
    """Load a dataset from the documented directory layout.

    Images are min-max normalized to [0, 1] per file (the layout carries no
    intensity calibration).  Label images must use values {0, 1, 2, 3}.
    """
    root = Path(directory)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise LoadError(f"missing images directory: {img_dir}")
    img_files = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not img_files:
        raise LoadError(f"no image files under {img_dir}")

    mask_dir = root / "masks"
    if has_labels:
        if not mask_dir.is_dir():
            raise LoadError(f"missing masks directory: {mask_dir}")
        mask_files = {p.name: p for p in mask_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
        extra = set(mask_files) - {p.name for p in img_files}
        if extra:
            raise LoadError(f"mask without matching image: {mask_dir / sorted(extra)[0]}")

    samples = []
    for path in img_files:
        raw = _read_gray(path).astype(np.float64)
        span = raw.max() - raw.min()
        image = (raw - raw.min()) / span if span > 0 else np.zeros_like(raw)
        mask = None
        if has_labels:
            mpath = mask_dir / path.name
            if not mpath.exists():
                raise LoadError(f"image without matching mask: {path}")
            mask = _read_gray(mpath)
            bad = set(np.unique(mask)) - VALID_LABELS
            if bad:
                raise LoadError(f"label value {sorted(bad)[0]} outside {sorted(VALID_LABELS)} in {mpath}")
            mask = mask.astype(np.uint8)
        samples.append(DomainSample(image=image, mask=mask))
    return DomainDataset(samples=samples, domain_tag=domain_tag, has_labels=has_labels)
