"""Training configuration: dataclasses plus the flat key=value file format.

Every key is scalar so configs diff cleanly; booleans serialize as
true/false.  ``read_config``/``write_config`` round-trip exactly.  See the
README for the provenance and meaning of each key.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .losses import LossWeights


@dataclass
class ModelConfig:
    """Network dimensions.  Zeros mean 'derive from base_channels'."""

    base_channels: int = 16
    norm: str = "group"
    recon_hidden: int = 0      # 0 -> 2 * base_channels
    est_width: int = 0         # 0 -> base_channels
    prior_code_dim: int = 0    # 0 -> 2 * base_channels
    logvar_clamp: float = 10.0

    @property
    def recon_hidden_channels(self) -> int:
        return self.recon_hidden or 2 * self.base_channels

    @property
    def est_width_channels(self) -> int:
        return self.est_width or self.base_channels

    @property
    def prior_code_dimension(self) -> int:
        return self.prior_code_dim or 2 * self.base_channels


@dataclass
class DataConfig:
    mode: str = "phantom"      # phantom | disk
    image_size: int = 64
    n_train: int = 200
    n_test: int = 50
    data_seed: int = 0
    source_style: str = "A"
    target_style: str = "B"
    source_dir: str = ""
    target_dir: str = ""
    source_val_dir: str = ""
    target_test_dir: str = ""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 12
    lr_init: float = 1e-4
    lr_decay_per_epoch: float = 0.10
    seed: int = 0
    dtype: str = "float32"     # float32 | float64
    use_target: bool = True
    chain_enabled: bool = True
    eval_every: int = 1        # 0 -> only after the final epoch
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def learning_rate(self, epoch: int) -> float:
        return self.lr_init * (1.0 - self.lr_decay_per_epoch) ** epoch

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 <= self.lr_decay_per_epoch < 1.0:
            raise ValueError("lr_decay_per_epoch must lie in [0, 1)")
        self.weights.validate()


_SECTIONS = ("weights", "model", "data")


def _flat_items(cfg: TrainConfig):
    for f in fields(cfg):
        if f.name in _SECTIONS:
            sub = getattr(cfg, f.name)
            for sf in fields(sub):
                yield sf.name, getattr(sub, sf.name)
        else:
            yield f.name, getattr(cfg, f.name)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def write_config(cfg: TrainConfig, path):
    with open(path, "w") as fh:
        for key, value in _flat_items(cfg):
            fh.write(f"{key}={_fmt(value)}\n")


def config_text(cfg: TrainConfig) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in _flat_items(cfg))


def _parse(raw: str, ftype):
    if ftype is bool:
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw.lower() == "true"
    return ftype(raw)


def read_config(path=None, text: str | None = None) -> TrainConfig:
    """Parse a flat key=value config; unknown keys raise ValueError."""
    if text is None:
        with open(path) as fh:
            text = fh.read()
    cfg = TrainConfig()
    typenames = {"int": int, "float": float, "bool": bool, "str": str}
    owners = {}
    for f in fields(cfg):
        if f.name in _SECTIONS:
            for sf in fields(getattr(cfg, f.name)):
                owners[sf.name] = (getattr(cfg, f.name), typenames[str(sf.type)])
        else:
            owners[f.name] = (cfg, typenames[str(f.type)])
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in owners:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        owner, ftype = owners[key]
        setattr(owner, key, _parse(raw, ftype))
    cfg.validate()
    return cfg


VARIANTS = ("full", "no_mi", "no_adapt", "baseline")


def apply_variant(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Adjust a config in place for one of the ablation presets.

    full      - everything on (no change)
    no_mi     - MI loss off (c3 = 0)
    no_adapt  - source-only supervision (c3 = c4 = 0, target branch off)
    baseline  - MI off and the latent chain corrections zeroed/frozen
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; pick one of {VARIANTS}")
    if variant == "no_mi":
        cfg.weights.c3 = 0.0
    elif variant == "no_adapt":
        cfg.weights.c3 = 0.0
        cfg.weights.c4 = 0.0
        cfg.use_target = False
    elif variant == "baseline":
        cfg.weights.c3 = 0.0
        cfg.chain_enabled = False
    return cfg
