"""Experiment configuration: one nested, validated, hashable document.

Configs are plain dataclasses assembled from built-in profiles, YAML/JSON
files, or dicts. A file may name a profile to start from via an ``include``
key; explicit keys then override profile values. Every artifact written by
the bench records :func:`ExperimentConfig.config_hash`, which covers all
experiment-defining fields (execution details like worker count and output
directory are excluded).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ReversalConfig:
    budget: int = 160               # steps per class for inspection reversals
    scapegoat_budget: int = 240     # steps per class when deriving scapegoats
    lr: float = 0.1
    batch_size: int = 24
    init_cost: float = 1e-3
    patience: int = 5
    efficacy_threshold: float = 0.95
    eval_every: int = 25
    eval_max: int = 512
    cutting_scale: float = 0.5      # window size as a fraction of the suspected box
    cutting_stride: int | None = None
    cutting_budget: int = 50        # steps per window position
    cutting_refine_top: int = 3
    cutting_refine_budget: int = 120
    hollow_scale: float = 0.8       # hole size as a fraction of the suspected box


@dataclass(frozen=True)
class MntdConfig:
    n_shadow_benign: int = 64
    n_shadow_malicious: int = 64    # split near-evenly over trojM/trojB/sgba
    mode: str = "robust"
    K: int = 10
    epochs: int = 40
    lr: float = 0.03
    ensemble: int = 10
    val_fraction: float = 0.25
    shadow_subsample: tuple[float, float] = (0.6, 1.0)
    shadow_epochs: tuple[int, int] = (4, 10)
    shadow_sgba_epochs: tuple[int, int] = (10, 14)
    blend_alpha: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "auto"           # auto -> mnist when on disk, else synthetic
    data_root: str | None = None
    seed: int = 0
    workers: int = 2
    out_dir: str = "bench_out"

    subsample: float = 1.0
    synthetic_train: int = 6000
    synthetic_test: int = 1500
    holdout_fraction: float = 0.1

    batch_size: int = 64
    lr: float = 1e-3
    dropout_conv: float = 0.15
    dropout_fc: float = 0.5
    epochs_benign: int = 10
    epochs_badnets: int = 10
    epochs_sgba_max: int = 14
    loss_threshold_factor: float = 1.1

    n_benign: int = 32
    n_badnets: int = 10
    n_sgba: int = 10
    n_nc_benign: int = 10           # benign models inspected for threshold calibration

    poison_fraction_range: tuple[float, float] = (0.2, 0.3)
    part_size_range: tuple[int, ...] = (3, 4, 5)
    single_part_label_rule: str = "fixed"
    badnets_fraction: float = 0.1
    badnets_patch_size: int = 4
    variance_coefficient: float = 1.2
    profile_sum_not_mean: bool = False   # keep the bare-sum variant of the layer average

    reversal: ReversalConfig = field(default_factory=ReversalConfig)
    mntd: MntdConfig = field(default_factory=MntdConfig)

    # ------------------------------------------------------------------
    def validate(self) -> "ExperimentConfig":
        c = self
        checks = [
            (c.dataset in ("auto", "synthetic", "mnist", "cifar10", "gtsrb"),
             f"dataset {c.dataset!r} not registered"),
            (0.0 < c.subsample <= 1.0, "subsample must be in (0, 1]"),
            (0.0 < c.holdout_fraction <= 0.1, "holdout_fraction must be in (0, 0.1]"),
            (c.batch_size >= 1, "batch_size must be positive"),
            (c.lr > 0, "lr must be positive"),
            (0.0 <= c.dropout_conv < 1.0 and 0.0 <= c.dropout_fc < 1.0,
             "dropout rates must be in [0, 1)"),
            (min(c.epochs_benign, c.epochs_badnets, c.epochs_sgba_max) >= 1,
             "epoch counts must be positive"),
            (c.n_benign >= 1 and c.n_badnets >= 0 and c.n_sgba >= 0,
             "population counts must be non-negative (n_benign >= 1)"),
            (1 <= c.n_nc_benign <= c.n_benign,
             "n_nc_benign must be in [1, n_benign]"),
            (0.1 <= c.poison_fraction_range[0] <= c.poison_fraction_range[1] <= 0.4,
             "poison_fraction_range must lie within [0.1, 0.4]"),
            (len(c.part_size_range) >= 1 and min(c.part_size_range) >= 1,
             "part_size_range must be non-empty positive sides"),
            (c.single_part_label_rule in ("uniform", "fixed"),
             f"unknown single_part_label_rule {c.single_part_label_rule!r}"),
            (0.0 < c.badnets_fraction < 1.0, "badnets_fraction must be in (0, 1)"),
            (c.variance_coefficient >= 1.0, "variance_coefficient must be >= 1"),
            (c.reversal.budget >= 1 and c.reversal.scapegoat_budget >= 1,
             "reversal budgets must be positive"),
            (0.0 < c.reversal.efficacy_threshold <= 1.0,
             "efficacy_threshold must be in (0, 1]"),
            (0.0 < c.reversal.cutting_scale < 1.0, "cutting_scale must be in (0, 1)"),
            (0.6 <= c.reversal.hollow_scale < 1.0, "hollow_scale must be in [0.6, 1)"),
            (c.mntd.mode in ("full", "robust"), f"unknown mntd mode {c.mntd.mode!r}"),
            (c.mntd.K >= 1, "mntd.K must be positive"),
            (c.mntd.ensemble >= 1, "mntd.ensemble must be positive"),
            (0.0 < c.mntd.val_fraction < 1.0, "mntd.val_fraction must be in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Hash of experiment-defining fields (excludes execution details)."""
        blob = self.to_dict()
        for transient in ("out_dir", "workers", "data_root"):
            blob.pop(transient, None)
        canon = json.dumps(blob, sort_keys=True, default=list)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


PROFILES: dict[str, dict] = {
    # Desk-scale benchmark: full population counts at synthetic/MNIST size.
    "desk": {},
    # Small smoke/determinism profile; minutes, not tens of minutes.
    "tiny": {
        "dataset": "synthetic",
        "synthetic_train": 1500,
        "synthetic_test": 500,
        "epochs_benign": 3,
        "epochs_badnets": 3,
        "epochs_sgba_max": 6,
        "n_benign": 3,
        "n_badnets": 1,
        "n_sgba": 1,
        "n_nc_benign": 2,
        "reversal": {
            "budget": 60, "scapegoat_budget": 100, "batch_size": 16,
            "eval_max": 256, "cutting_budget": 20, "cutting_refine_budget": 40,
            "cutting_stride": 6,
        },
        "mntd": {
            "n_shadow_benign": 4, "n_shadow_malicious": 3, "K": 4,
            "epochs": 6, "ensemble": 1, "shadow_epochs": (2, 3),
            "shadow_sgba_epochs": (3, 4), "val_fraction": 0.3,
        },
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _coerce(raw: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(raw)
    if "reversal" in kwargs and isinstance(kwargs["reversal"], dict):
        kwargs["reversal"] = ReversalConfig(**kwargs["reversal"])
    if "mntd" in kwargs and isinstance(kwargs["mntd"], dict):
        sub = dict(kwargs["mntd"])
        for tup_key in ("shadow_subsample", "shadow_epochs", "shadow_sgba_epochs"):
            if tup_key in sub:
                sub[tup_key] = tuple(sub[tup_key])
        kwargs["mntd"] = MntdConfig(**sub)
    for tup_key in ("poison_fraction_range", "part_size_range"):
        if tup_key in kwargs:
            kwargs[tup_key] = tuple(kwargs[tup_key])
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a config, honoring an ``include: <profile>`` key."""
    raw = dict(raw)
    profile = raw.pop("include", None)
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; available: {sorted(PROFILES)}")
        raw = _merge(PROFILES[profile], raw)
    return _coerce(raw).validate()


def from_profile(name: str, **overrides) -> ExperimentConfig:
    return from_dict({"include": name, **overrides})


def load_config(path: str | Path) -> ExperimentConfig:
    """Load a YAML (or JSON) config file."""
    import yaml

    text = Path(path).read_text()
    raw = yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return from_dict(raw)


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    return replace(cfg, **overrides).validate()
