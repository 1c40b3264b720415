"""Experiment configuration: one flat dataclass plus named profiles.

A run is fully described by an :class:`ExperimentConfig`.  Profiles are
frozen presets; ``desk-*`` variants are sized to finish on a laptop in
minutes (few tasks, subsampled training splits, few epochs) while ``paper-*``
variants carry the full protocol sizes.  Configs round-trip through JSON so
the CLI can accept either a profile name or a config file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "PROFILES",
    "get_profile",
    "load_config",
    "validate_config",
]


class ConfigError(Exception):
    """Bad or inconsistent run configuration (maps to the CLI's config exit
    code)."""


@dataclass
class ExperimentConfig:
    # What to run
    experiment: str = "permuted"        # permuted | split | linreg
    name: str = ""
    seeds: list = field(default_factory=lambda: [0])

    # Task stream
    task_seed: int = 0                  # fixes permutations / splits across seeds
    n_tasks: int = 3                    # permuted
    pairs: list = field(default_factory=lambda: [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]])
    true_params: list = field(default_factory=lambda: [[1.8, 1.0], [1.5, 1.2], [1.2, 0.9]])
    subsample: int = 0                  # per-task training subsample; 0 = all
    n_train: int = 12000                # synthesized corpus sizes
    n_test: int = 2000

    # Model
    hidden: list = field(default_factory=lambda: [100, 100])
    head_width: int = 10
    sigma0: float = float(np.exp(-3.0))
    noise_var: float = 0.1              # gaussian-likelihood observation variance

    # Optimization
    optimizer: str = "adam"             # adam | sgd
    gng: bool = True
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 256
    train_mc: int = 3
    eval_samples: int = 20

    # Coresets
    coreset: str = "none"               # none | random | kcenter | stein
    coreset_size: int = 200
    coreset_mode: str = "finetune"      # finetune | regret
    finetune_epochs: int = 0            # 0 = reuse epochs
    stein_steps: int = 50
    stein_step_size: float = 0.05
    stein_mc: int = 3

    # Linear-regression trajectories
    linreg_steps: int = 300             # full-batch steps per task
    linreg_n: int = 200                 # examples per task

    # Paths (None = resolve from environment / defaults at run time)
    data_root: str = ""
    output_root: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


_EXPERIMENTS = ("permuted", "split", "linreg")
_OPTIMIZERS = ("adam", "sgd")
_CORESETS = ("none", "random", "kcenter", "stein")
_MODES = ("finetune", "regret")


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Raise :class:`ConfigError` on any out-of-contract field."""
    if cfg.experiment not in _EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {_EXPERIMENTS}, got {cfg.experiment!r}")
    if cfg.optimizer not in _OPTIMIZERS:
        raise ConfigError(f"optimizer must be one of {_OPTIMIZERS}, got {cfg.optimizer!r}")
    if cfg.coreset not in _CORESETS:
        raise ConfigError(f"coreset must be one of {_CORESETS}, got {cfg.coreset!r}")
    if cfg.coreset_mode not in _MODES:
        raise ConfigError(f"coreset_mode must be one of {_MODES}, got {cfg.coreset_mode!r}")
    if not cfg.seeds:
        raise ConfigError("seeds must be non-empty")
    if cfg.lr <= 0:
        raise ConfigError("lr must be > 0")
    if cfg.sigma0 <= 0:
        raise ConfigError("sigma0 must be > 0")
    if cfg.epochs < 1 or cfg.batch_size < 1 or cfg.train_mc < 1 or cfg.eval_samples < 1:
        raise ConfigError("epochs, batch_size, train_mc, eval_samples must be >= 1")
    if cfg.noise_var <= 0:
        raise ConfigError("noise_var must be > 0")
    if cfg.experiment == "permuted" and cfg.n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    if cfg.experiment == "split":
        if not cfg.pairs:
            raise ConfigError("split experiment needs class pairs")
        for p in cfg.pairs:
            if len(p) != 2 or p[0] == p[1]:
                raise ConfigError(f"bad class pair {p}")
    if cfg.experiment == "linreg":
        if not cfg.true_params:
            raise ConfigError("linreg experiment needs true_params")
        if cfg.linreg_steps < 4 or cfg.linreg_n < 2:
            raise ConfigError("linreg_steps must be >= 4 and linreg_n >= 2")
    if cfg.coreset != "none" and cfg.coreset_size < 1:
        raise ConfigError("coreset_size must be >= 1")
    if cfg.subsample < 0:
        raise ConfigError("subsample must be >= 0")
    return cfg


def _base_desk_permuted() -> ExperimentConfig:
    return ExperimentConfig(
        experiment="permuted", n_tasks=3, subsample=5000, epochs=5,
        batch_size=256, optimizer="adam", gng=True, lr=3e-3, train_mc=5,
        head_width=10, coreset="stein", coreset_size=200,
        coreset_mode="regret", eval_samples=40, seeds=[0],
    )


def _base_desk_split() -> ExperimentConfig:
    return ExperimentConfig(
        experiment="split", subsample=0, epochs=5, batch_size=256,
        optimizer="adam", gng=True, lr=2e-3, train_mc=5, head_width=2,
        coreset="kcenter", coreset_size=40, coreset_mode="finetune",
        eval_samples=40, seeds=[0],
    )


PROFILES = {
    "desk-permuted": _base_desk_permuted(),
    "desk-permuted-none": replace(_base_desk_permuted(), coreset="none",
                                  coreset_mode="finetune"),
    "desk-split": _base_desk_split(),
    "desk-split-plain": replace(_base_desk_split(), gng=False),
    "paper-permuted": replace(
        _base_desk_permuted(), n_tasks=10, subsample=0, epochs=100,
        eval_samples=100, seeds=[0, 1, 2, 3, 4],
    ),
    "paper-split": replace(
        _base_desk_split(), epochs=100, eval_samples=100, coreset="kcenter",
        coreset_size=40, coreset_mode="finetune", seeds=[0, 1, 2, 3, 4],
    ),
    "linreg-wide": ExperimentConfig(
        experiment="linreg", sigma0=float(np.exp(-1.0)), seeds=[0],
    ),
    "linreg-narrow": ExperimentConfig(
        experiment="linreg", sigma0=float(np.exp(-3.0)), seeds=[0],
    ),
}
for _name, _cfg in PROFILES.items():
    _cfg.name = _name


def get_profile(name: str) -> ExperimentConfig:
    if name not in PROFILES:
        raise ConfigError(
            f"unknown profile {name!r}; available: {', '.join(sorted(PROFILES))}")
    return replace(PROFILES[name])


def load_config(source: str) -> ExperimentConfig:
    """Accept a profile name or a JSON config file path."""
    if source in PROFILES:
        return validate_config(get_profile(source))
    try:
        with open(source) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{source!r} is neither a profile nor a config file")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: invalid JSON ({e})")
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: config must be a JSON object")
    known = set(ExperimentConfig().__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{source}: unknown fields {sorted(unknown)}")
    try:
        cfg = ExperimentConfig(**raw)
    except TypeError as e:
        raise ConfigError(f"{source}: {e}")
    return validate_config(cfg)
