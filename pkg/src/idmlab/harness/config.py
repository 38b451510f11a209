"""Experiment configuration files (JSON with a schema version)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..models import ArchSpec, ConfigError

SCHEMA_VERSION = 1
EXPERIMENTS = (
    "complexity_pos",
    "complexity_img",
    "goal",
    "stochasticity",
    "entropy_gap",
    "lapo_compare",
    "verify_tabular",
)
DEFAULT_SPLITS = (0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0)

# method name -> (algorithm, architecture, goal-conditioned IDM/policy)
METHODS = {
    "complexity_pos": {
        "BC-LC": ("bc", "LC", False),
        "BC-MLP5": ("bc", "MLP5", False),
        "VMIDM-LC": ("vmidm", "LC", False),
        "VMIDM-MLP5": ("vmidm", "MLP5", False),
    },
    "complexity_img": {
        "BC-CNN1": ("bc", "CNN1", False),
        "BC-CNN5": ("bc", "CNN5", False),
        "VMIDM-CNN1": ("vmidm", "CNN1", False),
        "VMIDM-CNN5": ("vmidm", "CNN5", False),
    },
    "goal": {
        "BC": ("bc", "MLP5", False),
        "BC_G": ("bc", "MLP5", True),
        "VMIDM": ("vmidm", "MLP5", False),
        "VMIDM_G": ("vmidm", "MLP5", True),
    },
    "stochasticity": {
        "BC": ("bc", "MLP5", False),
        "IDML": ("idml", "MLP5", False),
    },
    "entropy_gap": {
        "BC": ("bc", "MLP5", False),
        "IDM": ("idm", "MLP5", False),
    },
    "lapo_compare": {
        "LAPO": ("lapo", "CNN5", False),
        "LAPO+": ("lapo_plus", "CNN5", False),
    },
    "verify_tabular": {
        "tabular": ("verify", "-", False),
    },
}


@dataclass
class ExperimentConfig:
    experiment: str
    methods: list[str] = field(default_factory=list)
    splits: list[float] = field(default_factory=lambda: list(DEFAULT_SPLITS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    # environment parameters
    sizes: list[int] = field(default_factory=lambda: [10, 20, 50])
    maze_seed: int = 0
    p_right: list[float] = field(default_factory=lambda: [0.5, 0.7, 0.9])
    n_goals: int = 0  # 0 means every feasible cell is a goal
    grid_size: int = 20
    n_trajectories: int = 26
    horizon: int = 38
    pool_seed: int = 0
    episodes: int = 25
    labeled_count: int = 16
    # optimisation
    max_epochs: int = 10000
    early_stop_loss: float = 1e-4
    eval_every: int = 0
    relabel_mode: str = "sample"
    latent: dict = field(default_factory=dict)
    # verifier
    trials: int = 100
    # output
    out: str = "results"
    record_time: bool = False
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return asdict(self)


def validate(cfg: ExperimentConfig) -> None:
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema version {cfg.schema_version}")
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}")
    if not cfg.seeds:
        raise ConfigError("seeds list must be non-empty")
    table = METHODS[cfg.experiment]
    if not cfg.methods:
        cfg.methods = list(table)
    for m in cfg.methods:
        if m not in table:
            raise ConfigError(f"method {m!r} is not defined for {cfg.experiment}")
        _, arch, goal = table[m]
        if arch in ("LC", "MLP5", "CNN1", "CNN5") and cfg.experiment != "lapo_compare":
            fmt = "img" if arch.startswith("CNN") else "pos"
            ArchSpec(arch, "policy", fmt, goal)
    for f in cfg.splits:
        if not 0.0 < f <= 1.0:
            raise ConfigError(f"split {f} outside (0, 1]")
    if cfg.relabel_mode not in ("sample", "argmax"):
        raise ConfigError(f"unknown relabel mode {cfg.relabel_mode!r}")
    if cfg.experiment in ("complexity_pos", "complexity_img"):
        for s in cfg.sizes:
            if s not in (10, 20, 50):
                raise ConfigError(f"maze size {s} not supported")


BUILTIN = {
    "complexity_pos": dict(experiment="complexity_pos"),
    "complexity_img": dict(experiment="complexity_img", sizes=[10], seeds=[0, 1, 2], max_epochs=2000),
    "goal": dict(experiment="goal", sizes=[10]),
    "stochasticity": dict(experiment="stochasticity", seeds=list(range(10)), splits=[0.05, 0.1, 0.25, 0.5, 1.0], max_epochs=2000),
    "entropy_gap": dict(experiment="entropy_gap", p_right=[0.5], splits=[1.0], max_epochs=2000),
    "lapo_compare": dict(experiment="lapo_compare", sizes=[10], seeds=[0, 1, 2], splits=[1.0]),
    "verify_tabular": dict(experiment="verify_tabular", seeds=[0], splits=[1.0]),
}


def from_dict(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = ExperimentConfig(**data)
    if base_dir is not None and not Path(cfg.out).is_absolute():
        cfg.out = str(base_dir / cfg.out)
    return cfg


def load_config(path_or_name: str) -> ExperimentConfig:
    """Load a JSON config file; a bare experiment id loads its builtin defaults."""
    if path_or_name in BUILTIN and not Path(path_or_name).exists():
        return from_dict(dict(BUILTIN[path_or_name]))
    path = Path(path_or_name)
    data = json.loads(path.read_text())
    return from_dict(data, base_dir=path.resolve().parent)
