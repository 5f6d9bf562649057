"""
Configuration management for retrofit.

All tunables live in dataclasses with the published defaults. A run config is
read from a TOML file whose tables mirror the dataclasses; command-line flags are
applied on top by the CLI.
"""

import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import UsageError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def check_part_count(value) -> tuple[int, ...]:
    """() or an inclusive (min, max) part-count range with 1 <= min <= max."""
    value = tuple(value)
    if not value:
        return value
    if (len(value) != 2 or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)
            or not 1 <= value[0] <= value[1]):
        raise UsageError(f"part_count must be [min, max] with 1 <= min <= max, got {list(value)}")
    return value


def check_dim_ranges(value) -> dict[str, tuple[float, float]]:
    """Normalise {"family.role": [low, high]} with 0 < low <= high."""
    if not isinstance(value, dict):
        raise UsageError(f"dims must be a table of ranges, got {value!r}")
    out = {}
    for role, bounds in value.items():
        try:
            low, high = (float(b) for b in bounds)
        except (TypeError, ValueError) as e:
            raise UsageError(f"dims.{role} must be [low, high], got {bounds!r}") from e
        if not 0 < low <= high:
            raise UsageError(f"dims.{role} needs 0 < low <= high, got [{low}, {high}]")
        out[str(role)] = (low, high)
    return out


@dataclass
class ModelConfig:
    """Network widths shared by the retrieval space and the deformation network."""

    global_code_dim: int = 256  # n1
    part_code_dim: int = 32  # n2
    target_code_dim: int = 256  # n3
    retrieval_code_dim: int = 256  # n4
    point_widths: tuple[int, ...] = (64, 128, 256)
    hidden_widths: tuple[int, ...] = (512, 256)
    zero_init_head: bool = True  # deformation starts at the default shape
    code_init_std: float = 0.01
    sigma_init: float = 1.0

    def __post_init__(self):
        self.point_widths = tuple(self.point_widths)
        self.hidden_widths = tuple(self.hidden_widths)
        for f in ("global_code_dim", "part_code_dim", "target_code_dim", "retrieval_code_dim"):
            if getattr(self, f) < 1:
                raise UsageError(f"model.{f} must be >= 1")
        if not self.point_widths or min(self.point_widths) < 1:
            raise UsageError("model.point_widths must be non-empty and positive")
        if self.sigma_init <= 0:
            raise UsageError("model.sigma_init must be > 0")


@dataclass
class IdoConfig:
    """Inner deformation optimisation (per-pair SGD on deformation parameters)."""

    lr: float = 0.05
    max_iters: int = 2000
    tol: float = 1e-6  # relative loss change
    training_budget: int = 200  # iteration cap inside joint training
    divergence_ceiling: float = 1e3
    symmetry_weight: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise UsageError("ido.lr must be > 0")
        if self.max_iters < 0 or self.training_budget < 0:
            raise UsageError("ido iteration limits must be >= 0")
        if self.tol < 0:
            raise UsageError("ido.tol must be >= 0")

    @classmethod
    def training_details(cls) -> "IdoConfig":
        """The alternate termination rule: 1e-5 change or 5000 iterations."""
        return cls(tol=1e-5, max_iters=5000)


@dataclass
class TrainConfig:
    """Joint training schedule."""

    epochs: int = 300
    batch_size: int = 16
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    K: int = 10
    sigma0: float = 100.0
    alpha: float = 0.1
    cache_refresh_epochs: int = 5
    sampling: str = "biased"  # "biased" | "uniform"
    use_projection: bool = True
    use_ido: bool = False
    seed: int = 0
    # deformation pretraining on random pairs
    pretrain_steps: int = 5000
    pretrain_batch: int = 16
    pretrain_tol: float = 1e-5
    pretrain_window: int = 100
    # supplements
    retrieval_pretrain_epochs: int = 0
    biased_warmup_epochs: int = 0
    train_deformation: bool = True
    symmetry_weight: float = 1.0
    fit_distance_scale: float = 1.0
    ido_weight: float = 1.0
    # bookkeeping
    checkpoint_every: int = 0  # epochs, 0 = only at the end
    threads: int = 0  # 0 = RF_THREADS or cpu count

    def __post_init__(self):
        for f in ("epochs", "pretrain_steps", "retrieval_pretrain_epochs",
                  "biased_warmup_epochs", "checkpoint_every", "threads"):
            if getattr(self, f) < 0:
                raise UsageError(f"train.{f} must be >= 0")
        for f in ("batch_size", "K", "pretrain_batch", "pretrain_window", "cache_refresh_epochs"):
            if getattr(self, f) < 1:
                raise UsageError(f"train.{f} must be >= 1")
        for f in ("lr", "sigma0", "alpha", "fit_distance_scale"):
            if getattr(self, f) <= 0:
                raise UsageError(f"train.{f} must be > 0")
        if not 0 <= self.momentum < 1:
            raise UsageError("train.momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise UsageError("train.weight_decay must be >= 0")
        if self.sampling not in ("biased", "uniform"):
            raise UsageError(f"train.sampling must be 'biased' or 'uniform', got {self.sampling!r}")


@dataclass
class CorpusConfig:
    """Synthetic corpus generation."""

    families: tuple[str, ...] = ("chair", "table", "cabinet")
    n_sources: int = 20
    n_targets: int = 200
    n_points: int = 2048
    offset_scale: float = 1.0
    noise_sigma: float = 0.01
    train_fraction: float = 0.8
    tau: float = 0.05
    seed: int = 0
    # part granularity: () = each family's own range, else inclusive (min, max)
    part_count: tuple[int, ...] = ()
    # "family.role" -> (low, high) overrides of the generator's dimension ranges
    dims: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.families = tuple(self.families)
        self.part_count = check_part_count(self.part_count)
        self.dims = check_dim_ranges(self.dims)
        if self.n_sources < 1 or self.n_targets < 0:
            raise UsageError("corpus sizes must be positive")
        if self.n_points < 2 or self.n_points % 2:
            raise UsageError("corpus.n_points must be an even number >= 2")
        if not 0 < self.train_fraction <= 1:
            raise UsageError("corpus.train_fraction must be in (0, 1]")


@dataclass
class BenchConfig:
    """Benchmark sweep: which arms, database sizes and seeds."""

    arms: tuple[str, ...] = ("static", "dar_df", "uniform", "ours", "ours_do")
    db_sizes: tuple[int, ...] = (20,)
    seeds: tuple[int, ...] = (0, 1, 2)
    targets_per_source: int = 10
    do_top_k: int = 1
    checkpoint_dir: str = ""  # empty = train in-process

    def __post_init__(self):
        self.arms = tuple(self.arms)
        self.db_sizes = tuple(self.db_sizes)
        self.seeds = tuple(self.seeds)
        if not self.db_sizes or min(self.db_sizes) < 1:
            raise UsageError("bench.db_sizes must be non-empty and positive")
        if self.targets_per_source < 1 or self.do_top_k < 1:
            raise UsageError("bench.targets_per_source and bench.do_top_k must be >= 1")


@dataclass
class PathsConfig:
    """Files a run reads or writes, relative to the workdir."""

    workdir: str = "."
    database: str = "database.json"
    targets: str = "targets.json"
    out: str = "runs"
    checkpoint: str = ""

    def resolve(self, value: str) -> Path:
        path = Path(value)
        return path if path.is_absolute() else Path(self.workdir) / path


@dataclass
class RunConfig:
    """Everything a subcommand needs, loaded from one TOML file."""

    model: ModelConfig = field(default_factory=ModelConfig)
    ido: IdoConfig = field(default_factory=IdoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "RunConfig":
        """Load config from a TOML file (or defaults when path is None)."""
        config = cls()
        if path is None:
            return config

        path = Path(path)
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError as e:
            raise UsageError(f"config file not found: {path}") from e
        except tomllib.TOMLDecodeError as e:
            raise UsageError(f"{path}: {e}") from e

        return config.merged(data)

    def merged(self, data: dict[str, Any]) -> "RunConfig":
        """Return a copy with the given {table: {key: value}} overrides applied."""
        updates = {}
        for table, values in data.items():
            if table not in _SECTIONS:
                raise UsageError(f"unknown config table [{table}]")
            if not isinstance(values, dict):
                raise UsageError(f"config table [{table}] must be a table")
            section = getattr(self, table)
            known = {f.name for f in fields(section)}
            checked = {}
            for key, value in values.items():
                if key not in known:
                    raise UsageError(f"unknown config key [{table}].{key}")
                checked[key] = _coerce(table, key, getattr(section, key), value)
            try:
                updates[table] = replace(section, **checked)
            except TypeError as e:
                raise UsageError(f"config table [{table}]: {e}") from e
        return replace(self, **updates)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def threads(self) -> int:
        """Worker threads: train.threads, else RF_THREADS, else logical cores."""
        if self.train.threads > 0:
            return self.train.threads
        if env := os.environ.get("RF_THREADS"):
            try:
                value = int(env)
            except ValueError as e:
                raise UsageError(f"RF_THREADS must be an integer, got {env!r}") from e
            if value > 0:
                return value
        return os.cpu_count() or 1


_SECTIONS = ("model", "ido", "train", "corpus", "bench", "paths")


def _coerce(table: str, key: str, current: Any, value: Any) -> Any:
    """Check a config value against the type of the field's current value."""
    if isinstance(current, bool):
        ok = isinstance(value, bool)
    elif isinstance(current, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(current, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(current, str):
        ok = isinstance(value, str)
    elif isinstance(current, tuple):
        ok = isinstance(value, (list, tuple))
    elif isinstance(current, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise UsageError(f"[{table}].{key} must be {type(current).__name__}, got {value!r}")
    return value


# Global config instance
_config: RunConfig | None = None


def get_config() -> RunConfig:
    """Get the global config instance."""
    global _config
    if _config is None:
        _config = RunConfig.load(os.environ.get("RF_CONFIG"))
    return _config


def reload_config(path: str | Path | None = None) -> RunConfig:
    """Reload the global config, optionally from a new file."""
    global _config
    _config = RunConfig.load(path if path is not None else os.environ.get("RF_CONFIG"))
    return _config
