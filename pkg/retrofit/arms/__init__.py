"""
Benchmark arm registry.

Arms are registered using the @arm decorator and looked up by name from the
benchmark driver. Each arm receives an ArmContext (database, train/test
targets, seed, config) and returns an EvalResult.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from ..config import RunConfig
from ..deformnet import DeformNet
from ..errors import MissingCheckpoint
from ..evalbench import EvalResult, Ranker, evaluate
from ..geometry import PointCloud
from ..partmodel import SourceShape
from ..retrieval import RetrievalSpace
from ..runs import RunManager
from ..trainer import joint_train, load_checkpoint, pretrain, save_checkpoint

__all__ = ["arm", "get_arms", "get_arm", "run_arm", "ArmDef", "ArmContext"]

logger = logging.getLogger(__name__)


@dataclass
class ArmDef:
    """A benchmark arm: a named recipe that trains (or loads) and evaluates."""

    name: str
    description: str
    handler: Callable[["ArmContext"], EvalResult]


# Global registry
_ARMS: dict[str, ArmDef] = {}


def arm(name: str, description: str):
    """
    Decorator to register a function as a benchmark arm.

    Example:
        @arm(name="static", description="nearest source by undeformed chamfer")
        def static(ctx: ArmContext) -> EvalResult:
            ...
    """

    def decorator(func: Callable[["ArmContext"], EvalResult]):
        _ARMS[name] = ArmDef(name=name, description=description, handler=func)
        return func

    return decorator


def get_arms() -> dict[str, ArmDef]:
    """Get all registered arms."""
    return _ARMS.copy()


def get_arm(name: str) -> ArmDef | None:
    """Get a specific arm by name."""
    return _ARMS.get(name)


def run_arm(name: str, context: "ArmContext") -> EvalResult:
    """
    Run an arm by name.

    Raises:
        KeyError: If the arm is not registered
    """
    arm_def = _ARMS.get(name)
    if not arm_def:
        raise KeyError(f"Unknown arm: {name}")
    return arm_def.handler(context)


@dataclass
class ArmContext:
    """
    Shared state of one (database size, seed) cell of the benchmark.

    Trained modules are memoised so arms that share a recipe (e.g. "ours" and
    "ours_do") train once. With bench.checkpoint_dir set, modules are loaded
    from `<dir>/<key>-n<size>-s<seed>.rfnt` instead of trained.
    """

    cfg: RunConfig
    db: list[SourceShape]
    train: list[PointCloud]
    test: list[PointCloud]
    seed: int = 0
    threads: int = 1
    use_projection: bool = True
    run: RunManager | None = None
    _memo: dict[str, Any] = field(default_factory=dict, repr=False)

    def checkpoint_name(self, key: str) -> str:
        suffix = "" if self.use_projection else "-noconn"
        return f"{key}{suffix}-n{len(self.db)}-s{self.seed}.rfnt"

    def _checkpoint_dir(self) -> Path | None:
        return Path(self.cfg.bench.checkpoint_dir) if self.cfg.bench.checkpoint_dir else None

    def _store(self, key: str, space: RetrievalSpace | None, net: DeformNet):
        if self.run is not None:
            save_checkpoint(self.run.path("checkpoints") / self.checkpoint_name(key), space, net,
                            self.train_config(), self.db)

    def _load(self, key: str) -> tuple[RetrievalSpace | None, DeformNet] | None:
        directory = self._checkpoint_dir()
        if directory is None:
            return None
        path = directory / self.checkpoint_name(key)
        if not path.exists():
            raise MissingCheckpoint(f"benchmark checkpoint not found: {path}")
        space, net, _ = load_checkpoint(path, self.db)
        return space, net

    def train_config(self, **overrides):
        return replace(self.cfg.train, seed=self.seed, use_projection=self.use_projection, **overrides)

    def pretrained(self) -> DeformNet:
        """Deformation network trained on random pairs (the DF baseline)."""
        if "pretrained" not in self._memo:
            loaded = self._load("pretrained")
            if loaded is not None:
                net = loaded[1]
            else:
                rng = np.random.default_rng([self.seed, 0])
                net = DeformNet.for_database(self.db, self.cfg.model, self.cfg.train.alpha, rng)
                pretrain(net, self.db, self.train, self.train_config())
                self._store("pretrained", None, net)
            self._memo["pretrained"] = net
        return self._memo["pretrained"]

    def copy_pretrained(self) -> DeformNet:
        source = self.pretrained()
        net = DeformNet(source.source_names, source.part_counts, source.model, source.alpha)
        net.load_state(source.state())
        return net

    def trained(self, key: str, **overrides) -> tuple[RetrievalSpace, DeformNet]:
        """Joint training from the pretrained network with the given TrainConfig overrides."""
        if key not in self._memo:
            loaded = self._load(key)
            if loaded is None:
                space = RetrievalSpace(len(self.db), self.cfg.model, rng=np.random.default_rng([self.seed, 1]))
                result = joint_train(space, self.copy_pretrained(), self.db, self.train,
                                     self.train_config(**overrides), ido=self.cfg.ido, threads=self.threads)
                loaded = (result.space, result.net)
                self._store(key, *loaded)
            self._memo[key] = loaded
        return self._memo[key]

    def evaluate(self, ranker: Ranker, net: DeformNet, *, direct: bool = False) -> EvalResult:
        return evaluate(
            ranker, net, self.db, self.test,
            use_projection=self.use_projection,
            do=self.cfg.ido if direct else None,
            do_top_k=self.cfg.bench.do_top_k,
            threads=self.threads,
        )


from . import builtin  # noqa: F401, E402
