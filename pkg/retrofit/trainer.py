"""
Training for the retrieval and deformation modules.

This module handles:
- Deformation pretraining on random (source, target) pairs
- Retrieval pretraining on uniformly sampled candidates
- The joint alternating loop with cached-distance soft sampling
- Optional IDO distillation
- Checkpoint save/resume and NaN aborts
"""

import logging
import threading
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import IdoConfig, ModelConfig, TrainConfig
from .deformnet import (
    DeformNet,
    TargetPass,
    deformation_loss,
    distill_pair,
    forward_pairs,
    inner_deformation_optimization,
)
from .errors import DataError, EmptyDatabase, NumericalAbort, UsageError
from .geometry import PointCloud, build_index
from .partmodel import SourceShape
from .retrieval import CandidateSet, RetrievalSpace, embedding_loss, sample_candidates
from .runs import RunManager
from .tensornet import SgdConfig, sgd_step

__all__ = [
    "TrainConfig",
    "DistanceCache",
    "refresh_cache",
    "pretrain",
    "pretrain_retrieval",
    "joint_train",
    "JointTrainer",
    "EpochMetrics",
    "save_checkpoint",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)


def _sgd(cfg: TrainConfig) -> SgdConfig:
    return SgdConfig(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _check_inputs(db: Sequence[SourceShape], targets: Sequence[PointCloud]):
    if not db:
        raise EmptyDatabase("source database is empty")
    if not targets:
        raise DataError("no training targets")


# =============================================================================
# Distance cache
# =============================================================================


@dataclass
class DistanceCache:
    """d_R for every (source, training target) pair, as of `stamp` (an epoch)."""

    matrix: np.ndarray  # (n_sources, n_targets)
    stamp: int

    def is_stale(self, epoch: int, refresh_epochs: int) -> bool:
        return epoch - self.stamp >= refresh_epochs


def refresh_cache(cache: DistanceCache | None, space: RetrievalSpace, db: Sequence[SourceShape],
                  targets: Sequence[PointCloud], *, epoch: int = 0, threads: int = 1) -> DistanceCache:
    """Re-encode the sources and recompute all distances; the old cache is left untouched."""
    space.refresh_source_codes(db)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        columns = list(pool.map(lambda t: space.distances(space.encode(t)), targets))
    matrix = np.stack(columns, axis=1)
    if cache is not None:
        logger.debug("cache refresh at epoch %d (previous stamp %d)", epoch, cache.stamp)
    return DistanceCache(matrix, epoch)


# =============================================================================
# Pretraining
# =============================================================================


@dataclass
class PretrainResult:
    net: DeformNet
    history: list[float]
    steps: int
    converged: bool


def pretrain(
    net: DeformNet,
    db: Sequence[SourceShape],
    targets: Sequence[PointCloud],
    cfg: TrainConfig | None = None,
    *,
    on_step: Callable[[int, float], None] | None = None,
) -> PretrainResult:
    """
    Train the deformation network on uniformly random (source, target) pairs.

    Each step averages L_fit + L_symm over `pretrain_batch` pairs. Stops after
    `pretrain_steps` or once the moving average over `pretrain_window` steps
    changes by less than `pretrain_tol`.
    """
    cfg = cfg or TrainConfig()
    _check_inputs(db, targets)
    rng = np.random.default_rng(cfg.seed)
    sgd = _sgd(cfg)
    indices = [build_index(t) for t in targets]
    history: list[float] = []
    window = cfg.pretrain_window
    converged = False

    for step in range(cfg.pretrain_steps):
        sources = rng.integers(len(db), size=cfg.pretrain_batch)
        chosen = rng.integers(len(targets), size=cfg.pretrain_batch)
        net.store.zero_grad()
        total = 0.0
        for s, t in zip(sources, chosen, strict=True):
            passes = forward_pairs(net, [db[s]], targets[t], target_id=int(t),
                                   use_projection=cfg.use_projection,
                                   symmetry_weight=cfg.symmetry_weight, target_index=indices[t])
            total += deformation_loss(net, passes, [1.0], scale=1.0 / cfg.pretrain_batch)
        loss = total / cfg.pretrain_batch
        if not np.isfinite(loss) or not net.store.grads_finite():
            raise NumericalAbort(f"pretraining produced a non-finite loss at step {step}",
                                 {"step": step, "loss": float(loss)})
        sgd_step(net.store, sgd)
        history.append(loss)
        if on_step:
            on_step(step, loss)

        if len(history) >= 2 * window:
            recent = np.mean(history[-window:])
            before = np.mean(history[-2 * window : -window])
            if abs(before - recent) < cfg.pretrain_tol:
                converged = True
                break

    logger.info("pretrained deformation for %d steps (final loss %.4g)", len(history),
                history[-1] if history else float("nan"))
    return PretrainResult(net, history, len(history), converged)


def pretrain_retrieval(space: RetrievalSpace, net: DeformNet, db: Sequence[SourceShape],
                       targets: Sequence[PointCloud], cfg: TrainConfig, **kwargs) -> list["EpochMetrics"]:
    """Train only the retrieval module on uniformly sampled candidates."""
    if cfg.retrieval_pretrain_epochs == 0:
        return []
    warmup = replace(
        cfg,
        epochs=cfg.retrieval_pretrain_epochs,
        sampling="uniform",
        train_deformation=False,
        use_ido=False,
        biased_warmup_epochs=0,
        retrieval_pretrain_epochs=0,
        checkpoint_every=0,
    )
    return JointTrainer(space, net, db, targets, warmup, **kwargs).run()


# =============================================================================
# Joint training
# =============================================================================


@dataclass
class EpochMetrics:
    epoch: int
    l_emb: float
    l_def: float
    mean_d_fit: float
    cache_refreshed: bool = False


@dataclass
class _Batch:
    candidates: list[CandidateSet]
    passes: list[TargetPass]
    d_fit: list[np.ndarray] = field(default_factory=list)


class JointTrainer:
    """
    Alternating optimisation of the retrieval space and the deformation network.

    Each iteration over a batch of targets:
    1. sample K candidates per target from the cached distances (or uniformly)
    2. deform the candidates and read off d_fit
    3. step the retrieval module on L_emb, deformation frozen
    4. step the deformation module on L_def (+ IDO distillation), retrieval frozen
    """

    def __init__(
        self,
        space: RetrievalSpace,
        net: DeformNet,
        db: Sequence[SourceShape],
        targets: Sequence[PointCloud],
        cfg: TrainConfig | None = None,
        ido: IdoConfig | None = None,
        threads: int = 1,
        run: RunManager | None = None,
        on_epoch: Callable[[EpochMetrics], None] | None = None,
        on_iteration: Callable[[int, float, float], None] | None = None,
        on_cache_refresh: Callable[[DistanceCache], None] | None = None,
    ):
        cfg = cfg or TrainConfig()
        _check_inputs(db, targets)
        if cfg.K > len(db):
            raise UsageError(f"K={cfg.K} exceeds the database size {len(db)}")
        if space.n_sources != len(db) or net.n_sources != len(db):
            raise ValueError("retrieval space, deformation network and database disagree on source count")

        self.space = space
        self.net = net
        self.db = list(db)
        self.targets = list(targets)
        self.cfg = cfg
        self.ido = ido or IdoConfig()
        self.threads = max(1, threads)
        self.run_dir = run
        self.on_epoch = on_epoch
        self.on_iteration = on_iteration
        self.on_cache_refresh = on_cache_refresh

        self.sgd = _sgd(cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.iteration = 0
        self.cache: DistanceCache | None = None
        self.metrics: list[EpochMetrics] = []
        self._indices = [build_index(t) for t in self.targets]

        # Cancellation event (thread-safe)
        self._cancelled = threading.Event()

    def run(self) -> list[EpochMetrics]:
        """Train until cfg.epochs (resuming from self.epoch) or until cancelled."""
        self._cancelled.clear()
        if self.run_dir and self.epoch == 0:
            self.run_dir.reset_metrics()

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            while self.epoch < self.cfg.epochs:
                if self._cancelled.is_set():
                    logger.info("training cancelled at epoch %d", self.epoch)
                    break
                metrics = self._run_epoch(pool)
                self.metrics.append(metrics)
                self.epoch += 1

                logger.info(
                    "epoch %d: L_emb %.4g, L_def %.4g, mean d_fit %.4g%s",
                    metrics.epoch, metrics.l_emb, metrics.l_def, metrics.mean_d_fit,
                    " (cache refreshed)" if metrics.cache_refreshed else "",
                )
                if self.run_dir:
                    self.run_dir.append_metrics(metrics.epoch, metrics.l_emb, metrics.l_def, metrics.mean_d_fit)
                    self.run_dir.log_event("epoch", **asdict(metrics))
                    every = self.cfg.checkpoint_every
                    if every and self.epoch % every == 0:
                        self.save(self.run_dir.path(f"epoch{self.epoch:04d}.rfnt"))
                if self.on_epoch:
                    self.on_epoch(metrics)
        return self.metrics

    def _run_epoch(self, pool: ThreadPoolExecutor) -> EpochMetrics:
        refreshed = False
        if self.cache is None or self.cache.is_stale(self.epoch, self.cfg.cache_refresh_epochs):
            self.cache = refresh_cache(self.cache, self.space, self.db, self.targets,
                                       epoch=self.epoch, threads=self.threads)
            refreshed = True
            if self.run_dir:
                self.run_dir.log_event("cache_refresh", epoch=self.epoch)
            if self.on_cache_refresh:
                self.on_cache_refresh(self.cache)

        order = self.rng.permutation(len(self.targets))
        l_emb, l_def, d_fit = [], [], []
        for start in range(0, len(order), self.cfg.batch_size):
            batch = [int(t) for t in order[start : start + self.cfg.batch_size]]
            emb, dfm, fits = self.step(batch, pool)
            l_emb.extend(emb)
            l_def.extend(dfm)
            d_fit.extend(fits)

        return EpochMetrics(
            epoch=self.epoch,
            l_emb=float(np.mean(l_emb)),
            l_def=float(np.mean(l_def)),
            mean_d_fit=float(np.mean(d_fit)),
            cache_refreshed=refreshed,
        )

    def sampling_mode(self) -> str:
        if self.cfg.sampling == "uniform" or self.epoch < self.cfg.biased_warmup_epochs:
            return "uniform"
        return "biased"

    def step(self, batch: list[int], pool: ThreadPoolExecutor | None = None
             ) -> tuple[list[float], list[float], list[float]]:
        """One alternating iteration over a batch of training target ids."""
        cfg = self.cfg
        scale = 1.0 / len(batch)
        mode = self.sampling_mode()
        candidates = [
            sample_candidates(None, k=cfg.K, mode=mode, seed=self.rng, sigma0=cfg.sigma0,
                              distances=self.cache.matrix[:, t], target_id=t)
            for t in batch
        ]

        def deform_candidates(t: int, cand: CandidateSet) -> TargetPass:
            return forward_pairs(
                self.net, [self.db[i] for i in cand.source_ids], self.targets[t], target_id=t,
                use_projection=cfg.use_projection, symmetry_weight=cfg.symmetry_weight,
                target_index=self._indices[t],
            )

        mapper = pool.map if pool is not None else map
        passes = list(mapper(deform_candidates, batch, candidates))
        d_fit = [cfg.fit_distance_scale * np.array([r.post_chamfer for r in p.reports]) for p in passes]

        # retrieval step, deformation frozen
        self.space.store.zero_grad()
        emb = [
            embedding_loss(self.space, self.targets[t], cand, fits, sigma0=cfg.sigma0, scale=scale)
            for t, cand, fits in zip(batch, candidates, d_fit, strict=True)
        ]
        emb_values = [e.value for e in emb]
        self._guard("retrieval", emb_values, self.space.store.grads_finite())
        sgd_step(self.space.store, self.sgd)

        # deformation step, retrieval frozen
        def_values = []
        if cfg.train_deformation:
            self.net.store.zero_grad()
            for p, e in zip(passes, emb, strict=True):
                def_values.append(deformation_loss(self.net, p, e.p_retrieval, scale=scale))
            if cfg.use_ido:
                self._distill(passes, mapper, scale)
            self._guard("deformation", def_values, self.net.store.grads_finite())
            sgd_step(self.net.store, self.sgd)
        else:
            def_values = [
                float(np.dot(e.p_retrieval, [pp.fit.loss for pp in p.pairs]))
                for p, e in zip(passes, emb, strict=True)
            ]

        self.iteration += 1
        if self.on_iteration:
            self.on_iteration(self.iteration, float(np.mean(emb_values)), float(np.mean(def_values)))
        logger.debug("iteration %d: L_emb %.4g, L_def %.4g", self.iteration,
                     np.mean(emb_values), np.mean(def_values))
        return emb_values, def_values, [float(v) for f in d_fit for v in f]

    def _distill(self, passes: list[TargetPass], mapper, scale: float):
        jobs = [(p, pair) for p in passes for pair in p.pairs]

        def optimise(job):
            p, pair = job
            return inner_deformation_optimization(
                pair.shape, self.targets[p.target_id], pair.offset, alpha=self.net.alpha,
                config=self.ido, use_projection=self.cfg.use_projection,
                max_iters=self.ido.training_budget, target_index=self._indices[p.target_id],
            )

        try:
            results = list(mapper(optimise, jobs))
        except NumericalAbort as e:
            self._abort(str(e), e.diagnostics)

        weight = self.cfg.ido_weight * scale / self.cfg.K
        codes: dict[int, np.ndarray] = {}
        for (p, pair), result in zip(jobs, results, strict=True):
            _, d_code = distill_pair(self.net, pair, result.offset,
                                     use_projection=self.cfg.use_projection, scale=weight)
            codes[id(p)] = codes.get(id(p), 0.0) + d_code
        for p in passes:
            if id(p) in codes:
                self.net.target_encoder.backward(p.encoder_cache, codes[id(p)])

    def _guard(self, module: str, losses: list[float], grads_finite: bool):
        if np.isfinite(losses).all() and grads_finite:
            return
        self._abort(
            f"non-finite {module} loss at epoch {self.epoch}, iteration {self.iteration}",
            {"module": module, "epoch": self.epoch, "iteration": self.iteration,
             "losses": [float(v) for v in losses], "grads_finite": grads_finite},
        )

    def _abort(self, message: str, diagnostics: dict):
        logger.error("%s: %s", message, diagnostics)
        if self.run_dir:
            self.save(self.run_dir.path("last_good.rfnt"))
            self.run_dir.write_json("diagnostics.json", {"message": message, **diagnostics})
            self.run_dir.log_event("abort", message=message, **diagnostics)
        raise NumericalAbort(message, diagnostics)

    def cancel(self):
        """Stop after the current epoch."""
        self._cancelled.set()

    def is_cancelled(self) -> bool:
        return self._cancelled.is_set()

    # -------------------------------------------------------------------------
    # Checkpoints
    # -------------------------------------------------------------------------

    def state(self) -> dict:
        return {
            "epoch": self.epoch,
            "iteration": self.iteration,
            "rng": self.rng.bit_generator.state,
            "cache_stamp": None if self.cache is None else self.cache.stamp,
        }

    def save(self, path: str | Path):
        save_checkpoint(path, self.space, self.net, self.cfg, self.db, trainer=self.state(),
                        cache=self.cache)

    def restore(self, path: str | Path):
        """Load parameters, momentum, cache and RNG state written by save()."""
        tensors = checkpoint.load_tensors(path)
        manifest = checkpoint.load_manifest(path)
        _load_modules(tensors, self.space, self.net)
        state = manifest.get("trainer") or {}
        self.epoch = int(state.get("epoch", 0))
        self.iteration = int(state.get("iteration", 0))
        if "rng" in state:
            self.rng.bit_generator.state = state["rng"]
        stamp = state.get("cache_stamp")
        self.cache = DistanceCache(tensors["cache/matrix"], int(stamp)) if stamp is not None else None


@dataclass
class TrainResult:
    space: RetrievalSpace
    net: DeformNet
    metrics: list[EpochMetrics]
    cache: DistanceCache | None


def joint_train(space: RetrievalSpace, net: DeformNet, db: Sequence[SourceShape],
                targets: Sequence[PointCloud], cfg: TrainConfig | None = None, **kwargs) -> TrainResult:
    """Optional retrieval warm-up, then the joint alternating loop."""
    cfg = cfg or TrainConfig()
    warm = {k: v for k, v in kwargs.items() if k in ("ido", "threads")}
    pretrain_retrieval(space, net, db, targets, cfg, **warm)
    trainer = JointTrainer(space, net, db, targets, cfg, **kwargs)
    metrics = trainer.run()
    if trainer.run_dir:
        trainer.save(trainer.run_dir.path("final.rfnt"))
    return TrainResult(space, net, metrics, trainer.cache)


# =============================================================================
# Checkpoint files
# =============================================================================


def save_checkpoint(path: str | Path, space: RetrievalSpace | None, net: DeformNet,
                    cfg: TrainConfig | None, db: Sequence[SourceShape], *,
                    trainer: dict | None = None, cache: DistanceCache | None = None):
    """Write both modules (values and momentum) plus the distance cache."""
    tensors = {f"deform/{k}": v for k, v in net.state().items()}
    if space is not None:
        tensors.update({f"retrieval/{k}": v for k, v in space.state().items()})
    if cache is not None:
        tensors["cache/matrix"] = cache.matrix
    manifest = {
        "model": asdict(net.model),
        "train": asdict(cfg) if cfg is not None else None,
        "alpha": net.alpha,
        "sources": [s.name for s in db],
        "part_counts": [s.n_parts for s in db],
        "has_retrieval": space is not None,
        "trainer": trainer,
    }
    checkpoint.save_tensors(path, tensors, manifest)
    logger.debug("saved checkpoint %s", path)


def _load_modules(tensors: dict[str, np.ndarray], space: RetrievalSpace | None, net: DeformNet):
    try:
        net.load_state({k[len("deform/"):]: v for k, v in tensors.items() if k.startswith("deform/")})
        if space is not None:
            space.load_state(
                {k[len("retrieval/"):]: v for k, v in tensors.items() if k.startswith("retrieval/")}
            )
    except (KeyError, ValueError) as e:
        raise DataError(f"checkpoint does not match the model: {e}") from e


def load_checkpoint(path: str | Path, db: Sequence[SourceShape] | None = None
                    ) -> tuple[RetrievalSpace | None, DeformNet, dict]:
    """
    Rebuild the modules stored in a checkpoint.

    When `db` is given its source names must match the checkpoint's.

    Returns:
        (retrieval space or None, deformation network, manifest)
    """
    manifest = checkpoint.load_manifest(path)
    tensors = checkpoint.load_tensors(path)
    names = manifest["sources"]
    if db is not None and [s.name for s in db] != names:
        raise DataError(f"{path}: checkpoint was trained on a different database")
    model = ModelConfig(**manifest["model"])
    net = DeformNet(names, manifest["part_counts"], model, alpha=manifest.get("alpha", 0.1))
    space = RetrievalSpace(len(names), model) if manifest.get("has_retrieval") else None
    _load_modules(tensors, space, net)
    return space, net, manifest
