"""
Evaluation metrics and the benchmark driver.

Provides:
- oracle_rank / static_rank: exhaustive rankings by post- / pre-deformation chamfer
- recall_at_n, ranking_eval: agreement of a retrieval ranking with the oracle
- evaluate: per-target top-k chamfers, oracle rank, recall and optional direct
  optimisation (DO) of the top retrieved sources
- run_benchmark: one CSV row per (arm, database size, seed)
"""

import csv
import logging
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import IdoConfig, RunConfig, get_config
from .deformnet import DeformNet, deform, inner_deformation_optimization, predict_offset
from .errors import DivergenceError, UsageError
from .geometry import PointCloud, build_index, chamfer
from .partmodel import SourceShape, apply_deformation

logger = logging.getLogger(__name__)

TOP_K = 5
ORACLE_TOP = 5
CSV_COLUMNS = (
    "arm", "db_size", "seed", "top1", "top2", "top3", "top4", "top5",
    "mean_rank", "recall1", "recall5", "wall_seconds",
)

Ranker = Callable[[PointCloud], np.ndarray]


def _rank_by(values: np.ndarray) -> np.ndarray:
    """Indices sorted ascending by value, ties broken by index."""
    return np.lexsort((np.arange(len(values)), values))


def post_chamfers(db: Sequence[SourceShape], net: DeformNet, target, use_projection: bool = True) -> np.ndarray:
    """Post-deformation chamfer of every source against one target."""
    return np.array([deform(net, shape, target, use_projection)[1].post_chamfer for shape in db])


def oracle_rank(db: Sequence[SourceShape], net: DeformNet, target, use_projection: bool = True) -> np.ndarray:
    """Deform every source to the target and rank by the resulting chamfer."""
    return _rank_by(post_chamfers(db, net, target, use_projection))


def static_rank(db: Sequence[SourceShape], target) -> np.ndarray:
    """Rank sources by chamfer of their undeformed samples."""
    index = build_index(target)
    return _rank_by(np.array([chamfer(s.default_points, target, index_b=index) for s in db]))


def recall_at_n(retrieved, oracle, n: int, top: int = ORACLE_TOP) -> int:
    """1 if any of the top-n retrieved sources is among the oracle's top `top`."""
    retrieved = np.asarray(retrieved)
    if n < 1:
        raise ValueError("N must be >= 1")
    if n > len(retrieved):
        raise ValueError(f"N={n} exceeds the database size {len(retrieved)}")
    return int(bool(np.intersect1d(retrieved[:n], np.asarray(oracle)[:top]).size))


def ranking_eval(retrieved_top1: int, oracle) -> int:
    """1-based position of the retrieved top-1 source in the oracle ranking."""
    hits = np.flatnonzero(np.asarray(oracle) == retrieved_top1)
    if hits.size == 0:
        raise ValueError(f"source {retrieved_top1} is not in the oracle ranking")
    return int(hits[0]) + 1


@dataclass
class TargetEval:
    target_id: int
    retrieved: np.ndarray
    oracle: np.ndarray
    chamfers: np.ndarray  # post-deformation chamfer per source id
    top_k: np.ndarray  # chamfer of the k-th retrieved source, k = 1..5 (after DO where applied)
    rank: int
    recall1: int
    recall5: int


@dataclass
class EvalResult:
    targets: list[TargetEval]

    @property
    def top_k_means(self) -> np.ndarray:
        return np.mean([t.top_k for t in self.targets], axis=0)

    @property
    def mean_rank(self) -> float:
        return float(np.mean([t.rank for t in self.targets]))

    @property
    def recall1(self) -> float:
        return float(np.mean([t.recall1 for t in self.targets]))

    @property
    def recall5(self) -> float:
        return float(np.mean([t.recall5 for t in self.targets]))

    def row(self, arm: str, db_size: int, seed: int, wall_seconds: float) -> dict:
        row = {"arm": arm, "db_size": db_size, "seed": seed}
        means = self.top_k_means
        for k in range(TOP_K):
            row[f"top{k + 1}"] = float(means[k])
        row.update(mean_rank=self.mean_rank, recall1=self.recall1, recall5=self.recall5,
                   wall_seconds=round(wall_seconds, 3))
        return row


def direct_optimize(net: DeformNet, shape: SourceShape, target, baseline: float, *,
                    config: IdoConfig | None = None, use_projection: bool = True) -> float:
    """Test-time IDO from the network's prediction; never worse than `baseline`."""
    try:
        result = inner_deformation_optimization(
            shape, target, predict_offset(net, shape, target), alpha=net.alpha,
            config=config, use_projection=use_projection,
        )
    except DivergenceError as e:
        logger.warning("direct optimisation of %s diverged: %s", shape.name, e)
        return baseline
    return min(baseline, chamfer(apply_deformation(shape, result.offset, net.alpha, clamp=True), target))


def evaluate(
    ranker: Ranker,
    net: DeformNet,
    db: Sequence[SourceShape],
    targets: Sequence[PointCloud],
    *,
    use_projection: bool = True,
    do: IdoConfig | None = None,
    do_top_k: int = 1,
    threads: int = 1,
) -> EvalResult:
    """
    Evaluate a retrieval ranking combined with a deformation network.

    With `do`, the first `do_top_k` retrieved sources of every target are refined
    by direct optimisation (symmetry weight 0, so the refined value is a chamfer).
    """
    if len(db) < 1:
        raise UsageError("cannot evaluate on an empty database")
    if do is not None and do.symmetry_weight:
        do = replace(do, symmetry_weight=0.0)

    def one(item) -> TargetEval:
        t, target = item
        chamfers = post_chamfers(db, net, target, use_projection)
        oracle = _rank_by(chamfers)
        retrieved = np.asarray(ranker(target))
        k = min(TOP_K, len(db))
        top_k = np.full(TOP_K, np.nan)
        top_k[:k] = chamfers[retrieved[:k]]
        if do is not None:
            for j in range(min(do_top_k, k)):
                top_k[j] = direct_optimize(net, db[retrieved[j]], target, top_k[j],
                                           config=do, use_projection=use_projection)
        return TargetEval(
            target_id=t,
            retrieved=retrieved,
            oracle=oracle,
            chamfers=chamfers,
            top_k=top_k,
            rank=ranking_eval(int(retrieved[0]), oracle),
            recall1=recall_at_n(retrieved, oracle, 1),
            recall5=recall_at_n(retrieved, oracle, min(5, len(db))),
        )

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(one, enumerate(targets)))
    return EvalResult(results)


# =============================================================================
# Benchmark
# =============================================================================


def write_rows(rows: list[dict], path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def run_benchmark(cfg: RunConfig | None = None, *, threads: int = 1, run=None, use_projection: bool = True,
                  out: str | Path | None = None) -> list[dict]:
    """
    Generate a corpus per database size, then run every arm for every seed.

    Rows are sorted by (db_size, seed, arm order in the config). Without cfg the
    global config (RF_CONFIG or defaults) is used.
    """
    from .arms import ArmContext, get_arm, run_arm
    from .corpus import GenSpec, generate_database, generate_targets, split_targets

    cfg = cfg or get_config()
    bench = cfg.bench
    for name in bench.arms:
        if get_arm(name) is None:
            raise UsageError(f"unknown arm: {name}")

    rows = []
    for size in bench.db_sizes:
        spec = GenSpec.from_config(cfg.corpus)
        db = generate_database(spec, size, threads=threads)
        records = generate_targets(db, size * bench.targets_per_source, cfg.corpus.offset_scale,
                                   cfg.corpus.noise_sigma, seed=cfg.corpus.seed)
        train, test = split_targets(records, cfg.corpus.train_fraction, seed=cfg.corpus.seed)
        for seed in bench.seeds:
            context = ArmContext(
                cfg=cfg, db=db, train=[r.cloud for r in train], test=[r.cloud for r in test],
                seed=seed, threads=threads, use_projection=use_projection, run=run,
            )
            for name in bench.arms:
                start = time.perf_counter()
                result = run_arm(name, context)
                label = name if use_projection else f"{name}_noconn"
                row = result.row(label, size, seed, time.perf_counter() - start)
                logger.info("%s n=%d seed=%d: top1 %.4g, rank %.2f, recall@1 %.2f",
                            label, size, seed, row["top1"], row["mean_rank"], row["recall1"])
                if run is not None:
                    run.log_event("bench_row", **row)
                rows.append(row)
    if out is not None:
        write_rows(rows, out)
    return rows
