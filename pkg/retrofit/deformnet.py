"""
Structure-aware neural deformation.

For source s with parts 1..N and target t the network predicts, per part,

    offset_i = MLP(concat(global_code[s], part_code[s][i], E_D(t)))    (6 values)

The offsets are optionally projected onto the contact-preserving subspace and
applied as p_default + alpha * offset.

This module handles:
- Offset prediction with per-source auto-decoded codes
- Forward passes that keep what backprop needs, and the weighted deformation loss
- Inner deformation optimisation (IDO) and its distillation loss
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .config import IdoConfig, ModelConfig
from .errors import DivergenceError, UnknownSource
from .geometry import Aabb, PointCloud, SpatialIndex, build_index, chamfer, reflect_yz
from .partmodel import (
    PARAMS_PER_PART,
    FitEvaluation,
    SourceShape,
    apply_deformation,
    deformed_boxes,
    fit_evaluate,
)
from .tensornet import DenseCache, EncoderCache, Mlp, ParamStore, SetEncoder

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.1
ABS_TOL_FLOOR = 1e-14


class DeformNet:
    """Target encoder, shared part MLP and per-source global/part codes."""

    def __init__(
        self,
        source_names: Sequence[str],
        part_counts: Sequence[int],
        model: ModelConfig | None = None,
        alpha: float = DEFAULT_ALPHA,
        rng: np.random.Generator | None = None,
    ):
        if len(source_names) != len(part_counts):
            raise ValueError(f"{len(source_names)} names for {len(part_counts)} part counts")
        model = model or ModelConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.model = model
        self.alpha = alpha
        self.source_names = list(source_names)
        self.part_counts = [int(n) for n in part_counts]
        self._index = {name: i for i, name in enumerate(self.source_names)}
        if len(self._index) != len(self.source_names):
            raise ValueError("source names must be unique")

        self.store = ParamStore()
        self.target_encoder = SetEncoder(
            self.store, "target_encoder", model.target_code_dim, model.point_widths, rng=rng
        )
        width = model.global_code_dim + model.part_code_dim + model.target_code_dim
        self.part_mlp = Mlp(
            self.store,
            "part_mlp",
            (width, *model.hidden_widths, PARAMS_PER_PART),
            rng=rng,
            zero_init_last=model.zero_init_head,
        )
        std = model.code_init_std
        self.store.add("global_codes", rng.normal(0.0, std, (len(part_counts), model.global_code_dim)))
        for s, n in enumerate(self.part_counts):
            self.store.add(f"part_codes/{s}", rng.normal(0.0, std, (n, model.part_code_dim)))

    @classmethod
    def for_database(cls, db: Sequence[SourceShape], model: ModelConfig | None = None,
                     alpha: float = DEFAULT_ALPHA, rng: np.random.Generator | None = None) -> "DeformNet":
        return cls([s.name for s in db], [s.n_parts for s in db], model, alpha, rng)

    @property
    def n_sources(self) -> int:
        return len(self.source_names)

    def source_index(self, shape: SourceShape) -> int:
        index = self._index.get(shape.name)
        if index is None:
            raise UnknownSource(f"no codes for source {shape.name!r}")
        if self.part_counts[index] != shape.n_parts:
            raise ValueError(
                f"source {shape.name!r} has {shape.n_parts} parts, codes exist for {self.part_counts[index]}"
            )
        return index

    def encode(self, target) -> np.ndarray:
        return self.target_encoder.encode(_points(target))

    def state(self) -> dict[str, np.ndarray]:
        return self.store.state()

    def load_state(self, state: dict[str, np.ndarray]):
        self.store.load_state(state)


def _points(target) -> np.ndarray:
    return target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=np.float64)


# =============================================================================
# Prediction
# =============================================================================


@dataclass
class OffsetCache:
    source: int
    mlp_caches: list[DenseCache]


def _mlp_input(net: DeformNet, source: int, target_code: np.ndarray) -> np.ndarray:
    n = net.part_counts[source]
    glob = np.broadcast_to(net.store["global_codes"].value[source], (n, net.model.global_code_dim))
    part = net.store[f"part_codes/{source}"].value
    code = np.broadcast_to(target_code, (n, len(target_code)))
    return np.concatenate([glob, part, code], axis=1)


def offset_forward(net: DeformNet, source: int, target_code: np.ndarray) -> tuple[np.ndarray, OffsetCache]:
    out, caches = net.part_mlp.forward(_mlp_input(net, source, target_code))
    return out.reshape(-1), OffsetCache(source, caches)


def offset_backward(net: DeformNet, cache: OffsetCache, d_offset: np.ndarray) -> np.ndarray:
    """Accumulate code and MLP gradients; return the gradient wrt the target code."""
    d_in = net.part_mlp.backward(cache.mlp_caches, np.asarray(d_offset).reshape(-1, PARAMS_PER_PART))
    n1, n2 = net.model.global_code_dim, net.model.part_code_dim
    net.store["global_codes"].grad[cache.source] += d_in[:, :n1].sum(axis=0)
    net.store[f"part_codes/{cache.source}"].grad += d_in[:, n1 : n1 + n2]
    return d_in[:, n1 + n2 :].sum(axis=0)


def predict_offset(net: DeformNet, source: SourceShape, target) -> np.ndarray:
    """Raw (unprojected) offset for every part of `source`, concatenated in part order."""
    index = net.source_index(source)
    return offset_forward(net, index, net.encode(target))[0]


# =============================================================================
# Deform and report
# =============================================================================


@dataclass
class FitReport:
    """Outcome of deforming one source towards one target."""

    source_id: int
    target_id: int
    offset: np.ndarray
    projected_offset: np.ndarray  # the offset actually applied
    pre_chamfer: float
    post_chamfer: float
    symmetry: float
    weight: float = 1.0

    def to_json(self) -> dict:
        return {
            "source": self.source_id,
            "target": self.target_id,
            "offset": self.offset.tolist(),
            "projected_offset": self.projected_offset.tolist(),
            "pre_chamfer": self.pre_chamfer,
            "post_chamfer": self.post_chamfer,
            "symmetry": self.symmetry,
            "weight": self.weight,
        }


def _applied(shape: SourceShape, offset: np.ndarray, use_projection: bool) -> np.ndarray:
    return shape.constraint.projector @ offset if use_projection else offset


def report_for(shape: SourceShape, source_id: int, target, offset: np.ndarray, applied: np.ndarray,
               alpha: float, target_id: int = -1, target_index: SpatialIndex | None = None
               ) -> tuple[PointCloud, FitReport]:
    cloud = apply_deformation(shape, applied, alpha, clamp=True)
    target_pts = _points(target)
    report = FitReport(
        source_id=source_id,
        target_id=target_id,
        offset=np.asarray(offset, dtype=np.float64),
        projected_offset=np.asarray(applied, dtype=np.float64),
        pre_chamfer=chamfer(shape.default_points, target_pts, index_b=target_index),
        post_chamfer=chamfer(cloud, target_pts, index_b=target_index),
        symmetry=chamfer(cloud, reflect_yz(cloud)),
    )
    return cloud, report


def deform(net: DeformNet, source: SourceShape, target, use_projection: bool = True,
           target_id: int = -1) -> tuple[PointCloud, FitReport]:
    """Predict, optionally project, and apply an offset; report the fit."""
    index = net.source_index(source)
    offset = predict_offset(net, source, target)
    applied = _applied(source, offset, use_projection)
    return report_for(source, index, target, offset, applied, net.alpha, target_id)


@dataclass
class PairPass:
    """Forward state of one (source, target) pair, kept for backprop."""

    shape: SourceShape
    offset: np.ndarray
    cache: OffsetCache
    fit: FitEvaluation  # gradient already chained through the projector
    report: FitReport


@dataclass
class TargetPass:
    """All candidate passes for one target, sharing one encoder forward."""

    target_id: int
    encoder_cache: EncoderCache
    pairs: list[PairPass] = field(default_factory=list)

    @property
    def reports(self) -> list[FitReport]:
        return [p.report for p in self.pairs]


def forward_pairs(
    net: DeformNet,
    shapes: Sequence[SourceShape],
    target,
    *,
    target_id: int = -1,
    use_projection: bool = True,
    symmetry_weight: float = 1.0,
    target_index: SpatialIndex | None = None,
) -> TargetPass:
    """Deform every shape towards one target, keeping caches for the backward pass."""
    points = _points(target)
    target_index = target_index or build_index(points)
    code, enc_cache = net.target_encoder.forward(points)
    out = TargetPass(target_id, enc_cache)
    for shape in shapes:
        index = net.source_index(shape)
        offset, cache = offset_forward(net, index, code)
        fit = fit_evaluate(shape, offset, net.alpha, points, use_projection=use_projection,
                           symmetry_weight=symmetry_weight, target_index=target_index)
        applied = _applied(shape, offset, use_projection)
        report = FitReport(
            source_id=index,
            target_id=target_id,
            offset=offset,
            projected_offset=applied,
            pre_chamfer=chamfer(shape.default_points, points, index_b=target_index),
            post_chamfer=fit.chamfer,
            symmetry=fit.symmetry,
        )
        out.pairs.append(PairPass(shape, offset, cache, fit, report))
    return out


def deformation_loss(net: DeformNet, passes: TargetPass, weights, *, scale: float = 1.0,
                     backward: bool = True) -> float:
    """
    L_def = sum_k w_k * (L_fit + L_symm) over the target's candidates.

    Weights are constants. Gradients (times `scale`) accumulate into the
    deformation network; pairs with zero weight contribute nothing.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(passes.pairs),):
        raise ValueError(f"{weights.size} weights for {len(passes.pairs)} reports")
    for pair, w in zip(passes.pairs, weights, strict=True):
        pair.report.weight = float(w)

    value = float(sum(w * p.fit.loss for p, w in zip(passes.pairs, weights, strict=True)))
    if backward:
        d_code = None
        for pair, w in zip(passes.pairs, weights, strict=True):
            if w == 0.0:
                continue
            g = offset_backward(net, pair.cache, (w * scale) * pair.fit.gradient)
            d_code = g if d_code is None else d_code + g
        if d_code is not None:
            net.target_encoder.backward(passes.encoder_cache, d_code)
    return value


# =============================================================================
# Inner deformation optimisation
# =============================================================================


@dataclass
class IdoResult:
    offset: np.ndarray  # best iterate, feasible when projection is on
    loss: float
    chamfer: float  # chamfer part of loss at the best iterate
    trace: list[float]
    iterations: int
    converged: bool


def inner_deformation_optimization(
    shape: SourceShape,
    target,
    init_offset,
    *,
    alpha: float = DEFAULT_ALPHA,
    config: IdoConfig | None = None,
    use_projection: bool = True,
    max_iters: int | None = None,
    target_index: SpatialIndex | None = None,
) -> IdoResult:
    """
    Projected gradient descent on the deformation parameters of one pair.

    Starts from P @ init_offset and steps the parameter displacement alpha*offset
    with the configured learning rate. Stops when the relative loss change drops
    below tol or after max_iters steps, and returns the best iterate seen.

    Raises:
        DivergenceError: if the loss exceeds the divergence ceiling or is not finite
    """
    cfg = config or IdoConfig()
    limit = cfg.max_iters if max_iters is None else max_iters
    points = _points(target)
    target_index = target_index or build_index(points)
    P = shape.constraint.projector if use_projection else None
    init = np.asarray(init_offset, dtype=np.float64)
    offset = P @ init if P is not None else init.copy()
    step = cfg.lr / alpha**2

    trace: list[float] = []
    best, best_loss, best_chamfer = offset, np.inf, np.inf
    previous = None
    converged = False
    it = 0
    while True:
        ev = fit_evaluate(shape, offset, alpha, points, symmetry_weight=cfg.symmetry_weight,
                          target_index=target_index)
        loss = ev.loss
        if not np.isfinite(loss) or loss > cfg.divergence_ceiling:
            raise DivergenceError(
                f"IDO on {shape.name!r} diverged at iteration {it} (loss {loss:.4g})",
                {"source": shape.name, "iteration": it, "loss": float(loss), "best_loss": float(best_loss)},
            )
        trace.append(loss)
        if loss < best_loss:
            best, best_loss, best_chamfer = offset, loss, ev.chamfer
        if previous is not None and abs(previous - loss) <= max(cfg.tol * abs(previous), ABS_TOL_FLOOR):
            converged = True
            break
        if it >= limit:
            break
        grad = P @ ev.gradient if P is not None else ev.gradient
        offset = offset - step * grad
        previous = loss
        it += 1

    logger.debug("IDO %s: %d iterations, loss %.3e -> %.3e", shape.name, it, trace[0], best_loss)
    return IdoResult(best.copy(), float(best_loss), float(best_chamfer), trace, it, converged)


def ido_distillation_loss(predicted, optimized) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient wrt the prediction (the target is constant)."""
    p = np.asarray(predicted, dtype=np.float64)
    q = np.asarray(optimized, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"offset lengths differ: {p.size} vs {q.size}")
    diff = p - q
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def distill_pair(net: DeformNet, pair: PairPass, optimized: np.ndarray, *, use_projection: bool = True,
                 scale: float = 1.0) -> tuple[float, np.ndarray]:
    """
    Distillation on the applied (projected) prediction of one pair.

    Returns the loss and the gradient wrt the target code; parameter gradients
    (times `scale`) accumulate into the network.
    """
    applied = _applied(pair.shape, pair.offset, use_projection)
    value, grad = ido_distillation_loss(applied, optimized)
    if use_projection:
        grad = pair.shape.constraint.projector @ grad
    return value, offset_backward(net, pair.cache, scale * grad)


@dataclass
class FitResult:
    cloud: PointCloud
    boxes: list[Aabb]
    report: FitReport
    ido: IdoResult | None = None


def fit_target(net: DeformNet, source: SourceShape, target, *, use_projection: bool = True,
               ido: IdoConfig | None = None, target_id: int = -1) -> FitResult:
    """
    Deform one source to a target, optionally refining with IDO.

    The IDO offset replaces the prediction only when its chamfer is lower, so
    the result is never worse than the network alone whatever the IDO loss weights.
    """
    _, report = deform(net, source, target, use_projection, target_id)
    result = None
    applied = report.projected_offset
    if ido is not None:
        result = inner_deformation_optimization(
            source, target, report.offset, alpha=net.alpha, config=ido, use_projection=use_projection
        )
        _, refined = report_for(source, report.source_id, target, report.offset, result.offset, net.alpha)
        if refined.post_chamfer < report.post_chamfer:
            applied = result.offset
    cloud, final = report_for(source, report.source_id, target, report.offset, applied, net.alpha, target_id)
    return FitResult(cloud, deformed_boxes(source, applied, net.alpha), final, result)
