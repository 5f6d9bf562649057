"""
Deformation-aware retrieval space.

Targets are encoded into R^n4; each source is a region around its center code
(the encoding of its default shape) with a learned diagonal variance. The
egocentric distance of a target to source s is

    d(s, t) = sqrt((s_R - t_R)^T diag(v_s) (s_R - t_R)),   v_s = sigmoid(logits_s)

Candidates are drawn from a softmax over -d^2 / sigma^2, and the space is
trained by matching those probabilities to the ones induced by the
post-deformation fitting losses.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .errors import UnknownSource, UsageError
from .geometry import PointCloud
from .partmodel import SourceShape
from .tensornet import ParamStore, SetEncoder

logger = logging.getLogger(__name__)

DEFAULT_SIGMA0 = 100.0
DEFAULT_K = 10


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def _points(target) -> np.ndarray:
    return target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=np.float64)


class RetrievalSpace:
    """Target encoder plus per-source center codes, variances and sigma_k."""

    def __init__(self, n_sources: int, model: ModelConfig | None = None,
                 rng: np.random.Generator | None = None):
        model = model or ModelConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.model = model
        self.store = ParamStore()
        self.encoder = SetEncoder(
            self.store, "encoder", model.retrieval_code_dim, model.point_widths, rng=rng
        )
        self.store.add("variance_logits", np.zeros((n_sources, model.retrieval_code_dim)))
        self.store.add("sigma_logits", np.full(n_sources, inverse_softplus(model.sigma_init)))
        self.source_codes = np.zeros((n_sources, model.retrieval_code_dim))

    @property
    def n_sources(self) -> int:
        return len(self.source_codes)

    def check_source(self, source_id: int):
        if not 0 <= source_id < self.n_sources:
            raise UnknownSource(f"unknown source id {source_id} (database has {self.n_sources})")

    def refresh_source_codes(self, db: Sequence[SourceShape]):
        """Re-encode every source's default shape as its center code."""
        if len(db) != self.n_sources:
            raise ValueError(f"space has {self.n_sources} sources, database has {len(db)}")
        self.source_codes = np.stack([self.encoder.encode(s.default_points) for s in db])

    def variances(self, ids=None) -> np.ndarray:
        logits = self.store["variance_logits"].value
        return sigmoid(logits if ids is None else logits[ids])

    def sigmas(self, ids=None) -> np.ndarray:
        logits = self.store["sigma_logits"].value
        return softplus(logits if ids is None else logits[ids])

    def encode(self, target) -> np.ndarray:
        return self.encoder.encode(_points(target))

    def squared_distances(self, target_code: np.ndarray, ids=None) -> np.ndarray:
        codes = self.source_codes if ids is None else self.source_codes[ids]
        diff = codes - target_code
        return np.einsum("kj,kj->k", self.variances(ids), diff * diff)

    def distances(self, target_code: np.ndarray, ids=None) -> np.ndarray:
        return np.sqrt(self.squared_distances(target_code, ids))

    def ranking(self, target) -> np.ndarray:
        """Source ids sorted by distance, ties broken by id."""
        d = self.distances(self.encode(target))
        return np.lexsort((np.arange(len(d)), d))

    def state(self) -> dict[str, np.ndarray]:
        return {**self.store.state(), "source_codes": self.source_codes}

    def load_state(self, state: dict[str, np.ndarray]):
        self.store.load_state(state)
        self.source_codes = np.array(state["source_codes"], dtype=np.float64)


def distance(space: RetrievalSpace, source_id: int, target) -> float:
    """Egocentric distance of a target cloud to one source."""
    space.check_source(source_id)
    return float(space.distances(space.encode(target), [source_id])[0])


def soft_probabilities(distances, sigmas) -> np.ndarray:
    """
    p(s) = exp(-d(s)^2 / sigma(s)^2) normalised over the given sources.

    Args:
        distances: per-source distances
        sigmas: scalar or per-source positive scales

    Raises:
        ValueError: if any sigma is not positive
    """
    d = np.asarray(distances, dtype=np.float64)
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), d.shape)
    if not (sigmas > 0).all():
        raise ValueError("sigma must be positive")
    return _softmax(-(d * d) / (sigmas * sigmas))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass
class CandidateSet:
    """K distinct sources sampled for one target."""

    target_id: int
    source_ids: np.ndarray
    distances: np.ndarray  # d_R of each candidate
    probabilities: np.ndarray  # soft probabilities under sigma0 over the K candidates

    def __len__(self) -> int:
        return len(self.source_ids)

    def to_json(self) -> dict:
        return {
            "target": self.target_id,
            "sources": self.source_ids.tolist(),
            "distances": self.distances.tolist(),
            "probabilities": self.probabilities.tolist(),
        }


def sample_candidates(
    space: RetrievalSpace | None,
    target=None,
    k: int = DEFAULT_K,
    mode: str = "biased",
    seed=None,
    *,
    sigma0: float = DEFAULT_SIGMA0,
    distances: np.ndarray | None = None,
    target_id: int = -1,
) -> CandidateSet:
    """
    Draw k distinct sources by sequential renormalised sampling.

    In "biased" mode each draw follows the soft probabilities of the remaining
    sources; in "uniform" mode every remaining source is equally likely.
    Distances come from `distances` (e.g. a cache row) when given, otherwise
    they are computed live from the space.

    Args:
        seed: int seed or numpy Generator
    """
    if mode not in ("biased", "uniform"):
        raise UsageError(f"unknown sampling mode: {mode}")
    if distances is None:
        if space is None or target is None:
            raise ValueError("need either distances or a space and a target")
        distances = space.distances(space.encode(target))
    distances = np.asarray(distances, dtype=np.float64)
    n = len(distances)
    if k > n:
        raise UsageError(f"cannot sample {k} candidates from {n} sources")

    rng = np.random.default_rng(seed)
    remaining = np.arange(n)
    chosen = []
    for _ in range(k):
        if mode == "biased":
            p = soft_probabilities(distances[remaining], sigma0)
            pick = rng.choice(len(remaining), p=p)
        else:
            pick = rng.integers(len(remaining))
        chosen.append(int(remaining[pick]))
        remaining = np.delete(remaining, pick)

    ids = np.asarray(chosen, dtype=np.intp)
    d = distances[ids]
    return CandidateSet(target_id, ids, d, soft_probabilities(d, sigma0))


@dataclass
class EmbeddingLoss:
    value: float
    p_retrieval: np.ndarray
    p_fit: np.ndarray


def embedding_loss(
    space: RetrievalSpace,
    target,
    candidates: CandidateSet,
    fit_distances,
    *,
    sigma0: float = DEFAULT_SIGMA0,
    scale: float = 1.0,
    backward: bool = True,
) -> EmbeddingLoss:
    """
    L_emb = sum_k |p(s_k; d_R, sigma0) - p(s_k; d_fit, sigma_k)|.

    d_R is recomputed live for the candidates; d_fit is a constant. Gradients
    (times `scale`) accumulate into the encoder, variance logits and sigma
    logits. The |.| subgradient at 0 is 0.
    """
    ids = np.asarray(candidates.source_ids)
    for i in ids:
        space.check_source(int(i))
    d_fit = np.asarray(fit_distances, dtype=np.float64)
    if d_fit.shape != ids.shape:
        raise ValueError(f"{len(d_fit)} fit distances for {len(ids)} candidates")
    if sigma0 <= 0:
        raise ValueError("sigma0 must be positive")

    code, cache = space.encoder.forward(_points(target))
    diff = space.source_codes[ids] - code
    v = space.variances(ids)
    d2 = np.einsum("kj,kj->k", v, diff * diff)
    p_r = _softmax(-d2 / sigma0**2)

    sig_logits = space.store["sigma_logits"].value[ids]
    sig = softplus(sig_logits)
    p_f = _softmax(-(d_fit * d_fit) / (sig * sig))

    delta = p_r - p_f
    value = float(np.abs(delta).sum())
    if not backward:
        return EmbeddingLoss(value, p_r, p_f)

    s = np.sign(delta) * scale
    g_zr = p_r * (s - np.dot(p_r, s))
    g_zf = p_f * (-s - np.dot(p_f, -s))

    g_d2 = -g_zr / sigma0**2
    np.add.at(space.store["variance_logits"].grad, ids, g_d2[:, None] * diff * diff * v * (1.0 - v))
    g_code = -2.0 * np.einsum("k,kj->j", g_d2, v * diff)
    g_sig = g_zf * 2.0 * d_fit * d_fit / sig**3
    np.add.at(space.store["sigma_logits"].grad, ids, g_sig * sigmoid(sig_logits))
    space.encoder.backward(cache, g_code)
    return EmbeddingLoss(value, p_r, p_f)
