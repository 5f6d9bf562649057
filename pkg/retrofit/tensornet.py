"""
Minimal neural substrate with hand-written backprop.

Parameters live in a ParamStore (value, gradient and momentum per tensor).
Layers hold only the names of their tensors; forward returns the output
together with a cache, and backward consumes that cache, accumulates parameter
gradients into the store (+=) and returns the input gradient.

Everything is float64.
"""

import hashlib
import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import StaleCacheError, UsageError

logger = logging.getLogger(__name__)

Activation = Literal["relu", "sigmoid", "none"]


@dataclass
class Param:
    """A trainable tensor with its gradient and momentum buffers."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    momentum: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)


class ParamStore:
    """Named tensors of one module. `version` advances on every optimizer step."""

    def __init__(self):
        self._params: dict[str, Param] = {}
        self.version = 0

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter: {name}")
        param = Param(value)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for p in self._params.values():
            p.grad.fill(0.0)

    def checksum(self) -> str:
        """Hash of all parameter values, in name order."""
        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._params[name].value).tobytes())
        return h.hexdigest()

    def grads_finite(self) -> bool:
        return all(np.isfinite(p.grad).all() for p in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        """Values and momentum buffers, keyed by name and name#momentum."""
        out = {}
        for name, p in self._params.items():
            out[name] = p.value
            out[f"{name}#momentum"] = p.momentum
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        for name, p in self._params.items():
            if name not in state:
                raise KeyError(f"checkpoint has no tensor {name}")
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape}, model shape {p.value.shape}")
            p.value[...] = value
            p.momentum[...] = state.get(f"{name}#momentum", 0.0)
            p.grad.fill(0.0)
        self.version += 1


@dataclass
class SgdConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005

    def __post_init__(self):
        if self.lr <= 0:
            raise UsageError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise UsageError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise UsageError("weight_decay must be >= 0")


def sgd_step(store: ParamStore, cfg: SgdConfig):
    """v <- momentum*v + g + wd*theta; theta <- theta - lr*v; gradients zeroed."""
    for p in store._params.values():
        p.momentum *= cfg.momentum
        p.momentum += p.grad
        if cfg.weight_decay:
            p.momentum += cfg.weight_decay * p.value
        p.value -= cfg.lr * p.momentum
        p.grad.fill(0.0)
    store.version += 1


# =============================================================================
# Layers
# =============================================================================


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class DenseCache:
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    version: int


class DenseLayer:
    """y = act(x @ W.T + b) over a batch of row vectors."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        in_dim: int,
        out_dim: int,
        activation: Activation = "none",
        rng: np.random.Generator | None = None,
        zero_init: bool = False,
    ):
        if activation not in ("relu", "sigmoid", "none"):
            raise ValueError(f"unknown activation: {activation}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store = store
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        weights = np.zeros((out_dim, in_dim)) if zero_init else glorot_uniform(rng, out_dim, in_dim)
        store.add(f"{name}.weight", weights)
        store.add(f"{name}.bias", np.zeros(out_dim))

    @property
    def weight(self) -> Param:
        return self.store[f"{self.name}.weight"]

    @property
    def bias(self) -> Param:
        return self.store[f"{self.name}.bias"]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, DenseCache]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        x2 = x[None, :] if squeeze else x
        if x2.ndim != 2 or x2.shape[1] != self.in_dim:
            raise ValueError(f"{self.name}: expected input width {self.in_dim}, got shape {x.shape}")
        z = x2 @ self.weight.value.T + self.bias.value
        if self.activation == "relu":
            y = np.maximum(z, 0.0)
        elif self.activation == "sigmoid":
            y = 1.0 / (1.0 + np.exp(-z))
        else:
            y = z
        cache = DenseCache(x2, z, y, self.store.version)
        return (y[0] if squeeze else y), cache

    def backward(self, cache: DenseCache, dy: np.ndarray) -> np.ndarray:
        if cache.version != self.store.version:
            raise StaleCacheError(f"{self.name}: parameters changed since forward")
        squeeze = np.ndim(dy) == 1
        dy = np.asarray(dy, dtype=np.float64).reshape(cache.y.shape)
        if self.activation == "relu":
            dz = dy * (cache.z > 0)
        elif self.activation == "sigmoid":
            dz = dy * cache.y * (1.0 - cache.y)
        else:
            dz = dy
        self.weight.grad += dz.T @ cache.x
        self.bias.grad += dz.sum(axis=0)
        dx = dz @ self.weight.value
        return dx[0] if squeeze else dx


class Mlp:
    """A stack of dense layers; hidden layers use `activation`, the last uses `final`."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        widths: Sequence[int],
        activation: Activation = "relu",
        final: Activation = "none",
        rng: np.random.Generator | None = None,
        zero_init_last: bool = False,
    ):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        n = len(widths) - 1
        self.layers = [
            DenseLayer(
                store,
                f"{name}.{i}",
                widths[i],
                widths[i + 1],
                activation if i < n - 1 else final,
                rng=rng,
                zero_init=zero_init_last and i == n - 1,
            )
            for i in range(n)
        ]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[DenseCache]]:
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches: list[DenseCache], dy: np.ndarray) -> np.ndarray:
        for layer, cache in zip(reversed(self.layers), reversed(caches), strict=True):
            dy = layer.backward(cache, dy)
        return dy


@dataclass
class EncoderCache:
    point_caches: list[DenseCache]
    argmax: np.ndarray
    n_points: int
    head_cache: DenseCache


class SetEncoder:
    """PointNet-style encoder: shared per-point MLP, max pool, linear head."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        output_dim: int = 256,
        point_widths: Sequence[int] = (64, 128, 256),
        rng: np.random.Generator | None = None,
    ):
        self.point_mlp = Mlp(store, f"{name}.point", (3, *point_widths), final="relu", rng=rng)
        self.head = DenseLayer(store, f"{name}.head", point_widths[-1], output_dim, rng=rng)
        self.output_dim = output_dim

    def forward(self, points: np.ndarray) -> tuple[np.ndarray, EncoderCache]:
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
            raise ValueError(f"encoder expects a non-empty (n, 3) cloud, got shape {points.shape}")
        h, caches = self.point_mlp.forward(points)
        argmax = np.argmax(h, axis=0)
        pooled = h[argmax, np.arange(h.shape[1])]
        code, head_cache = self.head.forward(pooled)
        return code, EncoderCache(caches, argmax, len(points), head_cache)

    def encode(self, points: np.ndarray) -> np.ndarray:
        return self.forward(points)[0]

    def backward(self, cache: EncoderCache, dcode: np.ndarray) -> np.ndarray:
        dpooled = self.head.backward(cache.head_cache, dcode)
        dh = np.zeros((cache.n_points, len(dpooled)))
        dh[cache.argmax, np.arange(len(dpooled))] = dpooled
        return self.point_mlp.backward(cache.point_caches, dh)
