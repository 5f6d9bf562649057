"""Shared fixtures and finite-difference helpers."""

import numpy as np
import pytest

from retrofit.config import ModelConfig
from retrofit.corpus import GenSpec, generate_database
from retrofit.geometry import Aabb, sample_surface
from retrofit.partmodel import Part, SourceShape


def numerical_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f() with respect to array x, perturbed in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        plus = f()
        flat[i] = old - h
        minus = f()
        flat[i] = old
        out[i] = (plus - minus) / (2 * h)
    return grad


def assert_gradient(analytic, numeric, rtol: float = 1e-4, atol: float = 1e-7):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def make_shape(boxes: list[Aabb], n_per_part: int = 16, seed: int = 0, name: str = "toy") -> SourceShape:
    rng = np.random.default_rng(seed)
    parts = [Part(i, box, sample_surface(box, n_per_part, seed=rng).points) for i, box in enumerate(boxes)]
    return SourceShape(name, parts)


def seat_and_leg() -> list[Aabb]:
    """A board with one leg underneath, touching at a shared corner."""
    return [
        Aabb.from_bounds((-0.5, 0.0, -0.4), (0.5, 0.2, 0.4)),
        Aabb.from_bounds((0.3, -0.6, 0.2), (0.5, 0.0, 0.4)),
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_shape() -> SourceShape:
    return make_shape(seat_and_leg(), n_per_part=16)


@pytest.fixture
def tiny_model() -> ModelConfig:
    return ModelConfig(
        global_code_dim=6,
        part_code_dim=3,
        target_code_dim=6,
        retrieval_code_dim=5,
        point_widths=(6, 8),
        hidden_widths=(8, 6),
    )


@pytest.fixture(scope="session")
def tiny_db() -> list[SourceShape]:
    return generate_database(GenSpec(n_points=64, seed=3), 6)
