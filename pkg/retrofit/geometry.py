"""
Point-cloud primitives.

Provides:
- PointCloud / Aabb value types
- Exact nearest-neighbour index (kd-tree)
- Chamfer distance and its gradient
- yz-plane reflection
- Area-weighted surface sampling
- PLY / JSON / OBJ serialisation
"""

import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import trimesh
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

MIN_DIM = 1e-4  # smallest box extent; flat parts are clamped to this

# 26 keypoint directions of a box in normalised coordinates, (0,0,0) excluded.
# Corners have no zero component, edge midpoints one, face centres two.
KEYPOINT_DIRECTIONS = np.array(
    [d for d in itertools.product((-0.5, 0.0, 0.5), repeat=3) if any(d)], dtype=np.float64
)


def _as_points(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.points
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An immutable (n, 3) array of finite positions, n > 0."""

    points: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("point cloud is empty")
        if not np.isfinite(points).all():
            raise ValueError("point cloud has non-finite coordinates")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self) -> int:
        return len(self.points)

    def to_json(self) -> list[list[float]]:
        return self.points.tolist()

    @classmethod
    def from_json(cls, data) -> "PointCloud":
        return cls(np.asarray(data, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Aabb:
    """Axis-aligned box given by its centre and full extents."""

    center: np.ndarray
    dims: np.ndarray

    def __post_init__(self):
        center = np.array(self.center, dtype=np.float64).reshape(3)
        dims = np.maximum(np.array(self.dims, dtype=np.float64).reshape(3), MIN_DIM)
        if not (np.isfinite(center).all() and np.isfinite(dims).all()):
            raise ValueError("box has non-finite center or dims")
        center.setflags(write=False)
        dims.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def from_bounds(cls, lo, hi) -> "Aabb":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        return cls((lo + hi) / 2.0, hi - lo)

    @classmethod
    def from_points(cls, points) -> "Aabb":
        pts = _as_points(points)
        return cls.from_bounds(pts.min(axis=0), pts.max(axis=0))

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.dims / 2.0

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.dims / 2.0

    def keypoints(self) -> np.ndarray:
        """Corners, edge midpoints and face centres (26, 3) in KEYPOINT_DIRECTIONS order."""
        return self.center + KEYPOINT_DIRECTIONS * self.dims

    def contains(self, points, inflate: float = 1e-6) -> np.ndarray:
        pts = _as_points(points)
        return np.all((pts >= self.lo - inflate) & (pts <= self.hi + inflate), axis=1)

    def to_mesh(self) -> trimesh.Trimesh:
        return trimesh.creation.box(
            extents=self.dims, transform=trimesh.transformations.translation_matrix(self.center)
        )

    def to_json(self) -> dict:
        return {"center": self.center.tolist(), "dims": self.dims.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "Aabb":
        return cls(data["center"], data["dims"])


class SpatialIndex:
    """Exact nearest-neighbour queries over a fixed cloud."""

    def __init__(self, cloud):
        points = _as_points(cloud)
        if len(points) == 0:
            raise ValueError("cannot index an empty cloud")
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Return (squared distance, index) of the nearest indexed point per query."""
        q = _as_points(queries)
        _, idx = self._tree.query(q, k=1, eps=0.0)
        idx = np.asarray(idx, dtype=np.intp)
        diff = q - self.points[idx]
        return np.einsum("ij,ij->i", diff, diff), idx


def build_index(cloud) -> SpatialIndex:
    """Index a cloud for repeated nearest-neighbour queries."""
    return SpatialIndex(cloud)


@dataclass
class ChamferResult:
    """Chamfer value with the nearest-neighbour assignments it used."""

    value: float
    nn_ab: np.ndarray  # for each point of a, index into b
    nn_ba: np.ndarray  # for each point of b, index into a


def chamfer_assign(a, b, index_a: SpatialIndex | None = None,
                   index_b: SpatialIndex | None = None) -> ChamferResult:
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer of an empty cloud")
    index_a = index_a or build_index(pa)
    index_b = index_b or build_index(pb)
    d_ab, nn_ab = index_b.query(pa)
    d_ba, nn_ba = index_a.query(pb)
    return ChamferResult(float(d_ab.mean() + d_ba.mean()), nn_ab, nn_ba)


def chamfer(a, b, index_a: SpatialIndex | None = None, index_b: SpatialIndex | None = None) -> float:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    return chamfer_assign(a, b, index_a, index_b).value


def chamfer_gradients(a, b, index_b: SpatialIndex | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """
    Chamfer value and its gradients with respect to both point sets.

    Nearest-neighbour assignments are held fixed (the usual chamfer subgradient).

    Returns:
        (value, d/da of shape (n_a, 3), d/db of shape (n_b, 3))
    """
    pa, pb = _as_points(a), _as_points(b)
    res = chamfer_assign(pa, pb, index_b=index_b)
    na, nb = len(pa), len(pb)

    r_ab = pa - pb[res.nn_ab]  # a_i - b_nn(i)
    r_ba = pb - pa[res.nn_ba]  # b_j - a_nn(j)

    grad_a = (2.0 / na) * r_ab
    grad_b = (2.0 / nb) * r_ba
    np.add.at(grad_a, res.nn_ba, (-2.0 / nb) * r_ba)
    np.add.at(grad_b, res.nn_ab, (-2.0 / na) * r_ab)
    return res.value, grad_a, grad_b


def reflect_yz(cloud):
    """Negate x. Returns the same type it was given."""
    if isinstance(cloud, PointCloud):
        return PointCloud(reflect_yz(cloud.points))
    pts = np.array(_as_points(cloud), dtype=np.float64)
    pts[:, 0] = -pts[:, 0]
    return pts


def sample_surface(geometry, n: int, seed=None) -> PointCloud:
    """
    Sample n points uniformly by area over a triangle surface.

    Args:
        geometry: a trimesh.Trimesh, an Aabb, a list of either, or a
            (vertices, faces) pair
        n: number of points
        seed: seed or numpy Generator

    Raises:
        ValueError: if the total surface area is zero
    """
    vertices, faces = _triangles(geometry)
    tri = vertices[faces]  # (F, 3, 3)
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    total = areas.sum()
    if not total > 0:
        raise ValueError("surface has zero area")
    if n < 1:
        raise ValueError("sample count must be >= 1")

    rng = np.random.default_rng(seed)
    face = rng.choice(len(faces), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    t = tri[face]
    points = t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])
    return PointCloud(points)


def _triangles(geometry) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(geometry, trimesh.Trimesh):
        return np.asarray(geometry.vertices, dtype=np.float64), np.asarray(geometry.faces)
    if isinstance(geometry, Aabb):
        return _triangles(geometry.to_mesh())
    if isinstance(geometry, tuple) and len(geometry) == 2:
        return np.asarray(geometry[0], dtype=np.float64), np.asarray(geometry[1], dtype=np.intp)
    if isinstance(geometry, (list, tuple)):
        meshes = [g if isinstance(g, trimesh.Trimesh) else g.to_mesh() for g in geometry]
        return _triangles(trimesh.util.concatenate(meshes))
    raise TypeError(f"cannot sample {type(geometry).__name__}")


# =============================================================================
# Serialisation
# =============================================================================


def save_ply(cloud, path: str | Path):
    """Write a binary little-endian PLY point cloud."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = trimesh.PointCloud(_as_points(cloud)).export(file_type="ply", encoding="binary")
    path.write_bytes(data)


def load_cloud(path: str | Path) -> PointCloud:
    """Read a point cloud from .ply / .obj (vertices) or a JSON array of triples."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        with open(path, encoding="utf-8") as f:
            return PointCloud.from_json(json.load(f))
    loaded = trimesh.load(path, process=False)
    vertices = getattr(loaded, "vertices", None)
    if vertices is None or len(vertices) == 0:
        raise ValueError(f"{path}: no vertices found")
    return PointCloud(np.asarray(vertices, dtype=np.float64))


def save_cloud_json(cloud, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_as_points(cloud).tolist(), f)


def export_boxes_obj(boxes: list[Aabb], path: str | Path):
    """Write a list of boxes as one OBJ of cuboids."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mesh = trimesh.util.concatenate([box.to_mesh() for box in boxes])
    path.write_text(mesh.export(file_type="obj"), encoding="utf-8")
    logger.debug("wrote %d boxes to %s", len(boxes), path)
