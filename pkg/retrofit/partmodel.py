"""
Part-segmented source shapes and their deformation space.

Each part owns an axis-aligned box with 6 parameters (center xyz, dims xyz).
Points move with their box through normalised box coordinates:

    x' = c + (x - c_default) * (d / d_default)

which is evaluated as x + (c - c_default) + (x - c_default) * ((d - d_default) / d_default)
so that a zero offset reproduces the default samples bit-for-bit.

Contacts between parts become linear equations on the parameters; the
projector onto their nullspace maps any offset to the nearest feasible one.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import trimesh
from numpy.typing import NDArray
from scipy.linalg import null_space

from .geometry import MIN_DIM, Aabb, PointCloud, chamfer, chamfer_gradients, reflect_yz

logger = logging.getLogger(__name__)

# Flat parameter vector, 6 entries per part: [cx, cy, cz, sx, sy, sz, ...]
DeformationParams = NDArray[np.float64]

PARAMS_PER_PART = 6
DEFAULT_TAU = 0.05
RANK_RTOL = 1e-10


def flatten_boxes(boxes: list[Aabb]) -> DeformationParams:
    return np.concatenate([np.concatenate([b.center, b.dims]) for b in boxes]).astype(np.float64)


def unflatten_params(values: DeformationParams) -> tuple[np.ndarray, np.ndarray]:
    """Split a flat parameter vector into (centers, dims), each (n_parts, 3)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or len(values) % PARAMS_PER_PART:
        raise ValueError(f"parameter vector length {values.size} is not a multiple of 6")
    blocks = values.reshape(-1, PARAMS_PER_PART)
    return blocks[:, :3], blocks[:, 3:]


@dataclass(frozen=True, eq=False)
class Part:
    """One box-handled part with the surface samples it owns."""

    id: int
    box: Aabb
    points: np.ndarray
    mesh: trimesh.Trimesh | None = None

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError(f"part {self.id} has no samples")
        if not self.box.contains(points).all():
            raise ValueError(f"part {self.id} has samples outside its box")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)


@dataclass(frozen=True)
class Contact:
    part_i: int
    part_j: int
    point: tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class ConstraintSystem:
    """Contacts, the constraint matrix B and the nullspace projector Q Q^T."""

    contacts: tuple[Contact, ...]
    B: np.ndarray
    projector: np.ndarray

    @property
    def n_params(self) -> int:
        return self.projector.shape[0]

    def residual(self, offset) -> np.ndarray:
        return self.B @ np.asarray(offset, dtype=np.float64)


@dataclass(eq=False)
class SourceShape:
    """A database model: parts, their default boxes and the contact constraints."""

    name: str
    parts: list[Part]
    constraint: ConstraintSystem = field(default=None)  # filled by extract_contacts

    def __post_init__(self):
        if not self.parts:
            raise ValueError(f"shape {self.name!r} has no parts")
        ids = [p.id for p in self.parts]
        if len(set(ids)) != len(ids):
            raise ValueError(f"shape {self.name!r} has duplicate part ids")
        if self.constraint is None:
            self.constraint = extract_contacts(self)
        elif self.constraint.n_params != self.n_params:
            raise ValueError(
                f"constraint system has {self.constraint.n_params} columns, "
                f"shape {self.name!r} has {self.n_params} parameters"
            )

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    @property
    def n_params(self) -> int:
        return PARAMS_PER_PART * len(self.parts)

    @cached_property
    def default_params(self) -> DeformationParams:
        values = flatten_boxes([p.box for p in self.parts])
        values.setflags(write=False)
        return values

    @cached_property
    def default_points(self) -> np.ndarray:
        points = np.concatenate([p.points for p in self.parts])
        points.setflags(write=False)
        return points

    @cached_property
    def default_cloud(self) -> PointCloud:
        return PointCloud(self.default_points)

    @cached_property
    def point_part(self) -> np.ndarray:
        """Part index of every default sample."""
        return np.repeat(np.arange(self.n_parts), [len(p.points) for p in self.parts])

    @cached_property
    def part_starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([len(p.points) for p in self.parts])[:-1]])

    @cached_property
    def box_coords(self) -> np.ndarray:
        """(x - c_default) / d_default for every sample."""
        centers, dims = unflatten_params(self.default_params)
        return (self.default_points - centers[self.point_part]) / dims[self.point_part]

    def boxes(self, params: DeformationParams | None = None) -> list[Aabb]:
        centers, dims = unflatten_params(self.default_params if params is None else params)
        return [Aabb(c, d) for c, d in zip(centers, dims, strict=True)]


# =============================================================================
# Deformation map
# =============================================================================


@dataclass
class Deformed:
    """Deformed samples plus what the gradient needs."""

    points: np.ndarray
    dims_clamped: np.ndarray  # (n_parts, 3) bool


def _deform(shape: SourceShape, offset, alpha: float, clamp: bool) -> Deformed:
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != (shape.n_params,):
        raise ValueError(f"offset has length {offset.size}, shape {shape.name!r} needs {shape.n_params}")

    default_c, default_d = unflatten_params(shape.default_params)
    c, d = unflatten_params(shape.default_params + alpha * offset)
    clamped = d < MIN_DIM
    if clamped.any():
        if not clamp:
            raise ValueError(f"deformation of {shape.name!r} gives non-positive part dims")
        d = np.where(clamped, MIN_DIM, d)

    k = shape.point_part
    x = shape.default_points
    rel = (x - default_c[k]) * ((d - default_d) / default_d)[k]
    return Deformed(points=x + (c - default_c)[k] + rel, dims_clamped=clamped)


def apply_deformation(shape: SourceShape, offset, alpha: float = 0.1, clamp: bool = False) -> PointCloud:
    """
    Deform the shape's samples with parameters p_default + alpha * offset.

    Raises:
        ValueError: on a size mismatch, or non-positive dims when clamp is False
    """
    return PointCloud(_deform(shape, offset, alpha, clamp).points)


def deformed_boxes(shape: SourceShape, offset, alpha: float = 0.1) -> list[Aabb]:
    return shape.boxes(shape.default_params + alpha * np.asarray(offset, dtype=np.float64))


# =============================================================================
# Connectivity constraints
# =============================================================================


def extract_contacts(shape: SourceShape, tau: float = DEFAULT_TAU) -> ConstraintSystem:
    """
    Find contacts between part pairs and build the constraint system.

    Two parts are connected when their closest pair of box keypoints is closer
    than tau; the contact is the midpoint of that pair. Ties go to the lowest
    (keypoint i, keypoint j) pair.
    """
    boxes = [p.box for p in shape.parts]
    keypoints = [b.keypoints() for b in boxes]
    contacts = []
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            diff = keypoints[i][:, None, :] - keypoints[j][None, :, :]
            dist = np.sqrt(np.einsum("abk,abk->ab", diff, diff))
            flat = int(np.argmin(dist))  # row-major: lexicographic tie-break
            a, b = divmod(flat, dist.shape[1])
            if dist[a, b] < tau:
                point = (keypoints[i][a] + keypoints[j][b]) / 2.0
                contacts.append(Contact(i, j, tuple(float(v) for v in point)))
    return constraint_system(boxes, contacts)


def constraint_system(boxes: list[Aabb], contacts) -> ConstraintSystem:
    """Build B and the projector from known contacts."""
    n_params = PARAMS_PER_PART * len(boxes)
    B = np.zeros((3 * len(contacts), n_params))
    for row, contact in enumerate(contacts):
        k = np.asarray(contact.point, dtype=np.float64)
        for sign, part in ((1.0, contact.part_i), (-1.0, contact.part_j)):
            if not 0 <= part < len(boxes):
                raise ValueError(f"contact refers to part {part}, shape has {len(boxes)}")
            box = boxes[part]
            w = (k - box.center) / box.dims
            base = PARAMS_PER_PART * part
            for axis in range(3):
                B[3 * row + axis, base + axis] += sign
                B[3 * row + axis, base + 3 + axis] += sign * w[axis]

    if len(contacts) == 0:
        projector = np.eye(n_params)
    else:
        Q = null_space(B, rcond=RANK_RTOL)
        projector = Q @ Q.T
        projector = (projector + projector.T) / 2.0
    B.setflags(write=False)
    projector.setflags(write=False)
    return ConstraintSystem(tuple(contacts), B, projector)


def project_offset(cs: ConstraintSystem, offset) -> DeformationParams:
    """Nearest (Euclidean) offset that keeps every contact attached."""
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != (cs.n_params,):
        raise ValueError(f"offset has length {offset.size}, projector expects {cs.n_params}")
    return cs.projector @ offset


def contact_gaps(shape: SourceShape, offset, alpha: float = 0.1) -> np.ndarray:
    """Distance between the two part-frame images of every contact after deformation."""
    centers, dims = unflatten_params(shape.default_params + alpha * np.asarray(offset, dtype=np.float64))
    gaps = []
    for contact in shape.constraint.contacts:
        k = np.asarray(contact.point)
        images = []
        for part in (contact.part_i, contact.part_j):
            box = shape.parts[part].box
            images.append(centers[part] + (k - box.center) / box.dims * dims[part])
        gaps.append(np.linalg.norm(images[0] - images[1]))
    return np.asarray(gaps)


# =============================================================================
# Losses and gradients
# =============================================================================


def symmetry_loss(deformed) -> float:
    """Chamfer between a cloud and its mirror image about the yz-plane."""
    return chamfer(deformed, reflect_yz(deformed))


def symmetry_gradient(points: np.ndarray) -> tuple[float, np.ndarray]:
    value, g_a, g_b = chamfer_gradients(points, reflect_yz(points))
    return value, g_a + reflect_yz(g_b)


@dataclass
class FitEvaluation:
    chamfer: float
    symmetry: float
    gradient: np.ndarray  # with respect to the offset passed in

    @property
    def loss(self) -> float:
        return self.chamfer + self.symmetry


def fit_evaluate(shape: SourceShape, offset, alpha: float, target, *, use_projection: bool = False,
                 symmetry_weight: float = 1.0, target_index=None) -> FitEvaluation:
    """
    Loss chamfer(D(offset), target) + w * symmetry and its gradient wrt the offset.

    With use_projection the shape is deformed by P @ offset and the gradient is
    P @ (gradient at the projected offset).
    """
    offset = np.asarray(offset, dtype=np.float64)
    P = shape.constraint.projector if use_projection else None
    effective = P @ offset if P is not None else offset
    deformed = _deform(shape, effective, alpha, clamp=True)

    value, grad_points, _ = chamfer_gradients(deformed.points, target, index_b=target_index)
    symm = 0.0
    if symmetry_weight:
        symm, g_symm = symmetry_gradient(deformed.points)
        symm *= symmetry_weight
        grad_points = grad_points + symmetry_weight * g_symm

    grad = alpha * points_to_param_gradient(shape, grad_points, deformed.dims_clamped)
    if P is not None:
        grad = P @ grad
    return FitEvaluation(value, symm, grad)


def points_to_param_gradient(shape: SourceShape, grad_points: np.ndarray,
                             dims_clamped: np.ndarray | None = None) -> np.ndarray:
    """Pull a per-point gradient back onto the (center, dims) parameters."""
    starts = shape.part_starts
    g_center = np.add.reduceat(grad_points, starts, axis=0)
    g_dims = np.add.reduceat(grad_points * shape.box_coords, starts, axis=0)
    if dims_clamped is not None:
        g_dims = np.where(dims_clamped, 0.0, g_dims)
    return np.concatenate([g_center, g_dims], axis=1).reshape(-1)


def fit_gradient(shape: SourceShape, offset, alpha: float, target, *, use_projection: bool = False,
                 symmetry_weight: float = 1.0) -> np.ndarray:
    """Gradient of chamfer + symmetry loss with respect to the offset."""
    return fit_evaluate(
        shape, offset, alpha, target, use_projection=use_projection, symmetry_weight=symmetry_weight
    ).gradient
