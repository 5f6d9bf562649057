import numpy as np
import pytest

from retrofit.geometry import Aabb, chamfer
from retrofit.partmodel import (
    Part,
    SourceShape,
    apply_deformation,
    contact_gaps,
    deformed_boxes,
    extract_contacts,
    fit_evaluate,
    fit_gradient,
    project_offset,
    symmetry_loss,
)

from .conftest import assert_gradient, make_shape, numerical_gradient, seat_and_leg


def test_zero_offset_reproduces_default_samples(toy_shape):
    deformed = apply_deformation(toy_shape, np.zeros(toy_shape.n_params))
    np.testing.assert_array_equal(deformed.points, toy_shape.default_points)


def test_deformation_maps_box_frame(toy_shape, rng):
    offset = rng.normal(scale=0.5, size=toy_shape.n_params)
    alpha = 0.1
    deformed = apply_deformation(toy_shape, offset, alpha).points
    params = toy_shape.default_params + alpha * offset
    for k, part in enumerate(toy_shape.parts):
        c, d = params[6 * k : 6 * k + 3], params[6 * k + 3 : 6 * k + 6]
        expected = c + (part.points - part.box.center) / part.box.dims * d
        rows = toy_shape.point_part == k
        np.testing.assert_allclose(deformed[rows], expected, atol=1e-12)


def test_deformed_boxes_follow_parameters(toy_shape):
    offset = np.zeros(toy_shape.n_params)
    offset[0] = 1.0
    boxes = deformed_boxes(toy_shape, offset, alpha=0.5)
    assert boxes[0].center[0] == pytest.approx(toy_shape.parts[0].box.center[0] + 0.5)


def test_strict_deformation_rejects_non_positive_dims(toy_shape):
    offset = np.zeros(toy_shape.n_params)
    offset[3] = -100.0
    with pytest.raises(ValueError):
        apply_deformation(toy_shape, offset)
    clamped = apply_deformation(toy_shape, offset, clamp=True)
    assert np.isfinite(clamped.points).all()


def test_offset_length_is_checked(toy_shape):
    with pytest.raises(ValueError):
        apply_deformation(toy_shape, np.zeros(toy_shape.n_params + 1))
    with pytest.raises(ValueError):
        project_offset(toy_shape.constraint, np.zeros(3))


def test_touching_parts_share_one_contact(toy_shape):
    cs = toy_shape.constraint
    assert len(cs.contacts) == 1
    contact = cs.contacts[0]
    assert (contact.part_i, contact.part_j) == (0, 1)
    np.testing.assert_allclose(contact.point, [0.5, 0.0, 0.4], atol=1e-12)
    assert cs.B.shape == (3, toy_shape.n_params)


def test_distant_parts_have_no_constraints():
    boxes = [Aabb([0, 0, 0], [1, 1, 1]), Aabb([5, 0, 0], [1, 1, 1])]
    shape = make_shape(boxes)
    assert shape.constraint.contacts == ()
    np.testing.assert_array_equal(shape.constraint.projector, np.eye(12))


def test_tau_controls_contact_detection():
    boxes = [Aabb([0, 0, 0], [1, 1, 1]), Aabb([1.02, 0, 0], [1, 1, 1])]
    shape = make_shape(boxes)
    assert len(extract_contacts(shape, tau=0.05).contacts) == 1
    assert len(extract_contacts(shape, tau=0.01).contacts) == 0


def test_projector_properties(tiny_db, rng):
    for shape in tiny_db:
        P = shape.constraint.projector
        np.testing.assert_allclose(P @ P, P, atol=1e-10)
        np.testing.assert_allclose(P, P.T, atol=1e-12)
        v = rng.normal(size=shape.n_params)
        assert np.abs(shape.constraint.residual(P @ v)).max() < 1e-8


def test_projected_offsets_keep_contacts_attached(tiny_db, rng):
    for shape in tiny_db:
        offset = project_offset(shape.constraint, rng.normal(scale=0.3, size=shape.n_params))
        gaps = contact_gaps(shape, offset)
        assert gaps.size == 0 or gaps.max() < 1e-6


def test_projection_is_nearest_feasible_offset(toy_shape, rng):
    v = rng.normal(size=toy_shape.n_params)
    projected = project_offset(toy_shape.constraint, v)
    # the residual is orthogonal to the feasible subspace
    np.testing.assert_allclose(toy_shape.constraint.projector @ (v - projected), 0.0, atol=1e-10)


def constrained_least_squares(B: np.ndarray, v: np.ndarray) -> np.ndarray:
    """argmin |x - v| subject to B x = 0, from the KKT system."""
    n, m = B.shape[1], B.shape[0]
    kkt = np.block([[np.eye(n), B.T], [B, np.zeros((m, m))]])
    rhs = np.concatenate([v, np.zeros(m)])
    solution, *_ = np.linalg.lstsq(kkt, rhs, rcond=1e-10)
    return solution[:n]


def test_projection_solves_the_constrained_least_squares_problem(tiny_db, toy_shape, rng):
    for shape in [toy_shape, *tiny_db]:
        for _ in range(3):
            v = rng.normal(size=shape.n_params)
            expected = constrained_least_squares(np.asarray(shape.constraint.B), v)
            np.testing.assert_allclose(project_offset(shape.constraint, v), expected, atol=1e-8)


def test_feasible_offsets_are_fixed_points(tiny_db, toy_shape, rng):
    # moving every part by the same vector keeps all contacts attached
    shift = np.zeros(toy_shape.n_params)
    shift[0:3] = shift[6:9] = [0.3, -0.2, 0.1]
    assert np.abs(toy_shape.constraint.residual(shift)).max() < 1e-12
    np.testing.assert_allclose(project_offset(toy_shape.constraint, shift), shift, atol=1e-10)

    for shape in tiny_db:
        feasible = project_offset(shape.constraint, rng.normal(size=shape.n_params))
        np.testing.assert_allclose(project_offset(shape.constraint, feasible), feasible, atol=1e-10)


def test_deformation_is_affine_within_each_part(rng):
    boxes = seat_and_leg()
    parts = []
    for i, box in enumerate(boxes):
        p = rng.uniform(box.lo, box.hi, size=(6, 3))
        q = rng.uniform(box.lo, box.hi, size=(6, 3))
        parts.append(Part(i, box, np.concatenate([p, q, (p + q) / 2.0, box.center[None, :]])))
    shape = SourceShape("affine", parts)

    for _ in range(5):
        offset = rng.normal(scale=0.3, size=shape.n_params)
        deformed = apply_deformation(shape, offset, alpha=0.1).points
        new_boxes = deformed_boxes(shape, offset, alpha=0.1)
        for k in range(shape.n_parts):
            pts = deformed[shape.point_part == k]
            p, q, mid, center = pts[:6], pts[6:12], pts[12:18], pts[18]
            np.testing.assert_allclose(mid, (p + q) / 2.0, atol=1e-12)
            np.testing.assert_allclose(center, new_boxes[k].center, atol=1e-12)


def test_fit_gradient_matches_finite_differences_across_shapes(tiny_db, rng):
    checked = 0
    for shape in tiny_db:
        for trial in range(4):
            use_projection = trial % 2 == 1
            weight = 0.0 if trial < 2 else 1.0
            target = rng.uniform(-0.8, 0.8, size=(40, 3))
            offset = rng.normal(scale=0.1, size=shape.n_params)

            def loss(shape=shape, target=target, offset=offset, p=use_projection, w=weight):
                return fit_evaluate(shape, offset, 0.1, target, use_projection=p, symmetry_weight=w).loss

            grad = fit_gradient(shape, offset, 0.1, target, use_projection=use_projection,
                                symmetry_weight=weight)
            assert_gradient(grad, numerical_gradient(loss, offset), rtol=1e-4, atol=1e-6)
            checked += 1
    assert checked >= 20


def test_gradient_vanishes_at_a_perfect_fit(tiny_db, rng):
    for shape in tiny_db:
        offset = project_offset(shape.constraint, rng.normal(scale=0.1, size=shape.n_params))
        target = apply_deformation(shape, offset, 0.1, clamp=True).points
        exact = fit_evaluate(shape, offset, 0.1, target, symmetry_weight=0.0)
        assert exact.chamfer == 0.0
        assert not exact.gradient.any()
        projected = fit_evaluate(shape, offset, 0.1, target, use_projection=True, symmetry_weight=0.0)
        assert projected.chamfer < 1e-20
        np.testing.assert_allclose(projected.gradient, 0.0, atol=1e-12)


def test_projected_gradient_is_feasible(tiny_db, rng):
    for shape in tiny_db:
        target = rng.uniform(-0.8, 0.8, size=(50, 3))
        offset = rng.normal(scale=0.2, size=shape.n_params)
        grad = fit_evaluate(shape, offset, 0.1, target, use_projection=True).gradient
        scale = max(1.0, np.abs(grad).max())
        assert np.abs(shape.constraint.residual(grad)).max() <= 1e-8 * scale


def test_symmetry_loss_of_single_point():
    assert symmetry_loss(np.array([[1.0, 0.0, 0.0]])) == pytest.approx(8.0)


def test_mirrored_set_has_zero_symmetry_loss(rng):
    points = rng.normal(size=(20, 3))
    mirrored = points * np.array([-1.0, 1.0, 1.0])
    assert symmetry_loss(np.concatenate([points, mirrored])) == 0.0


def test_part_validation():
    box = Aabb([0, 0, 0], [1, 1, 1])
    with pytest.raises(ValueError):
        Part(0, box, np.array([[2.0, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        Part(0, box, np.zeros((0, 3)))
    part = Part(0, box, np.zeros((1, 3)))
    with pytest.raises(ValueError):
        SourceShape("dup", [part, part])
    with pytest.raises(ValueError):
        SourceShape("empty", [])


@pytest.mark.parametrize("use_projection", [False, True])
def test_fit_gradient_matches_finite_differences(toy_shape, rng, use_projection):
    target = rng.uniform(-0.6, 0.6, size=(40, 3))
    offset = rng.normal(scale=0.3, size=toy_shape.n_params)

    def loss():
        return fit_evaluate(toy_shape, offset, 0.1, target, use_projection=use_projection).loss

    fit = fit_evaluate(toy_shape, offset, 0.1, target, use_projection=use_projection)
    assert_gradient(fit.gradient, numerical_gradient(loss, offset), rtol=1e-4, atol=1e-7)


def test_fit_evaluate_without_symmetry_is_chamfer(toy_shape, rng):
    target = rng.uniform(-0.6, 0.6, size=(25, 3))
    offset = rng.normal(scale=0.3, size=toy_shape.n_params)
    fit = fit_evaluate(toy_shape, offset, 0.1, target, symmetry_weight=0.0)
    assert fit.symmetry == 0.0
    assert fit.chamfer == pytest.approx(chamfer(apply_deformation(toy_shape, offset), target), rel=1e-12)


def test_shapes_are_built_from_seat_and_leg():
    shape = make_shape(seat_and_leg(), n_per_part=8)
    assert shape.n_parts == 2
    assert shape.n_params == 12
    assert len(shape.default_points) == 16
    np.testing.assert_array_equal(shape.part_starts, [0, 8])
