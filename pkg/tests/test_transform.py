import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradirn.tensor import ShapeMismatchError, Tensor, TensorError, precision
from gradirn.transform import (DisplacementField, compose, jacobian_determinant, jacobian_stats,
                               upsample_field)


def field(arr):
    return DisplacementField(Tensor(np.asarray(arr, dtype=np.float64)))


def affine(a, shape=(8, 9)):
    ii, jj = np.indices(shape, dtype=np.float64)
    return np.stack([a[0][0] * ii + a[0][1] * jj, a[1][0] * ii + a[1][1] * jj])


def constant(c, shape=(8, 8)):
    return np.stack([np.full(shape, c[0]), np.full(shape, c[1])]).astype(np.float64)


def test_zero_field_has_unit_determinant():
    det = jacobian_determinant(DisplacementField.zeros((5, 6)))
    np.testing.assert_array_equal(det, np.ones((1, 5, 6)))
    stats = jacobian_stats(DisplacementField.zeros((5, 6)))
    assert (stats.folding_fraction, stats.std_log_jac, stats.min_det) == (0, 0, 1)


def test_uniform_dilation_determinant():
    det = jacobian_determinant(affine([[0.1, 0], [0, 0.1]]))[0, 1:-1, 1:-1]
    np.testing.assert_allclose(det, 1.21, rtol=1e-12)
    stats = jacobian_stats(affine([[0.1, 0], [0, 0.1]]))
    assert stats.folding_fraction == 0
    assert stats.std_log_jac == pytest.approx(0, abs=1e-12)


def test_reflection_is_fully_folded():
    u = affine([[-2.0, 0], [0, 0]])
    np.testing.assert_allclose(jacobian_determinant(u)[0, 1:-1, 1:-1], -1.0)
    assert jacobian_stats(u).folding_fraction == 1.0


def test_determinant_needs_three_pixels():
    with pytest.raises(TensorError):
        jacobian_determinant(np.zeros((2, 2, 5)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-0.9, 0.9), min_size=4, max_size=4))
def test_affine_interior_determinant_matches_matrix(a):
    m = [[a[0], a[1]], [a[2], a[3]]]
    det = jacobian_determinant(affine(m))[0, 1:-1, 1:-1]
    expect = np.linalg.det(np.eye(2) + np.array(m))
    np.testing.assert_allclose(det, expect, atol=1e-12)


def test_compose_with_zero_is_identity(rng):
    with precision(np.float64):
        d = field(rng.normal(size=(2, 6, 6)))
        z = DisplacementField.zeros((6, 6))
        np.testing.assert_array_equal(compose(z, d).numpy(), d.numpy())
        np.testing.assert_array_equal(compose(d, z).numpy(), d.numpy())


def test_compose_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        compose(DisplacementField.zeros((4, 4)), DisplacementField.zeros((4, 6)))


@settings(max_examples=40, deadline=None)
@given(*[st.floats(-1.5, 1.5) for _ in range(6)])
def test_compose_constant_shifts_add_and_associate(a0, a1, b0, b1, c0, c1):
    with precision(np.float64):
        a, b, c = field(constant((a0, a1), (10, 10))), field(constant((b0, b1), (10, 10))), \
            field(constant((c0, c1), (10, 10)))
        inner = (slice(None), slice(4, 6), slice(4, 6))
        ab = compose(b, a).numpy()[inner]
        np.testing.assert_allclose(ab[0], a0 + b0, atol=1e-12)
        np.testing.assert_allclose(ab[1], a1 + b1, atol=1e-12)
        left = compose(c, compose(b, a)).numpy()[inner]
        right = compose(compose(c, b), a).numpy()[inner]
        np.testing.assert_allclose(left, right, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_upsample_doubles_constant_displacement(c0, c1):
    with precision(np.float64):
        up = upsample_field(DisplacementField(Tensor(constant((c0, c1), (3, 4))), level=1))
    assert up.shape == (6, 8) and up.level == 2
    np.testing.assert_allclose(up.numpy()[0], 2 * c0, atol=1e-12)
    np.testing.assert_allclose(up.numpy()[1], 2 * c1, atol=1e-12)


def test_upsample_zero_and_even_samples(rng):
    np.testing.assert_array_equal(upsample_field(DisplacementField.zeros((4, 4))).numpy(), 0)
    with precision(np.float64):
        d = field(rng.normal(size=(2, 4, 5)))
        up = upsample_field(d).numpy()
    np.testing.assert_allclose(up[:, ::2, ::2], 2 * d.numpy(), rtol=1e-12)


def test_displacement_field_validates_shape():
    with pytest.raises(TensorError):
        DisplacementField(Tensor(np.zeros((3, 4, 4))))
