import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradirn import functional as F
from gradirn.gradcheck import numeric_gradient, rel_error
from gradirn.similarity import (NCC_GLOBAL, SSD, SimilarityKind, dissimilarity,
                                dissimilarity_gradient)
from gradirn.tensor import ShapeMismatchError, Tensor, no_tape, precision
from gradirn.transform import DisplacementField

KINDS = [SSD, NCC_GLOBAL, SimilarityKind.ncc_local(9), SimilarityKind.ncc_local(3)]


def img(a):
    return Tensor(np.asarray(a, dtype=np.float64).reshape(1, *np.shape(a)[-2:]))


def smooth_image(rng, n=12, shift=(0.0, 0.0)):
    ii, jj = np.indices((n, n), dtype=np.float64)
    f = np.zeros((n, n))
    for _ in range(3):
        c = rng.uniform(2, n - 3, 2)
        f += np.exp(-((ii - c[0] - shift[0]) ** 2 + (jj - c[1] - shift[1]) ** 2) / rng.uniform(4, 10))
    return f[None]


def test_ssd_examples():
    with precision(np.float64):
        assert dissimilarity(SSD, img([[0, 1]]), img([[1, 1]])).item() == 0.5
        a = img(np.arange(6.0).reshape(2, 3))
        assert dissimilarity(SSD, a, a).item() == 0


def test_global_ncc_of_anticorrelated_images_is_two(rng):
    a = rng.normal(size=(5, 5))
    with precision(np.float64):
        assert dissimilarity(NCC_GLOBAL, img(a), img(-a + 3)).item() == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: f"{k.name}-{k.window}")
def test_self_dissimilarity_vanishes(kind, rng):
    a = img(rng.uniform(size=(8, 8)))
    with precision(np.float64):
        assert abs(dissimilarity(kind, a, a).item()) < 1e-6


def test_constant_image_uses_variance_floor():
    with precision(np.float64):
        v = dissimilarity(NCC_GLOBAL, img(np.full((4, 4), 0.3)), img(np.arange(16.0).reshape(4, 4)))
    assert np.isfinite(v.item()) and v.item() == pytest.approx(1.0)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        dissimilarity(SSD, img(np.zeros((3, 3))), img(np.zeros((3, 4))))


def test_unknown_kind_and_bad_window():
    with pytest.raises(ValueError):
        SimilarityKind("mutual-information")
    with pytest.raises(ValueError):
        SimilarityKind.ncc_local(4)


def test_gradient_zero_at_identity_for_identical_images(rng):
    a = img(rng.uniform(size=(6, 6)))
    with precision(np.float64):
        g = dissimilarity_gradient(SSD, a, a, DisplacementField.zeros((6, 6)))
    np.testing.assert_array_equal(g.data, 0)


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: f"{k.name}-{k.window}")
def test_constant_moving_gives_zero_gradient(kind, rng):
    with precision(np.float64):
        d = DisplacementField(Tensor(rng.uniform(-1, 1, size=(2, 6, 6))))
        g = dissimilarity_gradient(kind, img(np.full((6, 6), 0.4)), img(rng.uniform(size=(6, 6))), d)
    np.testing.assert_array_equal(g.data, 0)


@pytest.mark.parametrize("kind", KINDS[:3], ids=lambda k: k.name)
@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences_6x6(kind, seed):
    rng = np.random.default_rng(seed)
    moving, fixed = img(rng.uniform(size=(6, 6))), img(rng.uniform(size=(6, 6)))
    disp = rng.uniform(-1.2, 1.2, size=(2, 6, 6))
    disp += 0.1 * (np.abs(disp - np.round(disp)) < 0.05)

    def f(d):
        with no_tape():
            return dissimilarity(kind, F.warp_bilinear(moving, Tensor(d)), fixed).item()

    with precision(np.float64):
        g = dissimilarity_gradient(kind, moving, fixed, DisplacementField(Tensor(disp))).data
        fd = numeric_gradient(f, disp.copy(), eps=1e-4)
    assert rel_error(g, fd) < 1e-3


def test_with_value_returns_the_dissimilarity(rng):
    moving, fixed = img(rng.uniform(size=(6, 6))), img(rng.uniform(size=(6, 6)))
    d = DisplacementField(Tensor(rng.uniform(-1, 1, size=(2, 6, 6))))
    with precision(np.float64):
        g, v = dissimilarity_gradient(SSD, moving, fixed, d, with_value=True)
        assert v.item() == dissimilarity(SSD, F.warp_bilinear(moving, d.grid), fixed).item()
        np.testing.assert_array_equal(g.data, dissimilarity_gradient(SSD, moving, fixed, d).data)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(0, 1)),
       hnp.arrays(np.float64, (4, 5), elements=st.floats(0, 1)))
def test_ssd_is_symmetric(a, b):
    with precision(np.float64):
        assert dissimilarity(SSD, img(a), img(b)).item() == dissimilarity(SSD, img(b), img(a)).item()


@pytest.mark.parametrize("kind", KINDS[:3], ids=lambda k: k.name)
def test_small_gradient_step_does_not_increase_dissimilarity(kind):
    n = 12
    for seed in range(20):
        rng = np.random.default_rng(seed)
        moving = img(smooth_image(rng, n))
        rng = np.random.default_rng(seed)
        fixed = img(smooth_image(rng, n, shift=(0.7, -0.4)))
        with precision(np.float64):
            d0 = DisplacementField.zeros((n, n))
            g, before = dissimilarity_gradient(kind, moving, fixed, d0, with_value=True)
            tau = 1e-3 * n * n / np.abs(g.data).max()
            d1 = Tensor(-tau * g.data)
            after = dissimilarity(kind, F.warp_bilinear(moving, d1), fixed)
        assert after.item() <= before.item()
