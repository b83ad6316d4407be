"""Property-based checks of invariants that must hold for any valid input."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import pixel_center_fill
from probcontour.inference import PredictiveDistribution, chi2_2dof_quantile, confidence_ellipse, vertex_marginal
from probcontour.metrics import dice, rasterize, rmse
from probcontour.shape_model import fit_pca

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@pytest.mark.filterwarnings("ignore:degenerate contour")
@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(3, 8).map(lambda v: 2 * v), elements=st.floats(0, 20)))
def test_rasterize_matches_oracle(poly):
    np.testing.assert_array_equal(rasterize(poly, 20, 20), pixel_center_fill(poly, 20, 20))


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (8, 8)), arrays(bool, (8, 8)))
def test_dice_symmetric_and_bounded(a, b):
    d = dice(a, b)
    assert d == dice(b, a) and 0.0 <= d <= 1.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 10, elements=finite), arrays(np.float64, 10, elements=finite))
def test_rmse_symmetric_nonnegative(a, b):
    assert rmse(a, b) == rmse(b, a) >= 0.0


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-6, 0.9999))
def test_chi2_quantile_inverts_cdf(level):
    assert abs(1 - np.exp(-chi2_2dof_quantile(level) / 2) - level) < 1e-12


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 1), elements=st.floats(-3, 3)), st.floats(0.0, 4.0), st.floats(1e-3, 2.0),
       st.floats(0.01, 0.99))
def test_marginal_ellipse_axes_ordered(factor, v, sigma2, level):
    d = PredictiveDistribution(np.zeros(4), factor, np.zeros(1), np.array([v]), sigma2)
    for i in range(2):
        e = confidence_ellipse(*vertex_marginal(d, i), level)
        assert e.semi_axes[0] >= e.semi_axes[1] >= np.sqrt(sigma2 * chi2_2dof_quantile(level)) * (1 - 1e-9)
        assert 0 <= e.angle < np.pi


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pca_orthonormal_and_round_trip(seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(10, 3, (12, 8))
    m = fit_pca(y, 8, strict=False)
    np.testing.assert_allclose(m.components_.T @ m.components_, np.eye(8), atol=1e-10)
    assert np.all(np.diff(m.eigenvalues_) <= 0)
    np.testing.assert_allclose(m.decode(m.project(y[0])), y[0], atol=1e-8)
