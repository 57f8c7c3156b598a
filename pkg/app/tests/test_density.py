import math

import numpy as np
import pytest
from scipy.special import ndtri
from scipy.stats import norm

from app.core.density import (
    DensityError,
    NegativeDensityError,
    VarDomainError,
    bl_density,
    default_grid,
    density_grid,
    implied_ccdf,
    implied_pdf,
    interior_minima,
    perturbation_factor,
    total_mass,
    value_at_risk,
)
from app.core.fixtures import HIGH_CHI_PARAMS
from app.core.models import SmileParams
from app.core.smile import SmileParamsError


class TestGaussianReduction:
    def test_pdf_is_normal(self, flat_params):
        p = flat_params
        xs = np.linspace(p.x_min - 5 * p.scale, p.x_min + 5 * p.scale, 100)
        expected = norm.pdf(xs, loc=-0.5 * p.g ** 2 * p.T, scale=p.scale)
        np.testing.assert_allclose(implied_pdf(p, xs), expected, rtol=1e-12)

    def test_factor_is_one(self, flat_params):
        xs = np.linspace(-1, 1, 21)
        np.testing.assert_array_equal(perturbation_factor(flat_params, xs), np.ones(21))

    def test_var_matches_gaussian_quantile(self, flat_params):
        p = flat_params
        expected = float(ndtri(0.99)) * p.scale + 0.5 * p.g ** 2 * p.T
        assert expected == pytest.approx(2.32635 * 0.2 + 0.02, abs=1e-5)
        result = value_at_risk(p, 0.01)
        assert result.lam == pytest.approx(expected, abs=1e-5)
        assert result.level == 0.01

    def test_var_at_half_is_drift(self, flat_params):
        p = flat_params
        assert value_at_risk(p, 0.5).lam == pytest.approx(0.5 * p.g ** 2 * p.T, abs=1e-9)

    def test_ccdf_is_normal_tail(self, flat_params):
        p = flat_params
        for x in (p.x_min - 0.3, p.x_min, p.x_min + 0.1, p.x_min + 0.6):
            expected = norm.sf(x, loc=p.x_min, scale=p.scale)
            assert implied_ccdf(p, x) == pytest.approx(expected, rel=1e-8, abs=1e-12)


class TestImpliedDensity:
    def test_total_mass(self, one_day_params):
        assert total_mass(one_day_params) == pytest.approx(1.0, abs=1e-6)

    def test_grid_norm_defect(self, one_day_params):
        grid = default_grid(one_day_params)
        assert grid.xs.size == 512
        assert grid.norm_defect <= 1e-3
        assert grid.negative_count == 0

    def test_grid_boundaries_and_monotonicity(self, one_day_params):
        grid = default_grid(one_day_params, n_points=256)
        assert np.all(grid.ccdf >= -1e-12)
        assert np.all(grid.ccdf <= 1 + 1e-12)
        assert np.all(np.diff(grid.ccdf) <= 1e-12)
        assert grid.ccdf[0] == pytest.approx(1.0, abs=1e-9)
        assert grid.ccdf[-1] == pytest.approx(0.0, abs=1e-9)

    def test_grid_agrees_with_pointwise_ccdf(self, one_day_params):
        p = one_day_params
        grid = density_grid(p, p.x_min - 6 * p.scale, p.x_min + 6 * p.scale, 64)
        for i in (0, 10, 31, 32, 50, 63):
            assert grid.ccdf[i] == pytest.approx(implied_ccdf(p, float(grid.xs[i])), abs=1e-8)

    def test_grid_rejects_bad_ranges(self, one_day_params):
        with pytest.raises(DensityError):
            density_grid(one_day_params, 0.1, -0.1)
        with pytest.raises(DensityError):
            density_grid(one_day_params, -0.1, 0.1, n_points=8)

    def test_invalid_params(self):
        with pytest.raises(SmileParamsError):
            density_grid(SmileParams(g=0.1, chi=0.5, n=1e-4, T=0.1), -0.1, 0.1)

    def test_negative_density_flagged(self):
        p = SmileParams.from_rho(g=0.1, chi=3.0, rho=2.5, T=30.0 / 365.0)
        grid = default_grid(p, n_points=256)
        assert grid.negative_count > 0
        assert np.all(perturbation_factor(p, grid.xs[grid.negative_mask]) < 0)

    def test_breeden_litzenberger(self, one_day_params, one_day_ctx):
        p = one_day_params
        xs = p.x_min + np.linspace(-2.0, 2.0, 10) * math.sqrt(p.n)
        np.testing.assert_allclose(bl_density(p, one_day_ctx, xs), implied_pdf(p, xs), rtol=1e-3)


class TestValueAtRisk:
    @pytest.mark.parametrize("level", [0.0, -0.1, 0.6, 1.0])
    def test_level_domain(self, one_day_params, level):
        with pytest.raises(VarDomainError):
            value_at_risk(one_day_params, level)

    def test_probability_is_met(self, one_day_params):
        p = one_day_params
        result = value_at_risk(p, 0.01)
        assert 1.0 - implied_ccdf(p, -result.lam) == pytest.approx(0.01, abs=1e-8)
        assert result.quadrature_error <= 1e-9

    def test_monotone_in_level(self, one_day_params):
        lams = [value_at_risk(one_day_params, level).lam for level in (0.001, 0.01, 0.05, 0.2)]
        assert lams == sorted(lams, reverse=True)

    def test_negative_density_is_an_error(self):
        p = SmileParams.from_rho(g=0.1, chi=3.0, rho=2.5, T=30.0 / 365.0)
        with pytest.raises(NegativeDensityError) as excinfo:
            value_at_risk(p, 0.01)
        lo, hi = excinfo.value.x_range
        assert lo <= hi < 0


class TestInteriorMinima:
    def test_flat_smile_has_none(self, flat_params):
        p = flat_params
        assert interior_minima(p, p.x_min - 8 * p.scale, p.x_min + 8 * p.scale) == []

    def test_steep_smile_has_one_each_side(self):
        p = HIGH_CHI_PARAMS
        width = math.sqrt(p.n)
        right = interior_minima(p, p.x_min, p.x_min + 3 * width)
        left = interior_minima(p, p.x_min - 3 * width, p.x_min)
        assert len(right) == 1 and len(left) == 1
        assert p.x_min + 0.5 * width < right[0] < p.x_min + 1.5 * width
