import numpy as np
import pytest

from gbx.errors import ValidationError
from gbx.render.brdf import (MaterialParams, brdf_components, brdf_eval,
                             fibonacci_hemisphere, ggx_D,
                             ggx_normalization_quadrature, schlick_F, smith_G)


def quadrature_lambda(cos_theta, alpha, n=1 << 20):
    """Independent route to the Smith Lambda via the projected-area identity:
    integral of (w.m)+ D(m) dm over the hemisphere equals cos0 * (1 + Lambda).
    """
    m = fibonacci_hemisphere(n)
    w = np.array([np.sqrt(1 - cos_theta ** 2), 0.0, cos_theta])
    d = ggx_D(m[:, 2], alpha)
    proj = np.maximum(m @ w, 0.0)
    integral = np.sum(proj * d) * (2 * np.pi / n)
    return integral / cos_theta - 1.0


class TestGgxD:
    def test_alpha_one_is_constant(self):
        for ndoth in (0.1, 0.5, 0.9, 1.0):
            assert ggx_D(ndoth, 1.0) == pytest.approx(1 / np.pi)

    def test_closed_form_peak(self):
        assert ggx_D(1.0, 0.5) == pytest.approx(1 / (np.pi * 0.25))

    def test_lower_hemisphere_zero(self):
        assert ggx_D(-0.3, 0.5) == 0.0

    def test_bad_alpha(self):
        with pytest.raises(ValidationError):
            ggx_D(0.5, 0.0)

    @pytest.mark.parametrize("alpha", [0.1, 0.3, 0.5, 1.0])
    def test_normalization_quadrature(self, alpha):
        assert ggx_normalization_quadrature(alpha, 4096) == pytest.approx(1.0, abs=0.02)


class TestSmithG:
    def test_smooth_limit(self):
        assert smith_G(0.7, 0.9, 1e-6) == pytest.approx(1.0, abs=1e-9)

    def test_normal_incidence(self):
        assert smith_G(1.0, 1.0, 0.7) == 1.0

    def test_bounded(self):
        g = smith_G(np.linspace(0.05, 1, 20), 0.6, 0.8)
        assert np.all(g > 0) and np.all(g <= 1)

    def test_nonpositive_cosine_rejected(self):
        with pytest.raises(ValidationError):
            smith_G(0.0, 0.5, 0.5)

    def test_against_projected_area_quadrature(self):
        # alpha=1, both cosines 0.5; closed form gives exactly 0.5
        lam = quadrature_lambda(0.5, 1.0)
        oracle = 1.0 / (1.0 + 2 * lam)
        assert smith_G(0.5, 0.5, 1.0) == pytest.approx(oracle, abs=0.01)
        assert smith_G(0.5, 0.5, 1.0) == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("alpha,ci,co", [(0.3, 0.8, 0.4), (0.7, 0.25, 0.9)])
    def test_more_quadrature_points(self, alpha, ci, co):
        oracle = 1.0 / (1.0 + quadrature_lambda(ci, alpha) + quadrature_lambda(co, alpha))
        assert smith_G(ci, co, alpha) == pytest.approx(oracle, abs=0.01)


class TestSchlickF:
    def test_normal_incidence_returns_f0(self):
        f0 = np.array([0.04, 0.5, 1.0])
        assert np.allclose(schlick_F(1.0, f0), f0)

    def test_grazing_is_white(self):
        assert np.allclose(schlick_F(0.0, np.array([0.04, 0.2, 0.9])), 1.0)

    def test_half_angle_closed_form(self):
        assert schlick_F(0.5, 0.04) == pytest.approx(0.07)

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            schlick_F(-0.1, 0.04)


class TestBrdfEval:
    def setup_method(self):
        self.n = np.array([0.0, 0.0, 1.0])
        self.wi = np.array([0.3, 0.1, 1.0])
        self.wi /= np.linalg.norm(self.wi)
        self.wo = np.array([-0.4, 0.2, 0.9])
        self.wo /= np.linalg.norm(self.wo)

    def test_metal_has_no_diffuse(self):
        mat = MaterialParams((0.9, 0.7, 0.3), 0.4, 1.0)
        diffuse, _ = brdf_components(mat, self.n, self.wi, self.wo)
        assert np.all(diffuse == 0.0)

    def test_dielectric_diffuse_value(self):
        mat = MaterialParams((0.5, 0.5, 0.5), 1.0, 0.0)
        diffuse, specular = brdf_components(mat, self.n, self.n, self.n)
        assert np.allclose(diffuse, 0.5 / np.pi)
        assert np.all(specular > 0) and np.all(specular < 0.1)

    def test_rough_white_specular_closed_form(self):
        # n = wi = wo: D=1/pi at alpha=1, G=1, F=F0 -> spec = 0.04/(4*pi)
        mat = MaterialParams((1.0, 1.0, 1.0), 1.0, 0.0)
        _, specular = brdf_components(mat, self.n, self.n, self.n)
        assert np.allclose(specular, 0.04 / (4 * np.pi), atol=1e-12)

    def test_helmholtz_reciprocity_exact(self):
        mat = MaterialParams((0.6, 0.4, 0.2), 0.35, 0.5)
        a = brdf_eval(mat, self.n, self.wi, self.wo)
        b = brdf_eval(mat, self.n, self.wo, self.wi)
        assert np.array_equal(a, b)

    def test_nonnegative_finite(self, rng):
        for _ in range(50):
            v = rng.standard_normal((2, 3))
            v[:, 2] = np.abs(v[:, 2]) + 0.05
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            mat = MaterialParams(tuple(rng.random(3)),
                                 float(0.04 + 0.96 * rng.random()), float(rng.random()))
            val = brdf_eval(mat, self.n, v[0], v[1])
            assert np.all(val >= 0) and np.all(np.isfinite(val))

    def test_backfacing_rejected(self):
        mat = MaterialParams((0.5, 0.5, 0.5), 0.5, 0.0)
        with pytest.raises(ValidationError):
            brdf_eval(mat, self.n, np.array([0.0, 0.0, -1.0]), self.wo)

    def test_material_param_ranges(self):
        with pytest.raises(ValidationError):
            MaterialParams((0.5, 0.5, 0.5), 0.0, 0.0)   # below roughness floor
        with pytest.raises(ValidationError):
            MaterialParams((1.5, 0.5, 0.5), 0.5, 0.0)
        f0 = MaterialParams((0.8, 0.6, 0.4), 0.5, 0.5).f0
        assert np.all((f0 >= 0.04) & (f0 <= 1.0))
