import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from critfield.covmodels import (
    CovarianceModel,
    Family,
    bessel_f,
    bessel_g,
    c1,
    c1_second,
    c2_deriv,
    check_integrability,
    check_pairwise_nondegeneracy,
    moment_ratio,
    partial_c,
    spectral_moment,
    xi_envelope,
)
from critfield.errors import InsufficientSmoothness
from critfield.kacrice import scale_for_intensity

MODELS = [
    CovarianceModel.matern(1, 2.5, 1.0),
    CovarianceModel.matern(2, 3.5, 0.7),
    CovarianceModel.matern(3, 6.0, 1.3),
    CovarianceModel.gaussian(1, 1.0),
    CovarianceModel.gaussian(2, 0.5),
    CovarianceModel.random_wave(1, 1.0),
    CovarianceModel.random_wave(2, 1.5),
    CovarianceModel.random_wave(3, 1.0),
]


def mp_c2(model, s):
    """High-precision c2(s) from mpmath's Bessel functions."""
    s = mp.mpf(s)
    phi = mp.mpf(model.phi)
    if model.family is Family.GAUSSIAN_LIMIT:
        return mp.exp(-s / (2 * phi**2))
    if model.family is Family.MATERN:
        nu = mp.mpf(model.nu)
        z = mp.sqrt(2 * nu * s) / phi
        if z == 0:
            return mp.mpf(1)
        return 2 ** (1 - nu) / mp.gamma(nu) * z**nu * mp.besselk(nu, z)
    d = model.d
    mu = mp.mpf(d) / 2 - 1
    z = mp.sqrt(d * s) / phi
    if z == 0:
        return mp.mpf(1)
    return mp.gamma(mp.mpf(d) / 2) * (z / 2) ** (-mu) * mp.besselj(mu, z)


class TestConstruction:
    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            CovarianceModel.matern(2, -1.0, 1.0)
        with pytest.raises(ValueError):
            CovarianceModel.gaussian(2, 0.0)
        with pytest.raises(ValueError):
            CovarianceModel(Family.GAUSSIAN_LIMIT, 0, math.inf, 1.0)

    def test_small_nu_is_recorded(self):
        m = CovarianceModel.matern(2, 1.5, 1.0)
        assert m.nu == 1.5
        with pytest.raises(InsufficientSmoothness):
            spectral_moment(m, 4)

    def test_second_order_degenerate_flag(self):
        assert CovarianceModel.random_wave(1, 1.0).second_order_degenerate
        assert not CovarianceModel.random_wave(2, 1.0).second_order_degenerate
        assert not CovarianceModel.gaussian(1, 1.0).second_order_degenerate

    @pytest.mark.parametrize("model", MODELS)
    def test_dict_round_trip(self, model):
        assert CovarianceModel.from_dict(model.to_dict()) == model


class TestC1:
    @pytest.mark.parametrize("model", MODELS)
    def test_unit_variance(self, model):
        assert c1(model, 0.0) == pytest.approx(1.0, abs=1e-14)

    def test_gaussian_origin(self):
        assert c1(CovarianceModel.gaussian(1, 1.0), 0.0) == 1.0

    def test_sine_cosine_process(self):
        assert c1(CovarianceModel.random_wave(1, 1.0), math.pi) == pytest.approx(-1.0, abs=1e-13)

    def test_matern_against_high_precision_bessel(self):
        m = CovarianceModel.matern(1, 2.5, 1.0)
        expected = float(mp_c2(m, 1.0))
        assert c1(m, 1.0) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("model", MODELS)
    def test_against_mpmath_on_grid(self, model):
        r = np.linspace(0.05, 6.0, 25) * model.phi
        expected = np.array([float(mp_c2(model, x * x)) for x in r])
        np.testing.assert_allclose(c1(model, r), expected, rtol=1e-10, atol=1e-13)

    @pytest.mark.parametrize("model", MODELS)
    def test_bounded_by_one(self, model):
        r = np.linspace(0.0, 20.0, 400) * model.phi
        assert np.all(np.abs(c1(model, r)) <= 1.0 + 1e-12)


class TestC2Deriv:
    @pytest.mark.parametrize("model", MODELS)
    def test_value_at_origin(self, model):
        assert c2_deriv(model, 0, 0.0) == pytest.approx(1.0, abs=1e-14)

    def test_gaussian_first_derivative_at_origin(self):
        # c2(s) = exp(-s / (2 phi^2)) is the unit-variance Gaussian correlation
        assert c2_deriv(CovarianceModel.gaussian(1, 1.0), 1, 0.0) == pytest.approx(-0.5)

    def test_matern_second_derivative_finite_difference(self):
        m = CovarianceModel.matern(1, 3.0, 1.0)
        h = 1e-4
        fd = (c2_deriv(m, 1, 0.25 + h) - c2_deriv(m, 1, 0.25 - h)) / (2 * h)
        assert c2_deriv(m, 2, 0.25) == pytest.approx(fd, rel=1e-6)

    @pytest.mark.parametrize("model", MODELS)
    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_finite_difference_invariant(self, model, p):
        if model.family is Family.MATERN and p > model.nu:
            pytest.skip("derivative not defined")
        s = np.linspace(0.05, 5.0, 30) * model.phi**2
        h = 1e-4
        fd = (c2_deriv(model, p - 1, s + h) - c2_deriv(model, p - 1, s - h)) / (2 * h)
        exact = c2_deriv(model, p, s)
        assert np.all(np.abs(fd - exact) <= np.maximum(1e-6, 1e-4 * np.abs(exact)))

    @pytest.mark.parametrize("model", [MODELS[0], MODELS[2], MODELS[4], MODELS[6]])
    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_against_mpmath_derivatives(self, model, p):
        for s in (0.3, 1.1, 2.5):
            s_val = s * model.phi**2
            expected = float(mp.diff(lambda x: mp_c2(model, x), s_val, p))
            assert c2_deriv(model, p, s_val) == pytest.approx(expected, rel=1e-8, abs=1e-12)

    @pytest.mark.parametrize("model", MODELS)
    def test_continuous_at_origin(self, model):
        top = 4 if model.family is not Family.MATERN else int(math.ceil(model.nu)) - 1
        s = 1e-12 * model.phi**2
        for p in range(0, top + 1):
            near = c2_deriv(model, p, s)
            # for Matérn the p-th derivative is only Hölder of order nu - p at 0
            rel = 1e-6 if model.family is not Family.MATERN else 1e-6 + 50 * 1e-12 ** min(1.0, model.nu - p)
            assert c2_deriv(model, p, 0.0) == pytest.approx(near, rel=rel, abs=1e-9)

    def test_matern_insufficient_smoothness(self):
        m = CovarianceModel.matern(2, 2.5, 1.0)
        with pytest.raises(InsufficientSmoothness):
            c2_deriv(m, 3, 0.0)
        assert np.isfinite(c2_deriv(m, 3, 0.5))

    def test_rejects_negative_input(self):
        with pytest.raises(ValueError):
            c2_deriv(MODELS[0], 1, -0.1)
        with pytest.raises(ValueError):
            c2_deriv(MODELS[0], -1, 0.1)

    @pytest.mark.parametrize("model", MODELS)
    def test_c1_second_consistent(self, model):
        r = np.linspace(0.1, 3.0, 12) * model.phi
        h = 1e-4 * model.phi
        fd = (c1(model, r + h) - 2 * c1(model, r) + c1(model, r - h)) / h**2
        np.testing.assert_allclose(c1_second(model, r), fd, rtol=1e-5, atol=1e-6 / model.phi**2)


class TestBesselHelpers:
    @pytest.mark.parametrize("mu", [0.0, 0.5, 1.0, 2.5, 4.0])
    def test_f_recurrence(self, mu):
        x = np.linspace(0.2, 30.0, 40)
        h = 1e-4
        fd = (bessel_f(mu, x + h) - bessel_f(mu, x - h)) / (2 * h)
        exact = -bessel_f(mu + 1, x) / 2
        assert np.all(np.abs(fd - exact) <= np.maximum(1e-6, 1e-4 * np.abs(exact)))

    @pytest.mark.parametrize("mu", [-0.5, 0.5, 1.0, 2.5, 4.0])
    def test_g_recurrence(self, mu):
        # the order of K is |mu| but the power keeps its sign, so the
        # recurrence also holds once mu - 1 is negative
        x = np.linspace(0.2, 30.0, 40)
        h = 1e-5
        fd = (bessel_g(mu, x + h) - bessel_g(mu, x - h)) / (2 * h)
        exact = -bessel_g(mu - 1, x) / 2
        assert np.all(np.abs(fd - exact) <= np.maximum(1e-6, 1e-4 * np.abs(exact)))

    def test_f_series_and_closed_form_agree_at_crossover(self):
        x = np.array([3.999999, 4.000001])
        vals = bessel_f(1.5, x)
        assert vals[0] == pytest.approx(vals[1], rel=1e-6)

    def test_against_mpmath(self):
        for mu in (-0.5, 0.5, 1.7):
            for x in (0.01, 2.0, 50.0):
                f_ref = float(mp.besselj(mu, mp.sqrt(x)) * mp.mpf(x) ** (-mu / 2))
                g_ref = float(mp.besselk(abs(mu), mp.sqrt(x)) * mp.mpf(x) ** (mu / 2))
                assert bessel_f(mu, np.array([x]))[0] == pytest.approx(f_ref, rel=1e-11)
                assert bessel_g(mu, np.array([x]))[0] == pytest.approx(g_ref, rel=1e-11)


class TestSpectralMoments:
    def test_matern_lambda2(self):
        assert spectral_moment(CovarianceModel.matern(2, 3.0, 1.0), 2) == pytest.approx(1.5)

    def test_sine_cosine_lambda4(self):
        assert spectral_moment(CovarianceModel.random_wave(1, 2.0), 4) == pytest.approx(1 / 16)

    def test_gaussian_lambda4(self):
        assert spectral_moment(CovarianceModel.gaussian(2, 1.0), 4) == pytest.approx(3.0)

    def test_zeroth_moment(self):
        for m in MODELS:
            assert spectral_moment(m, 0) == 1.0

    def test_odd_order_rejected(self):
        with pytest.raises(ValueError):
            spectral_moment(MODELS[0], 3)

    @pytest.mark.parametrize("model", MODELS)
    def test_identity_with_derivatives_at_origin(self, model):
        for p in (1, 2, 3):
            if model.family is Family.MATERN and p >= model.nu:
                continue
            lhs = spectral_moment(model, 2 * p)
            rhs = (-1) ** p * math.factorial(2 * p) / math.factorial(p) * c2_deriv(model, p, 0.0)
            assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_moment_ratio_examples(self):
        assert moment_ratio(CovarianceModel.matern(2, 4.0, 1.0)) == pytest.approx(2.0)
        assert moment_ratio(CovarianceModel.random_wave(2, 1.0)) == pytest.approx(0.5)
        assert moment_ratio(CovarianceModel.gaussian(2, 2.0)) == pytest.approx(0.25)


class TestPartialC:
    @pytest.mark.parametrize("model", MODELS)
    def test_origin(self, model):
        assert partial_c(model, (0,) * model.d, (0.0,) * model.d) == pytest.approx(1.0)

    @pytest.mark.parametrize("model", MODELS)
    def test_odd_order_vanishes_at_origin(self, model):
        alpha = (1,) + (0,) * (model.d - 1)
        assert partial_c(model, alpha, (0.0,) * model.d) == 0.0
        alpha = (3,) + (0,) * (model.d - 1)
        if model.family is not Family.MATERN or model.nu > 2:
            assert partial_c(model, alpha, (0.0,) * model.d) == 0.0

    def test_gaussian_fourth_order_finite_difference(self):
        m = CovarianceModel.gaussian(2, 1.0)
        t = np.array([0.3, 0.4])
        h = 1e-2

        def c(x):
            return c1(m, np.hypot(*x))

        e = np.array([h, 0.0])
        fd = (-c(t + 2 * e) + 16 * c(t + e) - 30 * c(t) + 16 * c(t - e) - c(t - 2 * e)) / (12 * h * h)
        assert partial_c(m, (2, 0), t) == pytest.approx(fd, abs=1e-5)

    @pytest.mark.parametrize("model", [MODELS[1], MODELS[4], MODELS[6]])
    def test_all_orders_finite_difference(self, model):
        rng = np.random.default_rng(3)
        h = 1e-4 * model.phi
        for _ in range(5):
            t = rng.normal(size=2) * model.phi
            for alpha in [(1, 0), (0, 1), (2, 0), (1, 1), (2, 1), (1, 2), (3, 1), (2, 2)]:
                base = tuple(a - (1 if i == 0 and a > 0 else 0) for i, a in enumerate(alpha))
                if base == alpha:
                    continue
                e = np.array([h, 0.0])
                fd = (partial_c(model, base, t + e) - partial_c(model, base, t - e)) / (2 * h)
                exact = partial_c(model, alpha, t)
                assert exact == pytest.approx(fd, rel=1e-5, abs=1e-6 / model.phi ** sum(alpha))

    @settings(max_examples=60, deadline=None)
    @given(
        t=st.tuples(*[st.floats(-2, 2, allow_nan=False)] * 3),
        alpha=st.tuples(*[st.integers(0, 2)] * 3),
        perm=st.permutations([0, 1, 2]),
    )
    def test_isotropy_and_parity(self, t, alpha, perm):
        model = CovarianceModel.gaussian(3, 0.8)
        if sum(alpha) > 4:
            alpha = (alpha[0], alpha[1], 0)
        base = partial_c(model, alpha, t)
        permuted = partial_c(model, [alpha[i] for i in perm], [t[i] for i in perm])
        assert permuted == pytest.approx(base, rel=1e-10, abs=1e-12)
        flipped = partial_c(model, alpha, [-x for x in t])
        assert flipped == pytest.approx((-1) ** sum(alpha) * base, rel=1e-10, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            partial_c(MODELS[1], (1,), (0.0, 0.0))


class TestNondegeneracy:
    def test_sine_cosine_degenerate_at_pi(self):
        assert not check_pairwise_nondegeneracy(CovarianceModel.random_wave(1, 1.0), math.pi).ok

    def test_matern_fig_regime(self):
        phi = scale_for_intensity("matern", 2, 3.5, "all", 100.0)
        assert check_pairwise_nondegeneracy(CovarianceModel.matern(2, 3.5, phi), 0.05).ok

    @pytest.mark.parametrize("model", [MODELS[1], MODELS[4], MODELS[6]])
    def test_margins_vanish_at_origin(self, model):
        small = check_pairwise_nondegeneracy(model, 1e-4 * model.phi)
        large = check_pairwise_nondegeneracy(model, 0.5 * model.phi)
        assert small.margin1 < 1e-6 * large.margin1
        assert small.margin2 < 1e-6 * large.margin2

    def test_rejects_nonpositive_distance(self):
        with pytest.raises(ValueError):
            check_pairwise_nondegeneracy(MODELS[0], 0.0)


class TestIntegrability:
    @pytest.mark.parametrize("nu", [0.7, 2.5, 3.5, 10.0])
    def test_matern_ok(self, nu):
        assert check_integrability(CovarianceModel.matern(2, nu, 1.0)).ok

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_random_wave_violates(self, d):
        rep = check_integrability(CovarianceModel.random_wave(d, 1.0))
        assert not rep.ok
        assert rep.verdict == "divergent oscillatory"

    def test_gaussian_ok(self):
        rep = check_integrability(CovarianceModel.gaussian(3, 1.0))
        assert rep.ok
        assert math.isfinite(rep.integral)

    def test_envelope_nonnegative(self):
        for m in MODELS:
            assert np.all(xi_envelope(m, np.linspace(0.1, 10, 50)) >= 0)
