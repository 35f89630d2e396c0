import math

import numpy as np
import pytest
from scipy import integrate, stats

from critfield.covmodels import CovarianceModel, c1
from critfield.errors import BandwidthRateViolation, LatticeTooLarge, OutOfWindow
from critfield.fieldsim import (
    BumpKernel,
    CosineProductField,
    LatticeValues,
    ScaledField,
    SpectralFieldRealization,
    Window,
    _lattice_axes,
    default_bandwidth,
    lattice_points,
    realization_from_dict,
    sample_spectral_frequency,
    simulate_lattice,
    simulate_points,
    simulate_spectral,
    smooth_lattice,
)


def fd_gradient(f, t, h=1e-5):
    t = np.asarray(t, dtype=float)
    out = np.empty(len(t))
    for i in range(len(t)):
        e = np.zeros(len(t))
        e[i] = h
        out[i] = (f(t + e) - f(t - e)) / (2 * h)
    return out


def fd_hessian(grad, t, h=1e-5):
    t = np.asarray(t, dtype=float)
    cols = []
    for i in range(len(t)):
        e = np.zeros(len(t))
        e[i] = h
        cols.append((grad(t + e) - grad(t - e)) / (2 * h))
    return np.stack(cols, axis=1)


def rel_err(a, b):
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) / max(1.0, np.max(np.abs(b)))


class TestWindow:
    def test_basic_geometry(self):
        w = Window((0.0, -1.0), (2.0, 1.0))
        assert w.d == 2
        np.testing.assert_allclose(w.sides, [2.0, 2.0])
        assert w.volume == pytest.approx(4.0)
        assert w.diameter == pytest.approx(math.sqrt(8))
        np.testing.assert_array_equal(w.contains([[1.0, 0.0], [3.0, 0.0]]), [True, False])
        assert w.erode(0.5).volume == pytest.approx(1.0)
        assert Window.from_dict(w.to_dict()) == w

    def test_invalid(self):
        with pytest.raises(ValueError):
            Window((0.0,), (0.0,))
        with pytest.raises(ValueError):
            Window((0.0, 0.0), (1.0,))

    def test_centered(self):
        w = Window.centered(4.0, 3)
        assert w.lower == (-2.0,) * 3 and w.upper == (2.0,) * 3


class TestSpectralFrequency:
    N = 1_000_000

    @pytest.mark.parametrize(
        "model",
        [CovarianceModel.gaussian(1, 1.0), CovarianceModel.matern(1, 2.5, 1.0), CovarianceModel.matern(3, 1.5, 0.7)],
        ids=["gauss", "matern25", "matern15_d3"],
    )
    def test_characteristic_function(self, model):
        v = sample_spectral_frequency(model, np.random.default_rng(11), self.N)
        for r in (0.5, 1.0, 2.0):
            emp = np.mean(np.cos(r * v[:, 0]))
            assert abs(emp - c1(model, r)) < 4 / math.sqrt(self.N)

    def test_random_wave_sphere(self):
        v = sample_spectral_frequency(CovarianceModel.random_wave(2, 1.0), 0, 1000)
        np.testing.assert_allclose(np.linalg.norm(v, axis=1), math.sqrt(2), rtol=1e-14)

    def test_random_wave_characteristic_function(self):
        model = CovarianceModel.random_wave(3, 1.0)
        v = sample_spectral_frequency(model, 5, 200_000)
        emp = np.mean(np.cos(1.3 * v[:, 2]))
        assert abs(emp - c1(model, 1.3)) < 4 / math.sqrt(200_000)

    def test_single_draw_shape(self):
        assert sample_spectral_frequency(CovarianceModel.gaussian(3, 1.0), 1).shape == (3,)


class TestSpectralField:
    def test_single_cosine_closed_form(self):
        a, v = 1.7, 2.3
        f = SpectralFieldRealization(
            CovarianceModel.gaussian(2, 1.0), np.array([a]), np.array([0.0]), np.array([[v, 0.0]])
        )
        t = np.array([0.4, -1.1])
        val, grad, hess = f.derivatives(t)
        assert val == pytest.approx(a * math.cos(v * t[0]), abs=1e-12)
        np.testing.assert_allclose(grad, [-a * v * math.sin(v * t[0]), 0.0], atol=1e-12)
        np.testing.assert_allclose(hess, [[-a * v * v * math.cos(v * t[0]), 0.0], [0.0, 0.0]], atol=1e-12)

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_derivatives_match_finite_differences(self, d):
        f = simulate_spectral(CovarianceModel.matern(d, 3.5, 0.8), 256, rng=d)
        pts = np.random.default_rng(d).uniform(-3, 3, (10, d))
        for t in pts:
            assert rel_err(f.gradient(t), fd_gradient(f.evaluate, t)) < 1e-6
            h = f.hessian(t)
            np.testing.assert_array_equal(h, h.T)
            assert rel_err(h, fd_hessian(f.gradient, t)) < 1e-5

    @pytest.mark.parametrize("d", [1, 2])
    def test_grid_matches_pointwise(self, d):
        f = simulate_spectral(CovarianceModel.gaussian(d, 0.5), 64, rng=3)
        axes = [np.linspace(-1, 1, 17)] * d
        val, grad, hess = f.grid_derivatives(axes)
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        v2, g2, h2 = f.derivatives(pts)
        np.testing.assert_allclose(val.ravel(), v2, atol=1e-10)
        np.testing.assert_allclose(grad.reshape(-1, d), g2, atol=1e-10)
        np.testing.assert_allclose(hess.reshape(-1, d, d), h2, atol=1e-9)

    def test_variance_single_term(self):
        model = CovarianceModel.gaussian(1, 1.0)
        n_rep = 20_000
        ss = np.random.SeedSequence(1).spawn(n_rep)
        x = np.array([simulate_spectral(model, 1, np.random.default_rng(s)).evaluate([0.3]) for s in ss])
        assert abs(np.var(x) - 1.0) < 4 * math.sqrt(2.0 / n_rep)

    def test_covariance_at_lags(self):
        model = CovarianceModel.matern(2, 2.5, 1.0)
        lags = np.array([0.25, 0.5, 1.0, 1.5, 2.5])
        pts = np.vstack([[0.0, 0.0], np.column_stack([lags, np.zeros(5)])])
        n_rep = 10_000
        gen = np.random.default_rng(2)
        vals = np.array([simulate_spectral(model, 8, gen).evaluate(pts) for _ in range(n_rep)])
        for j, h in enumerate(lags):
            prod = vals[:, 0] * vals[:, j + 1]
            se = prod.std(ddof=1) / math.sqrt(n_rep)
            assert abs(prod.mean() - c1(model, h)) < 4 * se

    def test_marginal_exactly_gaussian_and_joint_approaches_gaussian(self):
        # A single-point value is a Box-Muller draw for every n_terms, while
        # X(0) + X(h) is a scale mixture whose excess kurtosis decays like 1/n_terms.
        model = CovarianceModel.gaussian(1, 1.0)
        n_rep = 40_000
        pts = np.array([[0.0], [40.0]])
        excess = {}
        for n_terms in (4, 16, 256):
            gen = np.random.default_rng(n_terms)
            vals = np.array([simulate_spectral(model, n_terms, gen).evaluate(pts) for _ in range(n_rep)])
            assert abs(stats.skew(vals[:, 0])) < 4 * math.sqrt(6 / n_rep)
            assert abs(stats.kurtosis(vals[:, 0])) < 4 * math.sqrt(24 / n_rep)
            excess[n_terms] = stats.kurtosis(vals.sum(axis=1))
        # far-apart lag: one-term excess kurtosis of the sum is 3/2
        se = math.sqrt(24 / n_rep)
        assert abs(excess[4] - 1.5 / 4) < 4 * se * 1.5
        assert excess[4] > excess[16] > excess[256] - 3 * se
        assert abs(excess[256]) < 4 * se

    def test_determinism_and_roundtrip(self):
        model = CovarianceModel.matern(2, 2.5, 1.0)
        a = simulate_spectral(model, 32, rng=9)
        b = simulate_spectral(model, 32, rng=9)
        np.testing.assert_array_equal(a.frequencies, b.frequencies)
        np.testing.assert_array_equal(a.amplitudes, b.amplitudes)
        c = realization_from_dict(a.to_dict())
        t = np.array([[0.1, 0.2], [1.0, -2.0]])
        np.testing.assert_array_equal(c.evaluate(t), a.evaluate(t))
        assert c.seed == 9

    def test_invalid_terms(self):
        with pytest.raises(ValueError):
            simulate_spectral(CovarianceModel.gaussian(1, 1.0), 0)


class TestLattice:
    def test_two_point_covariance(self):
        model = CovarianceModel.gaussian(1, 1.0)
        np.testing.assert_allclose(lattice_points(2, Window.unit(1)).ravel(), [0.25, 0.75])
        n = 100_000
        gen = np.random.default_rng(4)
        draws = np.array([simulate_lattice(model, 2, Window.unit(1), gen).values for _ in range(n)])
        cov = np.cov(draws.T)
        expected = np.array([[1.0, c1(model, 0.5)], [c1(model, 0.5), 1.0]])
        assert np.max(np.abs(cov - expected)) < 4 / math.sqrt(n)

    @pytest.mark.parametrize(
        "model",
        [CovarianceModel.matern(2, 2.5, 0.3), CovarianceModel.gaussian(2, 0.3), CovarianceModel.random_wave(2, 0.3)],
        ids=["matern", "gauss", "rwm"],
    )
    def test_marginal_variance(self, model):
        gen = np.random.default_rng(5)
        vals = np.concatenate([simulate_lattice(model, 6, Window.unit(2), gen).values.ravel() for _ in range(400)])
        # 36 correlated sites per draw: bound using the number of independent draws
        assert abs(np.var(vals) - 1.0) < 4 * math.sqrt(2 / 400) * 3

    def test_lattice_layout(self):
        lat = simulate_lattice(CovarianceModel.gaussian(2, 0.5), 4, Window((0.0, 0.0), (1.0, 0.5)), rng=0)
        assert lat.shape == (4, 2)
        np.testing.assert_allclose(lat.axes[0], [0.125, 0.375, 0.625, 0.875])
        np.testing.assert_allclose(lat.axes[1], [0.125, 0.375])
        assert lat.points.shape == (8, 2)

    def test_cap(self):
        with pytest.raises(LatticeTooLarge):
            simulate_lattice(CovarianceModel.gaussian(2, 0.1), 300, Window.unit(2), rng=0)
        with pytest.raises(LatticeTooLarge):
            simulate_lattice(CovarianceModel.gaussian(1, 0.1), 20, Window.unit(1), rng=0, cap=10)

    def test_determinism(self):
        model = CovarianceModel.matern(1, 2.5, 0.2)
        a = simulate_lattice(model, 32, Window.unit(1), rng=3)
        b = simulate_lattice(model, 32, Window.unit(1), rng=3)
        np.testing.assert_array_equal(a.values, b.values)


class TestKernel:
    def test_normalization_d1(self):
        k = BumpKernel(1)
        total, _ = integrate.quad(lambda x: k(np.array([x])), -1, 1, epsabs=1e-13, epsrel=1e-13)
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_normalization_d2(self):
        k = BumpKernel(2)
        total, _ = integrate.dblquad(
            lambda y, x: k(np.array([x, y])),
            -1, 1,
            lambda x: -math.sqrt(1 - x * x), lambda x: math.sqrt(1 - x * x),
            epsabs=1e-12, epsrel=1e-12,
        )
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_support_and_derivatives(self):
        k = BumpKernel(2)
        assert k(np.array([0.8, 0.7])) == 0.0
        x = np.array([0.3, -0.4])
        _, g, h = k.derivatives(x)
        assert rel_err(g, fd_gradient(k, x, 1e-6)) < 1e-6
        assert rel_err(h, fd_hessian(lambda y: k.derivatives(y)[1], x, 1e-6)) < 1e-6


def constant_lattice(n, window, value=1.0):
    axes = tuple(_lattice_axes(n, window))
    vals = np.full([len(a) for a in axes], value)
    return LatticeValues(CovarianceModel.gaussian(window.d, 1.0), n, window, axes, vals)


class TestSmoothing:
    def test_default_bandwidth(self):
        assert default_bandwidth(32, 1) == pytest.approx(32 ** (-0.2))
        for n in (16, 64, 1024):
            xi = default_bandwidth(n, 2)
            assert xi ** (-5) / n == pytest.approx(n ** (-1 / 6))

    def test_riemann_sum_constant(self):
        window = Window((0.0,), (4.0,))
        f = smooth_lattice(constant_lattice(64, window, 2.5))
        vals = f.evaluate(np.linspace(f.valid_window.lower[0], f.valid_window.upper[0], 25)[:, None])
        assert np.max(np.abs(vals / 2.5 - 1)) < 0.05

    def test_riemann_error_decreases(self):
        window = Window((0.0,), (4.0,))
        errs = []
        for n in (16, 64, 256):
            f = smooth_lattice(constant_lattice(n, window), xi=0.6)
            pts = np.linspace(f.valid_window.lower[0], f.valid_window.upper[0], 31)[:, None]
            errs.append(np.max(np.abs(f.evaluate(pts) - 1)))
        assert errs[0] > errs[1] > errs[2]

    @pytest.mark.parametrize("d", [1, 2])
    def test_derivatives_match_finite_differences(self, d):
        window = Window((0.0,) * d, (3.0,) * d)
        lat = simulate_lattice(CovarianceModel.matern(d, 2.5, 0.5), 16, window, rng=d)
        f = smooth_lattice(lat)
        vw = f.valid_window
        pts = np.random.default_rng(0).uniform(vw.lower, vw.upper, (10, d))
        for t in pts:
            assert rel_err(f.gradient(t), fd_gradient(f.evaluate, t, 1e-6)) < 1e-6
            h = f.hessian(t)
            np.testing.assert_allclose(h, h.T)
            assert rel_err(h, fd_hessian(f.gradient, t, 1e-6)) < 1e-5

    def test_bandwidth_rate_violation(self):
        lat = constant_lattice(16, Window((0.0,), (4.0,)))
        with pytest.raises(BandwidthRateViolation):
            smooth_lattice(lat, xi=0.1)
        with pytest.raises(BandwidthRateViolation):
            smooth_lattice(constant_lattice(16, Window.unit(1)))

    def test_out_of_window(self):
        f = smooth_lattice(constant_lattice(32, Window((0.0,), (4.0,))))
        with pytest.raises(OutOfWindow):
            f.evaluate([0.1])

    def test_roundtrip(self):
        lat = simulate_lattice(CovarianceModel.matern(1, 2.5, 0.5), 32, Window((0.0,), (3.0,)), rng=6)
        f = smooth_lattice(lat)
        g = realization_from_dict(f.to_dict())
        t = np.array([[1.2], [1.5]])
        np.testing.assert_array_equal(g.evaluate(t), f.evaluate(t))
        assert g.xi == f.xi

    def test_converges_to_exact_field(self):
        # Common random numbers: one exact draw on the union of all lattices
        # and a test grid; the smoothed fields use the lattice subsets.
        model = CovarianceModel.matern(1, 3.5, 0.5)
        window = Window((0.0,), (4.0,))
        ns = (16, 32, 64)
        axes = [_lattice_axes(n, window)[0] for n in ns]
        grid = np.linspace(1.0, 3.0, 21)
        pts = np.concatenate(axes + [grid])[:, None]
        dist = np.zeros(len(ns))
        reps = 5
        for rep in range(reps):
            x = simulate_points(model, pts, rep)
            exact = x[-len(grid):]
            offset = 0
            for k, (n, ax) in enumerate(zip(ns, axes)):
                lat = LatticeValues(model, n, window, (ax,), x[offset : offset + len(ax)])
                offset += len(ax)
                dist[k] += np.max(np.abs(smooth_lattice(lat).evaluate(grid[:, None]) - exact))
        assert dist[0] > dist[1] > dist[2]


class TestDeterministicFields:
    def test_cosine_product(self):
        f = CosineProductField(3, 0.7)
        t = np.array([0.1, 0.33, -0.2])
        assert f.evaluate(t) == pytest.approx(np.prod(np.cos(2 * math.pi * 0.7 * t)))
        assert rel_err(f.gradient(t), fd_gradient(f.evaluate, t)) < 1e-6
        assert rel_err(f.hessian(t), fd_hessian(f.gradient, t)) < 1e-5

    def test_negation(self):
        base = simulate_spectral(CovarianceModel.gaussian(2, 1.0), 16, rng=1)
        neg = ScaledField(base)
        t = np.array([0.3, 0.4])
        v, g, h = base.derivatives(t)
        v2, g2, h2 = neg.derivatives(t)
        assert v2 == -v
        np.testing.assert_array_equal(g2, -g)
        np.testing.assert_array_equal(h2, -h)
        gv, _, _ = neg.grid_derivatives([np.array([0.3]), np.array([0.4])])
        assert gv[0, 0] == pytest.approx(-v, abs=1e-12)
