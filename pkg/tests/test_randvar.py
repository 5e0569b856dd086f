"""
Tests for uniform streams, the exact Gaussian inverse CDF and its piecewise-polynomial approximations.
"""
import numpy as np
import pytest
from scipy.special import ndtri

from lowprec_mlmc.randvar import (
    UniformStream,
    approx_inv_cdf,
    build_inv_cdf_approx,
    density_histogram,
    derive_seed,
    draw_uniforms,
    exact_inv_cdf,
    gaussian_samples,
    l2_error,
    moment_diagnostics,
    next_uniform,
    parse_approx,
    path_keys,
    uniform_block,
)
from lowprec_mlmc.softfloat import DomainError


def sorted_uniforms(n=200_000, seed=3):
    return np.sort(uniform_block(seed, np.arange(n), 0))


class TestUniformStreams:
    """Counter-based uniforms"""

    def test_open_interval(self):
        """Uniforms should lie strictly inside (0, 1)"""
        u = uniform_block(1, np.arange(100_000), 7)
        assert (u > 0.0).all() and (u < 1.0).all()

    def test_on_half_offset_grid(self):
        """Uniforms should be (k + 1/2) 2^-52, so 1 - u is exact"""
        u = uniform_block(1, np.arange(10_000), 0)
        scaled = u * 2.0 ** 52 - 0.5
        assert np.array_equal(scaled, np.floor(scaled))
        assert np.array_equal((1.0 - u) + u, np.ones_like(u))

    def test_independent_of_batching(self):
        """A path's draws should not depend on which other paths share the batch"""
        full = uniform_block(42, np.arange(10), 5)
        part = uniform_block(42, [3, 4, 5], 5)
        assert np.array_equal(full[3:6], part)

    def test_matches_keyed_draws(self):
        keys = path_keys(9, np.arange(4))
        assert np.array_equal(draw_uniforms(keys, 2), uniform_block(9, np.arange(4), 2))

    def test_counter_and_seed_change_draws(self):
        base = uniform_block(1, np.arange(100), 0)
        assert not np.array_equal(base, uniform_block(1, np.arange(100), 1))
        assert not np.array_equal(base, uniform_block(2, np.arange(100), 0))

    def test_roughly_uniform(self):
        """Mean and variance of 10^5 draws should be close to 1/2 and 1/12"""
        u = uniform_block(5, np.arange(100_000), 0)
        assert abs(u.mean() - 0.5) < 0.005
        assert abs(u.var() - 1.0 / 12.0) < 0.002

    def test_negative_path_index_rejected(self):
        with pytest.raises(ValueError):
            path_keys(1, [-1])

    def test_next_uniform_advances_counter(self):
        stream = UniformStream(seed=11, path_index=4)
        u0, stream = next_uniform(stream)
        u1, stream = next_uniform(stream)
        assert stream.counter == 2
        assert u0 == uniform_block(11, [4], 0)[0]
        assert u1 == uniform_block(11, [4], 1)[0]

    def test_derive_seed(self):
        assert derive_seed(1729, 3) == derive_seed(1729, 3)
        assert derive_seed(1729, 3) != derive_seed(1729, 4)
        assert derive_seed(1729, 3) != derive_seed(1730, 3)


class TestExactInverseCdf:
    """exact_inv_cdf"""

    def test_matches_scipy(self):
        u = np.linspace(1e-10, 1 - 1e-10, 10_001)
        assert np.allclose(exact_inv_cdf(u), ndtri(u), rtol=1e-12, atol=1e-12)

    def test_deep_tail(self):
        """Tail quantiles should stay accurate far below the rational approximation's range"""
        t = np.array([1e-20, 1e-100, 1e-250])
        assert np.allclose(exact_inv_cdf(t), ndtri(t), rtol=1e-9)

    def test_centre_is_zero(self):
        assert exact_inv_cdf(0.5) == 0.0

    def test_reflection_is_exact(self):
        u = uniform_block(2, np.arange(10_000), 0)
        assert np.array_equal(exact_inv_cdf(1.0 - u), -exact_inv_cdf(u))

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.1, 1.5, float("nan")])
    def test_outside_open_interval(self, u):
        with pytest.raises(DomainError):
            exact_inv_cdf(u)

    def test_scalar_returns_float(self):
        assert isinstance(exact_inv_cdf(0.3), float)


class TestApproximation:
    """InvCdfApprox construction and evaluation"""

    @pytest.mark.parametrize("name", ["linear:2", "linear:8", "cubic:8", "cubic:64", "linear:1024", "cubic:1024"])
    def test_monotone(self, name):
        """Approximations should be non-decreasing in u"""
        approx = parse_approx(name)
        values = approx_inv_cdf(approx, sorted_uniforms())
        assert (np.diff(values) >= 0).all()

    def test_antisymmetric(self, linear8, cubic64):
        u = uniform_block(4, np.arange(20_000), 0)
        for approx in (linear8, cubic64):
            assert np.array_equal(approx_inv_cdf(approx, 1.0 - u), -approx_inv_cdf(approx, u))

    def test_centre_near_zero(self, cubic64):
        assert abs(approx_inv_cdf(cubic64, 0.5)) <= 1e-15

    def test_bounded_by_support(self, linear8):
        u = uniform_block(4, np.arange(50_000), 0)
        assert np.abs(approx_inv_cdf(linear8, u)).max() <= linear8.support_bound

    def test_close_to_exact_in_body(self, cubic64):
        u = np.linspace(0.01, 0.99, 999)
        assert np.abs(approx_inv_cdf(cubic64, u) - exact_inv_cdf(u)).max() < 0.01

    def test_l2_error_ordering(self, linear8, cubic64):
        """Cubic pieces should beat linear ones; more intervals should not hurt"""
        linear_error = l2_error(linear8)
        assert 0.0 < linear_error < 5e-3
        assert l2_error(build_inv_cdf_approx("cubic", 8)) < linear_error
        assert l2_error(build_inv_cdf_approx("linear", 1024)) <= linear_error * 1.0001
        assert l2_error(cubic64) < linear_error

    @pytest.mark.parametrize("name", ["linear:2", "linear:8", "cubic:8", "cubic:64", "linear:1024", "cubic:1024"])
    def test_sign_matches_exact(self, name):
        """Z and Z~ from the same uniform never disagree in sign, including next to u = 1/2"""
        approx = parse_approx(name)
        near_centre = 0.5 + np.ldexp(np.arange(-4, 5, dtype=np.float64), -52)
        u = np.concatenate([uniform_block(9, np.arange(200_000), 0), near_centre])
        assert np.array_equal(np.sign(approx_inv_cdf(approx, u)), np.sign(exact_inv_cdf(u)))

    @pytest.mark.parametrize("kind", ["linear", "cubic"])
    @pytest.mark.parametrize("count", [2, 8, 64, 1024])
    def test_second_moment_at_most_one(self, kind, count):
        assert moment_diagnostics(build_inv_cdf_approx(kind, count), 2)[1] <= 1.0

    @pytest.mark.parametrize("kind", ["linear", "cubic"])
    def test_l2_error_decreases_with_depth(self, kind):
        errors = [l2_error(build_inv_cdf_approx(kind, 1 << n)) for n in range(1, 6)]
        assert all(deeper < shallower for shallower, deeper in zip(errors, errors[1:]))
        assert l2_error(build_inv_cdf_approx(kind, 1024)) <= errors[-1]

    def test_tail_error_shrinks_with_depth(self, linear8):
        """A deep-tail uniform leaves the truncated last piece once K passes its octave"""
        u = 1.0 - 2.0 ** -20
        exact = exact_inv_cdf(u)
        shallow = abs(approx_inv_cdf(linear8, u) - exact)
        deep = abs(approx_inv_cdf(build_inv_cdf_approx("linear", 32), u) - exact)
        assert deep < shallow / 10

    def test_deeper_approximation_keeps_body_pieces(self, linear1024):
        """Doubling K only adds tail pieces, so values above t = 2^-15 do not move"""
        u = uniform_block(2, np.arange(100_000), 0)
        u = u[np.minimum(u, 1.0 - u) >= 2.0 ** -15]
        linear16 = build_inv_cdf_approx("linear", 16)
        assert np.array_equal(approx_inv_cdf(linear16, u), approx_inv_cdf(linear1024, u))

    @pytest.mark.parametrize("name", ["linear:8", "cubic:64", "linear:1024"])
    def test_density_is_bounded_with_compact_support(self, name):
        approx = parse_approx(name)
        _, density = density_histogram(approx, 100, 1_000_000, 11)
        assert density.max() < 0.5
        samples = gaussian_samples(uniform_block(11, np.arange(1_000_000), 0), approx)
        assert np.abs(samples).max() <= approx.support_bound

    def test_moments(self, linear1024):
        """Odd moments should vanish and the variance should be close to one"""
        m = moment_diagnostics(linear1024, 4)
        assert abs(m[0]) < 1e-12
        assert abs(m[2]) < 1e-12
        assert 0.99 < m[1] <= 1.0
        assert abs(m[3] - 3.0) < 0.1

    def test_moment_order_limits(self, linear8):
        with pytest.raises(ValueError):
            moment_diagnostics(linear8, 0)
        with pytest.raises(ValueError):
            moment_diagnostics(linear8, 9)

    def test_breakpoints(self, linear8):
        assert linear8.breakpoints[0] == 0.75
        assert len(linear8.breakpoints) == 7
        assert linear8.breakpoints == sorted(linear8.breakpoints)

    def test_piece_count_and_degree(self, cubic64):
        assert cubic64.coefficients.shape == (64, 4)
        assert cubic64.degree == 3
        assert cubic64.name == "cubic:64"

    @pytest.mark.parametrize("kind,count", [("linear", 3), ("linear", 1), ("cubic", 2048), ("quadratic", 8)])
    def test_invalid_construction(self, kind, count):
        with pytest.raises(ValueError):
            build_inv_cdf_approx(kind, count)

    def test_gaussian_samples_dispatch(self, linear8):
        u = uniform_block(1, np.arange(10), 0)
        assert np.array_equal(gaussian_samples(u, None), exact_inv_cdf(u))
        assert np.array_equal(gaussian_samples(u, linear8), approx_inv_cdf(linear8, u))


class TestParseApprox:
    """parse_approx"""

    def test_exact(self):
        assert parse_approx("exact") is None

    def test_named(self):
        approx = parse_approx("Linear:16")
        assert approx.kind == "linear"
        assert approx.interval_count == 16

    @pytest.mark.parametrize("name", ["cubic", "linear:x", "spline:8", "linear:12"])
    def test_invalid(self, name):
        with pytest.raises(ValueError):
            parse_approx(name)


class TestDensityHistogram:
    """Sampled density of the approximate variable"""

    def test_integrates_to_one(self, linear8):
        centres, density = density_histogram(linear8, 50, 100_000, 7)
        width = centres[1] - centres[0]
        assert len(centres) == 50
        assert abs(density.sum() * width - 1.0) < 1e-9

    def test_symmetric_range(self, linear8):
        centres, _ = density_histogram(linear8, 10, 1000, 7)
        assert np.isclose(centres[0], -centres[-1])

    def test_invalid_arguments(self, linear8):
        with pytest.raises(ValueError):
            density_histogram(linear8, 0, 100, 1)
