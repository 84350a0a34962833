import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from riskplan.cvar import compound_risk, cvar_gaussian, cvar_tail_factor


def cvar_by_integration(mu, sigma, alpha):
    """Oracle: E[X | X >= VaR_alpha] by quadrature of the Gaussian tail."""
    if sigma == 0:
        return mu
    var = stats.norm.ppf(alpha, loc=mu, scale=sigma)
    val, _ = integrate.quad(
        lambda x: x * stats.norm.pdf(x, loc=mu, scale=sigma), var, mu + 12 * sigma,
        limit=200,
    )
    return val / (1.0 - alpha)


def test_zero_variance_returns_mean():
    assert cvar_gaussian(1.0, 0.0, 0.9) == 1.0


def test_standard_normal_tail_at_95():
    assert cvar_gaussian(0.0, 1.0, 0.95) == pytest.approx(2.06271, abs=1e-5)
    assert cvar_gaussian(0.0, 1.0, 0.95) == pytest.approx(
        cvar_by_integration(0.0, 1.0, 0.95), abs=1e-9)


def test_alpha_to_zero_approaches_mean():
    assert cvar_gaussian(0.0, 1.0, 1e-9) == pytest.approx(0.0, abs=1e-6)


def test_matches_integration_oracle_on_grid():
    for mu in (-5.0, -1.0, 0.0, 2.5, 5.0):
        for sigma in (0.0, 0.3, 1.0, 5.0):
            for alpha in (0.01, 0.1, 0.5, 0.9, 0.99):
                expect = cvar_by_integration(mu, sigma, alpha)
                assert cvar_gaussian(mu, sigma, alpha) == pytest.approx(expect, abs=1e-6)


def test_domain_errors():
    with pytest.raises(ValueError):
        cvar_gaussian(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        cvar_gaussian(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        cvar_gaussian(0.0, -0.1, 0.5)


def test_vectorized_over_layers():
    mu = np.array([[0.0, 1.0], [2.0, 3.0]])
    sigma = np.array([[1.0, 0.0], [0.5, 2.0]])
    out = cvar_gaussian(mu, sigma, 0.9)
    factor = cvar_tail_factor(0.9)
    assert np.allclose(out, mu + sigma * factor)


@given(
    mu=st.floats(-5, 5), sigma=st.floats(0, 5),
    alpha=st.floats(0.01, 0.99),
)
@settings(max_examples=200, deadline=None)
def test_dominates_mean(mu, sigma, alpha):
    assert cvar_gaussian(mu, sigma, alpha) >= mu


@given(alpha=st.floats(0.01, 0.98), bump=st.floats(0.001, 0.01))
@settings(max_examples=100, deadline=None)
def test_monotone_in_alpha(alpha, bump):
    assert cvar_gaussian(0.3, 0.7, alpha + bump) >= cvar_gaussian(0.3, 0.7, alpha)


def test_compound_equals_closed_form():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = rng.integers(1, 30)
        mus = rng.uniform(0, 2, n)
        sigmas = rng.uniform(0, 1, n)
        alpha = rng.uniform(0.02, 0.98)
        factor = cvar_tail_factor(alpha)
        closed = mus[0] + float(np.sum(mus[1:] + sigmas[1:] * factor))
        assert compound_risk(mus, sigmas, alpha) == pytest.approx(closed, abs=1e-9)
