"""Conditional Value-at-Risk for Gaussian cell costs.

For a cost ``R ~ N(mu, sigma^2)`` the CVaR at level ``alpha`` is

    CVaR_alpha(R) = mu + sigma * pdf(icdf(alpha)) / (1 - alpha)

which is the expected cost in the worst ``(1 - alpha)`` tail.  ``alpha``
close to 0 recovers the mean, ``alpha`` close to 1 approaches worst case.
"""

import numpy as np
from scipy import stats


def cvar_tail_factor(alpha):
    """Multiplier on sigma in the Gaussian CVaR: pdf(icdf(alpha))/(1-alpha).

    Parameters
    ----------
    alpha : float
        Risk level, strictly inside (0, 1).

    Returns
    -------
    float
        Nonnegative factor, increasing in alpha, -> 0 as alpha -> 0.
    """
    alpha = float(alpha)
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    z = stats.norm.ppf(alpha)
    return float(stats.norm.pdf(z) / (1.0 - alpha))


def cvar_gaussian(mu, sigma, alpha):
    """CVaR of a Gaussian cost N(mu, sigma^2) at risk level alpha.

    ``mu`` and ``sigma`` may be scalars or arrays (broadcast together);
    ``alpha`` is a scalar.  ``sigma`` must be >= 0 elementwise.

    Returns mu + sigma * pdf(icdf(alpha)) / (1 - alpha); equals ``mu``
    when ``sigma == 0`` and is nondecreasing in mu, sigma and alpha.
    """
    factor = cvar_tail_factor(alpha)
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be >= 0")
    out = mu + sigma * factor
    if out.ndim == 0:
        return float(out)
    return out


def compound_risk(mus, sigmas, alpha):
    """Compounded (nested) dynamic risk of a sequence of Gaussian costs.

    Evaluates ``R_0 + rho(R_1 + rho(R_2 + ... + rho(R_N)))`` with rho the
    Gaussian CVaR, using translation invariance of CVaR at each recursion
    step.  The first element contributes its mean only.  For Gaussian
    per-step costs this telescopes to the closed form

        mu_0 + sum_{k>=1} [mu_k + sigma_k * tail_factor(alpha)]

    which is what :func:`riskplan.geom_planner.path_risk` computes; this
    recursion is kept as the reference evaluation of the nested metric.
    """
    mus = np.asarray(mus, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    if mus.shape != sigmas.shape or mus.ndim != 1:
        raise ValueError("mus and sigmas must be 1-D and the same length")
    if mus.size == 0:
        raise ValueError("empty cost sequence")
    acc = 0.0
    for k in range(mus.size - 1, 0, -1):
        # rho(R_k + acc) = mu_k + acc + sigma_k * factor  (shift invariance)
        acc = cvar_gaussian(mus[k] + acc, sigmas[k], alpha)
    return float(mus[0] + acc)
