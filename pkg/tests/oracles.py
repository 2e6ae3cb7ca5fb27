"""Closed-form reference quantities used as independent test oracles."""

import numpy as np


def gaussian_optimal_denoiser(mean, std, alpha_bar):
    """Exact E[eps | x_t] for scalar data x0 ~ N(mean, std^2).

    With x_t = sqrt(a) x0 + sqrt(1-a) eps: Cov(eps, x_t) = sqrt(1-a) and
    Var(x_t) = a std^2 + 1 - a, so the Gaussian conditional mean is
    sqrt(1-a) (x_t - sqrt(a) mean) / (a std^2 + 1 - a).
    """
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)

    def denoise(x_t, t, cond=None, spatial=None):
        a = alpha_bar[np.asarray(t)].reshape((-1,) + (1,) * (np.ndim(x_t) - 1))
        return np.sqrt(1.0 - a) * (x_t - np.sqrt(a) * mean) / (a * std * std + 1.0 - a)

    return denoise


def cumulative_alpha_bar(T, beta_start, beta_end):
    """Plain-loop cumulative product, independent of numpy.cumprod."""
    out = 1.0
    for i in range(T):
        beta = beta_start + (beta_end - beta_start) * i / (T - 1)
        out *= 1.0 - beta
    return out
