"""Independent reference implementations used as test oracles.

None of these import the package's math; they restate each quantity from
first principles in the most literal (slow) form.
"""

import math

import numpy as np


def gaussian_posterior_mean(alpha_t, alpha_bar_prev, x_t, x0):
    """Mean of q(x_{t-1} | x_t, x_0) as the product of two Gaussians.

    x_{t-1} | x_0 ~ N(sqrt(ab_prev) x0, 1 - ab_prev) and
    x_t | x_{t-1} ~ N(sqrt(alpha_t) x_{t-1}, 1 - alpha_t). Multiplying the
    densities in x_{t-1} gives a Gaussian whose precision is the sum of
    precisions and whose mean is the precision-weighted mean.
    """
    beta = 1.0 - alpha_t
    prec_prior = 1.0 / (1.0 - alpha_bar_prev)
    prec_lik = alpha_t / beta  # likelihood in x_{t-1}: mean x_t / sqrt(alpha_t), var beta / alpha_t
    mean = (prec_prior * math.sqrt(alpha_bar_prev) * x0 + prec_lik * x_t / math.sqrt(alpha_t)) / (prec_prior + prec_lik)
    # magnitude of the two contributions, for a relative error that is not fooled by cancellation
    scale = (abs(prec_prior * math.sqrt(alpha_bar_prev) * x0) + abs(prec_lik * x_t / math.sqrt(alpha_t))) / (
        prec_prior + prec_lik)
    return mean, scale


def scaled_linear_alpha_bars(T=1000, beta_start=0.00085, beta_end=0.012):
    betas = np.linspace(beta_start**0.5, beta_end**0.5, T) ** 2
    return np.cumprod(1.0 - betas)


class AnalyticGaussianDenoiser:
    """Exact noise predictor for data x0 ~ N(mu, s^2 I).

    x_t ~ N(sqrt(ab) mu, ab s^2 + 1 - ab), and the posterior-mean noise is
    E[eps | x_t] = sqrt(1 - ab) (x_t - sqrt(ab) mu) / (ab s^2 + 1 - ab).
    """

    def __init__(self, alpha_bars_full, mu=0.1, s=0.5):
        self.ab = alpha_bars_full
        self.mu, self.s = mu, s

    def __call__(self, x, t_vec):
        ab = self.ab[t_vec].reshape(-1, *([1] * (x.ndim - 1))).to(x.dtype)
        return (1 - ab).sqrt() * (x - ab.sqrt() * self.mu) / (ab * self.s**2 + 1 - ab)


def brute_force_render(positions, scales, rotations, opacities, colors, R, tvec, focal, cx, cy, H, W,
                       background=(1.0, 1.0, 1.0), low_pass=0.3, near=0.2):
    """Per-pixel, per-Gaussian loop over numpy arrays; no cutoffs.

    Returns (image HxWx3, alpha HxW).
    """
    n = positions.shape[0]
    img = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    splats = []
    for i in range(n):
        w, x, y, z = rotations[i] / np.linalg.norm(rotations[i])
        Rq = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
        S = np.diag(scales[i])
        cov = Rq @ S @ S @ Rq.T
        p = R @ positions[i] + tvec
        if p[2] <= near:
            continue
        J = np.array([[focal / p[2], 0, -focal * p[0] / p[2] ** 2],
                      [0, focal / p[2], -focal * p[1] / p[2] ** 2]])
        c2 = J @ R @ cov @ R.T @ J.T + low_pass * np.eye(2)
        mean = np.array([focal * p[0] / p[2] + cx, focal * p[1] / p[2] + cy])
        splats.append((p[2], mean, np.linalg.inv(c2), opacities[i], colors[i]))
    splats.sort(key=lambda s: s[0])
    for r in range(H):
        for c in range(W):
            px = np.array([c + 0.5, r + 0.5])
            T = 1.0
            col = np.zeros(3)
            for _, mean, inv, op, color in splats:
                d = px - mean
                a = op * math.exp(-0.5 * d @ inv @ d)
                col += T * a * color
                T *= 1 - a
            img[r, c] = col + T * np.asarray(background)
            alpha[r, c] = 1 - T
    return img, alpha


def ssim_of_constants(a, b, c1=0.01**2, c2=0.03**2):
    """SSIM of two constant images: variances and covariance vanish."""
    return ((2 * a * b + c1) * c2) / ((a * a + b * b + c1) * c2)
