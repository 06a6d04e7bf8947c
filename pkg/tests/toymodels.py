"""Small likelihoods that plug into the refinement routine."""

import numpy as np

from virtualfl import autodiff as ad

HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


class LinearGaussian:
    """``y = theta . x + noise`` with unit noise variance and no client parameters."""

    def __init__(self, dim: int = 1, noise_var: float = 1.0):
        self.server_dim = dim
        self.client_dim = 0
        self.noise_var = noise_var

    def log_likelihood(self, theta, phi, x, y, *, rng=None, training=True):
        x = np.asarray(x, dtype=np.float64).reshape(len(y), self.server_dim)
        pred = ad.matmul(theta, ad.Tensor(x.T))  # (S, N)
        resid = ad.sub(pred, np.asarray(y, dtype=np.float64))
        per_draw = ad.sum(ad.square(resid)) * (-0.5 / self.noise_var) - len(y) * (HALF_LOG_2PI
                                                                                   + 0.5 * np.log(self.noise_var))
        return per_draw / float(theta.shape[0])


def conjugate_posterior(x, y, prior_var=1.0, noise_var=1.0):
    x = np.asarray(x, dtype=np.float64)
    precision = 1.0 / prior_var + (x * x).sum() / noise_var
    return (x * np.asarray(y)).sum() / noise_var / precision, 1.0 / precision
