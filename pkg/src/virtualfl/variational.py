"""Diagonal Gaussians, natural-parameter factors and their algebra.

Two representations are used side by side:

* :class:`DiagGaussian` (mean, variance) is a proper distribution.
* :class:`NaturalFactor` (precision, shift) with ``precision = 1/var`` and
  ``shift = mean/var``. Products and quotients of Gaussians are sums and
  differences in this form. A factor may have non-positive precision; it is
  then a message, not a distribution, and only :func:`to_moment` /
  :func:`project_proper` turn it back into one.

:class:`VariationalParams` is the trainable form, ``sigma = softplus(rho)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels

DEFAULT_MIN_PRECISION = 1e-8


class ImproperFactor(ValueError):
    """A natural factor with non-positive precision was used as a distribution."""


def _vec(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64).reshape(-1)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or infinity")
    arr.setflags(write=False)
    return arr


def _same_dim(a, b) -> None:
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} vs {len(b)}")


@dataclass(frozen=True, eq=False)
class DiagGaussian:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = _vec(self.mean, "mean")
        var = _vec(self.variance, "variance")
        _same_dim(mean, var)
        if (var <= 0).any():
            raise ValueError("variance must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    def __len__(self) -> int:
        return len(self.mean)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    @classmethod
    def standard(cls, dim: int, scale: float = 1.0) -> "DiagGaussian":
        return cls(np.zeros(dim), np.full(dim, float(scale)))

    def allclose(self, other: "DiagGaussian", atol: float = 1e-12) -> bool:
        return (
            len(self) == len(other)
            and np.allclose(self.mean, other.mean, rtol=0, atol=atol)
            and np.allclose(self.variance, other.variance, rtol=0, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class NaturalFactor:
    precision: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        prec = _vec(self.precision, "precision")
        shift = _vec(self.shift, "shift")
        _same_dim(prec, shift)
        object.__setattr__(self, "precision", prec)
        object.__setattr__(self, "shift", shift)

    def __len__(self) -> int:
        return len(self.precision)

    @property
    def is_proper(self) -> bool:
        return bool((self.precision > 0).all())

    @classmethod
    def uniform(cls, dim: int) -> "NaturalFactor":
        return cls(np.zeros(dim), np.zeros(dim))

    def scaled(self, power: float) -> "NaturalFactor":
        """The factor raised to ``power`` (natural parameters times ``power``)."""
        return NaturalFactor(self.precision * power, self.shift * power)

    def __mul__(self, other: "NaturalFactor") -> "NaturalFactor":
        return factor_product(self, other)

    def __truediv__(self, other: "NaturalFactor") -> "NaturalFactor":
        return factor_quotient(self, other)


def softplus_inverse(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if (sigma <= 0).any():
        raise ValueError("softplus_inverse needs positive input")
    # log(expm1(s)) loses precision for large s; use s + log(1 - e^-s) there
    return np.where(sigma > 20.0, sigma + np.log1p(-np.exp(-np.minimum(sigma, 700.0))),
                    np.log(np.expm1(np.minimum(sigma, 20.0))))


@dataclass(frozen=True, eq=False)
class VariationalParams:
    """Unconstrained parameters of a diagonal Gaussian, ``sigma = softplus(rho)``."""

    mean: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        mean = _vec(self.mean, "mean")
        rho = _vec(self.rho, "rho")
        _same_dim(mean, rho)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "rho", rho)

    def __len__(self) -> int:
        return len(self.mean)

    @property
    def sigma(self) -> np.ndarray:
        return kernels.softplus(self.rho)

    def to_gaussian(self) -> DiagGaussian:
        s = self.sigma
        return DiagGaussian(self.mean, s * s)

    @classmethod
    def from_gaussian(cls, d: DiagGaussian) -> "VariationalParams":
        return cls(d.mean, softplus_inverse(d.std))

    @classmethod
    def from_sigma(cls, mean, sigma) -> "VariationalParams":
        return cls(mean, softplus_inverse(sigma))


def kl_divergence(p: DiagGaussian, q: DiagGaussian) -> float:
    """KL(p || q) for diagonal Gaussians, summed over dimensions."""
    _same_dim(p.mean, q.mean)
    diff = p.mean - q.mean
    terms = 0.5 * np.log(q.variance / p.variance) + (p.variance + diff * diff) / (2.0 * q.variance) - 0.5
    return float(terms.sum())


def to_natural(d: DiagGaussian) -> NaturalFactor:
    precision = 1.0 / d.variance
    return NaturalFactor(precision, d.mean * precision)


def to_moment(f: NaturalFactor) -> DiagGaussian:
    if not f.is_proper:
        bad = int(np.argmin(f.precision))
        raise ImproperFactor(
            f"precision {f.precision[bad]:.3g} <= 0 at dimension {bad}; factor is not a distribution"
        )
    variance = 1.0 / f.precision
    return DiagGaussian(f.shift * variance, variance)


def factor_product(a: NaturalFactor, b: NaturalFactor) -> NaturalFactor:
    _same_dim(a.precision, b.precision)
    return NaturalFactor(a.precision + b.precision, a.shift + b.shift)


def factor_quotient(a: NaturalFactor, b: NaturalFactor) -> NaturalFactor:
    _same_dim(a.precision, b.precision)
    return NaturalFactor(a.precision - b.precision, a.shift - b.shift)


def damp(old: NaturalFactor, update: NaturalFactor, damping: float = 1.0) -> NaturalFactor:
    """Geometric interpolation ``old^(1-d) * update^d`` in natural parameters."""
    if not 0.0 < damping <= 1.0:
        raise ValueError(f"damping must lie in (0, 1], got {damping}")
    if damping == 1.0:
        return update
    return NaturalFactor(
        (1.0 - damping) * old.precision + damping * update.precision,
        (1.0 - damping) * old.shift + damping * update.shift,
    )


def project_proper(f: NaturalFactor, min_precision: float = DEFAULT_MIN_PRECISION) -> DiagGaussian:
    """Convert to moments, clamping precisions below ``min_precision``.

    A clamped dimension keeps the mean ``shift/precision`` if its original
    precision was positive, otherwise the mean becomes ``shift/min_precision``.
    """
    if not min_precision > 0:
        raise ValueError("min_precision must be positive")
    prec = f.precision
    ok = prec >= min_precision
    if ok.all():
        return to_moment(f)
    safe = np.where(prec > 0, prec, 1.0)
    mean = np.where(ok | (prec > 0), f.shift / safe, f.shift / min_precision)
    precision = np.where(ok, prec, min_precision)
    return DiagGaussian(mean, 1.0 / precision)


def sample_reparam(d: DiagGaussian, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != len(d):
        raise ValueError(f"noise width {noise.shape[-1]} does not match dimension {len(d)}")
    return d.mean + d.std * noise


def sample_params(mean: ad.Tensor, rho: ad.Tensor, noise) -> ad.Tensor:
    """Differentiable reparameterized draw ``mean + softplus(rho) * noise``."""
    return ad.reparam(mean, rho, noise)


def params_kl(mean: ad.Tensor, rho: ad.Tensor, target: DiagGaussian) -> ad.Tensor:
    """Differentiable KL(N(mean, softplus(rho)^2) || target)."""
    if len(target) == 0:
        return ad.Tensor(0.0)
    return ad.gaussian_kl(mean, rho, target.mean, target.variance)
