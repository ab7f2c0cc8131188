"""Gamma and Poisson exponential-family primitives.

Log densities, score functions and samplers used by every other module.
The gamma family is parameterized by (shape, rate) throughout the package,
so the mean is always ``shape / rate``; link functions convert into this
convention in exactly one place (:mod:`convdef.model`).

All samplers are pure functions of ``(params, rng)``: the same generator
state yields the same draws, and concurrent callers are safe as long as
each owns its own generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "DomainError",
    "GammaParams",
    "PoissonParams",
    "PARAM_FLOOR",
    "gamma_log_density",
    "gamma_score",
    "gamma_sample",
    "poisson_log_pmf",
    "gamma_logpdf",
    "gamma_score_arrays",
    "gamma_draw",
    "poisson_logpmf",
    "digamma",
    "log_gamma",
]

# Clamp applied to any shape/rate before a density is evaluated; optimizer
# steps can otherwise underflow a parameter to zero.
PARAM_FLOOR = 1e-10

# Smallest admissible draw, keeps log(z) finite.
_TINY = np.finfo(np.float64).tiny

# Wrapped special functions. scipy's implementations are accurate to well
# below 1e-10 relative error on [1e-4, 1e7]; tests pin this against a
# high-precision table.
digamma = special.digamma
log_gamma = special.gammaln


class DomainError(ValueError):
    """Argument outside the support or parameter space of a distribution."""


@dataclass(frozen=True)
class GammaParams:
    """Shape/rate parameters of a gamma distribution.

    The density is ``p(z) = z^{-1} exp(a log z - b z - log G(a) + a log b)``
    with shape ``a`` and rate ``b``, so ``mean() == shape / rate``.
    """

    shape: float
    rate: float

    def __post_init__(self):
        if not (np.isfinite(self.shape) and self.shape > 0):
            raise DomainError(f"gamma shape must be positive and finite, got {self.shape}")
        if not (np.isfinite(self.rate) and self.rate > 0):
            raise DomainError(f"gamma rate must be positive and finite, got {self.rate}")

    def mean(self) -> float:
        return self.shape / self.rate


@dataclass(frozen=True)
class PoissonParams:
    """Rate parameter of a Poisson distribution."""

    rate: float

    def __post_init__(self):
        if not (np.isfinite(self.rate) and self.rate > 0):
            raise DomainError(f"poisson rate must be positive and finite, got {self.rate}")


# ---------------------------------------------------------------------------
# Array cores. These floor parameters instead of raising and are the entry
# points used by the inference hot path.
# ---------------------------------------------------------------------------


def gamma_logpdf(z, shape, rate):
    """Vectorized gamma log density with parameters floored at PARAM_FLOOR."""
    a = np.maximum(shape, PARAM_FLOOR)
    b = np.maximum(rate, PARAM_FLOOR)
    return (a - 1.0) * np.log(z) - b * z - special.gammaln(a) + a * np.log(b)


def gamma_score_arrays(z, shape, rate):
    """Vectorized score of the gamma log density.

    Returns ``(d/da log q, d/db log q)`` evaluated at ``z`` for floored
    parameters, i.e. ``log z - digamma(a) + log b`` and ``-z + a / b``.
    """
    a = np.maximum(shape, PARAM_FLOOR)
    b = np.maximum(rate, PARAM_FLOOR)
    d_shape = np.log(z) - special.digamma(a) + np.log(b)
    d_rate = -z + a / b
    return d_shape, d_rate


def gamma_draw(shape, rate, rng, size=None):
    """Vectorized gamma draws that stay accurate for shapes below one.

    Shapes below one go through the boost transform: draw at ``shape + 1``
    and multiply by ``U^{1/shape}``. Rejection samplers degrade as the shape
    approaches zero, the transform does not. Draws are floored at the
    smallest positive double so downstream logs stay finite.
    """
    shape = np.asarray(shape, dtype=np.float64)
    rate = np.asarray(rate, dtype=np.float64)
    if size is None:
        size = np.broadcast_shapes(shape.shape, rate.shape)
    small = shape < 1.0
    g = rng.standard_gamma(np.where(small, shape + 1.0, shape), size=size)
    u = rng.random(size=size)
    with np.errstate(divide="ignore"):
        boost = np.where(small, u ** (1.0 / np.maximum(shape, PARAM_FLOOR)), 1.0)
    return np.maximum(g * boost / rate, _TINY)


def poisson_logpmf(x, rate):
    """Vectorized Poisson log pmf via log-gamma, exact for counts up to 1e6."""
    lam = np.maximum(rate, PARAM_FLOOR)
    x = np.asarray(x, dtype=np.float64)
    return x * np.log(lam) - lam - special.gammaln(x + 1.0)


# ---------------------------------------------------------------------------
# Scalar API with domain validation.
# ---------------------------------------------------------------------------


def gamma_log_density(z: float, p: GammaParams) -> float:
    """Log of the gamma density ``z^{-1} exp(a log z - b z - log G(a) + a log b)``.

    Raises :class:`DomainError` for ``z <= 0``.
    """
    if not (np.isfinite(z) and z > 0):
        raise DomainError(f"gamma support is z > 0, got {z}")
    return float(gamma_logpdf(z, p.shape, p.rate))


def gamma_score(z: float, p: GammaParams) -> tuple[float, float]:
    """Score of the gamma log density with respect to (shape, rate).

    ``d/da = log z - digamma(a) + log b`` and ``d/db = -z + a / b``; each
    component matches central finite differences of
    :func:`gamma_log_density`.
    """
    if not (np.isfinite(z) and z > 0):
        raise DomainError(f"gamma support is z > 0, got {z}")
    d_shape, d_rate = gamma_score_arrays(z, p.shape, p.rate)
    return float(d_shape), float(d_rate)


def gamma_sample(p: GammaParams, rng: np.random.Generator) -> float:
    """One strictly positive draw from ``Gamma(shape, rate)``."""
    return float(gamma_draw(p.shape, p.rate, rng, size=()))


def poisson_log_pmf(x: int, p: PoissonParams) -> float:
    """Poisson log pmf ``x log lam - lam - log G(x + 1)``.

    Raises :class:`DomainError` for negative or non-integer counts.
    """
    if x < 0 or x != int(x):
        raise DomainError(f"poisson support is non-negative integers, got {x}")
    return float(poisson_logpmf(float(x), p.rate))
