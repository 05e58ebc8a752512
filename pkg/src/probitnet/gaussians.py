"""Scalar Gaussian belief algebra and the moment-matched online update rule.

Every weight in a model is a univariate Gaussian belief (mean, variance).
This module provides the numerics everything else is built on:

* robust probit special functions (``normal_cdf``, ``normal_log_cdf``,
  ``inverse_mills``) that stay finite and accurate deep into the tails,
* the assumed-density-filtering update that moves a belief given the
  gradient of the log evidence of one observation,
* the natural-parameter (precision, precision * mean) algebra used to
  form and merge likelihood messages: multiplication and division of
  Gaussians are addition and subtraction in natural parameters,
* variance decay back toward the prior, so a long-running model keeps
  learning.

All functions are pure and operate on 64-bit floats; the scalar special
functions also accept ndarrays and broadcast elementwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ImproperGaussian

__all__ = [
    "DEFAULT_VARIANCE_FLOOR",
    "DEFAULT_VARIANCE_CEILING",
    "Gaussian",
    "NaturalGaussian",
    "AdfGradient",
    "normal_cdf",
    "normal_pdf",
    "normal_log_cdf",
    "inverse_mills",
    "adf_update",
    "adf_update_arrays",
    "to_natural",
    "from_natural",
    "natural_divide",
    "natural_multiply",
    "weight_decay",
]

# Bounds on belief variances. The update rules never bound variances on
# their own: unbounded shrink stalls learning and an improper merge would
# crash, so callers clamp against these (both are configurable per model).
DEFAULT_VARIANCE_FLOOR = 1e-8
DEFAULT_VARIANCE_CEILING = 1e4

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
# Open-interval bounds for probabilities: strictly inside (0, 1).
_CDF_LO = 5e-324
_CDF_HI = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class Gaussian:
    """A proper univariate Gaussian belief (variance strictly positive)."""

    mean: float
    variance: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.variance)):
            raise ImproperGaussian(f"non-finite belief ({self.mean}, {self.variance})")
        if self.variance <= 0.0:
            raise ImproperGaussian(f"variance must be > 0, got {self.variance}")


@dataclass(frozen=True)
class NaturalGaussian:
    """Natural parameters (precision, precision * mean).

    Likelihood messages are ratios of Gaussians, so the precision may be
    negative or zero; only finiteness is required.
    """

    precision: float
    precision_mean: float

    def __post_init__(self):
        if not (math.isfinite(self.precision) and math.isfinite(self.precision_mean)):
            raise ImproperGaussian(
                f"non-finite natural parameters ({self.precision}, {self.precision_mean})"
            )


@dataclass(frozen=True)
class AdfGradient:
    """Partial derivatives of one observation's log evidence.

    ``d_mean`` and ``d_variance`` are d(log Z)/d(mean) and
    d(log Z)/d(variance) of a single weight's belief.
    """

    d_mean: float
    d_variance: float

    def __post_init__(self):
        if not (math.isfinite(self.d_mean) and math.isfinite(self.d_variance)):
            raise ImproperGaussian(
                f"non-finite gradient ({self.d_mean}, {self.d_variance})"
            )


def normal_cdf(x):
    """Standard normal CDF, clipped to the open interval (0, 1).

    Accurate to better than 1e-12 absolute over |x| <= 8 and never returns
    exactly 0 or 1 for |x| <= 37, so downstream logs and ratios stay finite.
    Accepts scalars or ndarrays.
    """
    out = np.clip(special.ndtr(x), _CDF_LO, _CDF_HI)
    return float(out) if np.ndim(x) == 0 else out


def normal_pdf(x):
    """Standard normal density. Accepts scalars or ndarrays."""
    out = np.exp(-0.5 * np.square(x) - _LOG_SQRT_2PI)
    return float(out) if np.ndim(x) == 0 else out


def normal_log_cdf(x):
    """log of the standard normal CDF, stable far into the lower tail."""
    out = special.log_ndtr(x)
    return float(out) if np.ndim(x) == 0 else out


def inverse_mills(alpha):
    """phi(alpha) / Phi(alpha), the inverse Mills ratio.

    Evaluated in log space as exp(log phi - log Phi), which neither
    overflows nor cancels in the deep negative tail (where the naive ratio
    of two underflowing quantities dies around alpha ~ -37); log Phi itself
    is computed from an asymptotic expansion down there. Positive and
    strictly decreasing in alpha. Accepts scalars or ndarrays.
    """
    out = np.exp(-0.5 * np.square(alpha) - _LOG_SQRT_2PI - special.log_ndtr(alpha))
    return float(out) if np.ndim(alpha) == 0 else out


def adf_update(
    prior: Gaussian,
    grad: AdfGradient,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
) -> tuple[Gaussian, bool]:
    """Moment-matched posterior for one weight after one observation.

    Returns ``(posterior, skipped)`` where::

        mean'     = mean + variance * d_mean
        variance' = variance - variance^2 * (d_mean^2 - 2 * d_variance)

    A degenerate update (non-finite result, or variance' at or below
    ``variance_floor``) is rejected: the prior is returned unchanged with
    ``skipped=True``. An online system must survive a bad example, so this
    is a flag, not an exception.
    """
    m, v = prior.mean, prior.variance
    new_mean = m + v * grad.d_mean
    new_variance = v - v * v * (grad.d_mean * grad.d_mean - 2.0 * grad.d_variance)
    if (
        not math.isfinite(new_mean)
        or not math.isfinite(new_variance)
        or new_variance < variance_floor
    ):
        return prior, True
    return Gaussian(new_mean, new_variance), False


def adf_update_arrays(
    means: np.ndarray,
    variances: np.ndarray,
    d_mean: np.ndarray,
    d_variance: np.ndarray,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized form of :func:`adf_update` over parallel arrays.

    Returns ``(new_means, new_variances, skipped)``; wherever ``skipped``
    is True the prior entries are carried through unchanged.
    """
    new_means = means + variances * d_mean
    new_variances = variances - variances * variances * (
        d_mean * d_mean - 2.0 * d_variance
    )
    skipped = ~(
        np.isfinite(new_means)
        & np.isfinite(new_variances)
        & (new_variances >= variance_floor)
    )
    if skipped.any():
        new_means = np.where(skipped, means, new_means)
        new_variances = np.where(skipped, variances, new_variances)
    return new_means, new_variances, skipped


def to_natural(g: Gaussian) -> NaturalGaussian:
    """Convert a belief to natural parameters (1/v, m/v)."""
    return NaturalGaussian(1.0 / g.variance, g.mean / g.variance)


def from_natural(n: NaturalGaussian) -> Gaussian:
    """Convert natural parameters back to (mean, variance).

    Raises :class:`ImproperGaussian` when precision <= 0: such a message is
    a legitimate ratio of Gaussians but not a distribution.
    """
    if n.precision <= 0.0:
        raise ImproperGaussian(f"precision must be > 0, got {n.precision}")
    v = 1.0 / n.precision
    return Gaussian(n.precision_mean * v, v)


def natural_divide(posterior: Gaussian, prior: Gaussian) -> NaturalGaussian:
    """posterior / prior as a natural-parameter delta.

    This is the likelihood message a worker sends: subtracting natural
    parameters divides the densities. The result may have precision of any
    sign.
    """
    return NaturalGaussian(
        1.0 / posterior.variance - 1.0 / prior.variance,
        posterior.mean / posterior.variance - prior.mean / prior.variance,
    )


def natural_multiply(
    base: Gaussian,
    msg: NaturalGaussian,
    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
    variance_ceiling: float = DEFAULT_VARIANCE_CEILING,
) -> tuple[Gaussian, bool]:
    """Merge a likelihood message into a belief by natural-parameter addition.

    Returns ``(merged, clamped)``. If the summed precision would take the
    variance above ``variance_ceiling`` (including non-positive precision)
    or below ``variance_floor``, the variance is clamped to the bound and
    the mean is recomputed from the summed precision-mean so the pair stays
    consistent; ``clamped=True`` flags it so callers can count pathologies
    instead of hiding them.
    """
    precision = 1.0 / base.variance + msg.precision
    precision_mean = base.mean / base.variance + msg.precision_mean
    clamped = False
    if precision <= 1.0 / variance_ceiling:
        variance = variance_ceiling
        clamped = True
    else:
        variance = 1.0 / precision
        if variance < variance_floor:
            variance = variance_floor
            clamped = True
    return Gaussian(precision_mean * variance, variance), clamped


def weight_decay(v, v_prior: float, eps: float):
    """Relax a variance toward the prior: v' = v*vp / ((1-eps)*vp + eps*v).

    ``eps`` in [0, 1] sets the pull strength; the prior variance is the
    unique fixed point and ``eps=0`` is the identity (both hold exactly,
    not merely to rounding). Accepts scalars or ndarrays for ``v``.
    """
    if eps == 0.0:
        return v
    decayed = v * v_prior / ((1.0 - eps) * v_prior + eps * v)
    out = np.where(v == v_prior, v_prior, decayed)
    return float(out) if np.ndim(v) == 0 else out
