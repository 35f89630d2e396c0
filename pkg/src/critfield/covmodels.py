"""Isotropic covariance families and their derivatives.

Three families of unit-variance isotropic correlation functions are supported:

* ``Matern``: ``c1(r) = 2^{1-nu}/Gamma(nu) z^nu K_nu(z)`` with ``z = r sqrt(2 nu)/phi``;
* ``GaussianLimit``: the ``nu -> inf`` limit of the Matérn family,
  ``c1(r) = exp(-r^2 / (2 phi^2))``;
* ``RandomWave``: ``c1(r) = Gamma(d/2) (z/2)^{1-d/2} J_{d/2-1}(z)`` with ``z = r sqrt(d)/phi``.

Every correlation is handled through three parameterizations of the same
function: ``c(t)`` on ``R^d``, ``c1(r)`` on ``r = |t|`` and ``c2(s)`` on
``s = |t|^2``. Derivatives of ``c`` are assembled from the derivatives of
``c2``, which have closed forms in terms of Bessel functions.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

from .errors import InsufficientSmoothness

__all__ = [
    "Family",
    "CovarianceModel",
    "SpectralMoments",
    "NondegeneracyReport",
    "IntegrabilityReport",
    "c1",
    "c1_second",
    "c2_deriv",
    "spectral_moment",
    "spectral_moments",
    "moment_ratio",
    "partial_c",
    "check_pairwise_nondegeneracy",
    "xi_envelope",
    "check_integrability",
    "bessel_f",
    "bessel_g",
]


class Family(str, enum.Enum):
    MATERN = "matern"
    GAUSSIAN_LIMIT = "gauss"
    RANDOM_WAVE = "rwm"


@dataclass(frozen=True)
class CovarianceModel:
    """Parametric isotropic correlation model.

    Parameters
    ----------
    family : Family
        Covariance family.
    d : int
        Dimension of the index space.
    nu : float
        Matérn smoothness. ``inf`` for the Gaussian limit; ignored (stored as
        ``nan``) for the random wave model.
    phi : float
        Scale parameter, in the same units as the coordinates.
    """

    family: Family
    d: int
    nu: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.d}")
        object.__setattr__(self, "d", int(self.d))
        if not (self.phi > 0 and math.isfinite(self.phi)):
            raise ValueError(f"phi must be positive and finite, got {self.phi}")
        if self.family is Family.MATERN:
            if not (self.nu > 0 and math.isfinite(self.nu)):
                raise ValueError(f"Matérn nu must be positive and finite, got {self.nu}")
        elif self.family is Family.GAUSSIAN_LIMIT:
            object.__setattr__(self, "nu", math.inf)
        else:
            object.__setattr__(self, "nu", math.nan)

    @classmethod
    def matern(cls, d: int, nu: float, phi: float) -> "CovarianceModel":
        return cls(Family.MATERN, d, float(nu), float(phi))

    @classmethod
    def gaussian(cls, d: int, phi: float) -> "CovarianceModel":
        return cls(Family.GAUSSIAN_LIMIT, d, math.inf, float(phi))

    @classmethod
    def random_wave(cls, d: int, phi: float) -> "CovarianceModel":
        return cls(Family.RANDOM_WAVE, d, math.nan, float(phi))

    def with_phi(self, phi: float) -> "CovarianceModel":
        return CovarianceModel(self.family, self.d, self.nu, float(phi))

    @property
    def second_order_degenerate(self) -> bool:
        """True for the sine-cosine process (random wave model in d = 1)."""
        return self.family is Family.RANDOM_WAVE and self.d == 1

    def to_dict(self) -> dict:
        nu = None if not math.isfinite(self.nu) else self.nu
        return {"family": self.family.value, "d": self.d, "nu": nu, "phi": self.phi}

    @classmethod
    def from_dict(cls, data: dict) -> "CovarianceModel":
        family = Family(data["family"])
        nu = data.get("nu")
        if family is Family.MATERN:
            return cls.matern(data["d"], nu, data["phi"])
        if family is Family.GAUSSIAN_LIMIT:
            return cls.gaussian(data["d"], data["phi"])
        return cls.random_wave(data["d"], data["phi"])

    def __str__(self) -> str:
        if self.family is Family.MATERN:
            return f"Matern(d={self.d}, nu={self.nu:g}, phi={self.phi:g})"
        if self.family is Family.GAUSSIAN_LIMIT:
            return f"GaussianLimit(d={self.d}, phi={self.phi:g})"
        return f"RandomWave(d={self.d}, phi={self.phi:g})"


@dataclass(frozen=True)
class SpectralMoments:
    """Even spectral moments ``lambda_{2p}`` keyed by the order ``2p``."""

    moments: dict

    def __getitem__(self, order: int) -> float:
        return self.moments[order]


@dataclass(frozen=True)
class NondegeneracyReport:
    ok: bool
    margin1: float
    margin2: float


@dataclass(frozen=True)
class IntegrabilityReport:
    ok: bool
    integral: float
    tail_integral: float
    decay_exponent: float
    verdict: str


# ---------------------------------------------------------------------------
# Bessel helpers
# ---------------------------------------------------------------------------

_SERIES_CUTOFF = 4.0


def bessel_f(mu: float, x):
    """``f_mu(x) = x^{-mu/2} J_mu(sqrt(x))`` for ``x >= 0``.

    Satisfies ``f_mu' = -f_{mu+1}/2``. Evaluated by its power series near the
    origin (where the closed form is 0/0) and by ``J_mu`` elsewhere.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < _SERIES_CUTOFF
    if np.any(small):
        xs = x[small]
        total = np.zeros_like(xs)
        term = np.full_like(xs, 2.0 ** (-mu) / special.gamma(mu + 1.0))
        for k in range(40):
            total += term
            term = term * (-xs / 4.0) / ((k + 1) * (mu + k + 1))
        out[small] = total
    if np.any(~small):
        xl = x[~small]
        z = np.sqrt(xl)
        out[~small] = special.jv(mu, z) * xl ** (-mu / 2.0)
    return out


def _log_bessel_g(mu: float, x):
    # log of x^{mu/2} K_|mu|(sqrt x) for x > 0, with exponential scaling
    z = np.sqrt(x)
    return 0.5 * mu * np.log(x) + np.log(special.kve(abs(mu), z)) - z


def bessel_g(mu: float, x):
    """``g_mu(x) = x^{mu/2} K_|mu|(sqrt(x))`` for ``x > 0`` and real ``mu``.

    Satisfies ``g_mu' = -g_{mu-1}/2`` for every real ``mu`` (the order of
    ``K`` is even, the power keeps its sign). At ``x = 0`` returns the limit
    ``2^{mu-1} Gamma(mu)`` for ``mu > 0`` and ``inf`` otherwise.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    zero = x == 0
    if np.any(zero):
        out[zero] = 2.0 ** (mu - 1.0) * special.gamma(mu) if mu > 0 else np.inf
    if np.any(~zero):
        out[~zero] = np.exp(_log_bessel_g(mu, x[~zero]))
    return out


# ---------------------------------------------------------------------------
# Correlation and its derivatives
# ---------------------------------------------------------------------------


def c2_deriv(model: CovarianceModel, p: int, s):
    """p-th derivative of ``c2(s) = c1(sqrt(s))``.

    Parameters
    ----------
    model : CovarianceModel
    p : int
        Derivative order, ``0 <= p``.
    s : float or array_like
        Squared distance(s), non-negative.

    Returns
    -------
    float or ndarray

    Raises
    ------
    InsufficientSmoothness
        If ``s = 0`` is requested for a Matérn model with ``p >= nu``.
    """
    if p < 0 or int(p) != p:
        raise ValueError(f"derivative order must be a non-negative integer, got {p}")
    p = int(p)
    scalar = np.ndim(s) == 0
    s = np.atleast_1d(np.asarray(s, dtype=float))
    if np.any(s < 0):
        raise ValueError("c2 is only defined for s >= 0")
    phi = model.phi
    sign = -1.0 if p % 2 else 1.0
    if model.family is Family.GAUSSIAN_LIMIT:
        scale = 1.0 / (2.0 * phi * phi)
        out = sign * scale**p * np.exp(-scale * s)
    elif model.family is Family.MATERN:
        nu = model.nu
        if p >= nu and np.any(s == 0):
            raise InsufficientSmoothness(
                f"c2^({p})(0) does not exist for Matérn nu={nu:g} (needs p < nu)"
            )
        a = 2.0 * nu / phi**2
        log_pref = (1.0 - nu) * math.log(2.0) - special.gammaln(nu) + p * math.log(a / 2.0)
        mu = nu - p
        out = np.empty_like(s)
        zero = s == 0
        if np.any(zero):
            log_g0 = (mu - 1.0) * math.log(2.0) + special.gammaln(mu)
            out[zero] = sign * math.exp(log_pref + log_g0)
        if np.any(~zero):
            out[~zero] = sign * np.exp(log_pref + _log_bessel_g(mu, a * s[~zero]))
    else:
        d = model.d
        mu = d / 2.0 - 1.0
        b = d / phi**2
        pref = 2.0**mu * special.gamma(mu + 1.0) * (b / 2.0) ** p
        out = sign * pref * bessel_f(mu + p, b * s)
    return float(out[0]) if scalar else out


def c1(model: CovarianceModel, r):
    """Correlation at distance ``r >= 0``."""
    r = np.asarray(r, dtype=float)
    return c2_deriv(model, 0, r * r)


def c1_second(model: CovarianceModel, r):
    """Second derivative ``c1''(r) = 2 c2'(r^2) + 4 r^2 c2''(r^2)``."""
    r = np.asarray(r, dtype=float)
    s = r * r
    if np.ndim(s) == 0 and s == 0:
        return 2.0 * c2_deriv(model, 1, 0.0)
    return 2.0 * c2_deriv(model, 1, s) + 4.0 * s * c2_deriv(model, 2, s)


def spectral_moment(model: CovarianceModel, order: int) -> float:
    """Spectral moment ``lambda_{2p}`` for an even ``order = 2p``.

    ``lambda_{2p} = (2p)!/(2^p p!) phi^{-2p} * prod_q factor_q`` where the
    family-specific factors are ``nu/(nu-q)``, ``q = 1..p`` (Matérn),
    ``d/(d+2q)``, ``q = 0..p-1`` (random wave) and 1 (Gaussian limit).
    """
    if order % 2 or order < 0:
        raise ValueError(f"spectral moment order must be even and non-negative, got {order}")
    p = order // 2
    base = math.factorial(2 * p) / (2**p * math.factorial(p)) * model.phi ** (-2 * p)
    if model.family is Family.MATERN:
        if p >= model.nu:
            raise InsufficientSmoothness(
                f"lambda_{order} is infinite for Matérn nu={model.nu:g}"
            )
        return base * math.prod(model.nu / (model.nu - q) for q in range(1, p + 1))
    if model.family is Family.RANDOM_WAVE:
        d = model.d
        return base * math.prod(d / (d + 2.0 * q) for q in range(p))
    return base


def spectral_moments(model: CovarianceModel, max_order: int = 6) -> SpectralMoments:
    """All finite even spectral moments up to ``max_order``."""
    out = {}
    for order in range(0, max_order + 1, 2):
        try:
            out[order] = spectral_moment(model, order)
        except InsufficientSmoothness:
            break
    return SpectralMoments(out)


def moment_ratio(model: CovarianceModel) -> float:
    """``lambda_4 / (3 lambda_2)``, the quantity driving all intensities."""
    return spectral_moment(model, 4) / (3.0 * spectral_moment(model, 2))


def _partial_terms(alpha: Sequence[int], t: Sequence[float]):
    """Yield ``(coefficient, order)`` pairs with
    ``d^alpha c(t) = sum coefficient * c2^(order)(|t|^2)``."""
    ranges = [range(a // 2 + 1) for a in alpha]
    total = sum(alpha)
    for js in itertools.product(*ranges):
        coef = 1.0
        for a, j, ti in zip(alpha, js, t):
            k = a - 2 * j
            if k and ti == 0.0:
                coef = 0.0
                break
            coef *= math.factorial(a) / (math.factorial(j) * math.factorial(k)) * (2.0 * ti) ** k
        if coef != 0.0:
            yield coef, total - sum(js)


def partial_c(model: CovarianceModel, alpha: Sequence[int], t: Sequence[float]) -> float:
    """Mixed partial derivative ``d^alpha c(t)`` of ``c(t) = c2(|t|^2)``.

    Uses the expansion
    ``d^alpha c(t) = sum_j prod_i a_i!/(j_i! (a_i-2j_i)!) (2 t_i)^{a_i-2j_i}
    c2^{(|alpha| - |j|)}(|t|^2)`` over ``0 <= j_i <= a_i/2``.
    """
    alpha = tuple(int(a) for a in alpha)
    t = tuple(float(x) for x in np.ravel(t))
    if len(alpha) != model.d or len(t) != model.d:
        raise ValueError("alpha and t must have length d")
    s = sum(x * x for x in t)
    cache: dict[int, float] = {}
    value = 0.0
    for coef, order in _partial_terms(alpha, t):
        if order not in cache:
            cache[order] = c2_deriv(model, order, s)
        value += coef * cache[order]
    return value


def check_pairwise_nondegeneracy(model: CovarianceModel, r: float) -> NondegeneracyReport:
    """Check that the gradients at two points a distance ``r`` apart have a
    non-singular joint law.

    ``margin1 = c2'(0)^2 - c2'(r^2)^2`` and
    ``margin2 = c1''(0)^2 - c1''(r)^2`` must both exceed
    ``1e-12 * lambda_2^2``.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    d1_0 = c2_deriv(model, 1, 0.0)
    d1_r = c2_deriv(model, 1, r * r)
    s1_0 = c1_second(model, 0.0)
    s1_r = c1_second(model, r)
    margin1 = (d1_0 - d1_r) * (d1_0 + d1_r)
    margin2 = (s1_0 - s1_r) * (s1_0 + s1_r)
    tol = 1e-12 * spectral_moment(model, 2) ** 2
    return NondegeneracyReport(bool(margin1 > tol and margin2 > tol), float(margin1), float(margin2))


def xi_envelope(model: CovarianceModel, r):
    """``max_{p=1..4} r^p |c2^{(p)}(r^2)|``."""
    r = np.asarray(r, dtype=float)
    vals = [np.abs(r**p * c2_deriv(model, p, r * r)) for p in range(1, 5)]
    return np.max(np.stack(vals), axis=0)


def check_integrability(model: CovarianceModel, n_grid: int = 4000) -> IntegrabilityReport:
    """Numerical check that ``r^{d-1} Xi(r)`` is integrable on ``(0, inf)``.

    ``Xi`` is the smallest decreasing majorant of :func:`xi_envelope`. The
    integral is evaluated on ``(0, 50 phi]``; the tail beyond is bounded by
    fitting a power law to ``Xi`` on ``[12.5 phi, 50 phi]``. A fitted decay
    no faster than ``r^{-d}`` is reported as divergent.
    """
    d, phi = model.d, model.phi
    r_max = 50.0 * phi
    r = np.geomspace(1e-6 * phi, 2.0 * r_max, n_grid)
    env = xi_envelope(model, r)
    majorant = np.maximum.accumulate(env[::-1])[::-1]
    inside = r <= r_max
    rr, xi = r[inside], majorant[inside]
    integral = float(np.trapezoid(rr**d * xi, np.log(rr)))
    fit = (rr >= r_max / 4.0) & (xi > 0)
    xi_end = xi[-1]
    if xi_end == 0.0 or fit.sum() < 2:
        return IntegrabilityReport(True, integral, 0.0, -math.inf, "super-exponential decay")
    slope = float(np.polyfit(np.log(rr[fit]), np.log(xi[fit]), 1)[0])
    if slope < -d - 0.5:
        tail = float(r_max**d * xi_end / (-slope - d))
        verdict = "exponential decay" if slope < -4 * d - 10 else "power-law decay"
        return IntegrabilityReport(bool(math.isfinite(integral)), integral, tail, slope, verdict)
    return IntegrabilityReport(False, integral, math.inf, slope, "divergent oscillatory")
