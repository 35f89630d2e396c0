"""Moment characteristics of critical point processes.

Intensities, pair correlation functions, modified K-functions, the repulsion
index and higher-order intensities of the critical points of a stationary
isotropic Gaussian field, computed by Kac–Rice formulas with Monte Carlo
evaluation of the conditional expectations of Hessian determinants.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, interpolate, special

from .covmodels import CovarianceModel, Family, moment_ratio, spectral_moment
from .errors import NonPositiveValues, UnsupportedDimension
from .gaussjoint import (
    assemble_joint,
    condition_hessians_on_zero_gradients,
    density_at_zero_gradients,
    det_and_index,
    goe_eigenvalues,
    symmetric_sqrt,
)
from .montecarlo import MCResult, batch_means, spawn_generators

logger = logging.getLogger(__name__)

__all__ = [
    "IndexSet",
    "SummaryCurve",
    "SlopeFit",
    "intensity_closed_form",
    "intensity_goe_mc",
    "intensity_fraction",
    "scale_for_intensity",
    "pcf_mc",
    "pcf_curve",
    "kfun_eta",
    "repulsion_index",
    "smallr_slope",
    "smallr_exponent",
    "intensity_k_mc",
    "ball_volume",
    "sphere_surface",
    "numerical_cutoff",
]

# Fraction of local minima among all critical points for d = 4. Table values
# are only given to two digits; this constant was obtained from 3e7 GOE draws
# (antithetic in the smallest/largest eigenvalue), standard error 1e-5.
_D4_MINIMA_FRACTION = 0.05990

MORSE_RTOL = 1e-10


# ---------------------------------------------------------------------------
# Index sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexSet:
    """Subset of critical point indices ``{0, ..., d}``.

    Index 0 are local minima, index ``d`` local maxima, the rest saddles.
    """

    d: int
    members: frozenset

    def __post_init__(self):
        members = frozenset(int(m) for m in self.members)
        if not members:
            raise ValueError("index set must be nonempty")
        if min(members) < 0 or max(members) > self.d:
            raise ValueError(f"indices must lie in 0..{self.d}, got {sorted(members)}")
        object.__setattr__(self, "members", members)

    @classmethod
    def parse(cls, spec, d: int) -> "IndexSet":
        """Build from ``"all"``, ``"extrema"``, ``"maxima"``, ``"minima"``,
        ``"saddles"``, ``"0,2"``, ``"0:2"``, an iterable of ints or an ``IndexSet``."""
        if isinstance(spec, IndexSet):
            if spec.d != d:
                raise ValueError("index set dimension mismatch")
            return spec
        if isinstance(spec, (int, np.integer)):
            return cls(d, frozenset([int(spec)]))
        if isinstance(spec, str):
            key = spec.strip().lower()
            named = {
                "all": range(d + 1),
                "extrema": {0, d},
                "maxima": {d},
                "minima": {0},
                "saddles": range(1, d),
            }
            if key in named:
                return cls(d, frozenset(named[key]))
            key = key.strip("{}[]() ")
            m = re.fullmatch(r"(\d+)\s*:\s*(\d+)", key)
            if m:
                return cls(d, frozenset(range(int(m.group(1)), int(m.group(2)) + 1)))
            try:
                return cls(d, frozenset(int(x) for x in re.split(r"[,\s]+", key) if x))
            except ValueError as exc:
                raise ValueError(f"cannot parse index set {spec!r}") from exc
        return cls(d, frozenset(spec))

    @property
    def is_symmetric(self) -> bool:
        return all(self.d - m in self.members for m in self.members)

    @property
    def is_all(self) -> bool:
        return len(self.members) == self.d + 1

    def mask(self, index) -> np.ndarray:
        return np.isin(np.asarray(index), sorted(self.members))

    def __iter__(self):
        return iter(sorted(self.members))

    def __str__(self) -> str:
        return "{" + ",".join(str(m) for m in sorted(self.members)) + "}"


# ---------------------------------------------------------------------------
# Intensities
# ---------------------------------------------------------------------------


def _table_constants(d: int) -> tuple[float, list[float]]:
    """Constant ``C_d`` in ``rho_{0:d} = C_d m^{d/2}`` and index fractions."""
    if d == 1:
        return math.sqrt(3.0) / math.pi, [0.5, 0.5]
    if d == 2:
        return 2.0 / (math.pi * math.sqrt(3.0)), [0.25, 0.5, 0.25]
    if d == 3:
        a = (29.0 - 6.0 * math.sqrt(6.0)) / 116.0
        return 29.0 / (6.0 * math.pi**2 * math.sqrt(3.0)), [a, 0.5 - a, 0.5 - a, a]
    if d == 4:
        a = _D4_MINIMA_FRACTION
        return 25.0 / (6.0 * math.pi**2 * math.sqrt(3.0)), [a, 0.25, 0.5 - 2 * a, 0.25, a]
    raise UnsupportedDimension(f"closed-form intensities exist only for d <= 4 (got d={d})")


def intensity_fraction(d: int, L) -> float:
    """Fraction of critical points whose index lies in ``L``."""
    _, fractions = _table_constants(d)
    L = IndexSet.parse(L, d)
    return float(sum(fractions[m] for m in L))


def intensity_closed_form(model: CovarianceModel, L="all") -> float:
    """Intensity ``rho_L`` from the closed forms in terms of ``lambda_4/(3 lambda_2)``.

    Raises
    ------
    UnsupportedDimension
        For ``d > 4``; use :func:`intensity_goe_mc` instead.
    """
    const, _ = _table_constants(model.d)
    return const * moment_ratio(model) ** (model.d / 2.0) * intensity_fraction(model.d, L)


def _kappa(m: int) -> float:
    return (
        (2.0 * math.pi) ** (-m / 2.0)
        * special.gamma(1.5) ** m
        / math.prod(special.gamma(1.0 + q / 2.0) for q in range(1, m + 1))
    )


def goe_prefactor(model: CovarianceModel) -> float:
    d = model.d
    return (
        1.0
        / ((d + 1) * math.pi ** ((d + 1) / 2.0))
        * _kappa(d)
        / _kappa(d + 1)
        * moment_ratio(model) ** (d / 2.0)
    )


def intensity_goe_mc(
    model: CovarianceModel, ell: int, n_samples: int = 10**6, rng=None, threads: int | None = 1
) -> MCResult:
    """Intensity of index-``ell`` critical points via GOE eigenvalues.

    ``rho_ell = prefactor * E exp(-mu_{ell+1}^2 / 2)`` where ``mu_1 <= ... <=
    mu_{d+1}`` are the eigenvalues of a ``(d+1) x (d+1)`` GOE matrix.
    """
    d = model.d
    if not 0 <= ell <= d:
        raise ValueError(f"index must be in 0..{d}")
    pref = goe_prefactor(model)
    chunk = 50_000

    def sampler(gen, size):
        out = []
        for start in range(0, size, chunk):
            ev = goe_eigenvalues(d + 1, min(chunk, size - start), gen)
            out.append(np.exp(-0.5 * ev[:, ell] ** 2))
        return np.concatenate(out)

    res = batch_means(sampler, n_samples, rng, threads=threads)
    return MCResult(pref * res.value, pref * res.stderr, n_samples)


def _intensity(model: CovarianceModel, L: IndexSet) -> float:
    return intensity_closed_form(model, L)


def scale_for_intensity(family, d: int, nu: float | None, L, target_rho: float) -> float:
    """Scale ``phi`` such that the index set ``L`` has intensity ``target_rho``."""
    if target_rho <= 0:
        raise ValueError("target intensity must be positive")
    family = Family(family)
    if family is Family.MATERN:
        if nu is None or nu <= 2:
            raise ValueError("Matérn smoothness must exceed 2")
        m = nu / (nu - 2.0)
    elif family is Family.RANDOM_WAVE:
        m = d / (d + 2.0)
    else:
        m = 1.0
    const, _ = _table_constants(d)
    frac = intensity_fraction(d, L)
    return math.sqrt(m) * (frac * const / target_rho) ** (1.0 / d)


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------


@dataclass
class SummaryCurve:
    """Tabulated ``r -> (value, stderr)``."""

    abscissae: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.abscissae = np.asarray(self.abscissae, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)
        n = len(self.abscissae)
        if len(self.values) != n or len(self.stderr) != n:
            raise ValueError("abscissae, values and stderr must have equal lengths")
        if n > 1 and np.any(np.diff(self.abscissae) <= 0):
            raise ValueError("abscissae must be increasing")
        if np.any(self.stderr < 0):
            raise ValueError("standard errors must be non-negative")

    def __len__(self):
        return len(self.abscissae)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write("# " + json.dumps(self.meta, sort_keys=True) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["r", "value", "stderr"])
        for row in zip(self.abscissae, self.values, self.stderr):
            writer.writerow([repr(float(x)) for x in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "SummaryCurve":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        meta = {}
        if lines and lines[0].startswith("#"):
            meta = json.loads(lines[0][1:])
            lines = lines[1:]
        rows = list(csv.reader(lines))[1:]
        data = np.array([[float(x) for x in row] for row in rows if row]).reshape(-1, 3)
        return cls(data[:, 0], data[:, 1], data[:, 2], meta)


def numerical_cutoff(model: CovarianceModel) -> float:
    """Smallest distance at which pair correlations are evaluated (``1e-3 phi``)."""
    return 1e-3 * model.phi


def smallr_exponent(d: int, L, Lp=None) -> float | None:
    """Power ``kappa`` in ``g(r) ~ c r^kappa`` as ``r -> 0`` when known.

    Returns ``None`` when no exponent is tabulated for the index pair.
    """
    L = IndexSet.parse(L, d)
    Lp = L if Lp is None else IndexSet.parse(Lp, d)
    if L == Lp:
        if L.is_all:
            return 2.0 - d
        if L.members == frozenset({0, d}) and d > 1:
            return float(min(2 * d - 1, 5 - d))
        if L.members in (frozenset({0}), frozenset({d})):
            return float(5 - d) if d > 1 else 3.0
        if d == 2 and len(L.members) == 1:
            return 3.0
        return None
    if len(L.members) == len(Lp.members) == 1:
        (a,), (b,) = L.members, Lp.members
        if abs(a - b) == 1:
            return 2.0 - d
        if {a, b} == {0, d}:
            return float(2 * d - 1)
    return None


def _resolve_sets(model, L, Lp):
    L = IndexSet.parse(L, model.d)
    Lp = L if Lp is None else IndexSet.parse(Lp, model.d)
    return L, Lp


def _unit_direction(d: int, direction) -> np.ndarray:
    if direction is None:
        e = np.zeros(d)
        e[0] = 1.0
        return e
    e = np.asarray(direction, dtype=float)
    return e / np.linalg.norm(e)


def _two_point_conditional(model: CovarianceModel, r: float, direction=None):
    e = _unit_direction(model.d, direction)
    fv = density_at_zero_gradients(model, r)
    joint = assemble_joint(model, np.stack([np.zeros(model.d), r * e]), check=False)
    cond = condition_hessians_on_zero_gradients(joint)
    return fv, cond


def _product_sampler(d: int, k: int, root: np.ndarray, sets: Sequence[IndexSet], discards: list):
    nh = d * (d + 1) // 2
    chunk = 100_000

    def sampler(gen, size):
        out = []
        for start in range(0, size, chunk):
            m = min(chunk, size - start)
            draws = gen.standard_normal((m, root.shape[0])) @ root
            weight = np.ones(m)
            bad = np.zeros(m, dtype=bool)
            for i in range(k):
                det, idx, deg = det_and_index(draws[:, i * nh : (i + 1) * nh], d, MORSE_RTOL)
                weight *= np.abs(det) * sets[i].mask(idx)
                bad |= deg
            weight[bad] = 0.0
            discards.append(int(bad.sum()))
            out.append(weight)
        return np.concatenate(out)

    return sampler


def _warn_discards(discards: list, n: int) -> None:
    total = sum(discards)
    if total > 1e-4 * n:
        logger.warning("%d of %d Hessian draws discarded as near-degenerate", total, n)


def pcf_mc(
    model: CovarianceModel,
    L="all",
    Lp=None,
    r: float = 0.1,
    n_mc: int = 10**5,
    rng=None,
    direction=None,
    threads: int | None = 1,
) -> MCResult:
    """Cross pair correlation ``g_{L,L'}(r)`` by Monte Carlo.

    ``g = f_V(0,0) / (rho_L rho_L') * E[|det H1| |det H2| 1_L(H1) 1_L'(H2)]``
    where ``(H1, H2)`` follow the law of the Hessians at ``0`` and ``r e``
    given that both gradients vanish.

    Raises
    ------
    DegenerateJoint
        If the gradients at distance ``r`` have a singular joint law.
    """
    L, Lp = _resolve_sets(model, L, Lp)
    fv, cond = _two_point_conditional(model, r, direction)
    root = symmetric_sqrt(cond.cov)
    discards: list = []
    res = batch_means(_product_sampler(model.d, 2, root, [L, Lp], discards), n_mc, rng, threads=threads)
    _warn_discards(discards, n_mc)
    scale = fv / (_intensity(model, L) * _intensity(model, Lp))
    return MCResult(scale * res.value, scale * res.stderr, n_mc)


def pcf_curve(
    model: CovarianceModel,
    L="all",
    Lp=None,
    r_grid: Iterable[float] = (),
    n_mc: int = 10**5,
    rng=None,
    seed=None,
    threads: int | None = 1,
) -> SummaryCurve:
    """Pair correlation on a grid of distances (independent sub-stream per point)."""
    L, Lp = _resolve_sets(model, L, Lp)
    r_grid = np.asarray(list(r_grid), dtype=float)
    gens = spawn_generators(rng if rng is not None else seed, len(r_grid))
    vals, errs = [], []
    for r, gen in zip(r_grid, gens):
        res = pcf_mc(model, L, Lp, float(r), n_mc, gen, threads=threads)
        vals.append(res.value)
        errs.append(res.stderr)
    meta = {
        "quantity": "pcf",
        "model": model.to_dict(),
        "L": sorted(L.members),
        "Lp": sorted(Lp.members),
        "n_mc": int(n_mc),
        "seed": seed if isinstance(seed, (int, type(None))) else str(seed),
    }
    return SummaryCurve(r_grid, np.array(vals), np.array(errs), meta)


def default_pcf_grid(model: CovarianceModel, r_max: float, n: int = 60) -> np.ndarray:
    """Grid dense near the cutoff and regular further out."""
    lo = numerical_cutoff(model)
    near = np.geomspace(lo, min(r_max, model.phi), n // 3)
    far = np.linspace(near[-1], r_max, n - n // 3 + 1)[1:]
    return np.unique(np.concatenate([near, far]))


def sphere_surface(d: int) -> float:
    """Surface area ``2 pi^{d/2} / Gamma(d/2)`` of the unit sphere in ``R^d``."""
    return 2.0 * math.pi ** (d / 2.0) / special.gamma(d / 2.0)


def ball_volume(d: int) -> float:
    return math.pi ** (d / 2.0) / special.gamma(d / 2.0 + 1.0)


class _CurveInterpolant:
    """Monotone cubic interpolation of a pcf curve with a power-law head."""

    def __init__(self, curve: SummaryCurve, exponent: float | None):
        self.r = curve.abscissae
        self.g = curve.values
        self.spline = interpolate.PchipInterpolator(self.r, self.g, extrapolate=False)
        if exponent is None:
            k = min(4, len(self.r))
            pos = self.g[:k] > 0
            if pos.sum() >= 2:
                exponent = float(np.polyfit(np.log(self.r[:k][pos]), np.log(self.g[:k][pos]), 1)[0])
            else:
                exponent = 0.0
        self.exponent = exponent

    def head_integral(self, d: int, upper: float, lower: float = 0.0) -> float:
        """``int_lower^upper z^{d-1} g(z) dz`` for ``upper <= r_0`` (power-law head)."""
        r0, g0, k = self.r[0], self.g[0], self.exponent
        if d + k <= 0:
            raise ValueError("pair correlation is not integrable at the origin")
        return g0 * r0 ** (-k) * (upper ** (d + k) - lower ** (d + k)) / (d + k)

    def integral(self, d: int, lower: float, upper: float, minus_one: bool = False) -> float:
        if upper > self.r[-1] * (1 + 1e-12):
            raise ValueError(f"pcf curve only covers r <= {self.r[-1]}")
        upper = min(upper, self.r[-1])
        total = 0.0
        r0 = self.r[0]
        if lower < r0:
            top = min(upper, r0)
            total += self.head_integral(d, top, lower)
            if minus_one:
                total -= (top**d - lower**d) / d
            lower = top
        if upper > lower:
            def integrand(z):
                v = float(self.spline(z))
                return z ** (d - 1) * (v - 1.0 if minus_one else v)

            breaks = self.r[(self.r > lower) & (self.r < upper)]
            val, _ = integrate.quad(
                integrand, lower, upper, epsrel=1e-6, epsabs=1e-14,
                points=breaks[:100] if len(breaks) else None, limit=400,
            )
            total += val
        return total


def _curve_for(model, L, r_max, curve, n_mc, rng):
    if curve is not None:
        return curve
    return pcf_curve(model, L, None, default_pcf_grid(model, r_max), n_mc, rng)


def kfun_eta(
    model: CovarianceModel,
    L="all",
    eta: float = None,
    r=0.1,
    curve: SummaryCurve | None = None,
    n_mc: int = 10**5,
    rng=None,
):
    """Modified K-function ``K_eta(r) = surface(d) int_eta^r z^{d-1} g(z) dz``.

    Parameters
    ----------
    curve : SummaryCurve, optional
        Pair correlation curve to integrate. Computed on demand when omitted.
    """
    L = IndexSet.parse(L, model.d)
    if eta is None:
        eta = default_eta(model, L)
    r_arr = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r_arr <= eta):
        raise ValueError("need 0 < eta < r")
    curve = _curve_for(model, L, float(r_arr.max()), curve, n_mc, rng)
    interp = _CurveInterpolant(curve, smallr_exponent(model.d, L))
    surf = sphere_surface(model.d)
    out = np.array([surf * interp.integral(model.d, eta, float(x)) for x in r_arr])
    return float(out[0]) if np.ndim(r) == 0 else out


def repulsion_index(
    model: CovarianceModel,
    L="all",
    r=0.1,
    curve: SummaryCurve | None = None,
    n_mc: int = 10**5,
    rng=None,
):
    """Repulsion index ``I_L(r) = 1 + rho_L int_{B(0,r)} {g(|t|) - 1} dt``.

    Values below 1 indicate that ``g`` is mostly below 1 on ``[0, r]``. With
    this normalization ``rho_L * I_L(inf)`` is the asymptotic variance of the
    count per unit volume. Below the first curve abscissa the pair
    correlation is extended by the known small-distance power law.
    """
    L = IndexSet.parse(L, model.d)
    r_arr = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r_arr <= 0):
        raise ValueError("r must be positive")
    curve = _curve_for(model, L, float(r_arr.max()), curve, n_mc, rng)
    interp = _CurveInterpolant(curve, smallr_exponent(model.d, L))
    rho = _intensity(model, L)
    surf = sphere_surface(model.d)
    out = np.array([1.0 + rho * surf * interp.integral(model.d, 0.0, float(x), minus_one=True) for x in r_arr])
    return float(out[0]) if np.ndim(r) == 0 else out


def default_eta(model: CovarianceModel, L) -> float:
    """``0.05 * rho_L^{-1/d}``."""
    L = IndexSet.parse(L, model.d)
    return 0.05 * _intensity(model, L) ** (-1.0 / model.d)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float


def smallr_slope(curve: SummaryCurve, window: Sequence[float]) -> SlopeFit:
    """Least-squares fit of ``log g`` against ``log r`` on ``window``.

    Raises
    ------
    NonPositiveValues
        If a curve value inside the window is not positive.
    """
    lo, hi = window
    sel = (curve.abscissae >= lo) & (curve.abscissae <= hi)
    if sel.sum() < 2:
        raise ValueError("need at least two abscissae inside the window")
    r, g = curve.abscissae[sel], curve.values[sel]
    if np.any(g <= 0):
        raise NonPositiveValues("log-log fit needs positive values")
    x, y = np.log(r), np.log(g)
    xc = x - x.mean()
    slope = float(np.sum(xc * (y - y.mean())) / np.sum(xc * xc))
    intercept = float(y.mean() - slope * x.mean())
    n = len(x)
    if n > 2:
        resid = y - (intercept + slope * x)
        stderr = float(math.sqrt(np.sum(resid**2) / (n - 2) / np.sum(xc * xc)))
    else:
        stderr = 0.0
    return SlopeFit(slope, intercept, stderr)


def intensity_k_mc(
    model: CovarianceModel, L, points, n_mc: int = 10**5, rng=None, threads: int | None = 1
) -> MCResult:
    """k-th order intensity ``rho^(k)(t_1, ..., t_k)`` of ``Y_L`` by Monte Carlo."""
    L = IndexSet.parse(L, model.d)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    k, d = pts.shape
    joint = assemble_joint(model, pts, check=False)
    cond = condition_hessians_on_zero_gradients(joint)
    g = joint.gradient_rows()
    sign, logdet = np.linalg.slogdet(joint.cov[np.ix_(g, g)])
    fv = math.exp(-0.5 * len(g) * math.log(2.0 * math.pi) - 0.5 * logdet)
    root = symmetric_sqrt(cond.cov)
    discards: list = []
    res = batch_means(_product_sampler(d, k, root, [L] * k, discards), n_mc, rng, threads=threads)
    _warn_discards(discards, n_mc)
    return MCResult(fv * res.value, fv * res.stderr, n_mc)
