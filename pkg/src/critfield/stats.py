"""Estimators on critical point patterns and Hermite-expansion machinery.

* intensity and translation-corrected modified K-function estimators;
* probabilists' Hermite polynomials, coefficients of the Hermite expansion
  of the counting functionals, Mehler covariances between Hermite
  polynomials of the standardized (gradient, Hessian) vector at two points,
  and the truncated asymptotic variance of the counting statistic;
* a replication harness checking asymptotic normality of the estimators.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from statsmodels.stats.diagnostic import normal_ad

from .covmodels import CovarianceModel, Family, check_integrability, spectral_moment
from .critpoints import ExtractionConfig, PointPattern, extract, filter_indices
from .errors import EmptyPattern, IntegrabilityViolation, RuntimeCapExceeded
from .fieldsim import Window, simulate_spectral
from .gaussjoint import (
    assemble_joint,
    condition_hessians_on_zero_gradients,
    density_at_zero_gradients,
    derivative_cross_cov,
    det_and_index,
    inverse_sqrt,
    symmetric_sqrt,
)
from .kacrice import IndexSet, intensity_closed_form, kfun_eta, sphere_surface
from .montecarlo import MCResult, batch_means, parallel_map, spawn_generators

__all__ = [
    "rho_hat",
    "k_hat_eta",
    "linear_count",
    "hermite_poly",
    "hermite_tensor",
    "hermite_at_zero",
    "multi_indices",
    "multi_factorial",
    "hermite_coeffs",
    "hermite_coeff_da",
    "hermite_coeffs_r",
    "hermite_coeff_da_r",
    "mehler_gamma",
    "mehler_gamma_mc",
    "standardized_cross_cov",
    "chaos_covariance",
    "AsymptoticVariance",
    "asymptotic_variance_phi1",
    "replicate_patterns",
    "CltReport",
    "clt_experiment",
]

MAX_HERMITE_ORDER = 6
MORSE_RTOL = 1e-10


# ---------------------------------------------------------------------------
# Point-pattern estimators
# ---------------------------------------------------------------------------


def rho_hat(pattern: PointPattern, L="all") -> float:
    """``N_L(W) / |W|``."""
    return len(filter_indices(pattern, L)) / pattern.window.volume


def linear_count(pattern: PointPattern, L="all", test=None) -> float:
    """``sum_{t in Y_L ∩ W} test(t)`` (``test = 1`` gives the count)."""
    sub = filter_indices(pattern, L)
    if test is None:
        return float(len(sub))
    return float(np.sum(test(sub.locations)))


def k_hat_eta(pattern: PointPattern, L="all", eta: float = 0.0, r=0.1):
    """Translation edge-corrected estimator of the modified K-function.

    ``rho_hat^{-2} sum_{t != s, eta <= |t - s| <= r} 1 / |W ∩ (W + t - s)|``
    over ordered pairs; for a box ``|W ∩ (W + h)| = prod_i (side_i - |h_i|)``.

    Raises
    ------
    EmptyPattern
        If no point of index in ``L`` lies in the window.
    ValueError
        Unless ``eta > 0`` and ``r < min(window sides)``. Radii ``r <= eta``
        give 0.
    """
    sub = filter_indices(pattern, L)
    win = pattern.window
    r_arr = np.atleast_1d(np.asarray(r, dtype=float))
    if not (eta > 0 and np.all(r_arr < np.min(win.sides))):
        raise ValueError("need eta > 0 and r < smallest window side")
    n = len(sub)
    if n == 0:
        raise EmptyPattern("no points with the requested indices")
    rho = n / win.volume
    out = np.zeros(len(r_arr))
    if n > 1:
        tree = cKDTree(sub.locations)
        pairs = tree.query_pairs(float(r_arr.max()), output_type="ndarray")
        if len(pairs):
            diff = sub.locations[pairs[:, 0]] - sub.locations[pairs[:, 1]]
            dist = np.linalg.norm(diff, axis=1)
            weight = 1.0 / np.prod(win.sides - np.abs(diff), axis=1)
            order = np.argsort(dist)
            dist, weight = dist[order], weight[order]
            cum = np.concatenate([[0.0], np.cumsum(weight)])
            lo = np.searchsorted(dist, eta, side="left")
            hi = np.searchsorted(dist, r_arr, side="right")
            out = 2.0 * np.maximum(cum[hi] - cum[lo], 0.0)
    out /= rho * rho
    return float(out[0]) if np.ndim(r) == 0 else out


# ---------------------------------------------------------------------------
# Hermite polynomials and multi-indices
# ---------------------------------------------------------------------------


def hermite_poly(n: int, x):
    """Probabilists' Hermite polynomial ``H_n`` (``H_{n+1} = x H_n - n H_{n-1}``)."""
    if n < 0:
        raise ValueError("degree must be non-negative")
    x = np.asarray(x, dtype=float)
    h_prev, h = np.ones_like(x), x.copy()
    if n == 0:
        return h_prev if h_prev.ndim else float(h_prev)
    for k in range(1, n):
        h_prev, h = h, x * h - k * h_prev
    return h if h.ndim else float(h)


def _hermite_table(x, n_max: int) -> np.ndarray:
    """``H_0(x), ..., H_{n_max}(x)`` stacked along a new leading axis."""
    x = np.asarray(x, dtype=float)
    out = np.empty((n_max + 1,) + x.shape)
    out[0] = 1.0
    if n_max >= 1:
        out[1] = x
    for k in range(1, n_max):
        out[k + 1] = x * out[k] - k * out[k - 1]
    return out


def hermite_tensor(a: Sequence[int], y):
    """``H_{⊗a}(y) = prod_i H_{a_i}(y_i)`` for ``y`` of shape ``(..., len(a))``."""
    y = np.asarray(y, dtype=float)
    out = np.ones(y.shape[:-1])
    for i, ai in enumerate(a):
        if ai:
            out = out * hermite_poly(int(ai), y[..., i])
    return out if out.ndim else float(out)


def hermite_at_zero(n: int) -> float:
    """``H_n(0)``: zero for odd ``n`` and ``(-1)^{n/2} (n-1)!!`` for even ``n``."""
    if n % 2:
        return 0.0
    return (-1.0) ** (n // 2) * float(math.prod(range(n - 1, 0, -2)))


def multi_indices(p: int, q: int) -> list[tuple]:
    """All ``a in N^p`` with ``|a| = q`` in lexicographically decreasing order."""
    out = []
    for combo in itertools.combinations_with_replacement(range(p), q):
        a = [0] * p
        for i in combo:
            a[i] += 1
        out.append(tuple(a))
    return sorted(set(out), reverse=True)


def multi_factorial(a: Sequence[int]) -> int:
    return math.prod(math.factorial(int(x)) for x in a)


# ---------------------------------------------------------------------------
# Hermite coefficients
# ---------------------------------------------------------------------------


def _check_order(indices, cap):
    for a in indices:
        if sum(a) > cap:
            raise ValueError(f"multi-index order {sum(a)} exceeds the cap {cap}")
        if min(a) < 0:
            raise ValueError("multi-indices must be non-negative")


def _weights(hess_halfvec, d, sets):
    """``prod_i |det H_i| 1_L(H_i)`` with near-degenerate draws given weight 0."""
    nh = d * (d + 1) // 2
    w = np.ones(hess_halfvec.shape[0])
    for i, L in enumerate(sets):
        det, idx, deg = det_and_index(hess_halfvec[:, i * nh : (i + 1) * nh], d, MORSE_RTOL)
        w *= np.abs(det) * L.mask(idx) * ~deg
    return w


def hermite_coeffs(
    model: CovarianceModel,
    L,
    indices: Iterable[Sequence[int]],
    n_mc: int = 10**5,
    rng=None,
    antithetic: bool = False,
    cap: int = MAX_HERMITE_ORDER,
) -> MCResult:
    """Coefficients ``d_a`` of the Hermite expansion of the counting functional.

    ``d_a = H_{⊗ǎ}(0) / (a! (2 pi lambda_2)^{d/2}) * E[H_{⊗ā}(Σ_2^{-1/2} X'')
    |det X''| 1_L(X'')]`` where ``a = (ǎ, ā)`` splits into gradient and
    half-vectorized Hessian parts and the expectation is over the
    unconditional Hessian law. All indices share the same draws.

    Raises
    ------
    InsufficientSmoothness
        If the model has no finite fourth spectral moment.
    """
    L = IndexSet.parse(L, model.d)
    d = model.d
    D = d + d * (d + 1) // 2
    indices = [tuple(int(x) for x in a) for a in indices]
    if any(len(a) != D for a in indices):
        raise ValueError(f"multi-indices must have length {D}")
    _check_order(indices, cap)
    lam2 = spectral_moment(model, 2)
    spectral_moment(model, 4)  # the Hessian must have finite variance
    sigma = derivative_cross_cov(model, np.zeros(d))
    root = symmetric_sqrt(sigma[d:, d:])
    prefactor = np.array(
        [math.prod(hermite_at_zero(x) for x in a[:d]) / multi_factorial(a) for a in indices]
    ) / (2.0 * math.pi * lam2) ** (d / 2.0)
    live = np.flatnonzero(prefactor != 0.0)
    n_max = max([sum(indices[i][d:]) for i in live], default=0)

    def values(z):
        w = _weights(z @ root, d, [L])
        table = _hermite_table(z, n_max)
        out = np.zeros((len(z), len(live)))
        for col, i in enumerate(live):
            h = np.ones(len(z))
            for k, ak in enumerate(indices[i][d:]):
                if ak:
                    h = h * table[ak, :, k]
            out[:, col] = h * w
        return out

    def sampler(gen, size):
        z = gen.standard_normal((size, D - d))
        if antithetic:
            return 0.5 * (values(z) + values(-z))
        return values(z)

    value = np.zeros(len(indices))
    stderr = np.zeros(len(indices))
    if len(live):
        res = batch_means(sampler, n_mc, rng)
        value[live] = prefactor[live] * np.atleast_1d(res.value)
        stderr[live] = np.abs(prefactor[live]) * np.atleast_1d(res.stderr)
    return MCResult(value, stderr, n_mc)


def hermite_coeff_da(model, L, a, n_mc: int = 10**5, rng=None, antithetic: bool = False) -> MCResult:
    """Single Hermite coefficient ``d_a``; see :func:`hermite_coeffs`."""
    res = hermite_coeffs(model, L, [a], n_mc, rng, antithetic)
    return MCResult(float(res.value[0]), float(res.stderr[0]), n_mc)


def _pointwise_order(d: int) -> np.ndarray:
    """Permutation from [grads, hessians] to [grad_1, hess_1, grad_2, hess_2] ordering."""
    nh = d * (d + 1) // 2
    return np.concatenate([np.arange(d), 2 * d + np.arange(nh), d + np.arange(d), 2 * d + nh + np.arange(nh)])


def hermite_coeffs_r(
    model: CovarianceModel,
    L,
    indices: Iterable[Sequence[int]],
    r: float,
    n_mc: int = 10**5,
    rng=None,
    cap: int = MAX_HERMITE_ORDER,
) -> MCResult:
    """Two-point coefficients ``d_a(r)``, ``a in N^{2D}``.

    ``d_a(r) = f_V(0, 0) / a! * E[H_{⊗a}(Σbar(r)^{-1/2} (0, H_1, 0, H_2))
    |det H_1| |det H_2| 1_L(H_1) 1_L(H_2) | X'(0) = X'(r e_1) = 0]`` where
    ``Σbar(r)`` is the covariance of ``(X'(0), X''(0), X'(r e_1), X''(r e_1))``.

    Raises
    ------
    DegenerateJoint
    """
    L = IndexSet.parse(L, model.d)
    d = model.d
    D = d + d * (d + 1) // 2
    nh = D - d
    indices = [tuple(int(x) for x in a) for a in indices]
    if any(len(a) != 2 * D for a in indices):
        raise ValueError(f"multi-indices must have length {2 * D}")
    _check_order(indices, cap)
    fv = density_at_zero_gradients(model, r)
    joint = assemble_joint(model, np.array([np.zeros(d), r * np.eye(d)[0]]), check=False)
    cond = condition_hessians_on_zero_gradients(joint)
    perm = _pointwise_order(d)
    sbar = joint.cov[np.ix_(perm, perm)]
    s_inv = inverse_sqrt(sbar)
    hess_cols = np.concatenate([d + np.arange(nh), D + d + np.arange(nh)])
    embed = s_inv[:, hess_cols]  # y = embed @ (H_1, H_2)
    root = symmetric_sqrt(cond.cov)
    n_max = max(max(a) for a in indices) if indices else 0
    scale = np.array([fv / multi_factorial(a) for a in indices])

    def sampler(gen, size):
        h = gen.standard_normal((size, 2 * nh)) @ root
        w = _weights(h, d, [L, L])
        y = h @ embed.T
        table = _hermite_table(y, n_max)
        out = np.empty((size, len(indices)))
        for col, a in enumerate(indices):
            val = w.copy()
            for k, ak in enumerate(a):
                if ak:
                    val *= table[ak, :, k]
            out[:, col] = val
        return out

    res = batch_means(sampler, n_mc, rng)
    return MCResult(scale * np.atleast_1d(res.value), scale * np.atleast_1d(res.stderr), n_mc)


def hermite_coeff_da_r(model, L, a, r: float, n_mc: int = 10**5, rng=None) -> MCResult:
    """Single two-point coefficient; see :func:`hermite_coeffs_r`."""
    res = hermite_coeffs_r(model, L, [a], r, n_mc, rng)
    return MCResult(float(res.value[0]), float(res.stderr[0]), n_mc)


# ---------------------------------------------------------------------------
# Mehler covariances
# ---------------------------------------------------------------------------


def standardized_cross_cov(model: CovarianceModel, lag) -> np.ndarray:
    """``C = Σ(0)^{-1/2} Cov(Y(0), Y(lag)) Σ(0)^{-1/2}`` for ``Y = (X', X'')``."""
    lag = np.asarray(lag, dtype=float)
    s_inv = inverse_sqrt(derivative_cross_cov(model, np.zeros(model.d)))
    return s_inv @ derivative_cross_cov(model, lag) @ s_inv


def _tables(rows: Sequence[int], cols: Sequence[int]):
    """Non-negative integer matrices with the given row and column sums."""
    rows = list(rows)
    if not rows:
        if all(c == 0 for c in cols):
            yield []
        return
    first, rest = rows[0], rows[1:]

    def fill(j, remaining, cols_left, prefix):
        if j == len(cols_left) - 1:
            if remaining <= cols_left[j]:
                yield prefix + [remaining]
            return
        for x in range(min(remaining, cols_left[j]) + 1):
            yield from fill(j + 1, remaining - x, cols_left, prefix + [x])

    for row in fill(0, first, list(cols), []):
        new_cols = [c - x for c, x in zip(cols, row)]
        for tail in _tables(rest, new_cols):
            yield [row] + tail


def mehler_gamma(
    model: CovarianceModel, a: Sequence[int], b: Sequence[int], lag, cross=None, cap: int = 4
) -> float:
    """``E[H_{⊗a}(Y(0)) H_{⊗b}(Y(lag))]`` for the standardized vector ``Y``.

    Diagram (Mehler) formula: ``a! b! sum_n prod_ij C_ij^{n_ij} / n_ij!`` over
    non-negative integer matrices ``n`` with row sums ``a`` and column sums
    ``b``, where ``C`` is :func:`standardized_cross_cov`. Zero unless
    ``|a| = |b|``.
    """
    a = [int(x) for x in a]
    b = [int(x) for x in b]
    if max(sum(a), sum(b)) > cap:
        raise ValueError(f"multi-index order exceeds the cap {cap}")
    if sum(a) != sum(b):
        return 0.0
    C = standardized_cross_cov(model, lag) if cross is None else np.asarray(cross)
    total = 0.0
    for table in _tables(a, b):
        term = 1.0
        for i, row in enumerate(table):
            for j, n in enumerate(row):
                if n:
                    term *= C[i, j] ** n / math.factorial(n)
        total += term
    return multi_factorial(a) * multi_factorial(b) * total


def mehler_gamma_mc(model: CovarianceModel, a, b, lag, n_mc: int = 10**6, rng=None) -> MCResult:
    """Monte Carlo estimate of :func:`mehler_gamma` from joint Gaussian draws."""
    d = model.d
    lag = np.asarray(lag, dtype=float)
    s0 = derivative_cross_cov(model, np.zeros(d))
    s1 = derivative_cross_cov(model, lag)
    joint = np.block([[s0, s1], [s1.T, s0]])
    root = symmetric_sqrt(joint)
    s_inv = inverse_sqrt(s0)
    D = len(s0)

    def sampler(gen, size):
        x = gen.standard_normal((size, 2 * D)) @ root
        y0 = x[:, :D] @ s_inv
        y1 = x[:, D:] @ s_inv
        return hermite_tensor(a, y0) * hermite_tensor(b, y1)

    return batch_means(sampler, n_mc, rng)


# ---------------------------------------------------------------------------
# Asymptotic variance of the counting statistic
# ---------------------------------------------------------------------------


def _coefficient_tensor(D: int, q: int, coeffs: dict) -> np.ndarray:
    # A[i_1..i_q] = a! d_a with a the occupation numbers of (i_1..i_q)
    A = np.zeros((D,) * q)
    for seq in itertools.product(range(D), repeat=q):
        a = [0] * D
        for i in seq:
            a[i] += 1
        a = tuple(a)
        A[seq] = multi_factorial(a) * coeffs.get(a, 0.0)
    return A


def chaos_covariance(A: np.ndarray, C: np.ndarray) -> float:
    """``(1/q!) <A, C^{⊗q} A> = sum_{|a|=|b|=q} d_a d_b gamma_{a,b}``."""
    q = A.ndim
    B = A
    for axis in range(q):
        B = np.moveaxis(np.tensordot(C, B, axes=([1], [axis])), 0, axis)
    return float(np.sum(A * B)) / math.factorial(q)


@dataclass
class AsymptoticVariance:
    """Truncated chaos series for ``lim Var(N_L(W_n)) / |W_n|``."""

    value: float
    contributions: dict
    last_contribution: float
    r_max: float
    q_max: int
    coefficients: dict = field(repr=False, default_factory=dict)


def _gauss_legendre_panels(upper: float, n_panels: int = 48, order: int = 8):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, upper, n_panels + 1)
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        nodes.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
        weights.append(0.5 * (hi - lo) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def asymptotic_variance_phi1(
    model: CovarianceModel,
    L="all",
    q_max: int = 4,
    r_max: float | None = None,
    n_mc: int = 10**5,
    rng=None,
) -> AsymptoticVariance:
    """Truncated limiting variance of the centered count per unit volume.

    ``sum_{q <= q_max} sum_{|a|=|b|=q} d_a d_b int_{|t| <= r_max} gamma_{a,b}(t) dt``
    over ``q`` in ``2N*`` (symmetric ``L``) or ``N*``. The inner double sum
    is isotropic in ``t`` and integrated radially by composite Gauss–Legendre
    quadrature.

    Raises
    ------
    IntegrabilityViolation
        For covariances whose derivatives are not integrable (random wave).
    """
    if model.family is Family.RANDOM_WAVE or not check_integrability(model).ok:
        raise IntegrabilityViolation("covariance derivatives are not integrable at infinity")
    L = IndexSet.parse(L, model.d)
    d = model.d
    D = d + d * (d + 1) // 2
    if r_max is None:
        r_max = 12.0 * model.phi if model.family is Family.GAUSSIAN_LIMIT else 30.0 * model.phi
    qs = [q for q in range(1, q_max + 1) if (q % 2 == 0 or not L.is_symmetric)]
    all_idx = [a for q in qs for a in multi_indices(D, q)]
    res = hermite_coeffs(model, L, all_idx, n_mc, rng, antithetic=L.is_symmetric)
    coeffs = {a: float(v) for a, v in zip(all_idx, np.atleast_1d(res.value))}
    tensors = {q: _coefficient_tensor(D, q, coeffs) for q in qs}
    nodes, weights = _gauss_legendre_panels(r_max)
    surf = sphere_surface(d)
    e1 = np.eye(d)[0]
    contrib = {q: 0.0 for q in qs}
    for r, w in zip(nodes, weights):
        C = standardized_cross_cov(model, r * e1)
        for q in qs:
            contrib[q] += surf * w * r ** (d - 1) * chaos_covariance(tensors[q], C)
    total = float(sum(contrib.values()))
    last = contrib[qs[-1]] if qs else 0.0
    return AsymptoticVariance(total, contrib, last, float(r_max), q_max, coeffs)


# ---------------------------------------------------------------------------
# Replication harness
# ---------------------------------------------------------------------------


def replicate_patterns(
    model: CovarianceModel,
    window: Window,
    replicates: int,
    rng=None,
    n_terms: int = 4096,
    config: ExtractionConfig | None = None,
    threads: int | None = 1,
    deadline: float | None = None,
) -> list[PointPattern]:
    """Critical point patterns of independent spectral realizations.

    Replicate ``i`` uses the ``i``-th spawned sub-stream of ``rng``.
    ``deadline`` is a ``time.monotonic()`` value after which
    :class:`RuntimeCapExceeded` is raised.
    """
    gens = spawn_generators(rng, replicates)

    def one(gen):
        if deadline is not None and time.monotonic() > deadline:
            raise RuntimeCapExceeded("replication ran past its time budget")
        return extract(simulate_spectral(model, n_terms, gen), window, config)

    return parallel_map(one, gens, threads)


@dataclass
class CltReport:
    """Replication summary of ``zeta_L = (rho_hat - rho_L, k_hat(r_i) - K(r_i))``."""

    model: dict
    L: list
    eta: float
    r_list: list
    n_list: list
    replicates: int
    components: list
    targets: list
    means: list = field(default_factory=list)
    mean_stderr: list = field(default_factory=list)
    scaled_cov: list = field(default_factory=list)
    normality_pvalues: list = field(default_factory=list)
    stabilization: list = field(default_factory=list)
    mean_counts: list = field(default_factory=list)
    n_terms: list = field(default_factory=list)
    samples: dict = field(default_factory=dict, repr=False)

    def to_dict(self, include_samples: bool = False) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "samples"}
        if include_samples:
            out["samples"] = self.samples
        return out


def clt_experiment(
    model: CovarianceModel,
    L="all",
    eta: float | None = None,
    r_list: Sequence[float] = (),
    n_list: Sequence[float] = (10, 20, 40),
    replicates: int = 500,
    rng=None,
    n_terms: int = 4096,
    k_targets: Sequence[float] | None = None,
    pcf_n_mc: int = 10**5,
    threads: int | None = 1,
    config: ExtractionConfig | None = None,
    max_seconds: float | None = None,
    scale_terms: bool = False,
) -> CltReport:
    """Replicate simulate-extract-estimate on growing windows ``[-n/2, n/2]^d``.

    For each ``n`` reports the mean of ``zeta_L``, ``n^d`` times its empirical
    covariance, Anderson–Darling normality p-values of each component and the
    ratio of ``n^d Var`` between consecutive window sizes.

    A spectral sum with ``K`` terms has a realization-level intensity that
    fluctuates with relative variance of order ``1/K``; over a window of
    volume ``n^d`` this adds a variance of order ``n^{2d}/K`` to the counts,
    against the ``n^d`` of the limit. With ``scale_terms`` the window of side
    ``n`` uses ``n_terms (n / max(n_list))^d`` terms (at least 256), which keeps
    that distortion a fixed fraction of ``n^d Var`` across window sizes.

    Raises
    ------
    RuntimeCapExceeded
        If ``max_seconds`` elapse before all replicates are done.
    """
    if replicates < 100:
        raise ValueError("the replication harness needs at least 100 replicates")
    deadline = None if max_seconds is None else time.monotonic() + max_seconds
    if model.family is Family.RANDOM_WAVE:
        raise IntegrabilityViolation("asymptotic normality needs integrable covariance derivatives")
    L = IndexSet.parse(L, model.d)
    d = model.d
    rho = intensity_closed_form(model, L)
    if eta is None:
        eta = 0.05 * rho ** (-1.0 / d)
    r_list = [float(r) for r in r_list]
    if any(r <= eta for r in r_list):
        raise ValueError("need eta < min(r_list)")
    if k_targets is None:
        k_targets = list(np.atleast_1d(kfun_eta(model, L, eta, r_list, n_mc=pcf_n_mc, rng=rng))) if r_list else []
    targets = [rho] + [float(k) for k in k_targets]
    names = ["rho_hat"] + [f"k_hat(r={r:g})" for r in r_list]
    report = CltReport(model.to_dict(), sorted(L.members), float(eta), r_list, [float(n) for n in n_list],
                       int(replicates), names, targets)
    streams = spawn_generators(rng, len(n_list))
    prev_var = None
    n_max = max(float(n) for n in n_list)
    for n, gen in zip(n_list, streams):
        window = Window.centered(float(n), d)
        terms = max(256, int(round(n_terms * (float(n) / n_max) ** d))) if scale_terms else n_terms
        patterns = replicate_patterns(model, window, replicates, gen, terms, config, threads, deadline)
        rows = []
        counts = []
        for p in patterns:
            counts.append(len(filter_indices(p, L)))
            row = [rho_hat(p, L)]
            if r_list:
                try:
                    row.extend(np.atleast_1d(k_hat_eta(p, L, eta, r_list)))
                except EmptyPattern:
                    row.extend([0.0] * len(r_list))
            rows.append(row)
        zeta = np.array(rows) - np.array(targets)
        scale = float(n) ** d
        cov = np.atleast_2d(np.cov(zeta, rowvar=False))
        report.means.append(zeta.mean(axis=0).tolist())
        report.mean_stderr.append((zeta.std(axis=0, ddof=1) / math.sqrt(len(zeta))).tolist())
        report.scaled_cov.append((scale * cov).tolist())
        pvals = []
        for col in zeta.T:
            if np.std(col) == 0:
                pvals.append(0.0)
            else:
                pvals.append(float(normal_ad((col - col.mean()) / col.std(ddof=1))[1]))
        report.normality_pvalues.append(pvals)
        var = scale * np.diag(cov)
        if prev_var is not None:
            report.stabilization.append((var / prev_var).tolist())
        prev_var = var
        report.mean_counts.append(float(np.mean(counts)))
        report.n_terms.append(int(terms))
        report.samples[f"{float(n):g}"] = zeta.tolist()
    return report
