"""Joint Gaussian laws of field derivatives, conditioning and sampling.

The derivative vector at ``k`` points is ordered as
``[grad(t_1), ..., grad(t_k), hess(t_1), ..., hess(t_k)]`` where each Hessian
is half-vectorized row-major over its upper triangle
``(h_11, h_12, ..., h_1d, h_22, ..., h_dd)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .covmodels import (
    CovarianceModel,
    _partial_terms,
    c2_deriv,
    check_pairwise_nondegeneracy,
)
from .errors import DegenerateJoint

__all__ = [
    "hessian_pairs",
    "derivative_multi_indices",
    "JointDerivativeGaussian",
    "ConditionalGaussian",
    "GOESample",
    "assemble_joint",
    "condition_hessians_on_zero_gradients",
    "density_at_zero_gradients",
    "symmetric_sqrt",
    "inverse_sqrt",
    "sample_mvn",
    "sample_goe",
    "goe_eigenvalues",
    "unpack_hessians",
    "det_and_index",
]

JITTER = 1e-10
# safety factor on the a-priori rounding bound of a Schur complement
SCHUR_ROUNDING_FACTOR = 10.0
GRADIENT_RCOND = 1e-12


def hessian_pairs(d: int) -> list[tuple[int, int]]:
    """Index pairs ``(i, j)``, ``i <= j``, in half-vectorization order."""
    return [(i, j) for i in range(d) for j in range(i, d)]


def derivative_multi_indices(d: int) -> tuple[list[tuple], list[tuple]]:
    """Multi-indices of the gradient and the half-vectorized Hessian entries."""
    grads = []
    for i in range(d):
        a = [0] * d
        a[i] = 1
        grads.append(tuple(a))
    hess = []
    for i, j in hessian_pairs(d):
        a = [0] * d
        a[i] += 1
        a[j] += 1
        hess.append(tuple(a))
    return grads, hess


@dataclass(frozen=True)
class JointDerivativeGaussian:
    """Centered Gaussian law of gradients and Hessians at ``k`` points."""

    d: int
    points: np.ndarray
    cov: np.ndarray
    index_map: dict = field(repr=False)

    @property
    def k(self) -> int:
        return len(self.points)

    @property
    def D(self) -> int:
        return self.d + self.d * (self.d + 1) // 2

    @property
    def n_grad(self) -> int:
        return self.k * self.d

    def gradient_rows(self) -> np.ndarray:
        return np.arange(self.n_grad)

    def hessian_rows(self) -> np.ndarray:
        return np.arange(self.n_grad, self.k * self.D)

    def point_rows(self, i: int) -> np.ndarray:
        """Rows of ``(grad(t_i), hess(t_i))`` in that order."""
        nh = self.D - self.d
        g = np.arange(i * self.d, (i + 1) * self.d)
        h = self.n_grad + np.arange(i * nh, (i + 1) * nh)
        return np.concatenate([g, h])


@dataclass(frozen=True)
class ConditionalGaussian:
    """Centered Gaussian law obtained by conditioning (Schur complement)."""

    cov: np.ndarray
    context: str = ""

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample_mvn(self.cov, n, rng)


@dataclass(frozen=True)
class GOESample:
    m: int
    eigenvalues: np.ndarray


def _cross_block(model, lag, alphas, betas, sign_by_alpha=True):
    # Cov(d^alpha X(s), d^beta X(s + lag)) = (-1)^|alpha| d^{alpha+beta} c(lag)
    lag = tuple(float(x) for x in lag)
    s = sum(x * x for x in lag)
    cache: dict[int, float] = {}
    partial: dict[tuple, float] = {}
    out = np.empty((len(alphas), len(betas)))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            ab = tuple(x + y for x, y in zip(a, b))
            if ab not in partial:
                value = 0.0
                for coef, order in _partial_terms(ab, lag):
                    if order not in cache:
                        cache[order] = c2_deriv(model, order, s)
                    value += coef * cache[order]
                partial[ab] = value
            out[i, j] = (-1.0) ** sum(a) * partial[ab]
    return out


def derivative_cross_cov(model: CovarianceModel, lag) -> np.ndarray:
    """``Cov((grad, hess)(0), (grad, hess)(lag))`` as a ``D x D`` matrix."""
    grads, hess = derivative_multi_indices(model.d)
    alphas = grads + hess
    return _cross_block(model, lag, alphas, alphas)


def assemble_joint(model: CovarianceModel, points, check: bool = True) -> JointDerivativeGaussian:
    """Covariance of gradients and half-vectorized Hessians at ``points``.

    Parameters
    ----------
    model : CovarianceModel
    points : array_like, shape (k, d)
        Pairwise distinct locations.
    check : bool
        Verify that the matrix factorizes (after the jitter policy).

    Raises
    ------
    DegenerateJoint
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = model.d
    if pts.shape[1] != d:
        raise ValueError(f"points must have {d} columns")
    k = len(pts)
    if k > 1 and np.min(pdist_sq(pts)) == 0.0:
        raise DegenerateJoint("derivatives at coincident points are linearly dependent")
    grads, hess = derivative_multi_indices(d)
    alphas = grads + hess
    D = len(alphas)
    rows = []
    for i in range(k):
        rows.append([i * d + m for m in range(d)] + [k * d + i * (D - d) + m for m in range(D - d)])
    index_map = {}
    for i in range(k):
        for m, a in enumerate(alphas):
            index_map[(i, a)] = rows[i][m]
    cov = np.empty((k * D, k * D))
    for i in range(k):
        for j in range(i, k):
            block = _cross_block(model, pts[j] - pts[i], alphas, alphas)
            cov[np.ix_(rows[i], rows[j])] = block
            cov[np.ix_(rows[j], rows[i])] = block.T
    cov = 0.5 * (cov + cov.T)
    if check:
        _check_factorizable(cov)
    return JointDerivativeGaussian(d, pts, cov, index_map)


def pdist_sq(pts: np.ndarray) -> np.ndarray:
    """Squared distances between all pairs of distinct rows."""
    i, j = np.triu_indices(len(pts), 1)
    diff = pts[i] - pts[j]
    return np.sum(diff * diff, axis=1)


def _check_factorizable(cov: np.ndarray) -> None:
    try:
        np.linalg.cholesky(cov)
        return
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER * np.trace(cov) / cov.shape[0]
    try:
        np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise DegenerateJoint("covariance matrix is singular beyond the jitter tolerance") from exc


def condition_hessians_on_zero_gradients(joint: JointDerivativeGaussian) -> ConditionalGaussian:
    """Law of all Hessians given that all gradients vanish.

    Returns the Schur complement ``S_HH - S_HG S_GG^{-1} S_GH`` projected onto
    the positive semi-definite cone: eigenvalues that are negative by less than
    the first-order rounding bound
    ``eps (|S_HH| + |S_GH|^2 |S_GG| / lambda_min(S_GG)^2)`` are set to zero.
    At small distances the complement is of order ``r^2`` while the smallest
    eigenvalue of ``S_GG`` is a difference of order-one entries, so plain
    rounding can otherwise produce a slightly indefinite matrix.

    Raises
    ------
    DegenerateJoint
        If the gradient covariance is singular, or the complement is
        indefinite beyond its rounding bound.
    """
    g = joint.gradient_rows()
    h = joint.hessian_rows()
    s_gg = joint.cov[np.ix_(g, g)]
    s_gh = joint.cov[np.ix_(g, h)]
    s_hh = joint.cov[np.ix_(h, h)]
    evals = np.linalg.eigvalsh(s_gg)
    if evals[0] <= GRADIENT_RCOND * evals[-1]:
        raise DegenerateJoint(
            "gradients are linearly dependent: smallest/largest eigenvalue "
            f"{evals[0] / evals[-1]:.3e}"
        )
    factor = linalg.cho_factor(s_gg)
    schur = s_hh - s_gh.T @ linalg.cho_solve(factor, s_gh)
    schur = 0.5 * (schur + schur.T)
    eps = np.finfo(float).eps
    bound = SCHUR_ROUNDING_FACTOR * eps * (
        np.linalg.norm(s_hh, 2) + np.linalg.norm(s_gh, 2) ** 2 * evals[-1] / evals[0] ** 2
    )
    w, v = np.linalg.eigh(schur)
    if w[0] < -bound:
        raise DegenerateJoint(f"conditional covariance is indefinite (eigenvalue {w[0]:.3e}, rounding bound {bound:.3e})")
    if w[0] < 0:
        schur = (v * np.clip(w, 0.0, None)) @ v.T
        schur = 0.5 * (schur + schur.T)
    return ConditionalGaussian(schur, context=f"hessians | gradients = 0 at {joint.k} points")


def density_at_zero_gradients(model: CovarianceModel, r: float) -> float:
    """Density at the origin of the gradient pair ``(X'(0), X'(r e_1))``.

    ``(2 pi)^{-d} 2^{1-d} m1^{(1-d)/2} m2^{-1/2}`` with
    ``m1 = c2'(0)^2 - c2'(r^2)^2`` and ``m2 = c1''(0)^2 - c1''(r)^2``.
    """
    report = check_pairwise_nondegeneracy(model, r)
    if not report.ok:
        raise DegenerateJoint(f"gradients at distance {r} are degenerate")
    d = model.d
    return (
        (2.0 * math.pi) ** (-d)
        * 2.0 ** (1 - d)
        * report.margin1 ** ((1 - d) / 2.0)
        * report.margin2 ** -0.5
    )


def symmetric_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; tiny negative eigenvalues are clipped.

    Raises
    ------
    DegenerateJoint
        If an eigenvalue is below ``-1e-10 * trace``.
    """
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    tol = JITTER * max(np.trace(cov), np.finfo(float).tiny)
    if evals[0] < -tol:
        raise DegenerateJoint(f"matrix is not positive semidefinite (eigenvalue {evals[0]:.3e})")
    evals = np.clip(evals, 0.0, None)
    return (evecs * np.sqrt(evals)) @ evecs.T


def inverse_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root of a positive definite matrix."""
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] <= 0:
        raise DegenerateJoint("matrix is not positive definite")
    return (evecs / np.sqrt(evals)) @ evecs.T


def sample_mvn(cov: np.ndarray, n: int, rng: np.random.Generator, root: np.ndarray | None = None) -> np.ndarray:
    """``n`` draws from the centered normal law with covariance ``cov``."""
    if root is None:
        root = symmetric_sqrt(np.asarray(cov, dtype=float))
    z = rng.standard_normal((n, root.shape[0]))
    return z @ root


def goe_eigenvalues(m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted eigenvalues of ``n`` independent ``m x m`` GOE matrices.

    Diagonal entries have variance 1 and off-diagonal entries variance 1/2.
    """
    if m < 1:
        raise ValueError("matrix size must be at least 1")
    a = rng.standard_normal((n, m, m))
    sym = 0.5 * (a + np.swapaxes(a, 1, 2))
    return np.linalg.eigvalsh(sym)


def sample_goe(m: int, rng: np.random.Generator) -> GOESample:
    return GOESample(m, goe_eigenvalues(m, 1, rng)[0])


def unpack_hessians(halfvec: np.ndarray, d: int) -> np.ndarray:
    """Rebuild symmetric ``(n, d, d)`` matrices from half-vectorized rows."""
    halfvec = np.atleast_2d(halfvec)
    out = np.empty((halfvec.shape[0], d, d))
    for m, (i, j) in enumerate(hessian_pairs(d)):
        out[:, i, j] = halfvec[:, m]
        out[:, j, i] = halfvec[:, m]
    return out


def det_and_index(halfvec: np.ndarray, d: int, rel_tol: float = 1e-10):
    """Determinant, index and near-degeneracy flag of half-vectorized Hessians.

    The index is the number of negative eigenvalues. A matrix is flagged when
    some eigenvalue is below ``rel_tol`` times its largest absolute eigenvalue.

    Returns
    -------
    det, index, degenerate : ndarray
    """
    halfvec = np.atleast_2d(halfvec)
    if d == 1:
        h = halfvec[:, 0]
        return h.copy(), (h < 0).astype(int), h == 0
    if d == 2:
        a, b, c = halfvec[:, 0], halfvec[:, 1], halfvec[:, 2]
        half_tr = 0.5 * (a + c)
        rad = np.hypot(0.5 * (a - c), b)
        ev = np.stack([half_tr - rad, half_tr + rad], axis=1)
        det = a * c - b * b
    else:
        ev = np.linalg.eigvalsh(unpack_hessians(halfvec, d))
        det = np.prod(ev, axis=1)
    index = np.sum(ev < 0, axis=1)
    scale = np.max(np.abs(ev), axis=1)
    degenerate = np.min(np.abs(ev), axis=1) <= rel_tol * scale
    return det, index, degenerate
