"""Approximate simulation of smooth Gaussian random fields on box windows.

Two representations are provided, both exposing exact values, gradients and
Hessians of the simulated surface:

* :class:`SpectralFieldRealization` — a finite random cosine sum
  ``X(t) = n^{-1/2} sum_i sqrt(-2 log W_i) cos(U_i + t . V_i)`` whose
  frequencies ``V_i`` follow the spectral measure of the model. The
  covariance is exact for every number of terms.
* :class:`LatticeSmoothedFieldRealization` — an exact Gaussian draw on the
  lattice ``{(i + 1/2)/n} ∩ W`` smoothed by a compactly supported kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg, special

from .covmodels import CovarianceModel, Family, c1
from .errors import BandwidthRateViolation, DegenerateJoint, LatticeTooLarge, OutOfWindow
from .gaussjoint import JITTER

__all__ = [
    "Window",
    "sample_spectral_frequency",
    "simulate_spectral",
    "SpectralFieldRealization",
    "simulate_points",
    "simulate_lattice",
    "LatticeValues",
    "BumpKernel",
    "smooth_lattice",
    "LatticeSmoothedFieldRealization",
    "CosineProductField",
    "ScaledField",
    "evaluate",
    "gradient",
    "hessian",
    "realization_from_dict",
]

DEFAULT_N_TERMS = 4096
DEFAULT_LATTICE_CAP = 2**16


@dataclass(frozen=True)
class Window:
    """Axis-aligned box ``[lower, upper]`` in ``R^d``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(x) for x in np.ravel(self.lower))
        hi = tuple(float(x) for x in np.ravel(self.upper))
        if len(lo) != len(hi) or not lo:
            raise ValueError("lower and upper must have the same positive length")
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError("window must satisfy upper > lower componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unit(cls, d: int) -> "Window":
        return cls((0.0,) * d, (1.0,) * d)

    @classmethod
    def centered(cls, side: float, d: int) -> "Window":
        return cls((-side / 2.0,) * d, (side / 2.0,) * d)

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def sides(self) -> np.ndarray:
        return np.asarray(self.upper) - np.asarray(self.lower)

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.sides))

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        """Points strictly inside the window shrunk by ``margin``."""
        pts = np.atleast_2d(points)
        lo = np.asarray(self.lower) + margin
        hi = np.asarray(self.upper) - margin
        return np.all((pts > lo) & (pts < hi), axis=1)

    def erode(self, delta: float) -> "Window":
        return Window(np.asarray(self.lower) + delta, np.asarray(self.upper) - delta)

    def translate(self, shift) -> "Window":
        return Window(np.asarray(self.lower) + shift, np.asarray(self.upper) + shift)

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}

    @classmethod
    def from_dict(cls, data: dict) -> "Window":
        return cls(data["lower"], data["upper"])


def _as_points(t, d: int):
    arr = np.asarray(t, dtype=float)
    single = arr.ndim == 1
    pts = np.atleast_2d(arr)
    if pts.shape[-1] != d:
        raise ValueError(f"points must have {d} coordinates")
    return pts, single


# ---------------------------------------------------------------------------
# Spectral method
# ---------------------------------------------------------------------------


def sample_spectral_frequency(model: CovarianceModel, rng, size: int | None = None) -> np.ndarray:
    """Draw frequencies from the spectral measure of ``model``.

    * Matérn: ``V = Z / (phi sqrt(S))``, ``Z`` standard normal in ``R^d`` and
      ``S ~ chi2(2 nu) / (2 nu)`` (a multivariate Student-t with ``2 nu``
      degrees of freedom scaled by ``1/phi``);
    * Gaussian limit: ``V ~ N(0, phi^{-2} I)``;
    * random wave: uniform on the sphere of radius ``sqrt(d)/phi``.
    """
    rng = np.random.default_rng(rng)
    n = 1 if size is None else int(size)
    d, phi = model.d, model.phi
    z = rng.standard_normal((n, d))
    if model.family is Family.MATERN:
        s = rng.gamma(model.nu, 1.0 / model.nu, size=n)
        v = z / (phi * np.sqrt(s))[:, None]
    elif model.family is Family.GAUSSIAN_LIMIT:
        v = z / phi
    else:
        v = z / np.linalg.norm(z, axis=1, keepdims=True) * (math.sqrt(d) / phi)
    return v[0] if size is None else v


@dataclass(frozen=True)
class SpectralFieldRealization:
    """Random cosine sum approximating a Gaussian field on all of ``R^d``."""

    model: CovarianceModel
    amplitudes: np.ndarray
    phases: np.ndarray
    frequencies: np.ndarray
    seed: int | None = None

    bounded = False
    chunk = 2048

    @property
    def d(self) -> int:
        return self.frequencies.shape[1]

    @property
    def n_terms(self) -> int:
        return len(self.amplitudes)

    def _weights(self):
        return self.amplitudes / math.sqrt(self.n_terms)

    def derivatives(self, t, order: int = 2):
        """Values, gradients and Hessians at ``t`` (shape ``(m, d)`` or ``(d,)``)."""
        pts, single = _as_points(t, self.d)
        w = self._weights()
        V = self.frequencies
        m, d = pts.shape
        val = np.empty(m)
        grad = np.empty((m, d)) if order >= 1 else None
        hess = np.empty((m, d, d)) if order >= 2 else None
        pairs = [(i, j) for i in range(d) for j in range(i, d)]
        pair_products = np.stack([V[:, i] * V[:, j] for i, j in pairs], axis=1)
        for start in range(0, m, self.chunk):
            sl = slice(start, start + self.chunk)
            theta = self.phases + pts[sl] @ V.T
            cw = np.cos(theta) * w
            val[sl] = cw.sum(axis=1)
            if order >= 1:
                grad[sl] = -(np.sin(theta) * w) @ V
            if order >= 2:
                hh = -cw @ pair_products
                for m_, (i, j) in enumerate(pairs):
                    hess[sl, i, j] = hess[sl, j, i] = hh[:, m_]
        if single:
            return val[0], (grad[0] if grad is not None else None), (hess[0] if hess is not None else None)
        return val, grad, hess

    def evaluate(self, t):
        return self.derivatives(t, order=0)[0]

    def gradient(self, t):
        return self.derivatives(t, order=1)[1]

    def hessian(self, t):
        return self.derivatives(t, order=2)[2]

    def grid_derivatives(self, axes):
        """Values, gradients and Hessians on the tensor grid spanned by ``axes``.

        For ``d = 2`` the factorization ``exp(i(U + x V1 + y V2)) =
        exp(iU) exp(i x V1) exp(i y V2)`` turns the grid into complex matrix
        products. For ``d = 1`` a regular grid ``x0 + (aB + b) h`` is
        factorized the same way over the block index ``a`` and offset ``b``.
        Other cases fall back to pointwise evaluation.
        """
        axes = [np.asarray(a, dtype=float) for a in axes]
        c = self._weights() * np.exp(1j * self.phases)
        V = self.frequencies
        if self.d == 2:
            x, y = axes
            left = np.exp(1j * np.outer(x, V[:, 0])) * c
            right = np.exp(1j * np.outer(y, V[:, 1])).T
            return _assemble_grid(left, right, V, (len(x), len(y)))
        if self.d == 1 and len(axes[0]) > 2:
            x = axes[0]
            step = np.diff(x)
            if np.allclose(step, step[0], rtol=1e-12, atol=0.0):
                n = len(x)
                block = int(math.ceil(math.sqrt(n)))
                n_blocks = -(-n // block)
                h = float(step[0])
                left = np.exp(1j * np.outer(x[0] + h * block * np.arange(n_blocks), V[:, 0])) * c
                right = np.exp(1j * np.outer(h * np.arange(block), V[:, 0])).T
                val, grad, hess = _assemble_grid(left, right, V, (n_blocks, block))
                return val.ravel()[:n], grad.reshape(-1, 1)[:n], hess.reshape(-1, 1, 1)[:n]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        val, grad, hess = self.derivatives(pts)
        shape = tuple(len(a) for a in axes)
        return val.reshape(shape), grad.reshape(shape + (self.d,)), hess.reshape(shape + (self.d, self.d))

    def to_dict(self) -> dict:
        return {
            "kind": "spectral",
            "model": self.model.to_dict(),
            "seed": self.seed,
            "n_terms": self.n_terms,
            "amplitudes": self.amplitudes.tolist(),
            "phases": self.phases.tolist(),
            "frequencies": self.frequencies.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SpectralFieldRealization":
        return cls(
            CovarianceModel.from_dict(data["model"]),
            np.asarray(data["amplitudes"], dtype=float),
            np.asarray(data["phases"], dtype=float),
            np.asarray(data["frequencies"], dtype=float).reshape(len(data["amplitudes"]), -1),
            data.get("seed"),
        )


def _assemble_grid(left, right, V, shape):
    # Re(sum_k left[a, k] f_k(V) right[k, b]) for the monomials f of order <= 2
    d = V.shape[1]
    pairs = [(i, j) for i in range(d) for j in range(i, d)]
    factors = [np.ones(len(V))] + [1j * V[:, i] for i in range(d)] + [-V[:, i] * V[:, j] for i, j in pairs]
    stacked = np.concatenate([left * f for f in factors], axis=0)
    out = (stacked @ right).real.reshape((len(factors),) + shape)
    val = out[0]
    grad = np.stack([out[1 + i] for i in range(d)], axis=-1)
    hess = np.empty(shape + (d, d))
    for m, (i, j) in enumerate(pairs):
        hess[..., i, j] = hess[..., j, i] = out[1 + d + m]
    return val, grad, hess


def simulate_spectral(model: CovarianceModel, n_terms: int = DEFAULT_N_TERMS, rng=None) -> SpectralFieldRealization:
    """Spectral-method realization with ``n_terms`` random cosines.

    Draw order (for reproducibility): phases ``U``, frequencies ``V``, then
    the uniforms ``W`` defining the amplitudes ``sqrt(-2 log W)``.
    """
    if n_terms < 1:
        raise ValueError("n_terms must be at least 1")
    seed = int(rng) if isinstance(rng, (int, np.integer)) else None
    gen = np.random.default_rng(rng)
    phases = gen.uniform(0.0, 2.0 * math.pi, n_terms)
    freqs = sample_spectral_frequency(model, gen, n_terms)
    w = 1.0 - gen.random(n_terms)
    amps = np.sqrt(-2.0 * np.log(w))
    return SpectralFieldRealization(model, amps, phases, freqs, seed)


# ---------------------------------------------------------------------------
# Exact lattice simulation and kernel smoothing
# ---------------------------------------------------------------------------


def simulate_points(model: CovarianceModel, points, rng) -> np.ndarray:
    """Exact draw of the field at arbitrary points by Cholesky factorization.

    The jitter policy adds ``1e-10 * trace / dim`` to the diagonal once if the
    first factorization fails.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    diff = pts[:, None, :] - pts[None, :, :]
    cov = c1(model, np.sqrt(np.sum(diff * diff, axis=-1)))
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        jitter = JITTER * np.trace(cov) / len(cov)
        try:
            chol = linalg.cholesky(cov + jitter * np.eye(len(cov)), lower=True)
        except linalg.LinAlgError as exc:
            raise DegenerateJoint("lattice covariance is singular beyond the jitter tolerance") from exc
    gen = np.random.default_rng(rng)
    return chol @ gen.standard_normal(len(pts))


def _lattice_axes(n: int, window: Window) -> list[np.ndarray]:
    axes = []
    for lo, hi in zip(window.lower, window.upper):
        i0 = math.ceil(lo * n - 0.5)
        i1 = math.floor(hi * n - 0.5)
        idx = np.arange(i0, i1 + 1)
        coords = (idx + 0.5) / n
        coords = coords[(coords >= lo) & (coords <= hi)]
        axes.append(coords)
    return axes


@dataclass(frozen=True)
class LatticeValues:
    """Field values on the lattice ``{(i + 1/2)/n, i in Z^d} ∩ W``."""

    model: CovarianceModel
    n: int
    window: Window
    axes: tuple
    values: np.ndarray
    seed: int | None = None

    @property
    def d(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def lattice_points(n: int, window: Window) -> np.ndarray:
    axes = _lattice_axes(n, window)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def simulate_lattice(
    model: CovarianceModel, n: int, window: Window, rng=None, cap: int = DEFAULT_LATTICE_CAP
) -> LatticeValues:
    """Exact Gaussian draw on the lattice of refinement ``n`` inside ``window``.

    Raises
    ------
    LatticeTooLarge
        If the lattice has more than ``cap`` points.
    """
    axes = _lattice_axes(n, window)
    size = math.prod(len(a) for a in axes)
    if size > cap:
        raise LatticeTooLarge(f"lattice has {size} points, cap is {cap}")
    seed = int(rng) if isinstance(rng, (int, np.integer)) else None
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    values = simulate_points(model, pts, rng).reshape([len(a) for a in axes])
    return LatticeValues(model, n, window, tuple(axes), values, seed)


class BumpKernel:
    """Normalized radial bump ``C exp(-1/(1 - |x|^2))`` on the unit ball."""

    def __init__(self, d: int):
        self.d = d
        radial, _ = integrate.quad(lambda r: r ** (d - 1) * math.exp(-1.0 / (1.0 - r * r)), 0.0, 1.0,
                                   epsabs=1e-15, epsrel=1e-13)
        surface = 2.0 * math.pi ** (d / 2.0) / special.gamma(d / 2.0)
        self.const = 1.0 / (surface * radial)

    def derivatives(self, x):
        """Value, gradient and Hessian at points ``x`` of shape ``(..., d)``."""
        x = np.asarray(x, dtype=float)
        u = np.sum(x * x, axis=-1)
        inside = u < 1.0
        one_minus = np.where(inside, 1.0 - u, 1.0)
        phi = np.where(inside, self.const * np.exp(-1.0 / one_minus), 0.0)
        d1 = -phi / one_minus**2
        d2 = phi * (1.0 / one_minus**4 - 2.0 / one_minus**3)
        grad = 2.0 * d1[..., None] * x
        eye = np.eye(self.d)
        hess = 4.0 * d2[..., None, None] * x[..., :, None] * x[..., None, :] + 2.0 * d1[..., None, None] * eye
        return phi, grad, hess

    def __call__(self, x):
        return self.derivatives(x)[0]


@dataclass(frozen=True)
class LatticeSmoothedFieldRealization:
    """``X_n(t) = sum_x n^{-d} k_xi(t - x) X(x)`` over the lattice points ``x``."""

    lattice: LatticeValues
    kernel: BumpKernel = field(repr=False)
    xi: float

    bounded = True
    chunk = 256

    @property
    def d(self) -> int:
        return self.lattice.d

    @property
    def model(self) -> CovarianceModel:
        return self.lattice.model

    @property
    def valid_window(self) -> Window:
        """Eroded window on which the kernel support lies inside the lattice window."""
        return self.lattice.window.erode(self.xi)

    def derivatives(self, t, order: int = 2):
        pts, single = _as_points(t, self.d)
        win = self.valid_window
        lo, hi = np.asarray(win.lower), np.asarray(win.upper)
        tol = 1e-12 * max(1.0, float(np.max(np.abs(hi))))
        if np.any(pts < lo - tol) or np.any(pts > hi + tol):
            raise OutOfWindow("lattice-smoothed field is only defined on the eroded window")
        lat = self.lattice
        n, d, xi = lat.n, self.d, self.xi
        first = np.array([a[0] for a in lat.axes])
        shape = np.array(lat.shape)
        width = int(math.floor(2 * xi * n)) + 2
        offsets = np.stack(np.meshgrid(*[np.arange(width)] * d, indexing="ij"), axis=-1).reshape(-1, d)
        m = len(pts)
        val = np.empty(m)
        grad = np.empty((m, d))
        hess = np.empty((m, d, d))
        norm = float(n) ** (-d)
        for start in range(0, m, self.chunk):
            p = pts[start : start + self.chunk]
            base = np.ceil((p - xi - first) * n - 1e-9).astype(int)
            idx = base[:, None, :] + offsets[None, :, :]
            ok = np.all((idx >= 0) & (idx < shape), axis=-1)
            idx = np.where(ok[..., None], idx, 0)
            x = first + idx / n
            y = (p[:, None, :] - x) / xi
            k, kg, kh = self.kernel.derivatives(y)
            vals = lat.values[tuple(idx[..., j] for j in range(d))] * ok
            sl = slice(start, start + len(p))
            val[sl] = norm * xi ** (-d) * np.sum(k * vals, axis=1)
            if order >= 1:
                grad[sl] = norm * xi ** (-d - 1) * np.einsum("mk,mkd->md", vals, kg)
            if order >= 2:
                hess[sl] = norm * xi ** (-d - 2) * np.einsum("mk,mkij->mij", vals, kh)
        if single:
            return val[0], grad[0], hess[0]
        return val, grad, hess

    def evaluate(self, t):
        return self.derivatives(t, order=0)[0]

    def gradient(self, t):
        return self.derivatives(t, order=1)[1]

    def hessian(self, t):
        return self.derivatives(t, order=2)[2]

    def to_dict(self) -> dict:
        lat = self.lattice
        return {
            "kind": "lattice",
            "model": lat.model.to_dict(),
            "seed": lat.seed,
            "n": lat.n,
            "window": lat.window.to_dict(),
            "xi": self.xi,
            "values": lat.values.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LatticeSmoothedFieldRealization":
        model = CovarianceModel.from_dict(data["model"])
        window = Window.from_dict(data["window"])
        axes = tuple(_lattice_axes(data["n"], window))
        values = np.asarray(data["values"], dtype=float).reshape([len(a) for a in axes])
        lat = LatticeValues(model, data["n"], window, axes, values, data.get("seed"))
        return smooth_lattice(lat, xi=data["xi"])


def default_bandwidth(n: int, d: int) -> float:
    """``xi_n = n^{-1/(d+4)}``."""
    return float(n) ** (-1.0 / (d + 4))


def smooth_lattice(lattice: LatticeValues, kernel: BumpKernel | None = None, xi: float | None = None
                   ) -> LatticeSmoothedFieldRealization:
    """Kernel-smoothed field built from exact lattice values.

    Raises
    ------
    BandwidthRateViolation
        If ``n^{-1} xi^{-d-3} > 1``.
    """
    d, n = lattice.d, lattice.n
    if kernel is None:
        kernel = BumpKernel(d)
    if xi is None:
        xi = default_bandwidth(n, d)
    if xi <= 0:
        raise ValueError("bandwidth must be positive")
    if xi ** (-d - 3) / n > 1.0:
        raise BandwidthRateViolation(f"n^-1 xi^(-d-3) = {xi ** (-d - 3) / n:.3g} exceeds 1")
    if np.any(2 * xi >= lattice.window.sides):
        raise BandwidthRateViolation("bandwidth leaves an empty eroded window")
    return LatticeSmoothedFieldRealization(lattice, kernel, float(xi))


# ---------------------------------------------------------------------------
# Deterministic and derived fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CosineProductField:
    """Deterministic test surface ``f(t) = prod_k cos(2 pi freq t_k)``."""

    d: int
    freq: float = 1.0

    bounded = False
    model = None

    def derivatives(self, t, order: int = 2):
        pts, single = _as_points(t, self.d)
        w = 2.0 * math.pi * self.freq
        c = np.cos(w * pts)
        s = np.sin(w * pts)
        m, d = pts.shape
        val = np.prod(c, axis=1)
        grad = np.empty((m, d))
        hess = np.empty((m, d, d))
        for i in range(d):
            others = np.prod(np.delete(c, i, axis=1), axis=1)
            grad[:, i] = -w * s[:, i] * others
            hess[:, i, i] = -w * w * val
            for j in range(i + 1, d):
                rest = np.prod(np.delete(c, [i, j], axis=1), axis=1)
                hij = w * w * s[:, i] * s[:, j] * rest
                hess[:, i, j] = hess[:, j, i] = hij
        if single:
            return val[0], grad[0], hess[0]
        return val, grad, hess

    def evaluate(self, t):
        return self.derivatives(t)[0]

    def gradient(self, t):
        return self.derivatives(t)[1]

    def hessian(self, t):
        return self.derivatives(t)[2]


@dataclass(frozen=True)
class ScaledField:
    """``factor * field`` (``factor = -1`` swaps minima and maxima)."""

    base: object
    factor: float = -1.0

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def bounded(self) -> bool:
        return self.base.bounded

    @property
    def model(self):
        return getattr(self.base, "model", None)

    @property
    def valid_window(self):
        return self.base.valid_window

    def derivatives(self, t, order: int = 2):
        v, g, h = self.base.derivatives(t, order)
        f = self.factor
        return f * v, (None if g is None else f * g), (None if h is None else f * h)

    def grid_derivatives(self, axes):
        if hasattr(self.base, "grid_derivatives"):
            v, g, h = self.base.grid_derivatives(axes)
        else:
            mesh = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([m.ravel() for m in mesh], axis=1)
            v, g, h = self.base.derivatives(pts)
            shape = tuple(len(a) for a in axes)
            v, g, h = v.reshape(shape), g.reshape(shape + (self.d,)), h.reshape(shape + (self.d, self.d))
        return self.factor * v, self.factor * g, self.factor * h

    def evaluate(self, t):
        return self.derivatives(t)[0]

    def gradient(self, t):
        return self.derivatives(t)[1]

    def hessian(self, t):
        return self.derivatives(t)[2]


def evaluate(field, t):
    return field.evaluate(t)


def gradient(field, t):
    return field.gradient(t)


def hessian(field, t):
    return field.hessian(t)


def realization_from_dict(data: dict):
    """Rebuild a realization serialized with ``to_dict``."""
    if data["kind"] == "spectral":
        return SpectralFieldRealization.from_dict(data)
    if data["kind"] == "lattice":
        return LatticeSmoothedFieldRealization.from_dict(data)
    raise ValueError(f"unknown realization kind {data['kind']!r}")
