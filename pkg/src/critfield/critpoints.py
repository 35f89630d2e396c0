"""Extraction and classification of the critical points of a simulated field.

The search screens a regular grid with a Lipschitz exclusion test: a grid
cell can contain a zero of the gradient only if, at every corner,
``|g_i| <= sum_j (max_corners |H_ij| + safety * m3 * diam) h_j`` with
``m3`` the Hessian variation per unit length along the cell edges. Surviving cells seed a
damped Newton iteration on the gradient map (Newton predictions from the
cell corners, or the cell centre). Converged roots are deduplicated,
restricted to the search window and classified by Hessian index.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import DegenerateField, OutOfWindow
from .fieldsim import Window
from .kacrice import IndexSet, intensity_closed_form

__all__ = [
    "ExtractionConfig",
    "PointPattern",
    "extract",
    "counts_by_index",
    "filter_indices",
    "newton_solve",
    "MatchResult",
    "match_patterns",
]

log = logging.getLogger(__name__)

NODES_PER_SPACING = 16
FALLBACK_NODES_PER_UNIT = 64
MAX_HALVINGS = 30
DEGENERATE_FRACTION = 0.01
# Newton iterates closer than this fraction of the grid step are merged;
# distinct critical points that close are vanishingly rare.
MERGE_FRACTION = 0.05
EXCLUSION_SAFETY = 2.0


@dataclass(frozen=True)
class ExtractionConfig:
    """Tuning knobs of :func:`extract`; ``None`` selects a data-driven default.

    Attributes
    ----------
    seeds_per_axis : int, optional
        Screening-grid nodes per axis. Default: 16 nodes per expected
        inter-point spacing ``rho^{-1/d}`` (64 per unit length when the field
        carries no covariance model).
    newton_max_iter : int
    newton_tol : float, optional
        Gradient-norm tolerance; default ``1e-10`` times the RMS gradient norm
        on the screening grid.
    dedup_radius : float, optional
        Default ``1e-4`` times the window diameter.
    boundary_margin : float, optional
        Width of the discarded boundary strip. Default ``1e-3`` times the
        smallest window side for fields defined only on a bounded domain and
        ``0`` for fields defined on all of ``R^d`` (their roots near the
        boundary are located as accurately as interior ones).
    morse_tol : float, optional
        Floor on ``|det Hessian|``; default ``1e-12 * s^d`` with ``s`` the RMS
        Hessian scale on the screening grid.
    safety : float
        Inflation of the third-derivative term in the screening bound (the
        bound already allows the Hessian to vary across the whole cell
        diagonal while only half of it is needed).
    """

    seeds_per_axis: int | None = None
    newton_max_iter: int = 50
    newton_tol: float | None = None
    dedup_radius: float | None = None
    boundary_margin: float | None = None
    morse_tol: float | None = None
    safety: float = 1.0

    def __post_init__(self):
        for name in ("seeds_per_axis", "newton_max_iter", "newton_tol", "dedup_radius", "morse_tol", "safety"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValueError(f"{name} must be positive")
        if self.boundary_margin is not None and self.boundary_margin < 0:
            raise ValueError("boundary_margin must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PointPattern:
    """Critical points inside a window with index, field value and Hessian determinant."""

    window: Window
    locations: np.ndarray
    index: np.ndarray
    values: np.ndarray
    det_hessian: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.window.d
        self.locations = np.asarray(self.locations, dtype=float).reshape(-1, d)
        self.index = np.asarray(self.index, dtype=int).reshape(-1)
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        self.det_hessian = np.asarray(self.det_hessian, dtype=float).reshape(-1)
        n = len(self.locations)
        if not (len(self.index) == len(self.values) == len(self.det_hessian) == n):
            raise ValueError("pattern columns must have equal length")

    @property
    def d(self) -> int:
        return self.window.d

    def __len__(self) -> int:
        return len(self.locations)

    def subset(self, mask) -> "PointPattern":
        mask = np.asarray(mask)
        return PointPattern(self.window, self.locations[mask], self.index[mask], self.values[mask],
                            self.det_hessian[mask], dict(self.diagnostics))

    def translate(self, shift) -> "PointPattern":
        shift = np.asarray(shift, dtype=float)
        return PointPattern(self.window.translate(shift), self.locations + shift, self.index,
                            self.values, self.det_hessian, dict(self.diagnostics))

    def to_csv(self, path, meta: dict | None = None) -> None:
        """Write ``x1..xd,index,value,det_hessian`` below a ``# {json}`` header line.

        The header holds the window, the extraction diagnostics and ``meta``.
        """
        path = Path(path)
        header = {"window": self.window.to_dict(), "diagnostics": _jsonable(self.diagnostics)}
        if meta:
            header["meta"] = _jsonable(meta)
        lines = ["# " + json.dumps(header, sort_keys=True)]
        lines.append(",".join([f"x{i + 1}" for i in range(self.d)] + ["index", "value", "det_hessian"]))
        for loc, ell, v, det in zip(self.locations, self.index, self.values, self.det_hessian):
            lines.append(",".join([repr(float(x)) for x in loc] + [str(int(ell)), repr(float(v)), repr(float(det))]))
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "PointPattern":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError("pattern file lacks its metadata header")
        header = json.loads(lines[0][1:])
        window = Window.from_dict(header["window"])
        d = window.d
        rows = [line.split(",") for line in lines[2:] if line.strip()]
        if rows:
            arr = np.array(rows, dtype=float)
            locs, ell, vals, dets = arr[:, :d], arr[:, d].astype(int), arr[:, d + 1], arr[:, d + 2]
        else:
            locs, ell, vals, dets = np.empty((0, d)), np.empty(0, int), np.empty(0), np.empty(0)
        return cls(window, locs, ell, vals, dets, header.get("diagnostics", {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def counts_by_index(pattern: PointPattern) -> np.ndarray:
    """Number of points of each index ``0..d``."""
    return np.bincount(pattern.index, minlength=pattern.d + 1)[: pattern.d + 1]


def filter_indices(pattern: PointPattern, L) -> PointPattern:
    """Points whose index belongs to ``L`` (same window)."""
    ell = IndexSet.parse(L, pattern.d)
    return pattern.subset(ell.mask(pattern.index))


# ---------------------------------------------------------------------------
# Newton iteration
# ---------------------------------------------------------------------------


def _newton_steps(H, g):
    try:
        return -np.linalg.solve(H, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return -(np.linalg.pinv(H) @ g[..., None])[..., 0]


def newton_solve(field, seeds, tol: float, max_iter: int = 50, lower=None, upper=None,
                 trust=None, leash=None, merge_radius: float = 0.0):
    """Damped Newton iteration for ``grad X(t) = 0`` from each seed.

    A step is accepted only if it decreases ``|grad X|``; otherwise it is
    halved, at most 30 times. Iterates are clipped to ``[lower, upper]``.

    Parameters
    ----------
    trust : array_like, optional
        Componentwise cap on the step length (steps are scaled down).
    leash : array_like, optional
        Abandon a seed once it moves farther than this (componentwise) from
        its start, or when an iteration after the fifth fails to reduce the
        residual by 10%.
    merge_radius : float
        Active iterates closer than this are merged (the later one stops and
        is reported as not converged).

    Returns
    -------
    points, residuals, status, iterations : ndarray
        ``status`` is 0 (converged), 1 (stalled or abandoned), 2 (merged into
        another iterate) or 3 (iteration cap reached).
    """
    t = np.array(seeds, dtype=float).reshape(-1, field.d)
    m = len(t)
    if m == 0:
        return t, np.empty(0), np.zeros(0, int), np.zeros(0, int)
    lo = -np.inf if lower is None else np.asarray(lower, dtype=float)
    hi = np.inf if upper is None else np.asarray(upper, dtype=float)
    t = np.clip(t, lo, hi)
    merged = np.zeros(m, bool)
    if merge_radius > 0 and m > 1:
        for i, j in sorted(cKDTree(t).query_pairs(merge_radius)):
            if not merged[i]:
                merged[j] = True
    start = t.copy()
    g = np.zeros((m, field.d))
    H = np.zeros((m, field.d, field.d))
    res = np.full(m, np.inf)
    live = ~merged
    _, g[live], H[live] = field.derivatives(t[live])
    res[live] = np.linalg.norm(g[live], axis=1)
    stopped = merged.copy()
    active = (res > tol) & ~stopped
    iters = np.zeros(m, int)
    for it in range(max_iter):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        if merge_radius > 0 and len(idx) > 1:
            tree = cKDTree(t[idx])
            for i, j in sorted(tree.query_pairs(merge_radius)):
                if not stopped[idx[i]]:
                    stopped[idx[j]] = merged[idx[j]] = True
            idx = idx[~stopped[idx]]
        iters[idx] += 1
        step = _newton_steps(H[idx], g[idx])
        if trust is not None:
            ratio = np.max(np.abs(step) / np.asarray(trust), axis=1)
            step /= np.maximum(ratio, 1.0)[:, None]
        old = res[idx].copy()
        lam = np.ones(len(idx))
        pending = np.arange(len(idx))
        for _halving in range(MAX_HALVINGS + 1):
            rows = idx[pending]
            trial = np.clip(t[rows] + lam[pending, None] * step[pending], lo, hi)
            _, gt, Ht = field.derivatives(trial)
            rt = np.linalg.norm(gt, axis=1)
            ok = rt < res[rows]
            acc = rows[ok]
            t[acc], g[acc], H[acc], res[acc] = trial[ok], gt[ok], Ht[ok], rt[ok]
            pending = pending[~ok]
            if len(pending) == 0:
                break
            lam[pending] *= 0.5
        stopped[idx[pending]] = True
        if leash is not None:
            stopped[idx] |= np.any(np.abs(t[idx] - start[idx]) > np.asarray(leash), axis=1)
        if it >= 5:
            stopped[idx] |= res[idx] > 0.9 * old
        active = (res > tol) & ~stopped
    status = np.full(m, 3)
    status[stopped] = 1
    status[merged] = 2
    status[res <= tol] = 0
    return t, res, status, iters


# ---------------------------------------------------------------------------
# Screening grid
# ---------------------------------------------------------------------------


def _grid_derivatives(field, axes):
    if hasattr(field, "grid_derivatives"):
        return field.grid_derivatives(axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    val, grad, hess = field.derivatives(pts)
    shape = tuple(len(a) for a in axes)
    d = len(axes)
    return val.reshape(shape), grad.reshape(shape + (d,)), hess.reshape(shape + (d, d))


def _default_nodes(field, region: Window) -> np.ndarray:
    model = getattr(field, "model", None)
    if model is not None:
        rho = intensity_closed_form(model, "all")
        per_unit = NODES_PER_SPACING * rho ** (1.0 / field.d)
    else:
        per_unit = FALLBACK_NODES_PER_UNIT
    return np.maximum(2, np.ceil(per_unit * region.sides)).astype(int)


def _candidate_seeds(axes, grad, hess, safety):
    """Newton seeds from the grid cells that may contain a gradient zero."""
    d = len(axes)
    h = np.array([a[1] - a[0] for a in axes])
    n_cells = tuple(len(a) - 1 for a in axes)
    corners = list(itertools.product((0, 1), repeat=d))
    diam = float(np.linalg.norm(h))

    def corner_slice(c):
        return tuple(slice(ck, ck + nk) for ck, nk in zip(c, n_cells))

    hmax = np.zeros(n_cells + (d, d))
    for c in corners:
        np.maximum(hmax, np.abs(hess[corner_slice(c)]), out=hmax)
    # third-derivative scales on each cell from Hessian differences along
    # edges: entrywise (for the screening bound) and in spectral norm
    m3 = np.zeros(n_cells)
    m3_norm = np.zeros(n_cells)
    for c in corners:
        for k in range(d):
            if c[k] == 0:
                c2 = list(c)
                c2[k] = 1
                diff = hess[corner_slice(c)] - hess[corner_slice(tuple(c2))]
                np.maximum(m3, np.max(np.abs(diff), axis=(-2, -1)) / h[k], out=m3)
                np.maximum(m3_norm, np.linalg.norm(diff, ord=2, axis=(-2, -1)) / h[k], out=m3_norm)
    m3 *= safety
    # sup of |H_ij| over the cell is at most the corner maximum plus m3 * diam
    bound = (hmax + (m3 * diam)[..., None, None]) @ h
    cand = np.ones(n_cells, bool)
    gmin = np.full(n_cells + (d,), np.inf)
    gmax = np.full(n_cells + (d,), -np.inf)
    for c in corners:
        gc = grad[corner_slice(c)]
        cand &= np.all(np.abs(gc) <= bound, axis=-1)
        np.minimum(gmin, gc, out=gmin)
        np.maximum(gmax, gc, out=gmax)
    # The multilinear interpolant of g_i is a convex combination of corner
    # values and differs from g_i by at most sum_j sup|d_j^2 g_i| h_j^2 / 8,
    # so each component must (nearly) change sign over the cell's corners.
    slack = (EXCLUSION_SAFETY / 8.0) * m3[..., None] * float(h @ h)
    cand &= np.all((gmin <= slack) & (gmax >= -slack), axis=-1)
    cells = np.argwhere(cand)
    if len(cells) == 0:
        return np.empty((0, d)), 0, int(np.prod(n_cells))
    m3 = EXCLUSION_SAFETY * m3_norm[tuple(cells.T)]
    lower = np.stack([axes[k][cells[:, k]] for k in range(d)], axis=1)
    node_sets = [tuple(cells[:, k] + c[k] for k in range(d)) for c in corners]
    seeds = []
    found = np.zeros(len(cells), bool)
    excluded = np.zeros(len(cells), bool)
    for c, node_idx in zip(corners, node_sets):
        node = lower + np.asarray(c) * h
        gc = grad[node_idx]
        Hc = hess[node_idx]
        sv = np.linalg.svd(Hc, compute_uv=False)[:, -1]
        usable = sv > 0
        pred = np.full_like(node, np.nan)
        if usable.any():
            pred[usable] = node[usable] + _newton_steps(Hc[usable], gc[usable])
        rel = (pred - lower) / h
        inside = usable & np.all((rel >= -0.5) & (rel <= 1.5), axis=1)
        seeds.append(pred[inside])
        found |= inside
        # If the Hessian stays invertible on the cell (smallest singular value
        # above the third-derivative variation), a root in the cell would
        # attract the Newton prediction to within m3 diam^2 / (2 s_eff).
        s_eff = sv - m3 * diam
        gap = np.max(np.maximum(np.maximum(lower - pred, pred - (lower + h)), 0.0) / h, axis=1) * np.min(h)
        with np.errstate(divide="ignore", invalid="ignore"):
            reach = np.where(s_eff > 0, m3 * diam**2 / (2.0 * s_eff), np.inf)
        excluded |= usable & (s_eff > 0) & (gap > reach)
    unresolved = ~found & ~excluded
    seeds.append(lower[unresolved] + 0.5 * h)
    seeds = np.concatenate(seeds, axis=0)
    return seeds, len(cells), int(np.prod(n_cells))


def _dedup(points, residuals, radius):
    if len(points) == 0:
        return np.zeros(0, int)
    order = np.argsort(residuals, kind="stable")
    tree = cKDTree(points)
    removed = np.zeros(len(points), bool)
    keep = []
    for i in order:
        if removed[i]:
            continue
        keep.append(i)
        for j in tree.query_ball_point(points[i], radius):
            removed[j] = True
    return np.sort(np.asarray(keep, dtype=int))


def extract(field, window: Window, config: ExtractionConfig | None = None) -> PointPattern:
    """Critical points of ``field`` inside ``window``.

    Parameters
    ----------
    field
        Object exposing ``d``, ``bounded`` and ``derivatives(points)``
        returning values, gradients and Hessians (optionally
        ``grid_derivatives(axes)`` and ``valid_window``).
    window : Window
    config : ExtractionConfig, optional

    Returns
    -------
    PointPattern
        Its window is the searched region (``window`` shrunk by the boundary
        margin and, for bounded fields, intersected with their domain).
        ``diagnostics`` reports seed, convergence and rejection counts.

    Raises
    ------
    DegenerateField
        If more than 1% of the distinct roots have ``|det H| < morse_tol``.
    OutOfWindow
        If the window does not meet the domain of a bounded field.
    """
    cfg = config or ExtractionConfig()
    d = field.d
    if window.d != d:
        raise ValueError("window and field dimensions differ")
    domain = window
    if field.bounded:
        valid = field.valid_window
        lo = np.maximum(window.lower, valid.lower)
        hi = np.minimum(window.upper, valid.upper)
        if np.any(hi <= lo):
            raise OutOfWindow("window does not intersect the domain of the field")
        domain = Window(lo, hi)
    margin = cfg.boundary_margin
    if margin is None:
        margin = 1e-3 * float(np.min(window.sides)) if field.bounded else 0.0
    if np.any(domain.sides <= 2 * margin):
        raise OutOfWindow("boundary margin leaves an empty search region")
    region = domain.erode(margin) if margin > 0 else domain

    nodes = np.full(d, cfg.seeds_per_axis, dtype=int) if cfg.seeds_per_axis else _default_nodes(field, region)
    nodes = np.maximum(nodes, 2)
    h = region.sides / (nodes - 1)
    if field.bounded:
        box_lo, box_hi = np.asarray(domain.lower), np.asarray(domain.upper)
        axes = [np.linspace(box_lo[k], box_hi[k], int(np.ceil(domain.sides[k] / h[k])) + 1) for k in range(d)]
    else:
        box_lo = np.asarray(region.lower) - 2 * h
        box_hi = np.asarray(region.upper) + 2 * h
        axes = [region.lower[k] + h[k] * np.arange(-1, nodes[k] + 1) for k in range(d)]
    _, grad, hess = _grid_derivatives(field, axes)
    gscale = math.sqrt(float(np.mean(np.sum(grad**2, axis=-1))))
    hscale = math.sqrt(float(np.mean(np.sum(hess**2, axis=(-2, -1)))) / d)
    if gscale == 0.0 and hscale == 0.0:
        raise DegenerateField("field is locally constant on the window")
    tol = cfg.newton_tol if cfg.newton_tol is not None else 1e-10 * max(gscale, hscale * float(np.min(h)))
    morse_tol = cfg.morse_tol if cfg.morse_tol is not None else 1e-12 * hscale**d
    dedup_radius = cfg.dedup_radius if cfg.dedup_radius is not None else 1e-4 * window.diameter

    seeds, n_cand, n_cells = _candidate_seeds(axes, grad, hess, cfg.safety)
    pts, res, status, _ = newton_solve(field, seeds, tol, cfg.newton_max_iter, box_lo, box_hi,
                                     trust=h, leash=3 * h, merge_radius=MERGE_FRACTION * float(np.min(h)))
    conv = status == 0
    failed = (status == 1) | (status == 3)
    failed_res = res[failed]
    if failed.any():
        log.debug("%d Newton seeds did not converge; residual norms %s", failed.sum(), res[failed])
    pts, res = pts[conv], res[conv]
    inside = region.contains(pts)
    n_outside = int((~inside).sum())
    pts, res = pts[inside], res[inside]
    keep = _dedup(pts, res, dedup_radius)
    n_dup = len(pts) - len(keep)
    pts = pts[keep]

    if len(pts):
        val, g, H = field.derivatives(pts)
        ev = np.linalg.eigvalsh(H)
        det = np.prod(ev, axis=1)
        index = np.sum(ev < 0, axis=1)
    else:
        val, det, index = np.empty(0), np.empty(0), np.empty(0, int)
    morse_bad = np.abs(det) < morse_tol
    n_bad = int(morse_bad.sum())
    if n_bad and n_bad > DEGENERATE_FRACTION * len(pts):
        raise DegenerateField(f"{n_bad} of {len(pts)} critical points have |det H| < {morse_tol:.3g}")
    good = ~morse_bad
    diagnostics = {
        "grid_nodes": [len(a) for a in axes],
        "n_cells": n_cells,
        "n_candidate_cells": n_cand,
        "n_seeds": len(seeds),
        "n_converged": int(conv.sum()),
        "n_failed": int(failed.sum()),
        "n_merged": int((status == 2).sum()),
        "max_failed_residual": float(failed_res.max()) if len(failed_res) else 0.0,
        "n_outside": n_outside,
        "n_duplicates": n_dup,
        "n_morse_rejected": n_bad,
        "newton_tol": tol,
        "morse_tol": morse_tol,
        "boundary_margin": margin,
    }
    return PointPattern(region, pts[good], index[good], val[good], det[good], diagnostics)


# ---------------------------------------------------------------------------
# Comparing patterns
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchResult:
    """Optimal one-to-one matching between two patterns."""

    count_difference: int
    max_displacement: float
    mean_displacement: float
    index_agreement: float


def match_patterns(reference: PointPattern, other: PointPattern) -> MatchResult:
    """Minimum-total-distance matching of the smaller pattern into the larger one.

    Convergence of a sequence of patterns to ``reference`` means the count
    difference vanishes and the matched displacements tend to zero.
    """
    a, b = reference.locations, other.locations
    if len(a) == 0 or len(b) == 0:
        return MatchResult(len(b) - len(a), math.inf if len(a) != len(b) else 0.0,
                           math.inf if len(a) != len(b) else 0.0, 1.0)
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    disp = cost[rows, cols]
    agree = float(np.mean(reference.index[rows] == other.index[cols]))
    return MatchResult(len(b) - len(a), float(disp.max()), float(disp.mean()), agree)
