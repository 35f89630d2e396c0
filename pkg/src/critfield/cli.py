"""Command-line front end.

Every command writes a self-describing artifact: CSV files start with a
``# {json}`` line holding the full configuration (including the seed), JSON
reports carry the same record under ``"config"``.

Exit codes: 0 success, 2 invalid configuration, 3 mathematical degeneracy,
4 runtime or size cap exceeded.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
import warnings

import numpy as np

from . import errors
from .covmodels import (
    CovarianceModel,
    Family,
    check_integrability,
    check_pairwise_nondegeneracy,
    moment_ratio,
    spectral_moments,
)
from .critpoints import ExtractionConfig, PointPattern, counts_by_index, extract
from .fieldsim import (
    CosineProductField,
    Window,
    realization_from_dict,
    simulate_lattice,
    simulate_spectral,
    smooth_lattice,
)
from .kacrice import (
    IndexSet,
    SummaryCurve,
    default_eta,
    default_pcf_grid,
    intensity_closed_form,
    intensity_goe_mc,
    kfun_eta,
    pcf_curve,
    repulsion_index,
    scale_for_intensity,
    smallr_slope,
)
from .stats import clt_experiment, k_hat_eta, rho_hat

EXIT_OK, EXIT_INVALID, EXIT_DEGENERATE, EXIT_CAP = 0, 2, 3, 4

_DEGENERACY = (
    errors.DegenerateJoint,
    errors.DegenerateField,
    errors.IntegrabilityViolation,
    errors.InsufficientSmoothness,
    errors.NonPositiveValues,
    errors.EmptyPattern,
)
_CAPS = (errors.LatticeTooLarge, errors.RuntimeCapExceeded)
# arguments that never influence results and are left out of the recorded configuration
_UNRECORDED = {"output", "config", "threads", "func", "command"}


class _InvalidConfig(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _InvalidConfig(message)


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _grid(text: str) -> np.ndarray:
    """``"a:b:n"`` (linear grid) or an explicit comma-separated list."""
    if ":" in str(text):
        lo, hi, n = str(text).split(":")
        return np.linspace(float(lo), float(hi), int(n))
    return np.array(_floats(text))


def _window(text: str | None, d: int) -> Window:
    if text is None:
        return Window.unit(d)
    vals = _floats(text)
    if len(vals) == 2:
        return Window([vals[0]] * d, [vals[1]] * d)
    if len(vals) == 2 * d:
        return Window(vals[:d], vals[d:])
    raise ValueError("--window takes 'lo,hi' or 'lo_1..lo_d,hi_1..hi_d'")


def _add_model(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--family", choices=[f.value for f in Family], default="matern")
    g.add_argument("--d", type=int, default=2)
    g.add_argument("--nu", type=float, default=None, help="Matérn smoothness")
    g.add_argument("--phi", type=float, default=1.0)
    g.add_argument("--target-rho", type=float, default=None,
                   help="choose phi so that the index set --L has this intensity")
    g.add_argument("--L", default="all", help="all, extrema, maxima, minima, saddles or a list such as 0,2")


def _add_common(p: argparse.ArgumentParser, seeded: bool = True) -> None:
    p.add_argument("--output", "-o", default=None, help="output file (default: standard output)")
    p.add_argument("--config", default=None, help="JSON file whose keys override flag defaults")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    if seeded:
        p.add_argument("--seed", type=int, default=None, help="master seed (generated and recorded if omitted)")


def _model(args) -> CovarianceModel:
    family = Family(args.family)
    nu = args.nu
    if family is Family.MATERN and nu is None:
        raise ValueError("--nu is required for the Matérn family")
    phi = args.phi
    if args.target_rho is not None:
        phi = scale_for_intensity(family, args.d, nu, IndexSet.parse(args.L, args.d), args.target_rho)
    return CovarianceModel(family, args.d, nu if nu is not None else math.inf, phi)


def _seed(args) -> int:
    if getattr(args, "seed", None) is None:
        args.seed = int(np.random.SeedSequence().entropy % 2**64)
    return args.seed


def _record(args, **extra) -> dict:
    rec = {k: v for k, v in sorted(vars(args).items()) if k not in _UNRECORDED}
    rec["command"] = args.command
    rec.update(extra)
    return json.loads(json.dumps(rec, default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _emit(args, text: str) -> None:
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _csv_text(meta: dict, header: list[str], rows) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps(meta, sort_keys=True, default=_json_default) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_model(args) -> int:
    model = _model(args)
    moments = spectral_moments(model, 6)
    try:
        ratio = moment_ratio(model)
    except errors.InsufficientSmoothness:
        ratio = None
    integ = check_integrability(model)
    r_grid = _grid(args.r_grid) if args.r_grid else np.linspace(0.1, 5.0, 50) * model.phi
    margins = []
    for r in r_grid:
        rep = check_pairwise_nondegeneracy(model, float(r))
        margins.append({"r": float(r), "ok": rep.ok, "margin1": rep.margin1, "margin2": rep.margin2})
    warnings_out = []
    if model.second_order_degenerate:
        msg = "second-order degenerate at r ∈ πφZ (sine-cosine process)"
        warnings_out.append(msg)
        print(f"warning: {msg}", file=sys.stderr)
    report = {
        "config": _record(args),
        "model": model.to_dict(),
        "spectral_moments": {f"lambda_{k}": v for k, v in moments.moments.items() if k > 0},
        "moment_ratio": ratio,
        "integrability": {"ok": integ.ok, "verdict": integ.verdict, "decay_exponent": integ.decay_exponent},
        "pairwise_nondegeneracy": margins,
        "warnings": warnings_out,
    }
    _emit(args, _json_text(report))
    return EXIT_OK


def cmd_intensity(args) -> int:
    model = _model(args)
    seed = _seed(args)
    rows = []
    gens = np.random.SeedSequence(seed).spawn(model.d + 1)
    for ell in range(model.d + 1):
        closed = intensity_closed_form(model, [ell])
        if args.n_mc > 0:
            res = intensity_goe_mc(model, ell, args.n_mc, gens[ell], threads=args.threads)
            rows.append([str(ell), closed, float(res.value), float(res.stderr)])
        else:
            rows.append([str(ell), closed, math.nan, math.nan])
    rows.append([str(IndexSet.parse(args.L, model.d)), intensity_closed_form(model, args.L), math.nan, math.nan])
    meta = _record(args, model=model.to_dict())
    _emit(args, _csv_text(meta, ["L", "closed_form", "goe_mc", "stderr"], rows))
    return EXIT_OK


def _pcf(args, model, r_grid) -> SummaryCurve:
    return pcf_curve(model, args.L, args.Lp, r_grid, args.n_mc, seed=_seed(args), threads=args.threads)


def cmd_pcf(args) -> int:
    model = _model(args)
    r_grid = _grid(args.r_grid) if args.r_grid else default_pcf_grid(model, args.r_max or 2.0 * model.phi, 50)
    curve = _pcf(args, model, r_grid)
    meta = _record(args, model=model.to_dict())
    _emit(args, _csv_text(meta, ["r", "value", "stderr"], zip(curve.abscissae, curve.values, curve.stderr)))
    return EXIT_OK


def _stub_curve(eta: float, r_max: float) -> SummaryCurve:
    grid = np.linspace(eta, r_max, 32)
    return SummaryCurve(grid, np.ones_like(grid), np.zeros_like(grid), {"quantity": "poisson-stub"})


def cmd_kfun(args) -> int:
    model = _model(args)
    r = np.array(_floats(args.r))
    eta = args.eta if args.eta is not None else default_eta(model, args.L)
    if args.poisson_stub:
        curve = _stub_curve(eta, float(r.max()))
    else:
        grid = default_pcf_grid(model, float(r.max()), args.n_grid)
        curve = _pcf(args, model, grid)
    values = np.atleast_1d(kfun_eta(model, args.L, eta, r, curve=curve))
    meta = _record(args, model=model.to_dict(), eta=eta)
    _emit(args, _csv_text(meta, ["r", "value", "stderr"], [(x, v, math.nan) for x, v in zip(r, values)]))
    return EXIT_OK


def cmd_repulsion(args) -> int:
    model = _model(args)
    r = np.array(_floats(args.r))
    grid = default_pcf_grid(model, float(r.max()), args.n_grid)
    curve = _pcf(args, model, grid)
    values = np.atleast_1d(repulsion_index(model, args.L, r, curve=curve))
    meta = _record(args, model=model.to_dict())
    _emit(args, _csv_text(meta, ["r", "value", "stderr"], [(x, v, math.nan) for x, v in zip(r, values)]))
    return EXIT_OK


def cmd_slope(args) -> int:
    if args.curve:
        curve = SummaryCurve.from_csv(args.curve)
        lo, hi = _floats(args.fit_window)
        meta = _record(args, source=args.curve)
    else:
        model = _model(args)
        lo, hi = (x * model.phi for x in _floats(args.fit_window))
        curve = _pcf(args, model, np.geomspace(lo, hi, args.n_grid))
        meta = _record(args, model=model.to_dict())
    fit = smallr_slope(curve, (lo, hi))
    _emit(args, _csv_text(meta, ["slope", "intercept", "stderr"], [(fit.slope, fit.intercept, fit.stderr)]))
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = _model(args)
    seed = _seed(args)
    if args.method == "spectral":
        field = simulate_spectral(model, args.n_terms, seed)
    else:
        window = _window(args.window, model.d)
        lattice = simulate_lattice(model, args.n, window, seed, cap=args.lattice_cap)
        field = smooth_lattice(lattice, xi=args.xi)
    out = {"config": _record(args, model=model.to_dict()), "realization": field.to_dict()}
    _emit(args, json.dumps(out, sort_keys=True) + "\n")
    return EXIT_OK


def _extraction_config(args) -> ExtractionConfig:
    return ExtractionConfig(seeds_per_axis=args.seeds_per_axis, safety=args.safety)


def cmd_extract(args) -> int:
    if args.cosine is not None:
        field = CosineProductField(args.d, args.cosine)
        source = {"cosine": args.cosine, "d": args.d}
    elif args.realization:
        with open(args.realization, encoding="utf-8") as fh:
            data = json.load(fh)
        field = realization_from_dict(data.get("realization", data))
        source = data.get("config", {})
    else:
        raise ValueError("give --realization FILE or --cosine FREQ")
    window = _window(args.window, field.d)
    pattern = extract(field, window, _extraction_config(args))
    meta = _record(args, source=source, window=pattern.window.to_dict(),
                   counts_by_index=counts_by_index(pattern).tolist())
    header = [f"x{i + 1}" for i in range(field.d)] + ["index", "value", "det_hessian"]
    rows = [list(loc) + [int(ell), v, det]
            for loc, ell, v, det in zip(pattern.locations, pattern.index, pattern.values, pattern.det_hessian)]
    meta["diagnostics"] = pattern.diagnostics
    _emit(args, _csv_text(meta, header, rows))
    return EXIT_OK


def cmd_estimate(args) -> int:
    pattern = PointPattern.from_csv(args.pattern)
    d = pattern.d
    L = IndexSet.parse(args.L, d)
    rows = [("rho_hat", math.nan, rho_hat(pattern, L))]
    if args.r:
        r = np.array(_floats(args.r))
        if args.eta is None:
            raise ValueError("--eta is required with --r")
        for x, v in zip(r, np.atleast_1d(k_hat_eta(pattern, L, args.eta, r))):
            rows.append(("k_hat_eta", x, v))
    meta = _record(args, window=pattern.window.to_dict(), n_points=len(pattern))
    _emit(args, _csv_text(meta, ["statistic", "r", "value"], rows))
    return EXIT_OK


def cmd_clt(args) -> int:
    model = _model(args)
    seed = _seed(args)
    start = time.monotonic()
    report = clt_experiment(
        model,
        args.L,
        eta=args.eta,
        r_list=_floats(args.r) if args.r else (),
        n_list=_floats(args.n),
        replicates=args.reps,
        rng=seed,
        n_terms=args.n_terms,
        pcf_n_mc=args.pcf_n_mc,
        threads=args.threads,
        max_seconds=args.max_seconds,
        scale_terms=args.scale_terms,
    )
    out = report.to_dict(include_samples=args.samples)
    out["config"] = _record(args, model=model.to_dict())
    out["runtime_seconds"] = time.monotonic() - start
    _emit(args, _json_text(out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="critfield", description="Critical points of stationary Gaussian random fields.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("model", help="moments, integrability and non-degeneracy diagnostics")
    _add_model(p)
    _add_common(p, seeded=False)
    p.add_argument("--r-grid", default=None, help="distances for the non-degeneracy margins, 'a:b:n' or a list")
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("intensity", help="intensities per critical point index")
    _add_model(p)
    _add_common(p)
    p.add_argument("--n-mc", type=int, default=10**5, help="GOE samples (0 skips the Monte Carlo check)")
    p.set_defaults(func=cmd_intensity)

    def curve_flags(p, grid=True):
        p.add_argument("--Lp", default=None, help="second index set for cross correlations")
        p.add_argument("--n-mc", type=int, default=10**5)
        if grid:
            p.add_argument("--n-grid", type=int, default=60)

    p = sub.add_parser("pcf", help="pair correlation curve")
    _add_model(p)
    _add_common(p)
    curve_flags(p, grid=False)
    p.add_argument("--r-grid", default=None)
    p.add_argument("--r-max", type=float, default=None)
    p.set_defaults(func=cmd_pcf)

    p = sub.add_parser("kfun", help="modified K-function")
    _add_model(p)
    _add_common(p)
    curve_flags(p)
    p.add_argument("--r", required=True, help="comma-separated distances")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--poisson-stub", action="store_true", help="use g = 1 instead of the model's pair correlation")
    p.set_defaults(func=cmd_kfun)

    p = sub.add_parser("repulsion", help="repulsion index")
    _add_model(p)
    _add_common(p)
    curve_flags(p)
    p.add_argument("--r", required=True)
    p.set_defaults(func=cmd_repulsion)

    p = sub.add_parser("slope", help="small-distance log-log slope of the pair correlation")
    _add_model(p)
    _add_common(p)
    curve_flags(p)
    p.set_defaults(n_grid=10)
    p.add_argument("--fit-window", default="0.01,0.05", help="fit range in units of phi (absolute with --curve)")
    p.add_argument("--curve", default=None, help="fit an existing pcf CSV instead of computing one")
    p.set_defaults(func=cmd_slope)

    p = sub.add_parser("simulate", help="simulate a field realization (JSON)")
    _add_model(p)
    _add_common(p)
    p.add_argument("--method", choices=["spectral", "lattice"], default="spectral")
    p.add_argument("--n-terms", type=int, default=4096)
    p.add_argument("--n", type=int, default=32, help="lattice refinement")
    p.add_argument("--xi", type=float, default=None, help="kernel bandwidth (lattice method)")
    p.add_argument("--window", default=None)
    p.add_argument("--lattice-cap", type=int, default=2**16)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("extract", help="critical points of a simulated or test field")
    _add_common(p, seeded=False)
    p.add_argument("--realization", default=None, help="JSON written by 'simulate'")
    p.add_argument("--cosine", type=float, default=None, help="use the test field prod_k cos(2 pi FREQ t_k)")
    p.add_argument("--d", type=int, default=2, help="dimension of the cosine test field")
    p.add_argument("--window", default=None)
    p.add_argument("--seeds-per-axis", type=int, default=None)
    p.add_argument("--safety", type=float, default=1.0)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("estimate", help="intensity and K-function estimates from a pattern CSV")
    _add_common(p, seeded=False)
    p.add_argument("--pattern", required=True)
    p.add_argument("--L", default="all")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--r", default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("clt", help="replication study of the estimators")
    _add_model(p)
    _add_common(p)
    p.add_argument("--n", default="10,20,40", help="window sides")
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--r", default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--n-terms", type=int, default=2**14)
    p.add_argument("--scale-terms", action="store_true",
                   help="scale the number of spectral terms with window volume (n-terms at the largest window)")
    p.add_argument("--pcf-n-mc", type=int, default=10**5)
    p.add_argument("--max-seconds", type=float, default=None)
    p.add_argument("--samples", action="store_true", help="include per-replicate statistics")
    p.set_defaults(func=cmd_clt)
    return parser


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            overrides = json.load(fh)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(overrides) - known
        if unknown:
            raise _InvalidConfig(f"unknown configuration keys: {sorted(unknown)}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = _parse(argv)
    except _InvalidConfig as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except _CAPS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAP
    except _DEGENERACY as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (errors.CritFieldError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
