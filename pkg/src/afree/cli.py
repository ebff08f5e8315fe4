"""Command-line front end.

Exit codes: 0 success, 2 invalid input, 3 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .grid import GridError, SpaceTimeField, make_grid, random_field
from .integrands import (ConvergenceError, DataSet, constitutive_integrand, datadriven_integrand,
                         envelope_estimate, parse_law, Integrand)
from .multipliers import DecompositionError, neg_norm
from .symbols import (KernelDimensionError, SymbolError, builtin, constant_rank_check, kernel_basis,
                      potential_check)

log = logging.getLogger("afree")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
    pass


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


# -- integrand selection --------------------------------------------------------------

_TOY = {
    "convex": lambda e, s: np.sum(e * e, axis=-1) + np.sum(s * s, axis=-1),
    "neg-sigma2": lambda e, s: -np.sum(s * s, axis=-1),
    "eps-dot-sig": lambda e, s: np.sum(e * s, axis=-1),
}


def _integrand(args, m):
    spec = getattr(args, "f", None)
    if spec and spec in _TOY:
        return Integrand(_TOY[spec], m, name=spec), None
    if spec and spec.startswith("data:"):
        args.data = spec[5:]
    elif spec:
        args.law = spec
    if getattr(args, "data", None):
        if args.p is None:
            raise UsageError("--data needs --p")
        ds = DataSet.from_csv(args.data, args.p, args.q)
        if ds.m != m:
            raise UsageError(f"data set has {ds.m} strain coordinates, operator needs {m}")
        return datadriven_integrand(ds), None
    if getattr(args, "law", None):
        law = parse_law(args.law)
        return constitutive_integrand(law, m), law
    raise UsageError("choose an integrand with --law, --data or --f")


def _pair(name):
    try:
        return builtin(name)
    except SymbolError as exc:
        raise UsageError(str(exc)) from None


# -- subcommands ----------------------------------------------------------------------

def cmd_check_symbol(args):
    pair = _pair(args.op)
    rep = {"op": args.op, "m": pair.m, "d": pair.d, "k": pair.k}
    q_rank = constant_rank_check(pair.Q, args.samples, args.seed)
    a_rank = constant_rank_check(pair.annihilator, args.samples, args.seed)
    rep["Q_rank"] = {"rank": q_rank.rank, "constant": q_rank.passed}
    rep["annihilator_rank"] = {"rank": a_rank.rank, "constant": a_rank.passed}
    # image of the potential equals the kernel of the annihilator
    pc = (potential_check(pair.R, pair.S, args.samples, args.seed) if pair.pseudo
          else potential_check(pair.Qstar, pair.Pstar, args.samples, args.seed))
    rep["potential"] = {"passed": pc.passed, "max_distance": pc.max_distance}
    rng = np.random.default_rng(args.seed)
    xs = rng.standard_normal((args.samples, pair.d + 1))
    xs[: pair.d + 1] = np.eye(pair.d + 1)
    dims = []
    for xi in xs:
        try:
            dims.append(kernel_basis(pair, xi).shape[-1])
        except KernelDimensionError:
            dims.append(-1)
    dims = np.array(dims)
    rep["kernel_dimension"] = {"samples": len(dims), "expected": pair.m,
                               "failures": int(np.sum(dims != pair.m))}
    rep["passed"] = bool(q_rank.passed and a_rank.passed and pc.passed
                         and rep["kernel_dimension"]["failures"] == 0)
    return rep, EXIT_OK if rep["passed"] else EXIT_NUMERIC


def cmd_project(args):
    from .projections import (A_residual_norm, apply_A, project_parabolic_linear,
                              project_parabolic_nonlinear)
    pair = _pair(args.op)
    w = io.load_spacetime(args.input)
    if w.m != 2 * pair.m:
        raise UsageError(f"{args.op} needs {2 * pair.m} channels, file has {w.m}")
    if args.mode == "linear":
        out = project_parabolic_linear(pair, w)
        info = {}
    else:
        res = project_parabolic_nonlinear(pair, w, args.p, args.q, return_info=True)
        out = res.field
        info = {"decomposition_norm": res.decomposition.norm,
                "decomposition_iterations": res.decomposition.iterations}
    io.save_spacetime(args.output, out)
    chi = apply_A(pair, w)
    rep = {"op": args.op, "mode": args.mode, "input_norm": w.norm(),
           "residual_after": A_residual_norm(pair, out),
           "distance": (w - out).norm(), "output": str(args.output), **info}
    if args.mode == "nonlinear":
        rep["residual_before_negnorm"] = neg_norm(
            SpaceTimeField(w.grid, chi.values[: pair.m]), args.p, args.q, pair.k)
    return rep, EXIT_OK


def cmd_envelope(args):
    pair = _pair(args.op)
    f, _ = _integrand(args, pair.m)
    eps = np.array(_floats(args.eps)) if args.eps else np.zeros(pair.m)
    sig = np.array(_floats(args.sig)) if args.sig else np.zeros(pair.m)
    if eps.shape != (pair.m,) or sig.shape != (pair.m,):
        raise UsageError(f"--eps and --sig need {pair.m} coordinates")
    grid = make_grid(pair.d, args.Nt, args.Nx)
    if max(args.Nt, args.Nx) > 16:
        raise UsageError("envelope grids are limited to Nt, Nx <= 16")
    res = envelope_estimate(f, pair, eps, sig, grid, R=args.R, budget=args.budget, seed=args.seed)
    rep = {"value": res.value, "base_value": res.base_value, "converged": res.converged,
           "evaluations": res.evaluations}
    return rep, EXIT_OK if res.converged else EXIT_NUMERIC


def cmd_audit(args):
    from .convexity import (constitutive_certificate, cone_convexity_test, implication_audit,
                            jensen_test, subharmonicity_test)
    pair = _pair(args.op)
    f, law = _integrand(args, pair.m)
    rng = np.random.default_rng(args.seed)
    tests = [t.strip() for t in args.tests.split(",") if t.strip()]
    unknown = set(tests) - {"jensen", "cone", "subharmonic", "chain"}
    if unknown:
        raise UsageError(f"unknown tests {sorted(unknown)}")
    rep = {"op": args.op, "integrand": f.name, "seed": args.seed}
    if "jensen" in tests:
        base = rng.standard_normal(2 * pair.m)
        rep["jensen"] = jensen_test(f, pair, base, args.n_fields, seed=args.seed).to_dict()
    if "cone" in tests:
        rep["cone"] = cone_convexity_test(f, pair, args.n_dirs, args.n_base, args.seed).to_dict()
    if "subharmonic" in tests:
        rep["subharmonic"] = subharmonicity_test(f, pair, args.n_samples, seed=args.seed).to_dict()
    if "chain" in tests:
        cert = constitutive_certificate(law) if law is not None else None
        rep["chain"] = implication_audit(f, pair, cert, args.seed).to_dict()
    return rep, EXIT_OK


def _u0(args, grid):
    from .flow import taylor_green
    if args.u0 == "taylor-green":
        return taylor_green(grid, args.amplitude)
    if args.u0 == "zero":
        return np.zeros((grid.d,) + grid.spatial_shape)
    values, g, _ = io.read_field(args.u0)
    if values.shape[0] != grid.d or g.Nx != grid.Nx or g.d != grid.d:
        raise UsageError("u0 file must hold d components on the solve's spatial grid")
    return np.array(values[:, 0].real)


def cmd_solve(args):
    from . import flow
    if args.op not in ("fluid-d2", "fluid-d3"):
        raise UsageError("solve needs a fluid operator (fluid-d2 or fluid-d3)")
    pair = _pair(args.op)
    grid = make_grid(pair.d, args.Nt, args.Nx, args.T)
    u0 = _u0(args, grid)
    f, law = _integrand(args, pair.m)
    cfg = flow.SolveConfig(C_E=args.C_E, eta_schedule=tuple(_floats(args.eta_schedule)),
                           r_prime=args.r_prime, admm_tol=args.admm_tol, C0=args.C0)
    summary = {"mode": args.mode, "op": args.op, "integrand": f.name}
    C0 = None
    if args.mode == "leray-hopf":
        if law is None:
            raise UsageError("leray-hopf needs a constitutive law")
        cr = flow.leray_hopf_continuation(law, u0, grid, cfg=cfg)
        state = cr.final
        summary.update(I=cr.I_values[-1], I_schedule=cr.I_values, etas=cr.etas,
                       energy_inequality_margin=min(cr.energy_margins), monotone=cr.monotone)
    else:
        if max(args.Nt, args.Nx) > 64:
            raise UsageError("variational solves are limited to Nt, Nx <= 64")
        if args.mode == "min-I":
            res = flow.minimize_I(f, u0, grid, cfg)
        else:
            if f.coercivity is None:
                raise UsageError("min-J needs an integrand with coercivity constants (pure power law)")
            res = flow.minimize_J(f, u0, grid, cfg)
            C0 = res.C0
            summary.update(C0=res.C0, theta=res.theta)
        state = res.state
        summary.update(I=res.value, iterations=res.iterations, outer_iterations=res.outer_iterations)
    resid = flow.residual_X(state, cfg)
    summary["residuals"] = {k: v for k, v in resid.items() if k not in ("flags", "in_X")}
    summary["X_flags"] = resid["flags"]
    C0 = C0 if C0 is not None else args.C0
    summary["X5_margin"] = (flow.x5_margin(state, f, C0)
                            if f.coercivity is not None and C0 is not None else None)
    trace = flow.energy_report(state, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.emit_plotdata(trace, out / "energy.csv")
    for name, arr in (("eps", state.eps), ("sigma", state.sigma), ("u", state.u[1:]),
                      ("pi", state.pi[:, None])):
        io.write_field(out / f"{name}.field", np.moveaxis(arr, 1, 0), grid)
    io.write_json(out / "summary.json", summary)
    return summary, EXIT_OK


def cmd_bench(args):
    from . import flow
    from .integrands import ConstitutiveLaw
    from .projections import project_parabolic_linear, A_residual_norm
    out = {}
    pair = builtin("fluid-d2")
    grid = make_grid(2, 16, 16)
    rng = np.random.default_rng(args.seed)
    t = time.perf_counter()
    worst = 0.0
    for _ in range(args.n_fields):
        w = SpaceTimeField(grid, random_field(grid, 2 * pair.m, rng).values)
        worst = max(worst, A_residual_norm(pair, project_parabolic_linear(pair, w)) / w.norm())
    out["projection"] = {"fields": args.n_fields, "seconds": time.perf_counter() - t,
                         "worst_relative_residual": worst}
    g = make_grid(2, 100, 32, T=0.1)
    t = time.perf_counter()
    st = flow.solve_regularized(ConstitutiveLaw(2.0, mu0=0.01), 0.0, flow.taylor_green(g), g)
    amp = flow.taylor_green_amplitude(st.u[-1])
    exact = float(np.exp(-4 * np.pi ** 2 * 0.01 * 0.1))
    out["taylor_green"] = {"seconds": time.perf_counter() - t, "amplitude": amp, "exact": exact,
                           "relative_error": abs(amp / exact - 1)}
    return out, EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _add_integrand(p):
    p.add_argument("--law", help="e.g. power:p=3,mu=1,kappa=0")
    p.add_argument("--data", help="CSV data set (strain coordinates then stress coordinates)")
    p.add_argument("--p", type=float)
    p.add_argument("--q", type=float)


def build_parser():
    ap = argparse.ArgumentParser(prog="afree", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="flat key = value file; command-line flags take precedence")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check-symbol", help="rank and kernel-dimension report for an operator")
    p.add_argument("--op", required=True)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("project", help="project a field file onto the operator kernel")
    p.add_argument("--op", required=True)
    p.add_argument("--mode", choices=("linear", "nonlinear"), default="linear")
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--q", type=float, default=2.0)
    p.add_argument("input")
    p.add_argument("output")

    p = sub.add_parser("envelope", help="upper bound for the quasiconvex envelope at a point")
    p.add_argument("--op", required=True)
    p.add_argument("--f")
    _add_integrand(p)
    p.add_argument("--eps")
    p.add_argument("--sig")
    p.add_argument("--Nt", type=int, default=8)
    p.add_argument("--Nx", type=int, default=8)
    p.add_argument("--R", type=float, default=np.inf)
    p.add_argument("--budget", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("audit", help="convexity audits with a JSON report")
    p.add_argument("--op", required=True)
    p.add_argument("--f", help="law spec, data:FILE, or one of " + ", ".join(_TOY))
    _add_integrand(p)
    p.add_argument("--tests", default="jensen,cone,subharmonic,chain")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-fields", type=int, default=20)
    p.add_argument("--n-dirs", type=int, default=50)
    p.add_argument("--n-base", type=int, default=20)
    p.add_argument("--n-samples", type=int, default=100)

    for name in ("solve", "leray-hopf"):
        p = sub.add_parser(name, help="flow solves" if name == "solve" else "regularised continuation")
        if name == "solve":
            p.add_argument("--mode", choices=("leray-hopf", "min-I", "min-J"), default="leray-hopf")
        p.add_argument("--op", default="fluid-d2")
        p.add_argument("--f")
        _add_integrand(p)
        p.add_argument("--u0", default="taylor-green", help="taylor-green, zero, or a field file")
        p.add_argument("--amplitude", type=float, default=1.0)
        p.add_argument("--Nt", type=int, default=16)
        p.add_argument("--Nx", type=int, default=16)
        p.add_argument("--T", type=float, default=0.1)
        p.add_argument("--eta-schedule", default="0.1,0.03,0.01")
        p.add_argument("--r-prime", type=float)
        p.add_argument("--C-E", type=float, default=4.0)
        p.add_argument("--C0", type=float)
        p.add_argument("--admm-tol", type=float, default=1e-7)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default="afree-out")

    p = sub.add_parser("bench", help="timing of projections and the Taylor-Green run")
    p.add_argument("--n-fields", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    return ap


COMMANDS = {"check-symbol": cmd_check_symbol, "project": cmd_project, "envelope": cmd_envelope,
            "audit": cmd_audit, "solve": cmd_solve, "leray-hopf": cmd_solve, "bench": cmd_bench}


def _parse(argv):
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        try:
            conf = io.read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        known = set(vars(args))
        bad = set(conf) - known
        if bad:
            raise UsageError(f"unknown config keys {sorted(bad)}")
        # re-parse with config values as defaults so explicit flags win
        sub = ap._subparsers._group_actions[0].choices[args.command]
        types = {a.dest: a.type for a in sub._actions}
        sub.set_defaults(**{k: (types.get(k) or str)(v) for k, v in conf.items()})
        args = ap.parse_args(argv)
    if args.command == "leray-hopf":
        args.mode = "leray-hopf"
    return args


def run(argv=None):
    """Run one subcommand; print its JSON report on stdout and return the exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    except (UsageError, ValueError) as exc:
        print(f"afree: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    resolved = {k: v for k, v in sorted(vars(args).items())}
    log.info("config: %s", json.dumps(resolved, default=str, sort_keys=True))
    from .flow import FlowError
    try:
        report, code = COMMANDS[args.command](args)
    except (UsageError, SymbolError, GridError, io.FieldFormatError, ValueError, OSError) as exc:
        print(f"afree: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FlowError, DecompositionError, ConvergenceError, KernelDimensionError) as exc:
        print(f"afree: did not converge: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    report = dict(report, config={k: v for k, v in resolved.items() if k != "log_level"})
    sys.stdout.write(io.dumps(report))
    return code


def main():
    sys.exit(run())
