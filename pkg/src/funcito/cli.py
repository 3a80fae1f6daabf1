"""Command line: ``funcito run <config>``, ``funcito catalog``, ``funcito version``.

Exit codes of ``run``: 0 when every check passes, 1 when a check fails or
errors, 2 when the configuration is invalid.
"""

from __future__ import annotations

import argparse
import inspect
import sys
from pathlib import Path as FsPath

import numpy as np

from . import __version__
from .catalog import DRIFTS, FUNCTIONALS, closed_form_phi, list_catalog, make_drift, make_functional
from .config import NamedBlock, load
from .exceptions import ConfigError, FuncitoError
from .functionals import DEFAULT_SCHEME, NO_CALLBACKS
from .measures import RadonMeasure
from .paths import Path, bump_direction, format_float
from .pathwise import PsiContext, contraction_factor, measured_contraction, picard_solve
from .reports import summary_csv, verdict_summary_csv, verdicts_json
from .sde import CoefficientSet, derive_seed, flow_residual, integrate_constant_noise, sample_ensemble_noise, sample_noise, simulate
from .sensitivities import (
    DerivativeContext,
    dense_first_derivative,
    fd_first_derivative,
    fd_second_derivative,
    first_derivative,
    second_derivative,
    sensitivity_csv,
)
from .verification import (
    ResidualReport,
    clark_ocone_convergence,
    clark_ocone_integrand,
    clark_ocone_residual,
    feynman_kac,
    ito_convergence,
    ito_residual,
    kolmogorov_residual,
    kolmogorov_residual_exact,
    phi_clark_ocone,
    tower_residual,
    verify_phi_suite,
)


class Experiment:
    """Model objects built from a validated configuration."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.seed = cfg.seed
        self.grid = cfg.grid()
        model = cfg.model
        measure = None
        if model.measure:
            measure = RadonMeasure.from_config(self.grid.horizon, [e.model_dump(exclude_none=True) for e in model.measure])
        self.drift = make_drift(model.drift.name, self.grid, measure, _with_dim(model.drift, _drift_factory(model.drift.name), model.dim_h))
        self.B = np.array(model.B, dtype=float)
        self.coeffs = CoefficientSet.additive(
            self.drift, self.B, lipschitz=self.drift.lipschitz, drift_lipschitz=self.drift.lipschitz,
            drift_d1=self.drift.d1, drift_d2=self.drift.d2,
        )
        self.x = Path.constant(self.grid, model.initial)
        self.f = self.functional(cfg.functional)

    def functional(self, block: NamedBlock):
        factory = FUNCTIONALS.get(block.name, (None,))[0]
        return make_functional(block.name, _with_dim(block, factory, self.cfg.model.dim_h))

    def noise_path(self, label: int):
        return integrate_constant_noise(self.B, sample_noise(self.grid, self.B.shape[1], derive_seed(self.seed, label)))


def _drift_factory(name):
    return DRIFTS[name][0]


def _with_dim(block, factory, dim):
    params = dict(block.params)
    if factory is not None and "dim" in inspect.signature(factory).parameters:
        params.setdefault("dim", dim)
    return params


def run_feynman_kac(exp: Experiment, c):
    est = feynman_kac(c.t, exp.x, exp.f, exp.coeffs, c.n_paths, derive_seed(exp.seed, 1))
    phi = closed_form_phi(exp.drift, exp.f)
    table = {"value": [est.value], "stderr": [est.stderr], "n_paths": [est.n_paths]}
    if phi is None:
        report = ResidualReport("feynman_kac", est.stderr, c.tolerance, 0.0, {"t": c.t, "n_paths": c.n_paths, "oracle": "none"}, table)
    else:
        expected = float(phi(c.t, exp.x))
        table["expected"] = [expected]
        report = ResidualReport(
            "feynman_kac", abs(est.value - expected), 3 * est.stderr + c.tolerance, est.value - expected,
            {"t": c.t, "n_paths": c.n_paths, "oracle": "closed_form"}, table,
        )
    noise = sample_ensemble_noise(exp.grid, exp.B.shape[1], derive_seed(exp.seed, 1), min(c.summary_paths, c.n_paths))
    extra = {"ensemble_summary.csv": summary_csv(simulate(c.t, exp.x, exp.coeffs, noise))}
    return [report], extra


def _check_functional(exp, block, default):
    return exp.functional(block or NamedBlock(**default))


def run_ito(exp: Experiment, c):
    u = _check_functional(exp, c.functional, {"name": "cylinder", "params": {"form": "linear"}})
    noise = sample_ensemble_noise(exp.grid, exp.B.shape[1], derive_seed(exp.seed, 2), c.n_paths)
    report = ito_residual(u, c.t_hat, exp.x, exp.coeffs, noise, mode=c.mode, tol=c.tolerance)
    report.params["functional"] = u.name
    return [report], {}


def run_ito_convergence(exp: Experiment, c):
    u = _check_functional(exp, c.functional, {"name": "cylinder", "params": {"form": "sin_decay", "rate": 1.0}})
    top = max(c.factors)
    fine = exp.grid.refine(top)
    noise = sample_ensemble_noise(fine, exp.B.shape[1], derive_seed(exp.seed, 3), c.n_paths)
    coarsen = [top // f for f in sorted(c.factors)]
    report = ito_convergence(u, c.t_hat, Path.constant(fine, exp.cfg.model.initial), exp.coeffs, noise, coarsen, c.min_slope)
    return [report], {}


def run_kolmogorov(exp: Experiment, c):
    reports = []
    if c.mode in ("analytic", "both"):
        phi = closed_form_phi(exp.drift, exp.f)
        if phi is None:
            raise ConfigError("the analytic Kolmogorov check needs a model with a closed-form phi")
        reports.append(kolmogorov_residual_exact(phi, exp.coeffs, c.t, exp.x, tol=c.tolerance))
    if c.mode in ("monte_carlo", "both"):
        reports.append(kolmogorov_residual(exp.f, exp.coeffs, c.t, exp.x, DEFAULT_SCHEME, c.n_paths, derive_seed(exp.seed, 4)))
    return reports, {}


def run_clark_ocone(exp: Experiment, c):
    if c.integrand == "chain_rule":
        report = phi_clark_ocone(exp.f, exp.drift, exp.B, exp.coeffs, c.t_hat, exp.x, c.n_paths, c.n_outer, c.n_inner, derive_seed(exp.seed, 5))
        return [report], {}
    phi = closed_form_phi(exp.drift, exp.f, scheme_exact=True)
    if phi is None:
        raise ConfigError("the analytic Clark-Ocone check needs a model with a closed-form phi; use integrand: chain_rule")
    noise = sample_ensemble_noise(exp.grid, exp.B.shape[1], derive_seed(exp.seed, 5), c.n_paths)
    main = clark_ocone_residual(phi, exp.coeffs, c.t_hat, exp.x, noise)
    fine = sample_ensemble_noise(exp.grid.refine(2), exp.B.shape[1], derive_seed(exp.seed, 6), c.n_paths)
    conv = clark_ocone_convergence(phi, exp.coeffs, c.t_hat, Path.constant(fine.grid, exp.cfg.model.initial), fine)
    # integrand by callbacks against finite differences along a few paths
    X = simulate(c.t_hat, exp.x, exp.coeffs, noise.select(slice(0, 8)))
    gaps = []
    k0 = exp.grid.index(c.t_hat)
    for j in range(k0, exp.grid.n_steps):
        t = exp.grid.time(j)
        diffusion = exp.coeffs.diffusion(t, X.values[..., : j + 1, :])
        gap = clark_ocone_integrand(phi, t, X, diffusion, DEFAULT_SCHEME) - clark_ocone_integrand(phi, t, X, diffusion, NO_CALLBACKS)
        gaps.append(float(np.max(np.abs(gap))))
    integrand = ResidualReport(
        "clark_ocone_integrand", max(gaps), c.integrand_tolerance, np.array(gaps), {"t_hat": c.t_hat, "n_paths": 8},
        {"t": exp.grid.nodes[k0:-1], "max_gap": np.array(gaps)},
    )
    return [main, conv, integrand], {}


def run_tower(exp: Experiment, c):
    return [tower_residual(c.t_prime, c.t, exp.x, exp.f, exp.coeffs, c.n_outer, c.n_inner, derive_seed(exp.seed, 7))], {}


def _rel(a, b, floor=1e-300):
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), floor))


def run_sensitivities(exp: Experiment, c):
    grid = exp.grid
    ctx = PsiContext(c.t, exp.x, exp.drift, exp.noise_path(8))
    solve = picard_solve(ctx, tol=1e-14)
    dctx = DerivativeContext.build(ctx, solve.solution, solve.lam)
    ones = np.ones(exp.x.dim)
    mid = grid.time(max(grid.index(c.t), grid.n_steps // 2))
    directions = {
        "constant": Path.constant(grid, ones),
        "bump": bump_direction(mid, ones, grid),
        "cosine": Path.from_function(grid, lambda s: np.cos(2 * np.pi * s / grid.horizon) * ones),
    }
    rows, worst, worst_dense = [], 0.0, 0.0
    dense_ok = exp.x.dim * (grid.n_steps + 1) <= 2049
    for name, v in directions.items():
        neu = first_derivative(dctx, v).values
        fd = fd_first_derivative(dctx, v, c.eps).values
        worst = max(worst, _rel(neu, fd))
        if dense_ok:
            worst_dense = max(worst_dense, float(np.max(np.abs(neu - dense_first_derivative(dctx, v).values))))
        for i in range(exp.x.dim):
            for k, t in enumerate(grid.nodes):
                rows.append((f"{name}:{i + 1}", t, k, neu[k, i], fd[k, i]))
    params = {"t": c.t, "lambda": dctx.lam, "alpha": dctx.alpha}
    reports = [ResidualReport("sensitivities_first", worst, c.rel_tol, 0.0, dict(params))]
    if dense_ok:
        reports.append(ResidualReport("sensitivities_dense", worst_dense, c.dense_tol, 0.0, dict(params)))
    v, w = directions["constant"], directions["cosine"]
    second = second_derivative(dctx, v, w).values
    if exp.drift.d2 == 0:
        reports.append(ResidualReport("sensitivities_second", float(np.max(np.abs(second))), 0.0, 0.0, dict(params, oracle="vanishing")))
    else:
        fd2 = fd_second_derivative(dctx, v, w, c.eps_second).values
        reports.append(ResidualReport("sensitivities_second", _rel(second, fd2), c.rel_tol_second, 0.0, dict(params, oracle="stencil")))
    return reports, {"rows.csv": sensitivity_csv(rows), "picard.csv": solve.diagnostics_csv()}


def run_contraction(exp: Experiment, c):
    ctx = PsiContext(0.0, exp.x, exp.drift, exp.noise_path(9))
    lams, alphas, measured, picard, iters = [], [], [], [], []
    score = 0.0
    for i, lam in enumerate(c.lambdas):
        alpha = contraction_factor(lam, exp.drift.lipschitz, exp.drift.total_variation, exp.grid.horizon)
        ratios = measured_contraction(ctx, lam, c.pairs, derive_seed(exp.seed, 9, i))
        lams.append(lam)
        alphas.append(alpha)
        measured.append(float(ratios.max()))
        if alpha < 1:
            result = picard_solve(ctx, lam=lam)
            pr = result.ratios()
            picard.append(float(pr.max()) if pr.size else 0.0)
            iters.append(result.iterations)
        else:
            picard.append(float("nan"))
            iters.append(0)
        if alpha > 0:
            score = max(score, measured[-1] / alpha)
            if alpha < 1:
                score = max(score, picard[-1] / (alpha * c.slack))
        else:
            score = max(score, measured[-1] * 1e12)
    table = {"lambda": lams, "alpha": alphas, "max_ratio": measured, "picard_max_ratio": picard, "iterations": np.array(iters)}
    return [ResidualReport("contraction", score, 1.0, np.array(measured), {"pairs": c.pairs, "slack": c.slack}, table)], {}


def run_flow(exp: Experiment, c):
    noise = sample_ensemble_noise(exp.grid, exp.B.shape[1], derive_seed(exp.seed, 10), c.n_paths)
    scheme = flow_residual(c.t, exp.x, c.s, exp.coeffs, noise)
    W = integrate_constant_noise(exp.B, noise)
    first = picard_solve(PsiContext(c.t, exp.x, exp.drift, W), tol=1e-14).solution
    second = picard_solve(PsiContext(c.s, first, exp.drift, W), tol=1e-14).solution
    pathwise = float(np.max(np.abs(first.values - second.values)))
    params = {"t": c.t, "s": c.s, "n_paths": c.n_paths}
    return [
        ResidualReport("flow", scheme, 0.0, scheme, dict(params, solver="euler_maruyama")),
        ResidualReport("flow_pathwise", pathwise, 1e-10, pathwise, dict(params, solver="pathwise")),
    ], {}


def run_phi_suite(exp: Experiment, c):
    reports = verify_phi_suite(exp.f, exp.drift, exp.B, c.t, exp.x, c.n_paths, derive_seed(exp.seed, 11), c.n_outer, c.n_inner, c.rel_tol)
    for r in reports:
        r.check = f"phi_suite_{r.check}"
    return reports, {}


RUNNERS = {
    "clark_ocone": run_clark_ocone,
    "contraction": run_contraction,
    "feynman_kac": run_feynman_kac,
    "flow": run_flow,
    "ito": run_ito,
    "ito_convergence": run_ito_convergence,
    "kolmogorov": run_kolmogorov,
    "phi_suite": run_phi_suite,
    "sensitivities": run_sensitivities,
    "tower": run_tower,
}


def execute(cfg, out_dir: FsPath) -> list:
    """Run every configured check, write reports, return the verdicts."""
    try:
        exp = Experiment(cfg)
    except FuncitoError as err:
        raise ConfigError(str(err)) from None
    verdicts, files = [], {}
    for name in cfg.checks:
        reports, extra = RUNNERS[name](exp, cfg.check(name))
        for report in reports:
            verdicts.append(report.verdict())
            files[f"{report.check}.csv"] = report.to_csv()
        for fname, text in extra.items():
            files[f"{name}_{fname}"] = text
    out_dir.mkdir(parents=True, exist_ok=True)
    formats = cfg.output.formats
    if "csv" in formats:
        (out_dir / "summary.csv").write_text(verdict_summary_csv(verdicts))
        for fname, text in sorted(files.items()):
            (out_dir / fname).write_text(text)
    if "json" in formats:
        (out_dir / "verdicts.json").write_text(verdicts_json(verdicts))
    return verdicts


def cmd_run(args) -> int:
    try:
        cfg, label = load(args.config)
        out_dir = FsPath(args.out) if args.out else FsPath(cfg.output.directory) / label
        verdicts = execute(cfg, out_dir)
    except ConfigError as err:
        print(f"invalid config {args.config}: {err}", file=sys.stderr)
        return 2
    except FuncitoError as err:
        print(f"check failed with error: {err}", file=sys.stderr)
        return 1
    for v in verdicts:
        status = "PASS" if v["pass"] else "FAIL"
        print(f"{status} {v['check']}: value={format_float(v['value'])} budget={format_float(v['budget'])}")
    print(f"reports written to {out_dir}")
    return 0 if all(v["pass"] for v in verdicts) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="funcito", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the checks of a config file or bundled config")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (default: <output.directory>/<config name>)")
    sub.add_parser("catalog", help="list drifts, functionals and checks")
    sub.add_parser("version", help="print the version")
    args = parser.parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "catalog":
        sys.stdout.write(list_catalog())
        return 0
    print(__version__)
    return 0


if __name__ == "__main__":
    sys.exit(main())
