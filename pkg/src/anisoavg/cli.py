"""Command line driver: ``anisoavg <config> [--out DIR] [--jobs N] [--seed S]``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .averaging import (
    MatrixFieldSample,
    OrbitGrid,
    averaged_matrix_explicit,
    averaged_matrix_relaxation,
    average_scalar,
    fill_excluded,
    HQProduct,
)
from .config import ConfigError, StudyConfig, parse_config
from .corrector import compute_corrector_frame, corrector_field, verify_decomposition
from .expressions import parse_expression
from .fields import DIM, FlowMap, GaussianBump, MatrixFieldSpec, _lambdify
from .io import write_columns
from .solver import (
    Grid2D,
    SolverConfig,
    diagnostics_bound_check,
    ellipticity,
    solve_epsilon_problem,
    solve_limit_problem,
    step_explicit_cfl_demo,
)

log = logging.getLogger("anisoavg")

REPORT_HEADER = ("experiment", "params", "metric", "value", "tolerance", "pass")


class UnsupportedFlowError(ValueError):
    """The experiment needs a periodic flow."""


@dataclass
class ReportRow:
    """One checked quantity; ``passed`` is ``|value| <= tolerance``."""

    experiment: str
    params: str
    metric: str
    value: float
    tolerance: float

    def __post_init__(self):
        self.value = float(self.value)
        self.tolerance = float(self.tolerance)
        if not math.isfinite(self.value):
            raise ValueError(f"metric {self.metric} is not finite")

    @property
    def passed(self) -> bool:
        return abs(self.value) <= self.tolerance

    def as_list(self) -> list:
        return [self.experiment, self.params, self.metric, repr(self.value), repr(self.tolerance),
                "true" if self.passed else "false"]


class Report:
    """CSV report written row by row so partial results survive an abort."""

    def __init__(self, path: Path):
        self.path = path
        self.rows: list[ReportRow] = []
        self._fh = path.open("w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(REPORT_HEADER)
        self._fh.flush()

    def add(self, row: ReportRow) -> ReportRow:
        self.rows.append(row)
        self._writer.writerow(row.as_list())
        self._fh.flush()
        log.info("%-22s %-28s %-24s %.3e <= %.3e %s", row.experiment, row.params, row.metric,
                 abs(row.value), row.tolerance, "ok" if row.passed else "FAIL")
        return row

    def close(self):
        self._fh.close()

    @property
    def failures(self) -> int:
        return sum(not r.passed for r in self.rows)


def _scalar(expr: str):
    f = _lambdify([parse_expression(expr)], ())
    return f


def _flow(cfg: StudyConfig) -> FlowMap:
    return FlowMap(cfg.b, period=cfg.period, box=cfg.L)


def _prepare_out(cfg: StudyConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    return out


def run_rotation_reference(cfg: StudyConfig, report: Report) -> None:
    """Averaged tensor by both routes, closed-form and frame-identity checks."""
    fm = _flow(cfg)
    if fm.period is None:
        raise UnsupportedFlowError("the reference experiment needs a periodic flow")
    out = Path(cfg.out)
    exp = "rotation-reference"
    grid = OrbitGrid.radial(fm, cfg.L, cfg.radii, cfg.relax_nodes)
    sample = MatrixFieldSample.on_orbits(cfg.D, grid, weight_id=cfg.weight.name)
    explicit = averaged_matrix_explicit(cfg.D, cfg.weight, fm, sample, n=cfg.orbit_nodes)
    explicit.save(out / "averaged_field.csv")
    params = f"radii={cfg.radii};nodes={cfg.orbit_nodes}"

    base = grid.base
    nodes, _, _ = fm.orbit(base, cfg.orbit_nodes, jacobian=False)
    Dn = cfg.D(nodes)
    at_base = explicit.values.reshape(grid.nodes.shape[:2] + (DIM, DIM))[:, 0]
    radial_diag = np.max(np.abs(Dn - Dn[:, :1])) <= 1e-12 and np.max(np.abs(Dn[..., 0, 1])) == 0.0
    if radial_diag:
        lam = Dn[:, 0]
        closed = 0.5 * (lam[:, 0, 0] + lam[:, 1, 1])[:, None, None] * np.eye(DIM)
        report.add(ReportRow(exp, params, "closed_form_max_error", np.max(np.abs(at_base - closed)), 1e-10))

    relax = averaged_matrix_relaxation(sample, cfg.weight, fm, t_final=cfg.t_relax)
    relax.sample.save(out / "relaxation_field.csv")
    hq = HQProduct.for_sample(sample, cfg.weight)
    rparams = f"nodes={cfg.relax_nodes};t={cfg.t_relax:g};dt={relax.dt:.3e}"
    report.add(ReportRow(exp, rparams, "route_agreement_Q", hq.norm(relax.sample.values - explicit.values), 1e-6))
    report.add(ReportRow(exp, rparams, "relaxation_norm_increases",
                         int(np.count_nonzero(np.diff(relax.norms) > 1e-12 * relax.norms[0])), 0))
    report.add(ReportRow(exp, rparams, "relaxation_residual_Q", relax.residual, 1e-6))

    if cfg.frame is not None:
        G = cfg.frame.gradients(nodes)
        orbit_mean = (np.swapaxes(G, -1, -2) @ Dn @ G).mean(axis=1)
        G0 = cfg.frame.gradients(base)
        projected = np.swapaxes(G0, -1, -2) @ at_base @ G0
        scale = np.maximum(np.abs(orbit_mean), 1.0)
        report.add(ReportRow(exp, params, "frame_identity_max_rel", np.max(np.abs(projected - orbit_mean) / scale), 1e-8))


def _convergence_case(source: str, path: str, eps: float) -> dict:
    cfg = parse_config(path, text=source)
    fm = _flow(cfg)
    grid = Grid2D(cfg.L, cfg.n)
    scfg = SolverConfig(T=cfg.T, dt=cfg.dt, scheme=cfg.scheme, tol=cfg.tol)
    u_in = _scalar(cfg.u_in)
    traj = solve_epsilon_problem(scfg, cfg.D, cfg.b, eps, u_in, grid)
    limit = _limit_solution(cfg, fm, grid, scfg, u_in)
    err = math.sqrt(float(grid.weights @ (traj.u - limit.u) ** 2))
    norm0 = traj.column("l2_norm")[0]
    check = diagnostics_bound_check(traj, eps, norm0) if eps < 1.0 else None
    return {
        "eps": eps,
        "err": err,
        "check": check,
        "mass_drift": float(np.max(np.abs(np.diff(traj.column("mass"))))),
        "norm_increase": float(np.max(np.diff(traj.column("l2_norm")))),
        "iterations": int(sum(traj.iterations)),
        "u_norm": norm0,
    }


_LIMIT_CACHE: dict = {}


def _limit_solution(cfg, fm, grid, scfg, u_in):
    key = (cfg.source, cfg.n, cfg.L)
    if key not in _LIMIT_CACHE:
        if fm.period is None:
            raise UnsupportedFlowError("the limit model needs a periodic flow")
        Davg = averaged_matrix_explicit(cfg.D, cfg.weight, fm, grid.centers, n=cfg.orbit_nodes)
        Davg = fill_excluded(Davg, cfg.D, fm, n=cfg.orbit_nodes)
        u_avg = average_scalar(u_in, fm, grid.points, n=cfg.orbit_nodes)
        _LIMIT_CACHE.clear()
        _LIMIT_CACHE[key] = solve_limit_problem(scfg, Davg, u_avg, grid, cfg.b)
    return _LIMIT_CACHE[key]


def run_convergence_study(cfg: StudyConfig, report: Report, jobs: int = 1) -> None:
    """Distance between the stiff and the averaged solution as ``eps`` decreases."""
    exp = "convergence"
    path = str(cfg.path)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_convergence_case, [cfg.source] * len(cfg.epsilons),
                                    [path] * len(cfg.epsilons), cfg.epsilons))
    else:
        results = (_convergence_case(cfg.source, path, e) for e in cfg.epsilons)
    errors = []
    mass_tol = 10.0 * cfg.tol
    for res in results:
        p = f"eps={res['eps']:g};n={cfg.n};L={cfg.L:g};T={cfg.T:g};dt={cfg.dt:g}"
        previous = errors[-1] if errors else res["u_norm"]
        errors.append(res["err"])
        report.add(ReportRow(exp, p, "err_L2", res["err"], previous))
        if res["check"] is not None:
            c = res["check"]
            report.add(ReportRow(exp, p, "transport_norm", c.transport, 1.1 * c.transport_bound))
            report.add(ReportRow(exp, p, "gradient_sq", c.gradient_sq, 1.1 * c.gradient_sq_bound))
        report.add(ReportRow(exp, p, "mass_drift_per_step", res["mass_drift"], mass_tol * max(1.0, res["u_norm"])))
        report.add(ReportRow(exp, p, "l2_norm_increase", max(res["norm_increase"], 0.0), cfg.tol))
        log.info("eps=%g: %d CG iterations", res["eps"], res["iterations"])
    violations = int(sum(b >= a for a, b in zip(errors, errors[1:])))
    summary = "eps=" + "/".join(f"{e:g}" for e in cfg.epsilons)
    report.add(ReportRow(exp, summary, "monotonicity_violations", violations, 0))
    if cfg.ratio_tol is not None:
        report.add(ReportRow(exp, summary, "err_ratio_last_first", errors[-1] / errors[0], cfg.ratio_tol))


def run_cfl_demo(cfg: StudyConfig, report: Report) -> None:
    """Explicit steps around the stability bound next to backward Euler."""
    exp = "cfl-demo"
    grid = Grid2D(cfg.L, cfg.n)
    u_in = _scalar(cfg.u_in)
    scfg = SolverConfig(T=cfg.T, dt=cfg.dt, tol=cfg.tol)
    for eps in cfg.epsilons:
        for factor in cfg.dt_factors:
            r = step_explicit_cfl_demo(scfg, cfg.D, cfg.b, eps, u_in, factor, grid, steps=cfg.cfl_steps)
            p = f"eps={eps:g};factor={factor:g};dt={r.dt:.4e};steps={r.steps}"
            if factor <= 1.0:
                increase = float(np.max(np.diff(r.norms)) / r.norms[0])
                report.add(ReportRow(exp, p, "explicit_norm_increase", max(increase, 0.0), 1e-12))
            else:
                report.add(ReportRow(exp, p, "explicit_inverse_growth", 1e3 / r.growth, 1.0))
                be_cfg = SolverConfig(T=r.dt * cfg.cfl_steps, dt=r.dt, tol=cfg.tol)
                traj = solve_epsilon_problem(be_cfg, cfg.D, cfg.b, eps, u_in, grid)
                norms = traj.column("l2_norm")
                report.add(ReportRow(exp, p, "implicit_norm_increase",
                                     max(float(np.max(np.diff(norms))), 0.0), cfg.tol))


def bump_battery(seed: int, count: int = 5, spread: float = 1.5, width: float = 0.35):
    """Fixed pseudo-random pairs of Gaussian bumps."""
    rng = np.random.default_rng(seed)
    return [
        (GaussianBump(rng.uniform(-spread, spread, DIM), width),
         GaussianBump(rng.uniform(-spread, spread, DIM), width))
        for _ in range(count)
    ]


def run_corrector_check(cfg: StudyConfig, report: Report) -> None:
    """Corrector fields on the grid, decomposition residuals and corrected initial data."""
    exp = "corrector-check"
    fm = _flow(cfg)
    if fm.period is None:
        raise UnsupportedFlowError("the corrector needs a periodic flow")
    out = Path(cfg.out)
    grid = Grid2D(cfg.L, cfg.n)
    pts = grid.points
    orbits = OrbitGrid.build(fm, pts, cfg.orbit_nodes, jacobian=False)
    Davg = averaged_matrix_explicit(cfg.D, cfg.weight, fm, pts, n=cfg.orbit_nodes)
    Davg = fill_excluded(Davg, cfg.D, fm, n=cfg.orbit_nodes)
    fields = compute_corrector_frame(cfg.D, None, cfg.frame, orbits)
    F0, E0 = fields.at_base("F"), fields.at_base("E")
    fields.save(out / "corrector_fields.csv", {"grid": cfg.n, "L": cfg.L}, base_only=True)

    p = f"n={cfg.n};L={cfg.L:g};nodes={cfg.orbit_nodes}"
    report.add(ReportRow(exp, p, "skipped_orbits", int(fields.skipped.sum()), 0))
    means = fields.frame_means()
    report.add(ReportRow(exp, p, "frame_mean_E", means["E"], 1e-8))
    report.add(ReportRow(exp, p, "frame_mean_F", means["F"], 1e-8))
    Dv = cfg.D(pts)
    for k, (u, v) in enumerate(bump_battery(cfg.seed)):
        res = verify_decomposition(Dv, Davg.values, F0, u, v, cfg.b, pts, grid.weights)
        report.add(ReportRow(exp, f"{p};pair={k};seed={cfg.seed}", "decomposition_residual", res, 1e-6))

    u_in = _scalar(cfg.u_in)(pts)
    v_in = _scalar(cfg.v_in)(pts)
    w_in = corrector_field(F0.reshape(cfg.n, cfg.n, DIM, DIM), grid, u_in).ravel()
    for eps in cfg.epsilons:
        write_columns(out / f"corrected_initial_eps{eps:g}.csv", {"eps": eps},
                      {"y1": pts[:, 0], "y2": pts[:, 1], "u": u_in + eps * (v_in + w_in)})


RUNNERS = {
    "rotation-reference": run_rotation_reference,
    "cfl-demo": run_cfl_demo,
    "corrector-check": run_corrector_check,
}


def run(cfg: StudyConfig, jobs: int = 1) -> Report:
    out = _prepare_out(cfg)
    report = Report(out / "report.csv")
    try:
        if cfg.kind == "convergence":
            run_convergence_study(cfg, report, jobs)
        else:
            RUNNERS[cfg.kind](cfg, report)
    finally:
        report.close()
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="anisoavg", description="Averaging of anisotropic diffusion along a flow.")
    parser.add_argument("config", help="INI study configuration")
    parser.add_argument("--out", help="output directory (ANISOAVG_OUT takes precedence)")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    try:
        cfg = parse_config(args.config)
        out = os.environ.get("ANISOAVG_OUT") or args.out
        if out:
            cfg = replace(cfg, out=Path(out))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        report = run(cfg, max(1, args.jobs))
    except (ConfigError, UnsupportedFlowError) as exc:
        print(f"anisoavg: {exc}", file=sys.stderr)
        return 2
    for row in report.rows:
        if not row.passed:
            print(f"FAIL {row.experiment} {row.params} {row.metric}: {row.value:.3e} > {row.tolerance:.3e}",
                  file=sys.stderr)
    print(f"{len(report.rows) - report.failures}/{len(report.rows)} checks passed; report: {report.path}")
    return min(report.failures, 255)


if __name__ == "__main__":
    sys.exit(main())
