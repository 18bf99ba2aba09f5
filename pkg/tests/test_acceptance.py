"""Acceptance criteria, each at its stated tolerance, with one PASS/FAIL line apiece."""

import csv
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from anisoavg.averaging import (
    HQProduct,
    MatrixFieldSample,
    OrbitGrid,
    WeightSpec,
    averaged_matrix_explicit,
    averaged_matrix_relaxation,
    fill_excluded,
    generator_L,
    group_action,
)
from anisoavg.cli import run
from anisoavg.config import parse_config
from anisoavg.fields import FlowMap, MatrixFieldSpec, VectorFieldSpec, bracket_vm, bracket_vv
from anisoavg.solver import (
    Grid2D,
    SolverConfig,
    diagnostics_bound_check,
    solve_epsilon_problem,
    solve_limit_problem,
    step_explicit_cfl_demo,
)

from conftest import random_compact_field, random_points

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
D_REF = MatrixFieldSpec.from_entries("2 + cos(|y|)", "0", "1")
TOL = 1e-10


def bump(p):
    return np.exp(-((p[:, 0] - 1.0) ** 2 + p[:, 1] ** 2) / 0.72)


def radial_bump(p):
    return np.exp(-np.sum(p**2, axis=-1) / 0.72)


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


@pytest.fixture(scope="module")
def fm():
    return FlowMap(VectorFieldSpec.rotation(), box=4.0)


@pytest.fixture(scope="module")
def eps_runs():
    grid = Grid2D(4.0, 128)
    cfg = SolverConfig(T=0.5, dt=0.01, tol=TOL)
    b = VectorFieldSpec.rotation()
    return grid, {eps: solve_epsilon_problem(cfg, D_REF, b, eps, bump, grid) for eps in (1e-1, 1e-2)}


def report_rows(out):
    with open(out / "report.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_criterion_01_rotation_average(fm, verdict):
    t0 = time.perf_counter()
    grid = OrbitGrid.radial(fm, 4.0, 32, 64, jacobian=False)
    out = averaged_matrix_explicit(D_REF, WeightSpec.rotation_frame(), fm, grid.points, n=256)
    elapsed = time.perf_counter() - t0
    r = np.linalg.norm(grid.points, axis=-1)
    err = np.max(np.abs(out.values - ((3 + np.cos(r)) / 2)[:, None, None] * np.eye(2)))
    ok = err <= 1e-10 and elapsed < 5.0 and out.n_excluded == 0
    assert verdict(1, ok, f"max entry error {err:.2e} (<= 1e-10), {elapsed:.2f} s (< 5 s)")


def test_criterion_02_route_agreement(fm, verdict):
    t0 = time.perf_counter()
    w = WeightSpec.rotation_frame()
    sample = MatrixFieldSample.on_orbits(D_REF, OrbitGrid.radial(fm, 4.0, 32, 128))
    relax = averaged_matrix_relaxation(sample, w, fm, t_final=6.0)
    explicit = averaged_matrix_explicit(D_REF, w, fm, sample, n=256)
    gap = HQProduct.for_sample(sample, w).norm(relax.sample.values - explicit.values)
    elapsed = time.perf_counter() - t0
    # round-off level allowance on the monotone norm sequence
    increases = int(np.count_nonzero(np.diff(relax.norms) > 1e-12 * relax.norms[0]))
    ok = gap <= 1e-6 and increases == 0 and elapsed < 120.0
    assert verdict(2, ok, f"|relax - explicit|_Q {gap:.2e} (<= 1e-6), {len(relax.norms) - 1} steps, "
                          f"{increases} norm increases, {elapsed:.1f} s (< 120 s)")


def test_criterion_03_unitary_and_skew(fm, verdict):
    rng = np.random.default_rng(3)
    w = WeightSpec.identity()
    drift = skew = 0.0
    for _ in range(20):
        A, B = random_compact_field(rng), random_compact_field(rng)
        SA, SB = MatrixFieldSample.on_box(A, 4.0, 96), MatrixFieldSample.on_box(B, 4.0, 96)
        hq = HQProduct.for_sample(SA, w)
        n0 = hq.norm(SA)
        for s in (0.3, -0.3, 1.5, -1.5):
            moved = group_action(SA, s, fm)
            drift = max(drift, abs(HQProduct.for_sample(moved, w).norm(moved) - n0) / n0)
        LA, LB = generator_L(SA, fm), generator_L(SB, fm)
        scale = hq.norm(LA) * hq.norm(SB) + hq.norm(SA) * hq.norm(LB)
        skew = max(skew, abs(hq.inner(LA, SB) + hq.inner(SA, LB)) / scale)
    ok = drift <= 1e-6 and skew <= 1e-6
    assert verdict(3, ok, f"20 fields, s in +-0.3/+-1.5: norm drift {drift:.2e}, skew defect {skew:.2e} (<= 1e-6)")


def test_criterion_04_positivity(fm, verdict):
    rng = np.random.default_rng(4)
    w = WeightSpec.rotation_frame()
    grid = OrbitGrid.radial(fm, 3.5, 12, 64)
    lowest = np.inf
    for _ in range(10):
        sample = MatrixFieldSample.on_orbits(random_compact_field(rng, positive=True), grid)
        res = averaged_matrix_relaxation(sample, w, fm, t_final=4.0)
        lowest = min(lowest, float(np.min(np.linalg.eigvalsh(res.sample.values))))
    ok = lowest >= -1e-10
    assert verdict(4, ok, f"10 PSD fields: smallest eigenvalue after relaxation {lowest:.2e} (>= -1e-10)")


def test_criterion_05_constraint_bound(eps_runs, verdict):
    grid, runs = eps_runs
    norm0 = float(np.sqrt(grid.weights @ bump(grid.points) ** 2))
    parts, ok = [], True
    for eps, traj in runs.items():
        chk = diagnostics_bound_check(traj, eps, norm0)
        ok &= chk.passed and chk.transport <= 1.1 * chk.transport_bound
        parts.append(f"eps={eps:g}: {chk.transport:.3e} <= 1.1 x {chk.transport_bound:.3e}")
    assert verdict(5, ok, "; ".join(parts) + " (128^2, T=0.5)")


def test_criterion_06_convergence(tmp_path, verdict):
    cfg = parse_config(CONFIGS / "convergence.ini")
    t0 = time.perf_counter()
    run(replace(cfg, out=tmp_path))
    elapsed = time.perf_counter() - t0
    err = [float(r["value"]) for r in report_rows(tmp_path) if r["metric"] == "err_L2"]
    decreasing = all(b < a for a, b in zip(err, err[1:]))
    ratio = err[-1] / err[0]
    ok = cfg.epsilons == [0.1, 0.03, 0.01, 0.003] and cfg.n == 128 and decreasing and ratio <= 0.2 and elapsed < 600
    errs = ", ".join(f"{e:.3e}" for e in err)
    assert verdict(6, ok, f"err = {errs}; ratio {ratio:.3f} (<= 0.2), {elapsed:.0f} s (< 600 s)")


def test_criterion_07_cfl(verdict):
    grid = Grid2D(4.0, 128)
    b = VectorFieldSpec.rotation()
    rep = step_explicit_cfl_demo(SolverConfig(), D_REF, b, 1e-2, bump, 4.0, grid, steps=200)
    traj = solve_epsilon_problem(SolverConfig(T=200 * rep.dt, dt=rep.dt, tol=TOL), D_REF, b, 1e-2, bump, grid)
    norms = traj.column("l2_norm")
    dissipates = bool(np.all(np.diff(norms) <= TOL)) and norms[-1] < norms[0]
    ok = rep.growth > 1e3 and rep.steps <= 200 and dissipates
    assert verdict(7, ok, f"explicit x{rep.growth:.1e} after {rep.steps} steps (> 1e3); "
                          f"backward Euler {norms[0]:.4f} -> {norms[-1]:.4f}")


def test_criterion_08_decomposition(tmp_path, verdict):
    cfg = parse_config(CONFIGS / "corrector_check.ini")
    run(replace(cfg, out=tmp_path))
    rows = report_rows(tmp_path)
    res = [float(r["value"]) for r in rows if r["metric"] == "decomposition_residual"]
    means = [float(r["value"]) for r in rows if r["metric"].startswith("frame_mean")]
    skipped = [float(r["value"]) for r in rows if r["metric"] == "skipped_orbits"]
    ok = len(res) == 5 and max(res) <= 1e-6 and max(means) <= 1e-8 and skipped == [0.0]
    assert verdict(8, ok, f"5 bump pairs: max residual {max(res):.2e} (<= 1e-6); "
                          f"frame means {max(means):.2e} (<= 1e-8)")


def test_criterion_09_constraint_propagation(verdict):
    # the floor is the angular variation of the interpolated radial data itself
    b = VectorFieldSpec.rotation()
    fm8 = FlowMap(b, box=8.0)
    floors, peaks = [], []
    for n in (128, 256):
        grid = Grid2D(8.0, n)
        Davg = fill_excluded(averaged_matrix_explicit(D_REF, WeightSpec.rotation_frame(), fm8, grid.centers),
                             D_REF, fm8)
        traj = solve_limit_problem(SolverConfig(T=0.5, dt=0.01, tol=TOL), Davg, radial_bump, grid, b)
        ang = np.sqrt(traj.column("b_grad_sq"))
        floors.append(ang[0])
        peaks.append(ang.max())
    ok = all(p <= 1e-6 + f for p, f in zip(peaks, floors)) and floors[0] / floors[1] >= 3.5
    assert verdict(9, ok, f"max angular variation {peaks[0]:.3e} <= 1e-6 + floor {floors[0]:.3e} (128^2, L=8); "
                          f"floor shrinks x{floors[0] / floors[1]:.2f} at 256^2")


def _transport_error(fm, c, y, matrix=False):
    err = 0.0
    for s in (0.5, -0.5, 2.0, -2.0):
        Y, J = fm.integrate(s, y)
        if matrix:
            err = max(err, float(np.max(np.abs(c(Y) - J @ c(y) @ np.swapaxes(J, -1, -2)))))
        else:
            err = max(err, float(np.max(np.abs(c(Y) - np.einsum("nij,nj->ni", J, c(y))))))
    return err


def test_criterion_10_equivalences_and_invariants(eps_runs, verdict):
    rng = np.random.default_rng(10)
    rot, shear = VectorFieldSpec.rotation(), VectorFieldSpec.shear()
    flows = {"rotation": (rot, FlowMap(rot, box=4.0), random_points(rng, 100)),
             "shear": (shear, FlowMap(shear, box=10.0), rng.uniform(-2, 2, (100, 2)))}
    vectors = [
        ("rotation", ("y1", "y2")),
        ("rotation", ("exp(-|y|^2)*y1 + cos(|y|)*y2", "exp(-|y|^2)*y2 - cos(|y|)*y1")),
        ("rotation", ("1", "0")),
        ("rotation", ("y1^2", "y2")),
        ("shear", ("y1", "y2")),
        ("shear", ("1", "0")),
        ("shear", ("0", "1")),
    ]
    matrices = [("1", "0", "1"), ("2 + cos(|y|)", "0", "2 + cos(|y|)"), ("1", "0", "0"), ("1 + y1^2", "0", "1")]
    agree = 0
    total = 0
    for name, exprs in vectors:
        b, flow, y = flows[name]
        c = VectorFieldSpec("custom-analytic", exprs=exprs, divergence_declared_zero=False)
        agree += (np.max(np.abs(bracket_vv(b, c, y))) <= 1e-10) == (_transport_error(flow, c, y) <= 1e-6)
        total += 1
    b, flow, y = flows["rotation"]
    for entries in matrices:
        A = MatrixFieldSpec.from_entries(*entries)
        agree += (np.max(np.abs(bracket_vm(b, A, y))) <= 1e-10) == (_transport_error(flow, A, y, True) <= 1e-6)
        total += 1

    grid, runs = eps_runs
    mass = max(float(np.max(np.abs(np.diff(t.column("mass"))))) for t in runs.values())
    energy = max(float(np.max(np.diff(t.column("l2_norm")))) for t in runs.values())
    ok = agree == total and mass <= 10 * TOL and energy <= TOL
    assert verdict(10, ok, f"{agree}/{total} bracket/transport pairs consistent at 100 points; "
                           f"per-step mass drift {mass:.1e} (<= 1e-9), norm increase {max(energy, 0.0):.1e} (<= 1e-10)")
