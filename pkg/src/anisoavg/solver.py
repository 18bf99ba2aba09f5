"""Finite element solvers for the anisotropic diffusion problems.

Bilinear elements on a uniform vertex grid of ``[-L, L]^2`` with natural
(no-flux) boundary conditions and a lumped mass matrix.  The ``D`` part of
the stiffness is integrated exactly for cellwise constant coefficients.  The
``b (x) b / eps`` part uses one-point quadrature at cell centres, which keeps
fine-scale modes constant along ``b`` out of its kernel and avoids locking
as ``eps -> 0``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .fields import DIM, MatrixFieldSpec, VectorFieldSpec
from .io import write_columns

log = logging.getLogger(__name__)

# Unit-square element matrices, local nodes (i,j), (i+1,j), (i+1,j+1), (i,j+1).
_SX = np.array([-1.0, 1.0, 1.0, -1.0])
_SY = np.array([-1.0, -1.0, 1.0, 1.0])
K_XX = np.array([[2, -2, -1, 1], [-2, 2, 1, -1], [-1, 1, 2, -2], [1, -1, -2, 2]]) / 6.0
K_YY = np.array([[2, 1, -1, -2], [1, 2, -2, -1], [-1, -2, 2, 1], [-2, -1, 1, 2]]) / 6.0
K_XY = np.outer(_SX, _SY) / 4.0
G_X, G_Y = _SX / 2.0, _SY / 2.0


class LinearSolverError(RuntimeError):
    """The iterative solver did not reach the requested tolerance."""


@dataclass
class Grid2D:
    """Uniform vertex grid with ``n`` nodes per side on ``[-L, L]^2``."""

    L: float = 4.0
    n: int = 128

    def __post_init__(self):
        if self.n < 16:
            raise ValueError("grid needs at least 16 nodes per side")
        if self.L <= 0:
            raise ValueError("box half width must be positive")

    @property
    def h(self) -> float:
        return 2.0 * self.L / (self.n - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(-self.L, self.L, self.n)

    @property
    def points(self) -> np.ndarray:
        return np.stack(np.meshgrid(self.x, self.x, indexing="ij"), axis=-1).reshape(-1, DIM)

    @property
    def centers(self) -> np.ndarray:
        c = self.x[:-1] + 0.5 * self.h
        return np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1).reshape(-1, DIM)

    @property
    def weights(self) -> np.ndarray:
        """Lumped mass: trapezoid weights of the nodes."""
        w = np.full(self.n, self.h)
        w[[0, -1]] *= 0.5
        return np.outer(w, w).ravel()

    @property
    def boundary(self) -> np.ndarray:
        mask = np.zeros((self.n, self.n), dtype=bool)
        mask[[0, -1], :] = mask[:, [0, -1]] = True
        return mask.ravel()

    def cell_nodes(self) -> np.ndarray:
        n = self.n
        I, J = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="ij")
        I, J = I.ravel(), J.ravel()
        return np.stack([I * n + J, (I + 1) * n + J, (I + 1) * n + J + 1, I * n + J + 1], axis=1)

    def evaluate(self, u) -> np.ndarray:
        """Node values of a callable, or a flattened copy of an array."""
        if callable(u):
            return np.asarray(u(self.points), dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        if u.size != self.n**2:
            raise ValueError(f"expected {self.n ** 2} node values, got {u.size}")
        return u.copy()


def _cell_matrices(M: np.ndarray, quadrature: str) -> np.ndarray:
    m11, m12, m22 = M[:, 0, 0, None, None], M[:, 0, 1, None, None], M[:, 1, 1, None, None]
    if quadrature == "exact":
        return m11 * K_XX + m22 * K_YY + m12 * (K_XY + K_XY.T)
    if quadrature == "midpoint":
        gxx, gyy, gxy = np.outer(G_X, G_X), np.outer(G_Y, G_Y), np.outer(G_X, G_Y)
        return m11 * gxx + m22 * gyy + m12 * (gxy + gxy.T)
    raise ValueError(f"unknown quadrature {quadrature!r}")


@dataclass
class DiffusionOperator:
    """Stiffness matrix of ``-div(M grad u)`` with its named parts."""

    grid: Grid2D
    K: sp.csr_matrix
    parts: dict = field(default_factory=dict)

    @classmethod
    def assemble(cls, grid: Grid2D, M, quadrature: str = "exact") -> "DiffusionOperator":
        """Assemble from cell-centre coefficients (array or matrix field)."""
        if isinstance(M, MatrixFieldSpec) or callable(M):
            M = M(grid.centers)
        M = np.asarray(M, dtype=float).reshape(-1, DIM, DIM)
        if M.shape[0] != (grid.n - 1) ** 2:
            raise ValueError("coefficient array does not match the grid cells")
        if not np.all(np.isfinite(M)):
            raise ValueError("coefficients are not finite")
        local = _cell_matrices(M, quadrature)
        nodes = grid.cell_nodes()
        rows = np.repeat(nodes, 4, axis=1).ravel()
        cols = np.tile(nodes, (1, 4)).ravel()
        K = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(grid.n**2, grid.n**2))
        return cls(grid, K)

    @classmethod
    def laplacian(cls, grid: Grid2D) -> "DiffusionOperator":
        return cls.assemble(grid, np.broadcast_to(np.eye(DIM), ((grid.n - 1) ** 2, DIM, DIM)))

    @classmethod
    def transport(cls, grid: Grid2D, b: VectorFieldSpec) -> "DiffusionOperator":
        """``int (b . grad u)(b . grad v)`` with one-point quadrature."""
        bc = b(grid.centers)
        return cls.assemble(grid, np.einsum("ni,nj->nij", bc, bc), quadrature="midpoint")

    @classmethod
    def epsilon_problem(cls, grid: Grid2D, D, b: VectorFieldSpec, eps: float) -> "DiffusionOperator":
        """``K_D + K_bb / eps``."""
        KD = cls.assemble(grid, D).K
        Kbb = cls.transport(grid, b).K
        return cls(grid, (KD + Kbb / eps).tocsr(), {"D": KD, "bb": Kbb})

    def quadratic(self, u: np.ndarray) -> float:
        return float(u @ (self.K @ u))

    def symmetry_error(self) -> float:
        diff = self.K - self.K.T
        return float(np.max(np.abs(diff.data), initial=0.0))


@dataclass
class SolverConfig:
    """Time stepping parameters."""

    T: float = 0.5
    dt: float = 0.01
    scheme: str = "backward-euler"
    tol: float = 1e-10
    maxiter_factor: int = 10
    snapshot_every: int = 0

    def __post_init__(self):
        if self.scheme not in ("backward-euler", "crank-nicolson", "explicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.dt <= 0 or self.T <= 0:
            raise ValueError("dt and T must be positive")

    @property
    def steps(self) -> int:
        return max(1, int(round(self.T / self.dt)))


DIAGNOSTICS = ("step", "time", "l2_norm", "grad_sq", "b_grad_sq", "mass")


@dataclass
class Trajectory:
    """Snapshots and per-step diagnostics of a run."""

    grid: Grid2D
    u: np.ndarray
    diagnostics: dict
    snapshots: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    scheme: str = ""
    eps: float | None = None
    ellipticity: float | None = None
    boundary_max: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self.diagnostics["time"])

    def column(self, name: str) -> np.ndarray:
        return np.asarray(self.diagnostics[name])

    def save(self, directory, prefix: str = "run") -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {"scheme": self.scheme, "eps": self.eps if self.eps is not None else "limit",
                "n": self.grid.n, "L": self.grid.L}
        paths = [write_columns(directory / f"{prefix}_diagnostics.csv", meta,
                               {k: self.diagnostics[k] for k in DIAGNOSTICS})]
        pts = self.grid.points
        for k, (t, u) in enumerate(self.snapshots):
            paths.append(write_columns(directory / f"{prefix}_snapshot_{k:03d}.csv", dict(meta, time=t),
                                       {"y1": pts[:, 0], "y2": pts[:, 1], "u": u}))
        return paths


class _Diagnostics:
    def __init__(self, grid: Grid2D, b: VectorFieldSpec | None):
        self.W = grid.weights
        self.lap = DiffusionOperator.laplacian(grid)
        self.bb = DiffusionOperator.transport(grid, b) if b is not None else None
        self.rows = {k: [] for k in DIAGNOSTICS}

    def record(self, step: int, t: float, u: np.ndarray):
        r = self.rows
        r["step"].append(step)
        r["time"].append(t)
        r["l2_norm"].append(math.sqrt(float(self.W @ (u * u))))
        r["grad_sq"].append(self.lap.quadratic(u))
        r["b_grad_sq"].append(self.bb.quadratic(u) if self.bb is not None else 0.0)
        r["mass"].append(float(self.W @ u))


def _jacobi(A: sp.csr_matrix) -> LinearOperator:
    inv = 1.0 / A.diagonal()
    return LinearOperator(A.shape, matvec=lambda x: inv * x, dtype=float)


def _march(grid: Grid2D, op: DiffusionOperator, u0: np.ndarray, cfg: SolverConfig,
           b: VectorFieldSpec | None, eps: float | None, scheme: str | None = None,
           steps: int | None = None, dt: float | None = None) -> Trajectory:
    scheme = scheme or cfg.scheme
    dt = dt or cfg.dt
    steps = steps or cfg.steps
    W = grid.weights
    K = op.K
    diag = _Diagnostics(grid, b)
    u = u0.copy()
    edge = grid.boundary
    boundary_max = float(np.max(np.abs(u[edge])))
    diag.record(0, 0.0, u)
    snapshots = [(0.0, u.copy())]
    iterations = []
    if scheme != "explicit":
        theta = 1.0 if scheme == "backward-euler" else 0.5
        A = (sp.diags(W) + theta * dt * K).tocsr()
        M = _jacobi(A)
        maxiter = max(1, cfg.maxiter_factor * grid.n**2)
    for k in range(1, steps + 1):
        if scheme == "explicit":
            u = u - dt * (K @ u) / W
        else:
            rhs = W * u if theta == 1.0 else W * u - (1.0 - theta) * dt * (K @ u)
            count = [0]

            def tick(_):
                count[0] += 1

            u_new, info = cg(A, rhs, x0=u, rtol=cfg.tol, atol=0.0, maxiter=maxiter, M=M, callback=tick)
            if info != 0 or count[0] >= maxiter:
                res = float(np.linalg.norm(rhs - A @ u_new) / max(np.linalg.norm(rhs), 1e-300))
                if info != 0 or res > cfg.tol:
                    raise LinearSolverError(f"CG stopped at step {k} after {count[0]} iterations "
                                            f"with relative residual {res:.3e}")
            u = u_new
            iterations.append(count[0])
        diag.record(k, k * dt, u)
        boundary_max = max(boundary_max, float(np.max(np.abs(u[edge]))))
        if cfg.snapshot_every and k % cfg.snapshot_every == 0:
            snapshots.append((k * dt, u.copy()))
    if snapshots[-1][0] != steps * dt:
        snapshots.append((steps * dt, u.copy()))
    if boundary_max > 1e-8:
        log.info("boundary values reached %.2e; the box truncation is visible", boundary_max)
    return Trajectory(grid, u, diag.rows, snapshots, iterations, scheme, eps, boundary_max=boundary_max)


def _check_eps(eps: float):
    if not (0.0 < eps <= 1.0):
        raise ValueError(f"epsilon must lie in (0, 1], got {eps}")


def ellipticity(D, b: VectorFieldSpec, grid: Grid2D) -> float:
    """Smallest eigenvalue of ``D + b (x) b`` over the cell centres."""
    c = grid.centers
    bc = b(c)
    Dc = D(c) if callable(D) else np.asarray(D)
    return float(np.min(np.linalg.eigvalsh(Dc + np.einsum("ni,nj->nij", bc, bc))))


def solve_epsilon_problem(cfg: SolverConfig, D: MatrixFieldSpec, b: VectorFieldSpec, eps: float,
                          u_in, grid: Grid2D | None = None) -> Trajectory:
    """``du/dt - div(D grad u) - div(b (x) b grad u) / eps = 0`` from ``u_in``."""
    _check_eps(eps)
    grid = grid or Grid2D()
    d = ellipticity(D, b, grid)
    if d <= 0.0:
        raise ValueError("D + b (x) b is not uniformly positive definite")
    op = DiffusionOperator.epsilon_problem(grid, D, b, eps)
    traj = _march(grid, op, grid.evaluate(u_in), cfg, b, eps)
    traj.ellipticity = d
    return traj


def solve_limit_problem(cfg: SolverConfig, Davg, u_in, grid: Grid2D | None = None,
                        b: VectorFieldSpec | None = None) -> Trajectory:
    """``dv/dt - div(<D> grad v) = 0`` from ``u_in`` (typically ``<u_in>``).

    ``Davg`` is a matrix field or its values at the cell centres.
    """
    grid = grid or Grid2D()
    if not callable(Davg):
        values = getattr(Davg, "values", Davg)
        if getattr(Davg, "n_excluded", 0):
            raise ValueError("averaged coefficients have excluded points")
        Davg = np.asarray(values, dtype=float)
    op = DiffusionOperator.assemble(grid, Davg)
    return _march(grid, op, grid.evaluate(u_in), cfg, b, None)


@dataclass
class CFLReport:
    """Outcome of an explicit run at a multiple of the stability bound."""

    dt: float
    dt_bound: float
    factor: float
    norms: np.ndarray
    growth: float
    steps: int

    @property
    def blew_up(self) -> bool:
        return self.growth > 1e3

    @property
    def stable(self) -> bool:
        return bool(np.all(np.diff(self.norms) <= 1e-12 * self.norms[0]))


def explicit_dt_bound(grid: Grid2D, D, b: VectorFieldSpec, eps: float) -> float:
    """``eps h^2 / (2 Lambda)`` with ``Lambda = max lambda_max(D + b (x) b)``."""
    c = grid.centers
    bc = b(c)
    Dc = D(c) if callable(D) else np.asarray(D)
    lam = float(np.max(np.linalg.eigvalsh(Dc + np.einsum("ni,nj->nij", bc, bc))[:, -1]))
    return eps * grid.h**2 / (2.0 * lam)


def step_explicit_cfl_demo(cfg: SolverConfig, D: MatrixFieldSpec, b: VectorFieldSpec, eps: float,
                           u_in, dt_factor: float, grid: Grid2D | None = None,
                           steps: int = 200) -> CFLReport:
    """Forward Euler at ``dt_factor`` times the bound; stops early once the norm exceeds 1e12."""
    _check_eps(eps)
    grid = grid or Grid2D()
    bound = explicit_dt_bound(grid, D, b, eps)
    dt = dt_factor * bound
    op = DiffusionOperator.epsilon_problem(grid, D, b, eps)
    W = grid.weights
    u = grid.evaluate(u_in)
    norms = [math.sqrt(float(W @ (u * u)))]
    for _ in range(steps):
        u = u - dt * (op.K @ u) / W
        norms.append(math.sqrt(float(W @ (u * u))))
        if norms[-1] > 1e12 * norms[0]:
            break
    norms = np.asarray(norms)
    return CFLReport(dt, bound, dt_factor, norms, float(norms.max() / norms[0]), len(norms) - 1)


@dataclass
class BoundCheck:
    """Discrete version of the uniform energy estimates."""

    passed: bool
    margin: float
    transport: float
    transport_bound: float
    gradient_sq: float
    gradient_sq_bound: float


def diagnostics_bound_check(traj: Trajectory, eps: float, u_in_norm: float, d: float | None = None,
                            slack: float = 0.1) -> BoundCheck:
    """Compare time-integrated diagnostics with the uniform bounds.

    ``(int |b . grad u|^2 dt)^(1/2) <= sqrt(eps / (2 (1 - eps))) |u_in|`` and
    ``int |grad u|^2 dt <= |u_in|^2 / (2 d)``, each with a relative ``slack``.
    ``d`` is the ellipticity constant of ``D + b (x) b`` and defaults to the
    value recorded by the solver.  ``margin`` is the smaller relative margin.
    """
    if not (0.0 < eps < 1.0):
        raise ValueError("the bounds need 0 < eps < 1")
    d = d if d is not None else traj.ellipticity
    dt = np.diff(traj.column("time"))
    transport = math.sqrt(float(np.sum(dt * traj.column("b_grad_sq")[1:])))
    grad_sq = float(np.sum(dt * traj.column("grad_sq")[1:]))
    tb = math.sqrt(eps / (2.0 * (1.0 - eps))) * u_in_norm
    margins = [1.0 - transport / ((1.0 + slack) * tb)] if tb > 0 else [1.0]
    gb = math.inf
    if d is not None:
        gb = u_in_norm**2 / (2.0 * d)
        margins.append(1.0 - grad_sq / ((1.0 + slack) * gb))
    margin = min(margins)
    return BoundCheck(bool(margin >= 0.0), float(margin), transport, float(tb), grad_sq, float(gb))
