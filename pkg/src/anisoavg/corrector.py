"""First-order corrector of the averaged diffusion.

Along each orbit the matrix ``F`` solves ``L(L(F)) = <D> - D`` and
``E = L(F)``.  In the coordinates of a frame of functions ``u0`` with
``b . grad u0 = 1`` and flow invariants ``u1, ...`` the operator ``L`` is
differentiation with respect to flow time, so both fields follow from two
zero-mean antiderivatives of the fluctuation of ``D grad u_i . grad u_j``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .averaging import MatrixFieldSample, OrbitGrid
from .fields import DIM, FieldError, GaussianBump, MatrixFieldSpec, VectorFieldSpec, _lambdify
from .expressions import parse_expression
from .io import write_columns

log = logging.getLogger(__name__)

PAIRS = ((0, 0), (0, 1), (1, 1))


class SolvabilityError(ValueError):
    """The right-hand side of an antiderivative has a nonzero orbit mean."""

    def __init__(self, mean: float):
        super().__init__(f"orbit mean {mean:.3e} is not zero")
        self.mean = mean


def zero_mean_antiderivative(h, period: float = 2 * np.pi, tol: float = 1e-8, axis: int = -1) -> np.ndarray:
    """Periodic antiderivative with zero mean of equally spaced samples ``h``.

    Fourier mode ``k`` is divided by ``i 2 pi k / period``; the Nyquist mode
    of an even sample count has no periodic antiderivative and is dropped.
    """
    h = np.asarray(h, dtype=float)
    mean = np.mean(h, axis=axis)
    scale = max(1.0, float(np.max(np.abs(h)))) if h.size else 1.0
    worst = float(np.max(np.abs(mean))) if np.size(mean) else 0.0
    if worst > tol * scale:
        raise SolvabilityError(worst)
    n = h.shape[axis]
    coeffs = np.fft.rfft(h, axis=axis)
    omega = 2.0 * np.pi * np.fft.rfftfreq(n, d=1.0 / n) / period
    factor = np.zeros_like(omega, dtype=complex)
    factor[1:] = 1.0 / (1j * omega[1:])
    if n % 2 == 0:
        factor[-1] = 0.0
    shape = [1] * h.ndim
    shape[axis] = len(factor)
    return np.fft.irfft(coeffs * factor.reshape(shape), n=n, axis=axis)


@dataclass
class FrameFields:
    """Gradients of ``u0`` (``b . grad u0 = 1``) and of the flow invariants."""

    grad_u0: Callable
    grad_integrals: Sequence[Callable]
    name: str = "custom"

    @classmethod
    def rotation(cls, omega: float = 1.0) -> "FrameFields":
        """``u0 = -theta / omega`` and ``u1 = |y|^2 / 2`` for ``b = omega (y2, -y1)``."""
        return cls.from_exprs((f"y2/({omega}*|y|^2)", f"-y1/({omega}*|y|^2)"), [("y1", "y2")], "rotation")

    @classmethod
    def from_exprs(cls, grad_u0, grad_integrals, name: str = "custom") -> "FrameFields":
        g0 = _lambdify([parse_expression(e) for e in grad_u0], (DIM,))
        gi = [_lambdify([parse_expression(e) for e in g], (DIM,)) for g in grad_integrals]
        return cls(g0, gi, name)

    def gradients(self, y) -> np.ndarray:
        """Matrix with columns ``grad u0, grad u1, ...``."""
        cols = [self.grad_u0(y)] + [g(y) for g in self.grad_integrals]
        return np.stack(cols, axis=-1)

    def check(self, b: VectorFieldSpec, points) -> dict:
        G = self.gradients(points)
        lie = np.einsum("...i,...ij->...j", b(points), G)
        return {
            "u0": float(np.max(np.abs(lie[..., 0] - 1.0))),
            "invariants": float(np.max(np.abs(lie[..., 1:]))),
            "condition": float(np.max(np.linalg.cond(G))),
        }


def _frame_to_matrix(x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[:-1] + (DIM, DIM))
    out[..., 0, 0], out[..., 1, 1] = x[..., 0], x[..., 2]
    out[..., 0, 1] = out[..., 1, 0] = x[..., 1]
    return out


def _symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


@dataclass
class CorrectorFields:
    """``E`` and ``F`` on the nodes of an orbit grid, with their frame entries."""

    orbits: OrbitGrid
    E: np.ndarray
    F: np.ndarray
    e_frame: np.ndarray
    f_frame: np.ndarray
    skipped: np.ndarray

    def at_base(self, which: str = "F") -> np.ndarray:
        """Values at the base point of each orbit."""
        return getattr(self, which)[:, 0]

    def sample(self, which: str = "F") -> MatrixFieldSample:
        grid = self.orbits
        return MatrixFieldSample(grid.points, getattr(self, which).reshape(-1, DIM, DIM),
                                 grid.weights, grid.nodes.shape[:2], orbits=grid,
                                 excluded=np.repeat(self.skipped, grid.n))

    def frame_means(self) -> dict:
        """Largest orbit mean of the frame entries of ``E`` and ``F``."""
        keep = ~self.skipped
        return {
            "E": float(np.max(np.abs(self.e_frame[keep].mean(axis=1)), initial=0.0)),
            "F": float(np.max(np.abs(self.f_frame[keep].mean(axis=1)), initial=0.0)),
        }

    def save(self, path, meta: dict | None = None, base_only: bool = False):
        """Columnar file with a ``field`` column (``E`` or ``F``); ``base_only`` keeps node 0."""
        if base_only:
            pts, E, F = self.orbits.base, self.at_base("E"), self.at_base("F")
        else:
            pts, E, F = self.orbits.points, self.E.reshape(-1, DIM, DIM), self.F.reshape(-1, DIM, DIM)
        header = {"kind": "corrector-fields", "orbits": len(self.orbits.base), "n": self.orbits.n,
                  "skipped": int(self.skipped.sum())}
        header.update(meta or {})
        return write_corrector_columns(path, pts, E, F, header)


def write_corrector_columns(path, points, E, F, meta: dict):
    cols = {"field": [], "y1": [], "y2": [], "A11": [], "A12": [], "A22": []}
    for name, v in (("E", E), ("F", F)):
        cols["field"] += [name] * len(points)
        cols["y1"] += list(points[:, 0])
        cols["y2"] += list(points[:, 1])
        cols["A11"] += list(v[:, 0, 0])
        cols["A12"] += list(v[:, 0, 1])
        cols["A22"] += list(v[:, 1, 1])
    return write_columns(path, meta, cols)


def compute_corrector_frame(D: MatrixFieldSpec, Davg, frame: FrameFields, orbits: OrbitGrid,
                            cond_max: float = 1e6, consistency_tol: float = 1e-6,
                            chunk: int = 2048) -> CorrectorFields:
    """Corrector fields along the orbits of ``orbits``.

    ``Davg`` (a field, an array of values on the orbit nodes, or ``None``) is
    checked against the orbit means of the frame entries of ``D``.  Orbits
    where the frame is ill conditioned are skipped and flagged.
    """
    n_orb, n = orbits.nodes.shape[:2]
    period = orbits.fm.period
    E = np.zeros((n_orb, n, DIM, DIM))
    F = np.zeros_like(E)
    e_frame = np.zeros((n_orb, n, 3))
    f_frame = np.zeros_like(e_frame)
    skipped = np.zeros(n_orb, dtype=bool)
    for start in range(0, n_orb, chunk):
        sl = slice(start, start + chunk)
        nodes = orbits.nodes[sl]
        G = frame.gradients(nodes)
        finite = np.all(np.isfinite(G), axis=(-1, -2))
        G = np.where(finite[..., None, None], G, np.eye(DIM))
        cond = np.linalg.cond(G)
        bad = ~np.all(finite & (cond <= cond_max), axis=1)
        skipped[sl] = bad
        GtDG = np.swapaxes(G, -1, -2) @ np.nan_to_num(D(nodes)) @ G
        d = np.stack([GtDG[..., i, j] for i, j in PAIRS], axis=-1)
        d[bad] = 0.0
        mean = d.mean(axis=1, keepdims=True)
        if Davg is not None:
            avg = Davg(nodes) if isinstance(Davg, MatrixFieldSpec) else np.asarray(Davg)[sl]
            GtAG = np.swapaxes(G, -1, -2) @ avg @ G
            a = np.stack([GtAG[..., i, j] for i, j in PAIRS], axis=-1)
            mismatch = np.abs(a - mean)[~bad]
            scale = np.abs(mean)[~bad].max(initial=1.0)
            if mismatch.size and mismatch.max() > consistency_tol * scale:
                raise FieldError(f"averaged field inconsistent with orbit means: {mismatch.max():.3e}")
        e = -zero_mean_antiderivative(d - mean, period, axis=1)
        f = zero_mean_antiderivative(e, period, axis=1)
        Ginv = np.linalg.inv(np.where(bad[:, None, None, None], np.eye(DIM), G))
        GinvT = np.swapaxes(Ginv, -1, -2)
        E[sl] = _symmetrize(GinvT @ _frame_to_matrix(e) @ Ginv)
        F[sl] = _symmetrize(GinvT @ _frame_to_matrix(f) @ Ginv)
        E[sl][bad] = 0.0
        F[sl][bad] = 0.0
        e[bad] = 0.0
        f[bad] = 0.0
        e_frame[sl], f_frame[sl] = e, f
    if np.any(skipped):
        log.info("corrector: %d orbits skipped (frame condition > %g)", int(skipped.sum()), cond_max)
    return CorrectorFields(orbits, E, F, e_frame, f_frame, skipped)


def corrector_field(F, grid, u: np.ndarray) -> np.ndarray:
    """``div(F grad u)`` on the nodes of ``grid`` by second-order differences.

    ``F`` is either node values of shape ``(n, n, 2, 2)`` or
    :class:`CorrectorFields` whose orbits start at the grid nodes.
    """
    n = grid.n
    if isinstance(F, CorrectorFields):
        base = F.orbits.base
        if base.shape != grid.points.shape or not np.allclose(base, grid.points):
            raise ValueError("corrector fields are not available on the grid nodes")
        F = F.at_base("F")
    F = np.asarray(F, dtype=float).reshape(n, n, DIM, DIM)
    u = np.asarray(u, dtype=float).reshape(n, n)
    gu = np.stack(np.gradient(u, grid.h, edge_order=2), axis=-1)
    flux = np.einsum("...ij,...j->...i", F, gu)
    return np.gradient(flux[..., 0], grid.h, axis=0, edge_order=2) + np.gradient(
        flux[..., 1], grid.h, axis=1, edge_order=2
    )


def verify_decomposition(D: np.ndarray, Davg: np.ndarray, F: np.ndarray, u: GaussianBump,
                         v: GaussianBump, b: VectorFieldSpec, points, weights) -> float:
    """Relative residual of the weak corrector identity for bumps ``u``, ``v``.

    The identity reads ``int (D - <D>) grad u . grad v + int F grad(b.grad b.grad u) . grad v
    + 2 int F grad(b.grad u) . grad(b.grad v) + int F grad u . grad(b.grad b.grad v) = 0``;
    the residual is scaled by the L1 norms of the four integrands plus that of
    ``<D> grad u . grad v``, which keeps the ratio meaningful when every term
    vanishes (``D`` in the kernel of ``L``).
    """
    points = np.asarray(points, dtype=float)
    gu = [u.grad_lie(b, k, points) for k in range(3)]
    gv = [v.grad_lie(b, k, points) for k in range(3)]

    def form(A, x, y):
        return np.einsum("nij,nj,ni->n", A, x, y)

    terms = [
        form(D - Davg, gu[0], gv[0]),
        form(F, gu[2], gv[0]),
        2.0 * form(F, gu[1], gv[1]),
        form(F, gu[0], gv[2]),
    ]
    total = sum(float(np.sum(weights * t)) for t in terms)
    scale = sum(float(np.sum(weights * np.abs(t))) for t in terms + [form(Davg, gu[0], gv[0])])
    return abs(total) / scale if scale > 0 else abs(total)
