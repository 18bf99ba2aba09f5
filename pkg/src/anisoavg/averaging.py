"""Averaging of scalar and matrix fields along the flow of ``b``.

Matrix fields live in the weighted space H_Q with inner product
``(A, B)_Q = int QA : BQ dy``.  The flow acts on them through
``G(s)A = J^{-1} A(Y) J^{-T}`` with ``J = d_y Y(s; y)``; its generator is
``L(A) = [b, A]`` and the average of ``A`` is the projection onto ``ker L``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import sympy

from .fields import DIM, FieldError, FlowMap, MatrixFieldSpec, bracket_vm
from .io import read_columns, write_columns

log = logging.getLogger(__name__)


class NonConvergentAverageError(RuntimeError):
    """Time averages did not settle within the allowed horizon."""


def sym_sqrt(Q: np.ndarray, inverse: bool = False, floor: float = 1e-300) -> np.ndarray:
    """Symmetric square root (or inverse square root) of SPD matrices."""
    w, V = np.linalg.eigh(Q)
    w = np.maximum(w, floor)
    p = 1.0 / np.sqrt(w) if inverse else np.sqrt(w)
    return (V * p[..., None, :]) @ np.swapaxes(V, -1, -2)


def _congruence(M: np.ndarray, A: np.ndarray) -> np.ndarray:
    """``M A M^T`` on stacks."""
    return M @ A @ np.swapaxes(M, -1, -2)


@dataclass
class WeightSpec:
    """Weight ``Q`` of H_Q, its inverse ``P`` and optionally a frame ``R`` with ``Q = R^T R``."""

    Q: MatrixFieldSpec
    P: MatrixFieldSpec
    R: MatrixFieldSpec | None = None
    name: str = "custom"

    @classmethod
    def identity(cls) -> "WeightSpec":
        eye = MatrixFieldSpec.identity()
        return cls(eye, eye, eye, name="identity")

    @classmethod
    def from_frame(cls, R_entries, name: str = "frame") -> "WeightSpec":
        """Weight ``Q = R^T R`` built from the entries of an invertible frame ``R``."""
        R = MatrixFieldSpec(R_entries, symmetric=False, name=f"{name}-R")
        Q = sympy.simplify(R.expr.T * R.expr)
        P = sympy.simplify(Q.inv())
        return cls(MatrixFieldSpec(Q, positive=True), MatrixFieldSpec(P, positive=True), R, name)

    @classmethod
    def rotation_frame(cls, radial: float = 1.0, angular: float = 1.0) -> "WeightSpec":
        """Frame ``K R_0`` for the rotation with ``R_0 = [[y2, -y1], [y1, y2]] / |y|``.

        ``K = diag(radial, angular)`` is constant, so ``R`` still satisfies
        ``R(Y) J = R(y)``; the defaults give ``Q = I``.
        """
        r = "|y|"
        entries = [
            [f"{radial}*y2/{r}", f"-{radial}*y1/{r}"],
            [f"{angular}*y1/{r}", f"{angular}*y2/{r}"],
        ]
        name = "rotation-frame" if radial == angular == 1.0 else f"rotation-frame({radial},{angular})"
        return cls.from_frame(entries, name=name)

    def check(self, fm: FlowMap, points, s_values=(0.3, -1.5)) -> dict:
        """Residuals of the defining identities on ``points``."""
        points = np.asarray(points, dtype=float)
        Q, P = self.Q(points), self.P(points)
        out = {
            "inverse": float(np.max(np.abs(Q @ P - np.eye(DIM)))),
            "bracket_P": float(np.max(np.abs(bracket_vm(fm.field, self.P, points)))),
        }
        transport = 0.0
        for s in s_values:
            Y, J = fm.integrate(s, points)
            Jinv = np.linalg.inv(J)
            transport = max(transport, float(np.max(np.abs(self.Q(Y) - _congruence(np.swapaxes(Jinv, -1, -2), Q)))))
        out["transport_Q"] = transport
        if self.R is not None:
            Rv = self.R(points)
            transport_R = 0.0
            for s in s_values:
                Y, J = fm.integrate(s, points)
                transport_R = max(transport_R, float(np.max(np.abs(self.R(Y) @ J - Rv))))
            out["transport_R"] = transport_R
            db = fm.field.jacobian(points)
            lie = np.einsum("...ijk,...k->...ij", self.R.gradient(points), fm.field(points)) + Rv @ db
            out["frame_equation"] = float(np.max(np.abs(lie)))
        return out


@dataclass
class OrbitGrid:
    """Nodes ``Y(k T / n; base)`` on a family of closed orbits.

    ``weights`` are quadrature weights for ``dy`` over the region swept by
    the orbits; they are constant along each orbit because the flow
    preserves Lebesgue measure.
    """

    fm: FlowMap
    base: np.ndarray
    n: int
    nodes: np.ndarray
    jac: np.ndarray | None
    weights: np.ndarray
    closure: float

    @classmethod
    def build(cls, fm: FlowMap, base, n: int = 256, section_weights=None, jacobian: bool = True,
              closure_tol: float = 1e-8) -> "OrbitGrid":
        base = np.atleast_2d(np.asarray(base, dtype=float))
        nodes, jac, end = fm.orbit(base, n, jacobian=jacobian)
        closure = float(np.max(np.abs(end - base))) if base.size else 0.0
        if closure > closure_tol:
            raise FieldError(f"orbits do not close: |Y(T) - y| = {closure:.3e}")
        if section_weights is None:
            section_weights = np.zeros(len(base))
        weights = np.repeat(np.asarray(section_weights, dtype=float)[:, None], n, axis=1)
        return cls(fm, base, n, nodes, jac, weights, closure)

    @classmethod
    def radial(cls, fm: FlowMap, r_max: float, n_radii: int, n: int = 256,
               direction=(1.0, 0.0), jacobian: bool = True) -> "OrbitGrid":
        """Orbits through midpoints of ``n_radii`` equal cells of the section ``[0, r_max] * direction``.

        Node weights ``|det(e, b)| dr T / n`` integrate over the swept region.
        """
        e = np.asarray(direction, dtype=float)
        e = e / np.linalg.norm(e)
        dr = r_max / n_radii
        radii = (np.arange(n_radii) + 0.5) * dr
        base = radii[:, None] * e
        b = fm.field(base)
        flux = np.abs(e[0] * b[:, 1] - e[1] * b[:, 0])
        grid = cls.build(fm, base, n, flux * dr * fm.period / n, jacobian=jacobian)
        return grid

    @property
    def spacing(self) -> float:
        return self.fm.period / self.n

    @property
    def points(self) -> np.ndarray:
        return self.nodes.reshape(-1, DIM)

    def pull_back(self, values: np.ndarray) -> np.ndarray:
        """``J_k^{-1} A_k J_k^{-T}``: orbit values as seen from the base point."""
        return _congruence(np.linalg.inv(self.jac), values)

    def push_forward(self, values: np.ndarray) -> np.ndarray:
        return _congruence(self.jac, values)


@dataclass
class MatrixFieldSample:
    """Values of a symmetric matrix field at quadrature points."""

    points: np.ndarray
    values: np.ndarray
    weights: np.ndarray
    shape: tuple = ()
    weight_id: str = "identity"
    orbits: OrbitGrid | None = None
    source: MatrixFieldSpec | None = None
    excluded: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, DIM)
        self.values = np.asarray(self.values, dtype=float).reshape(-1, DIM, DIM)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.excluded is None:
            self.excluded = np.zeros(len(self.points), dtype=bool)
        if not self.shape:
            self.shape = (len(self.points),)

    @classmethod
    def from_field(cls, A: MatrixFieldSpec, points, weights, shape=(), weight_id="identity"):
        points = np.asarray(points, dtype=float).reshape(-1, DIM)
        return cls(points, A(points), weights, shape, weight_id, source=A)

    @classmethod
    def on_orbits(cls, A: MatrixFieldSpec, orbits: OrbitGrid, weight_id="identity"):
        return cls(orbits.points, A(orbits.points), orbits.weights, orbits.nodes.shape[:2],
                   weight_id, orbits=orbits, source=A)

    @classmethod
    def on_box(cls, A: MatrixFieldSpec, L: float, n: int, weight_id="identity"):
        """Tensor trapezoid sample of ``[-L, L]^2`` with ``n`` nodes per side."""
        x = np.linspace(-L, L, n)
        w1 = np.full(n, x[1] - x[0])
        w1[[0, -1]] *= 0.5
        points = np.stack(np.meshgrid(x, x, indexing="ij"), axis=-1).reshape(-1, DIM)
        return cls.from_field(A, points, np.outer(w1, w1).ravel(), (n, n), weight_id)

    def with_values(self, values, source=None, excluded=None) -> "MatrixFieldSample":
        return MatrixFieldSample(self.points, values, self.weights, self.shape, self.weight_id,
                                 self.orbits, source, self.excluded if excluded is None else excluded)

    @property
    def n_excluded(self) -> int:
        return int(np.count_nonzero(self.excluded))

    def save(self, path):
        meta = {"kind": "matrix-field-sample", "weight": self.weight_id,
                "shape": "x".join(str(s) for s in self.shape), "excluded": self.n_excluded}
        v = self.values
        cols = {"y1": self.points[:, 0], "y2": self.points[:, 1],
                "A11": v[:, 0, 0], "A12": v[:, 0, 1], "A22": v[:, 1, 1], "w": self.weights}
        return write_columns(path, meta, cols)

    @classmethod
    def load(cls, path) -> "MatrixFieldSample":
        meta, cols = read_columns(path)
        values = np.empty((len(cols["y1"]), DIM, DIM))
        values[:, 0, 0], values[:, 1, 1] = cols["A11"], cols["A22"]
        values[:, 0, 1] = values[:, 1, 0] = cols["A12"]
        shape = tuple(int(s) for s in meta["shape"].split("x"))
        return cls(np.stack([cols["y1"], cols["y2"]], axis=-1), values, cols["w"], shape, meta["weight"])


class HQProduct:
    """Quadrature of the H_Q inner product on a sample."""

    def __init__(self, weights: np.ndarray, Q_values: np.ndarray):
        self.weights = np.asarray(weights, dtype=float)
        self.Q = np.asarray(Q_values, dtype=float)

    @classmethod
    def for_sample(cls, sample: MatrixFieldSample, weight: WeightSpec) -> "HQProduct":
        w = np.where(sample.excluded, 0.0, sample.weights)
        return cls(w, weight.Q(sample.points))

    def _values(self, A):
        return A.values if isinstance(A, MatrixFieldSample) else np.asarray(A)

    def inner(self, A, B) -> float:
        QA = self.Q @ self._values(A)
        BQ = self._values(B) @ self.Q
        return float(np.sum(self.weights * np.einsum("nij,nij->n", QA, BQ)))

    def norm(self, A) -> float:
        return math.sqrt(max(self.inner(A, A), 0.0))


def average_scalar(u: Callable, fm: FlowMap, y, n: int = 256, horizon: float = 10.0,
                   atol: float = 1e-6, max_doublings: int = 12, full_output: bool = False):
    """Orbit average of ``u`` at ``y``.

    Periodic flows use the mean over ``n`` equally spaced orbit nodes.
    Otherwise the time average is extended by doubling the horizon until the
    change falls below ``atol``.  With ``full_output`` the horizon used and
    the last Cauchy increment are returned as well.
    """
    y = np.asarray(y, dtype=float)
    if fm.period is not None:
        nodes, _, _ = fm.orbit(y, n, jacobian=False)
        mean = np.mean(u(nodes), axis=-1)
        return (mean, fm.period, 0.0) if full_output else mean

    Y = y.copy()
    integral = np.zeros(y.shape[:-1])
    t, t_next = 0.0, horizon
    previous, increments = None, []
    for _ in range(max_doublings + 1):
        span = t_next - t
        steps = 2 * max(1, math.ceil(span / fm.max_step / 2))
        h = span / steps
        vals = [u(Y)]
        for _ in range(steps):
            Y, _ = fm._rk4(Y, None, h, 1)
            vals.append(u(Y))
        vals = np.stack(vals, axis=-1)
        integral = integral + h / 3.0 * (vals[..., 0] + vals[..., -1] + 4 * vals[..., 1:-1:2].sum(-1)
                                         + 2 * vals[..., 2:-1:2].sum(-1))
        t = t_next
        mean = integral / t
        if previous is not None:
            delta = float(np.max(np.abs(mean - previous)))
            increments.append(delta)
            if delta <= atol:
                return (mean, t, delta) if full_output else mean
            if len(increments) >= 3 and increments[-1] >= increments[-2] >= increments[-3]:
                raise NonConvergentAverageError(f"increments not decreasing: {increments[-3:]}")
        previous = mean
        t_next = 2.0 * t
    raise NonConvergentAverageError(f"average not settled at horizon {t:g}: increment {increments[-1]:.3e}")


def _shift_orbit(values: np.ndarray, s: float, period: float) -> np.ndarray:
    """Periodic values sampled on ``n`` nodes, evaluated at ``s_k + s``."""
    n = values.shape[1]
    steps = s / (period / n)
    if abs(steps - round(steps)) < 1e-12:
        return np.roll(values, -int(round(steps)), axis=1)
    k = np.fft.fftfreq(n, d=1.0 / n)
    phase = np.exp(2j * np.pi * k * s / period).reshape((1, n) + (1,) * (values.ndim - 2))
    return np.fft.ifft(np.fft.fft(values, axis=1) * phase, axis=1).real


def _pushed_field(A: MatrixFieldSpec, fm: FlowMap, s: float) -> MatrixFieldSpec:
    def func(y):
        Y, J = fm.integrate(s, y)
        return _congruence(np.linalg.inv(J), A(Y))

    return MatrixFieldSpec(func=func, symmetric=A.symmetric, positive=A.positive, name=f"G({s:g}){A.name}")


def group_action(A: MatrixFieldSample, s: float, fm: FlowMap) -> MatrixFieldSample:
    """``G(s)A`` on the points of ``A``.

    Samples carrying an analytic source are evaluated at ``Y(s; y)``;
    points whose image leaves the box are excluded and counted.  Samples on
    an orbit grid are shifted along the orbits.
    """
    if A.source is not None:
        Y, J = fm.integrate(s, A.points)
        values = _congruence(np.linalg.inv(J), A.source(Y))
        outside = np.abs(Y).max(axis=-1) > fm.box
        if np.any(outside):
            log.info("group_action: %d points left the box", int(outside.sum()))
            values[outside] = 0.0
        return A.with_values(values, source=_pushed_field(A.source, fm, s), excluded=A.excluded | outside)
    if A.orbits is not None:
        grid = A.orbits
        pulled = grid.pull_back(A.values.reshape(grid.nodes.shape[:2] + (DIM, DIM)))
        shifted = _shift_orbit(pulled, s, fm.period)
        return A.with_values(grid.push_forward(shifted).reshape(-1, DIM, DIM))
    raise ValueError("group_action needs an analytic source or an orbit grid")


def generator_L(A: MatrixFieldSample, fm: FlowMap, h: float | None = None,
                method: str | None = None) -> MatrixFieldSample:
    """``L(A) = [b, A]``.

    ``analytic`` uses the bracket formula on the source field and is the
    default when one exists; ``centered`` is ``(G(h)A - G(-h)A) / 2h``;
    ``spectral`` differentiates along orbits in Fourier space.
    """
    if method is None:
        method = "analytic" if A.source is not None else "centered"
    if method == "analytic":
        if A.source is None:
            raise ValueError("analytic generator needs a source field")
        return A.with_values(bracket_vm(fm.field, A.source, A.points), source=None)
    if method == "centered":
        if h is None:
            h = A.orbits.spacing if A.orbits is not None else 1e-3
        plus, minus = group_action(A, h, fm), group_action(A, -h, fm)
        return A.with_values((plus.values - minus.values) / (2.0 * h), source=None,
                             excluded=A.excluded | plus.excluded | minus.excluded)
    if method == "spectral":
        grid = A.orbits
        pulled = grid.pull_back(A.values.reshape(grid.nodes.shape[:2] + (DIM, DIM)))
        k = np.fft.fftfreq(grid.n, d=1.0 / grid.n)
        if grid.n % 2 == 0:
            k[grid.n // 2] = 0.0
        factor = (2j * np.pi * k / fm.period).reshape(1, grid.n, 1, 1)
        deriv = np.fft.ifft(np.fft.fft(pulled, axis=1) * factor, axis=1).real
        return A.with_values(grid.push_forward(deriv).reshape(-1, DIM, DIM), source=None)
    raise ValueError(f"unknown method {method!r}")


def _points_of(points):
    if isinstance(points, MatrixFieldSample):
        return points.points, points
    pts = np.asarray(points, dtype=float).reshape(-1, DIM)
    return pts, None


def averaged_matrix_explicit(D: MatrixFieldSpec, w: WeightSpec, fm: FlowMap, points,
                             n: int = 256, singular_tol: float = 1e-8) -> MatrixFieldSample:
    """``<D> = R^{-1} <R D R^T> R^{-T}`` with the mean taken over orbit nodes.

    Points where ``R`` is singular or undefined are excluded and reported.
    """
    if w.R is None:
        raise ValueError("the explicit route needs a frame R")
    pts, template = _points_of(points)
    R0 = w.R(pts)
    det = np.linalg.det(R0)
    excluded = ~np.isfinite(det) | (np.abs(det) < singular_tol)
    good = ~excluded
    values = np.zeros((len(pts), DIM, DIM))
    if np.any(good):
        nodes, _, _ = fm.orbit(pts[good], n, jacobian=False)
        mean = _congruence(w.R(nodes), D(nodes)).mean(axis=1)
        Rinv = np.linalg.inv(R0[good])
        values[good] = _congruence(Rinv, mean)
    if np.any(excluded):
        log.info("averaged_matrix_explicit: %d points excluded (singular frame)", int(excluded.sum()))
    if template is not None:
        return template.with_values(values, source=None, excluded=template.excluded | excluded)
    return MatrixFieldSample(pts, values, np.zeros(len(pts)), weight_id=w.name, excluded=excluded)


def averaged_matrix_orbit(D: MatrixFieldSpec, fm: FlowMap, points, n: int = 256) -> np.ndarray:
    """Orbit mean of ``G(s)D``; needs no frame and is defined at fixed points."""
    pts, _ = _points_of(points)
    nodes, jac, _ = fm.orbit(pts, n)
    return _congruence(np.linalg.inv(jac), D(nodes)).mean(axis=1)


def fill_excluded(sample: MatrixFieldSample, D: MatrixFieldSpec, fm: FlowMap, n: int = 256) -> MatrixFieldSample:
    """Replace excluded points of an averaged sample by the orbit-mean route."""
    if not np.any(sample.excluded):
        return sample
    values = sample.values.copy()
    values[sample.excluded] = averaged_matrix_orbit(D, fm, sample.points[sample.excluded], n)
    return sample.with_values(values, excluded=np.zeros(len(values), dtype=bool))


@dataclass
class RelaxationResult:
    """Outcome of :func:`averaged_matrix_relaxation`."""

    sample: MatrixFieldSample
    residual: float
    norms: np.ndarray
    dt: float
    steps: int
    halvings: int
    monotone: bool = field(default=True)


def averaged_matrix_relaxation(D: MatrixFieldSample, w: WeightSpec, fm: FlowMap,
                               t_final: float = 6.0, dt: float | None = None,
                               max_halvings: int = 20) -> RelaxationResult:
    """Explicit Euler for ``dA/dt = L(L(A))`` started from ``D``.

    ``L^2`` is the compact centred second difference ``(G(h) - 2 + G(-h)) / h^2``
    with ``h`` the orbit node spacing.  Along an orbit this is a discrete
    heat equation for the pulled-back values, so for ``dt <= h^2 / 2`` every
    step is a convex combination: positivity is kept and ``|A|_Q`` does not
    grow.  Larger requested steps are reduced to that bound; a growing norm
    halves the step again.
    """
    if D.orbits is None or D.orbits.jac is None:
        raise ValueError("relaxation needs a sample on an orbit grid with Jacobians")
    grid = D.orbits
    h = grid.spacing
    limit = 0.5 * h * h
    if dt is None or dt > limit:
        dt = limit
    hq = HQProduct.for_sample(D, w)
    shape = grid.nodes.shape[:2] + (DIM, DIM)
    pulled = grid.pull_back(D.values.reshape(shape))

    def lap(x):
        return (np.roll(x, -1, axis=1) - 2.0 * x + np.roll(x, 1, axis=1)) / (h * h)

    norm = hq.norm(D.values)
    norms = [norm]
    t, steps, halvings = 0.0, 0, 0
    while t < t_final - 1e-14:
        step = min(dt, t_final - t)
        trial = pulled + step * lap(pulled)
        trial_norm = hq.norm(grid.push_forward(trial).reshape(-1, DIM, DIM))
        if trial_norm > norm * (1.0 + 1e-12) + 1e-300:
            if halvings >= max_halvings:
                raise RuntimeError(f"relaxation norm grew after {halvings} step halvings")
            dt *= 0.5
            halvings += 1
            continue
        pulled, norm, t = trial, trial_norm, t + step
        norms.append(norm)
        steps += 1
    values = grid.push_forward(pulled).reshape(-1, DIM, DIM)
    result = D.with_values(values, source=None)
    residual = hq.norm(generator_L(result, fm, method="centered").values)
    norms = np.asarray(norms)
    return RelaxationResult(result, residual, norms, dt, steps, halvings,
                            bool(np.all(np.diff(norms) <= 1e-12 * norms[0])))


def weighted_positive_part(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """``Q^{-1/2} (Q^{1/2} A Q^{1/2})^+ Q^{-1/2}`` pointwise."""
    Qh, Qih = sym_sqrt(Q), sym_sqrt(Q, inverse=True)
    X = Qh @ A @ Qh
    lam, V = np.linalg.eigh(0.5 * (X + np.swapaxes(X, -1, -2)))
    Xp = (V * np.maximum(lam, 0.0)[..., None, :]) @ np.swapaxes(V, -1, -2)
    return Qih @ Xp @ Qih
