"""Vector and matrix fields on the plane, their characteristic flow and brackets.

Analytic fields are held as sympy expressions and evaluated through
``lambdify``; their derivatives are exact.  Fields given as plain callables
are differentiated with central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import sympy

from .expressions import Y1, Y2, parse_expression

DIM = 2
FD_STEP = 1e-5


class FieldError(ValueError):
    """Raised when a field violates a declared property."""


class OrbitEscapeError(FieldError):
    """Raised when trajectories leave the guard box."""

    def __init__(self, count: int, bound: float):
        super().__init__(f"{count} trajectories left the guard box |y|_inf <= {bound:g}")
        self.count = count
        self.bound = bound


def _lambdify(exprs: Sequence[sympy.Expr], shape: tuple[int, ...]) -> Callable:
    flat = [sympy.sympify(e) for e in exprs]
    func = sympy.lambdify((Y1, Y2), flat, modules="numpy")

    def evaluate(y):
        y = np.asarray(y, dtype=float)
        out = np.empty(y.shape[:-1] + (len(flat),))
        with np.errstate(divide="ignore", invalid="ignore"):
            for k, value in enumerate(func(y[..., 0], y[..., 1])):
                out[..., k] = value
        return out.reshape(y.shape[:-1] + shape)

    return evaluate


def fd_gradient(func: Callable, y) -> np.ndarray:
    """Central-difference derivative of ``func`` with a trailing axis per coordinate."""
    y = np.asarray(y, dtype=float)
    h = FD_STEP * (1.0 + np.linalg.norm(y, axis=-1))
    cols = []
    for k in range(y.shape[-1]):
        step = np.zeros(y.shape)
        step[..., k] = h
        diff = func(y + step) - func(y - step)
        cols.append(diff / (2.0 * h).reshape(h.shape + (1,) * (diff.ndim - h.ndim)))
    return np.stack(cols, axis=-1)


class VectorFieldSpec:
    """A vector field ``b`` on the plane.

    ``kind`` is one of ``rotation`` (``b = w (y2, -y1)``), ``shear``
    (``b = k (y2, 0)``) or ``custom-analytic`` (expressions or a callable).
    """

    KINDS = ("rotation", "shear", "custom-analytic")

    def __init__(
        self,
        kind: str = "rotation",
        params: Sequence[float] = (),
        exprs: Sequence | None = None,
        func: Callable | None = None,
        divergence_declared_zero: bool = True,
    ):
        if kind not in self.KINDS:
            raise FieldError(f"unknown vector field kind {kind!r}")
        self.kind = kind
        self.params = tuple(float(p) for p in params)
        self.divergence_declared_zero = divergence_declared_zero
        self._func = None
        if kind == "rotation":
            w = self.params[0] if self.params else 1.0
            exprs = (w * Y2, -w * Y1)
        elif kind == "shear":
            k = self.params[0] if self.params else 1.0
            exprs = (k * Y2, sympy.Integer(0))
        elif exprs is None and func is None:
            raise FieldError("custom-analytic field needs expressions or a callable")

        if exprs is not None:
            if len(exprs) != DIM:
                raise FieldError("a planar vector field needs two components")
            self.expr = sympy.Matrix([parse_expression(e) for e in exprs])
            jac = self.expr.jacobian([Y1, Y2])
            self._value = _lambdify(list(self.expr), (DIM,))
            self._jacobian = _lambdify(list(jac), (DIM, DIM))
            self._divergence = _lambdify([jac.trace()], ())
            self.jacobian_expr = jac
        else:
            self.expr = None
            self._func = func

    @classmethod
    def rotation(cls, omega: float = 1.0) -> "VectorFieldSpec":
        return cls("rotation", (omega,))

    @classmethod
    def shear(cls, kappa: float = 1.0) -> "VectorFieldSpec":
        return cls("shear", (kappa,))

    @property
    def period(self) -> float | None:
        """Common period of all orbits, when known in closed form."""
        if self.kind == "rotation":
            w = self.params[0] if self.params else 1.0
            return 2.0 * math.pi / abs(w)
        return None

    def __call__(self, y) -> np.ndarray:
        if self._func is not None:
            return np.asarray(self._func(np.asarray(y, dtype=float)), dtype=float)
        return self._value(y)

    def jacobian(self, y) -> np.ndarray:
        """``(db)_ij = d b_i / d y_j``."""
        if self._func is not None:
            return fd_gradient(self, y)
        return self._jacobian(y)

    def divergence(self, y) -> np.ndarray:
        if self._func is not None:
            return np.trace(self.jacobian(y), axis1=-2, axis2=-1)
        return self._divergence(y)

    def growth_constant(self, L: float, n: int = 65) -> float:
        """Smallest ``C`` with ``|b(y)| <= C (1 + |y|)`` on the box ``[-L, L]^2``."""
        x = np.linspace(-L, L, n)
        y = np.stack(np.meshgrid(x, x, indexing="ij"), axis=-1)
        ratio = np.linalg.norm(self(y), axis=-1) / (1.0 + np.linalg.norm(y, axis=-1))
        if not np.all(np.isfinite(ratio)):
            raise FieldError("field is not finite on the box")
        return float(ratio.max())

    def check(self, points, tol: float = 1e-10) -> float:
        """Return ``max |div b|`` on ``points``; raise if a declared zero divergence fails."""
        div = float(np.max(np.abs(self.divergence(points))))
        if self.divergence_declared_zero and div > tol:
            raise FieldError(f"divergence declared zero but max |div b| = {div:.3e}")
        return div


class MatrixFieldSpec:
    """A 2x2 matrix field, analytic (sympy entries) or given as a callable."""

    def __init__(
        self,
        exprs=None,
        func: Callable | None = None,
        grad: Callable | None = None,
        symmetric: bool = True,
        positive: bool = False,
        name: str = "",
    ):
        if (exprs is None) == (func is None):
            raise FieldError("give exactly one of exprs or func")
        self.symmetric = symmetric
        self.positive = positive
        self.name = name
        if exprs is not None:
            if isinstance(exprs, sympy.MatrixBase):
                self.expr = sympy.Matrix(exprs)
            else:
                self.expr = sympy.Matrix([[parse_expression(e) for e in row] for row in exprs])
            if self.expr.shape != (DIM, DIM):
                raise FieldError("matrix field must be 2x2")
            if symmetric and sympy.expand(self.expr[0, 1] - self.expr[1, 0]) != 0:
                probe = np.random.default_rng(0).uniform(-2.0, 2.0, (16, DIM))
                values = _lambdify(list(self.expr), (DIM, DIM))(probe)
                if np.max(np.abs(values[:, 0, 1] - values[:, 1, 0])) > 1e-12:
                    raise FieldError("matrix field declared symmetric but is not")
            self._value = _lambdify(list(self.expr), (DIM, DIM))
            grads = [sympy.diff(e, v) for e in self.expr for v in (Y1, Y2)]
            self._grad = _lambdify(grads, (DIM, DIM, DIM))
            self._func = None
        else:
            self.expr = None
            self._func = func
            self._grad = grad

    @classmethod
    def from_entries(cls, a11, a12, a22, **kwargs) -> "MatrixFieldSpec":
        return cls([[a11, a12], [a12, a22]], **kwargs)

    @classmethod
    def constant(cls, matrix, **kwargs) -> "MatrixFieldSpec":
        m = np.asarray(matrix, dtype=float)
        return cls([[sympy.Float(v) for v in row] for row in m], **kwargs)

    @classmethod
    def identity(cls) -> "MatrixFieldSpec":
        return cls([[1, 0], [0, 1]], positive=True, name="identity")

    def __call__(self, y) -> np.ndarray:
        if self._func is not None:
            return np.asarray(self._func(np.asarray(y, dtype=float)), dtype=float)
        return self._value(y)

    def gradient(self, y) -> np.ndarray:
        """``G[..., i, j, k] = d A_ij / d y_k``."""
        if self._grad is not None:
            return self._grad(y)
        return fd_gradient(self, y)

    def check(self, points, tol: float = 1e-10) -> None:
        values = self(points)
        if not np.all(np.isfinite(values)):
            raise FieldError("matrix field is not finite on the sample")
        if self.symmetric and np.max(np.abs(values - np.swapaxes(values, -1, -2))) > tol:
            raise FieldError("matrix field declared symmetric but is not")
        if self.positive and np.min(np.linalg.eigvalsh(values)) < -tol:
            raise FieldError("matrix field declared positive but has a negative eigenvalue")


class GaussianBump:
    """Smooth rapidly decaying test function with exact derivatives.

    ``exp(-|y - c|^2 / (2 width^2))`` times ``amplitude``; with a modest
    width and centre it vanishes to machine precision well inside the box.
    """

    def __init__(self, center, width: float, amplitude: float = 1.0):
        self.center = tuple(float(c) for c in center)
        self.width = float(width)
        c1, c2 = self.center
        self.expr = amplitude * sympy.exp(-((Y1 - c1) ** 2 + (Y2 - c2) ** 2) / (2 * self.width**2))
        self._value = _lambdify([self.expr], ())
        self._cache: dict = {}

    def __call__(self, y) -> np.ndarray:
        return self._value(y)

    def lie_expr(self, b: VectorFieldSpec, order: int) -> sympy.Expr:
        """``(b . grad)^order u`` as a sympy expression."""
        if b.expr is None:
            raise FieldError("Lie derivatives of bumps need an analytic vector field")
        expr = self.expr
        for _ in range(order):
            expr = b.expr[0] * sympy.diff(expr, Y1) + b.expr[1] * sympy.diff(expr, Y2)
        return expr

    def grad_lie(self, b: VectorFieldSpec | None, order: int, y) -> np.ndarray:
        """Gradient of ``(b . grad)^order u`` at ``y``."""
        key = (id(b), order)
        if key not in self._cache:
            expr = self.expr if order == 0 else self.lie_expr(b, order)
            self._cache[key] = _lambdify([sympy.diff(expr, Y1), sympy.diff(expr, Y2)], (DIM,))
        return self._cache[key](y)

    def grad(self, y) -> np.ndarray:
        return self.grad_lie(None, 0, y)


@dataclass
class FlowMap:
    """Characteristic flow ``dY/ds = b(Y)`` integrated with classical RK4.

    The step is ``h <= tol**0.25 / m``.  With ``richardson`` enabled the
    result is compared against a half-step run and refined until the error
    estimate per unit time is below ``tol``.  ``box`` is the half width of the
    computational box; trajectories leaving ``10 * box`` raise.
    """

    field: VectorFieldSpec
    tol: float = 1e-10
    period: float | None = None
    box: float = 4.0
    richardson: bool = True
    max_refinements: int = 6
    cache_size: int = 8

    def __post_init__(self):
        if self.period is None:
            self.period = self.field.period
        self._cache: dict = {}

    @property
    def max_step(self) -> float:
        return self.tol**0.25 / DIM

    def _rhs(self, Y, J):
        b = self.field(Y)
        if J is None:
            return b, None
        return b, self.field.jacobian(Y) @ J

    def _guard(self, Y):
        bound = 10.0 * self.box
        escaped = np.abs(Y).max(axis=-1) > bound
        if np.any(escaped) or not np.all(np.isfinite(Y)):
            raise OrbitEscapeError(int(np.count_nonzero(escaped | ~np.isfinite(Y).all(-1))), bound)

    def _rk4(self, Y, J, h: float, nsteps: int):
        for _ in range(nsteps):
            k1, l1 = self._rhs(Y, J)
            k2, l2 = self._rhs(Y + 0.5 * h * k1, None if J is None else J + 0.5 * h * l1)
            k3, l3 = self._rhs(Y + 0.5 * h * k2, None if J is None else J + 0.5 * h * l2)
            k4, l4 = self._rhs(Y + h * k3, None if J is None else J + h * l3)
            Y = Y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if J is not None:
                J = J + (h / 6.0) * (l1 + 2 * l2 + 2 * l3 + l4)
            self._guard(Y)
        return Y, J

    def integrate(self, s: float, y, jacobian: bool = True):
        """Return ``Y(s; y)`` and, if requested, ``J = d Y / d y``.

        Recent results are memoised; the flow is a pure function of ``(s, y)``.
        """
        y = np.asarray(y, dtype=float)
        key = (float(s), jacobian, y.shape, hash(y.tobytes()))
        if key in self._cache:
            Y, J = self._cache[key]
            return Y.copy(), None if J is None else J.copy()
        Y, J = self._integrate(s, y, jacobian)
        if self.cache_size:
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = (Y.copy(), None if J is None else J.copy())
        return Y, J

    def _integrate(self, s: float, y: np.ndarray, jacobian: bool):
        J0 = np.broadcast_to(np.eye(DIM), y.shape[:-1] + (DIM, DIM)).copy() if jacobian else None
        if s == 0.0:
            return y.copy(), J0
        nsteps = max(1, math.ceil(abs(s) / self.max_step))
        Y, J = self._rk4(y, J0, s / nsteps, nsteps)
        if not self.richardson:
            return Y, J
        for _ in range(self.max_refinements):
            nsteps *= 2
            Yf, Jf = self._rk4(y, J0, s / nsteps, nsteps)
            err = np.max(np.abs(Yf - Y)) / 15.0
            if jacobian:
                err = max(err, np.max(np.abs(Jf - J)) / 15.0)
            Y, J = Yf, Jf
            if err <= self.tol * max(abs(s), 1.0):
                break
        return Y, J

    def orbit(self, y, n: int, jacobian: bool = True, horizon: float | None = None):
        """Nodes ``Y(k T / n; y)`` for ``k = 0..n-1`` plus the closure point at ``T``.

        Returns ``(nodes, jacobians, closure)`` with shapes ``(..., n, 2)``,
        ``(..., n, 2, 2)`` (or ``None``) and ``(..., 2)``.
        """
        T = horizon if horizon is not None else self.period
        if T is None:
            raise FieldError("orbit sampling needs a period or a horizon")
        y = np.asarray(y, dtype=float)
        spacing = T / n
        sub = max(1, math.ceil(spacing / self.max_step))
        h = spacing / sub
        Y = y.copy()
        J = np.broadcast_to(np.eye(DIM), y.shape[:-1] + (DIM, DIM)).copy() if jacobian else None
        nodes = np.empty(y.shape[:-1] + (n, DIM))
        jacs = np.empty(y.shape[:-1] + (n, DIM, DIM)) if jacobian else None
        for k in range(n):
            nodes[..., k, :] = Y
            if jacobian:
                jacs[..., k, :, :] = J
            Y, J = self._rk4(Y, J, h, sub)
        return nodes, jacs, Y


def flow(fm: FlowMap, s: float, y) -> np.ndarray:
    """``Y(s; y)``."""
    return fm.integrate(s, y, jacobian=False)[0]


def flow_jacobian(fm: FlowMap, s: float, y) -> np.ndarray:
    """``d_y Y(s; y)`` from the variational equation."""
    return fm.integrate(s, y, jacobian=True)[1]


def bracket_vv(b: VectorFieldSpec, c: VectorFieldSpec, y) -> np.ndarray:
    """``[b, c] = (b . grad) c - (c . grad) b``."""
    y = np.asarray(y, dtype=float)
    return np.einsum("...ij,...j->...i", c.jacobian(y), b(y)) - np.einsum(
        "...ij,...j->...i", b.jacobian(y), c(y)
    )


def bracket_vm(b: VectorFieldSpec, A: MatrixFieldSpec, y) -> np.ndarray:
    """``[b, A] = (b . grad) A - db A - A db^T``."""
    y = np.asarray(y, dtype=float)
    db = b.jacobian(y)
    a = A(y)
    transport = np.einsum("...ijk,...k->...ij", A.gradient(y), b(y))
    return transport - db @ a - a @ np.swapaxes(db, -1, -2)
