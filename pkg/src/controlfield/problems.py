"""Control problem abstraction and the built-in problem catalog.

A :class:`ControlProblem` bundles the running cost F(x, u), dynamics
f(x, u), terminal cost g(x), their first derivatives, and the control
constraint set K. Catalog constructors build concrete instances
(linear-quadratic families and the scalar academic example) with
vectorized callbacks; user-supplied pointwise callbacks are adapted
transparently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ConstraintSet",
    "ControlProblem",
    "LQRSpec",
    "lqr_to_problem",
    "academic_problem",
    "derivative_consistency",
]


class ConstraintSet:
    """Convex constraint set K for the control variable.

    kind is one of 'unconstrained', 'box', 'ball'. ``project`` maps any
    vector (or batch of row vectors) to its closest point in K and is
    exact for box and ball sets.
    """

    def __init__(self, kind="unconstrained", lo=None, hi=None, center=None, radius=None):
        self.kind = kind
        if kind == "unconstrained":
            pass
        elif kind == "box":
            self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
            self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
            if self.lo.shape != self.hi.shape or not np.all(self.lo <= self.hi):
                raise ValueError("box constraint requires lo <= hi componentwise")
        elif kind == "ball":
            self.center = np.atleast_1d(np.asarray(center, dtype=float))
            self.radius = float(radius)
            if self.radius <= 0.0:
                raise ValueError("ball constraint requires radius > 0")
        else:
            raise ValueError(f"unknown constraint kind {kind!r}")

    @classmethod
    def unconstrained(cls):
        return cls("unconstrained")

    @classmethod
    def box(cls, lo, hi):
        return cls("box", lo=lo, hi=hi)

    @classmethod
    def ball(cls, center, radius):
        return cls("ball", center=center, radius=radius)

    @property
    def is_compact(self):
        return self.kind in ("box", "ball")

    def project(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "unconstrained":
            return v
        if self.kind == "box":
            return np.clip(v, self.lo, self.hi)
        d = v - self.center
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        scale = np.where(norm > self.radius, self.radius / np.maximum(norm, 1e-300), 1.0)
        return self.center + d * scale

    def contains(self, v, tol=0.0):
        v = np.asarray(v, dtype=float)
        if self.kind == "unconstrained":
            return np.ones(v.shape[:-1], dtype=bool) if v.ndim > 1 else True
        if self.kind == "box":
            ok = np.all((v >= self.lo - tol) & (v <= self.hi + tol), axis=-1)
        else:
            ok = np.linalg.norm(v - self.center, axis=-1) <= self.radius + tol
        return ok if v.ndim > 1 else bool(ok)

    def __repr__(self):
        if self.kind == "box":
            return f"ConstraintSet.box({self.lo.tolist()}, {self.hi.tolist()})"
        if self.kind == "ball":
            return f"ConstraintSet.ball({self.center.tolist()}, {self.radius})"
        return "ConstraintSet.unconstrained()"


def _batchify_point(fn, out_shape):
    """Adapt a pointwise callback to batched (B, .) inputs by looping."""

    def batched(X, U):
        X = np.atleast_2d(X)
        U = np.atleast_2d(U)
        out = np.empty((X.shape[0],) + out_shape)
        for i in range(X.shape[0]):
            out[i] = np.asarray(fn(X[i], U[i]), dtype=float).reshape(out_shape)
        return out

    return batched


def _batchify_state_only(fn, out_shape):
    def batched(X):
        X = np.atleast_2d(X)
        out = np.empty((X.shape[0],) + out_shape)
        for i in range(X.shape[0]):
            out[i] = np.asarray(fn(X[i]), dtype=float).reshape(out_shape)
        return out

    return batched


@dataclass(frozen=True)
class ControlProblem:
    """Finite-horizon control problem data.

    Callbacks take a state x in R^N and control u in R^m. When
    ``vectorized`` is true they must also accept stacked inputs of shape
    (B, N) and (B, m) and return correspondingly stacked outputs; the
    solver then avoids per-point Python loops. All callbacks must be pure
    and safe for concurrent invocation.
    """

    state_dim: int
    control_dim: int
    horizon: float
    dynamics: Callable
    dynamics_jac_x: Callable
    dynamics_jac_u: Callable
    running_cost: Callable
    running_cost_grad_x: Callable
    running_cost_grad_u: Callable
    terminal_cost: Callable
    terminal_cost_grad: Callable
    constraint: ConstraintSet = field(default_factory=ConstraintSet.unconstrained)
    vectorized: bool = False
    name: str = "custom"

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 1:
            raise ValueError("state_dim and control_dim must be positive")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")

    # Batched accessors used by every solver loop. Shapes: X (B, N), U (B, m).
    def _adapt(self, fn, out_shape):
        if self.vectorized:
            return lambda X, U: np.asarray(fn(X, U), dtype=float).reshape(
                (np.atleast_2d(X).shape[0],) + out_shape
            )
        return _batchify_point(fn, out_shape)

    def f_batch(self, X, U):
        return self._adapt(self.dynamics, (self.state_dim,))(X, U)

    def fx_batch(self, X, U):
        return self._adapt(self.dynamics_jac_x, (self.state_dim, self.state_dim))(X, U)

    def fu_batch(self, X, U):
        return self._adapt(self.dynamics_jac_u, (self.state_dim, self.control_dim))(X, U)

    def F_batch(self, X, U):
        if self.vectorized:
            return np.asarray(self.running_cost(X, U), dtype=float).reshape(
                np.atleast_2d(X).shape[0]
            )
        X = np.atleast_2d(X)
        U = np.atleast_2d(U)
        return np.array(
            [float(self.running_cost(X[i], U[i])) for i in range(X.shape[0])]
        )

    def Fx_batch(self, X, U):
        return self._adapt(self.running_cost_grad_x, (self.state_dim,))(X, U)

    def Fu_batch(self, X, U):
        return self._adapt(self.running_cost_grad_u, (self.control_dim,))(X, U)

    def g_batch(self, X):
        if self.vectorized:
            return np.asarray(self.terminal_cost(X), dtype=float).reshape(
                np.atleast_2d(X).shape[0]
            )
        X = np.atleast_2d(X)
        return np.array([float(self.terminal_cost(X[i])) for i in range(X.shape[0])])

    def grad_g_batch(self, X):
        if self.vectorized:
            return np.asarray(self.terminal_cost_grad(X), dtype=float).reshape(
                np.atleast_2d(X).shape[0], self.state_dim
            )
        return _batchify_state_only(self.terminal_cost_grad, (self.state_dim,))(X)


@dataclass(frozen=True)
class LQRSpec:
    """Linear-quadratic problem data: dynamics x' = Ax + Bu, cost
    1/2 x'Qx + 1/2 u'Ru running and 1/2 x(T)'Hx(T) terminal.

    Construction validates that R is symmetric positive definite, Q and H
    symmetric positive semidefinite, and that B R^-1 B^T is invertible
    (required by the closed-form feedback formulas; refused otherwise).
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "Q", "R", "H"):
            object.__setattr__(
                self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            )
        n, m = self.B.shape
        if self.A.shape != (n, n):
            raise ValueError("A must be N x N matching B's row count")
        for name, mat, dim in (("Q", self.Q, n), ("R", self.R, m), ("H", self.H, n)):
            if mat.shape != (dim, dim):
                raise ValueError(f"{name} must be {dim} x {dim}")
            if not np.allclose(mat, mat.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
        try:
            np.linalg.cholesky(self.R)
        except np.linalg.LinAlgError:
            raise ValueError("R must be positive definite") from None
        for name, mat in (("Q", self.Q), ("H", self.H)):
            if np.linalg.eigvalsh(mat).min() < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")
        brb = self.B @ np.linalg.solve(self.R, self.B.T)
        if np.linalg.cond(brb) > 1e12:
            raise ValueError(
                "B R^-1 B^T is singular; the closed-form feedback formulas do not apply"
            )

    @property
    def state_dim(self):
        return self.B.shape[0]

    @property
    def control_dim(self):
        return self.B.shape[1]


def lqr_to_problem(spec: LQRSpec, horizon, constraint=None) -> ControlProblem:
    """Build the LQR control problem with the terminal cost folded into F.

    The terminal quadratic is absorbed into the running cost, giving
    F(x,u) = x'A'Hx + u'B'Hx + 1/2 x'Qx + 1/2 u'Ru with g identically zero,
    and dynamics f(x,u) = Ax + Bu.
    """
    A, B, Q, R, H = spec.A, spec.B, spec.Q, spec.R, spec.H
    n, m = spec.state_dim, spec.control_dim
    AtH_sym = A.T @ H + H @ A
    HB = H @ B
    BtH = B.T @ H

    def F(X, U):
        xAHx = np.einsum("bi,ij,bj->b", X, A.T @ H, X)
        uBHx = np.einsum("bi,ij,bj->b", U, BtH, X)
        xQx = np.einsum("bi,ij,bj->b", X, Q, X)
        uRu = np.einsum("bi,ij,bj->b", U, R, U)
        return xAHx + uBHx + 0.5 * xQx + 0.5 * uRu

    def Fx(X, U):
        return X @ AtH_sym.T + U @ HB.T + X @ Q.T

    def Fu(X, U):
        return X @ BtH.T + U @ R.T

    def f(X, U):
        return X @ A.T + U @ B.T

    def fx(X, U):
        return np.broadcast_to(A, (np.atleast_2d(X).shape[0], n, n)).copy()

    def fu(X, U):
        return np.broadcast_to(B, (np.atleast_2d(X).shape[0], n, m)).copy()

    def g(X):
        return np.zeros(np.atleast_2d(X).shape[0])

    def grad_g(X):
        return np.zeros((np.atleast_2d(X).shape[0], n))

    return ControlProblem(
        state_dim=n,
        control_dim=m,
        horizon=float(horizon),
        dynamics=f,
        dynamics_jac_x=fx,
        dynamics_jac_u=fu,
        running_cost=F,
        running_cost_grad_x=Fx,
        running_cost_grad_u=Fu,
        terminal_cost=g,
        terminal_cost_grad=grad_g,
        constraint=constraint or ConstraintSet.unconstrained(),
        vectorized=True,
        name="lqr",
    )


def academic_problem(f_scalar, f_scalar_prime, horizon) -> ControlProblem:
    """Scalar problem: minimize the integral of u^2/2 - f(x)^2/2 subject to
    x' = f(x) + u, unconstrained control.

    ``f_scalar`` and its derivative must accept numpy arrays elementwise.
    """

    def F(X, U):
        x = np.atleast_2d(X)[:, 0]
        u = np.atleast_2d(U)[:, 0]
        return 0.5 * u * u - 0.5 * f_scalar(x) ** 2

    def Fx(X, U):
        x = np.atleast_2d(X)[:, 0]
        return (-f_scalar(x) * f_scalar_prime(x))[:, None]

    def Fu(X, U):
        return np.atleast_2d(U)[:, :1].copy()

    def f(X, U):
        x = np.atleast_2d(X)[:, 0]
        u = np.atleast_2d(U)[:, 0]
        return (f_scalar(x) + u)[:, None]

    def fx(X, U):
        x = np.atleast_2d(X)[:, 0]
        return f_scalar_prime(x)[:, None, None]

    def fu(X, U):
        return np.ones((np.atleast_2d(X).shape[0], 1, 1))

    def g(X):
        return np.zeros(np.atleast_2d(X).shape[0])

    def grad_g(X):
        return np.zeros((np.atleast_2d(X).shape[0], 1))

    return ControlProblem(
        state_dim=1,
        control_dim=1,
        horizon=float(horizon),
        dynamics=f,
        dynamics_jac_x=fx,
        dynamics_jac_u=fu,
        running_cost=F,
        running_cost_grad_x=Fx,
        running_cost_grad_u=Fu,
        terminal_cost=g,
        terminal_cost_grad=grad_g,
        constraint=ConstraintSet.unconstrained(),
        vectorized=True,
        name="academic",
    )


def derivative_consistency(problem: ControlProblem, rng, n_points=100, span=1.0, step=1e-6):
    """Worst relative error between derivative callbacks and central finite
    differences of their base maps, over random points.

    Used by tests and the verification toggles; span sets the sampling box
    half-width around the origin.
    """
    n, m = problem.state_dim, problem.control_dim
    X = rng.uniform(-span, span, size=(n_points, n))
    U = rng.uniform(-span, span, size=(n_points, m))
    if problem.constraint.kind != "unconstrained":
        U = problem.constraint.project(U)
    worst = 0.0

    def rel(err, scale):
        return err / max(scale, 1.0)

    fx = problem.fx_batch(X, U)
    fu = problem.fu_batch(X, U)
    Fx = problem.Fx_batch(X, U)
    Fu = problem.Fu_batch(X, U)
    gg = problem.grad_g_batch(X)
    for j in range(n):
        dX = np.zeros(n)
        dX[j] = step
        df = (problem.f_batch(X + dX, U) - problem.f_batch(X - dX, U)) / (2 * step)
        dF = (problem.F_batch(X + dX, U) - problem.F_batch(X - dX, U)) / (2 * step)
        dg = (problem.g_batch(X + dX) - problem.g_batch(X - dX)) / (2 * step)
        worst = max(worst, rel(np.abs(df - fx[:, :, j]).max(), np.abs(fx).max()))
        worst = max(worst, rel(np.abs(dF - Fx[:, j]).max(), np.abs(Fx).max()))
        worst = max(worst, rel(np.abs(dg - gg[:, j]).max(), np.abs(gg).max()))
    for j in range(m):
        dU = np.zeros(m)
        dU[j] = step
        df = (problem.f_batch(X, U + dU) - problem.f_batch(X, U - dU)) / (2 * step)
        dF = (problem.F_batch(X, U + dU) - problem.F_batch(X, U - dU)) / (2 * step)
        worst = max(worst, rel(np.abs(df - fu[:, :, j]).max(), np.abs(fu).max()))
        worst = max(worst, rel(np.abs(dF - Fu[:, j]).max(), np.abs(Fu).max()))
    return worst
