"""Per-time-slice descent directions: obstacle problem and Poisson problem.

Both problems discretize the quadratic functional

    E(U) = 1/2 |grad(U - u)|^2 + gradI . (U - u)

on the truncation box with homogeneous Neumann boundary (the natural
condition of the functional). The stiffness form uses cell-face
differences with tensor trapezoidal transverse weights and the linear
term uses the matching lumped (trapezoidal) quadrature, so the discrete
energy is exactly the restriction of the continuous one and the descent
inequality <gradI, U-u> <= -|grad(U-u)|^2 holds at the discrete level.

The constrained minimizer is computed by projected Gauss-Seidel sweeps in
red-black ordering (deterministic for the fixed coloring, and
vectorizable across nodes and across independent time slices); the
unconstrained direction comes from a conjugate-gradient Poisson solve
with the mean-corrected right-hand side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import Grid
from .problems import ConstraintSet

__all__ = [
    "NeumannOperator",
    "ObstacleSolution",
    "ObstacleConvergenceError",
    "PoissonConvergenceError",
    "solve_obstacle_slice",
    "solve_obstacle_slices",
    "poisson_direction",
    "poisson_direction_batch",
    "descent_inner_product",
    "gradient_energy",
    "complementarity_residual",
]


class ObstacleConvergenceError(RuntimeError):
    def __init__(self, residual, sweeps):
        super().__init__(
            f"projected Gauss-Seidel did not reach tolerance in {sweeps} sweeps "
            f"(last max nodal update {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


class PoissonConvergenceError(RuntimeError):
    def __init__(self, residual, iterations):
        super().__init__(
            f"conjugate gradients did not converge in {iterations} iterations "
            f"(relative residual {residual:.3e})"
        )
        self.residual = residual
        self.iterations = iterations


class NeumannOperator:
    """Discrete Neumann stiffness K and lumped mass M on a grid.

    K is symmetric positive semidefinite with kernel the constants;
    K W approximates -M Laplacian(W). Arrays passed to :meth:`apply`
    have shape (..., n1, ..., nN, m): spatial axes in the middle, field
    components trailing, arbitrary leading batch axes.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        N = grid.dim
        axis_w = []
        for a in range(N):
            w = np.full(grid.shape[a], grid.spacing[a])
            w[0] *= 0.5
            w[-1] *= 0.5
            axis_w.append(w)
        # transverse weight tensor per axis (constant along that axis)
        self._perp = []
        for a in range(N):
            t = np.ones((1,) * N)
            for b in range(N):
                if b == a:
                    continue
                sh = [1] * N
                sh[b] = grid.shape[b]
                t = t * axis_w[b].reshape(sh)
            self._perp.append(t[..., None])  # broadcast over components
        # diagonal of K
        diag = np.zeros(grid.shape)
        for a in range(N):
            faces = np.full(grid.shape[a], 2.0)
            faces[0] = faces[-1] = 1.0
            sh = [1] * N
            sh[a] = grid.shape[a]
            diag = diag + self._perp[a][..., 0] * faces.reshape(sh) / grid.spacing[a]
        self.diag = diag[..., None]
        self.mass = grid.quadrature_weights().reshape(grid.shape)[..., None]
        idx = np.indices(grid.shape).sum(axis=0)
        self.red = (idx % 2 == 0)[..., None]
        self.black = ~self.red

    def apply(self, W):
        """K W for W of shape (..., n1, ..., nN, m)."""
        N = self.grid.dim
        out = np.zeros_like(W)
        for a in range(N):
            ax = W.ndim - 1 - N + a
            G = np.diff(W, axis=ax) * (self._perp[a] / self.grid.spacing[a])
            out -= np.diff(G, axis=ax, prepend=0.0, append=0.0)
        return out

    def grid_shaped(self, flat):
        """(..., num_nodes, m) -> (..., n1, ..., nN, m)."""
        flat = np.asarray(flat, dtype=float)
        return flat.reshape(flat.shape[:-2] + self.grid.shape + (flat.shape[-1],))

    def flat_shaped(self, arr):
        return arr.reshape(arr.shape[: -self.grid.dim - 1] + (self.grid.num_nodes, arr.shape[-1]))

    def weighted_mean(self, flat):
        """Quadrature-weighted mean per component of a (num_nodes, m) slice."""
        w = self.grid.quadrature_weights()
        return (w[:, None] * flat).sum(axis=-2) / w.sum()


_OP_CACHE: dict[int, NeumannOperator] = {}


def _operator(grid: Grid) -> NeumannOperator:
    op = _OP_CACHE.get(id(grid))
    if op is None or op.grid is not grid:
        op = NeumannOperator(grid)
        _OP_CACHE[id(grid)] = op
    return op


@dataclass
class ObstacleSolution:
    """Result of one slice's obstacle problem."""

    U_slice: np.ndarray  # (num_nodes, m), every node inside K
    iterations: int
    residual: float  # last max nodal update
    descent_inner: float  # quadrature of gradI . (U - u)


def default_omega(grid: Grid):
    """Near-optimal SOR factor for the Neumann Laplacian on this grid."""
    n = max(grid.shape)
    return 2.0 / (1.0 + np.sin(np.pi / n))


def _pgs(op: NeumannOperator, b, W0, u, constraint, tol, max_sweeps, omega):
    """Projected Gauss-Seidel (red-black, optionally over-relaxed).

    Minimizes Q(W) = 1/2 W K W + b . W over nodewise u + W in K, batched
    over leading axes. With omega = 1 each nodal update is an exact
    constrained minimization, so Q never increases along sweeps; starting
    from a point with Q <= 0 (W = 0 always qualifies) keeps the descent
    inequality valid at any sweep count. Over-relaxed sweeps can flip-cycle
    on the free boundary, so omega is damped toward 1 whenever the nodal
    updates stagnate.
    """
    W = W0
    diag = op.diag
    last = np.inf
    window_best = np.inf
    window_start = 0
    for sweep in range(1, max_sweeps + 1):
        last = 0.0
        for mask in (op.red, op.black):
            KW = op.apply(W)
            target = W - omega * (KW + b) / diag
            if constraint.kind == "box":
                target = np.clip(u + target, constraint.lo, constraint.hi) - u
            Wn = np.where(mask, target, W)
            last = max(last, float(np.abs(Wn - W).max()))
            W = Wn
        if constraint.kind == "ball":
            Un = constraint.project(u + W)
            last = max(last, float(np.abs(Un - u - W).max()))
            W = Un - u
        if last < tol:
            return W, sweep, last
        if last < 0.5 * window_best:
            window_best = last
            window_start = sweep
        elif sweep - window_start >= 100 and omega > 1.0:
            omega = 1.0 + 0.5 * (omega - 1.0)
            window_best = last
            window_start = sweep
    raise ObstacleConvergenceError(last, max_sweeps)


def solve_obstacle_slices(
    grid: Grid,
    gradI,
    u,
    constraint: ConstraintSet,
    tol=1e-10,
    max_sweeps=100_000,
    omega=None,
    warm_start=None,
):
    """Solve the obstacle problem on a stack of independent time slices.

    gradI and u have shape (S, num_nodes, m). Returns (U, sweeps, last_update)
    where U is feasible nodewise. With unconstrained K the right-hand side is
    mean-corrected per component (the discrete quadratic is otherwise
    unbounded along constants on the Neumann box) and U - u is returned with
    weighted mean zero, matching :func:`poisson_direction`.

    ``warm_start`` may carry the previous solve's W = U - u; it is used only
    when its energy does not exceed the cold start's (which keeps the descent
    inequality valid even for capped sweep budgets). ``omega`` defaults to
    the near-optimal SOR factor for the grid.
    """
    op = _operator(grid)
    if omega is None:
        omega = default_omega(grid)
    gradI = np.asarray(gradI, dtype=float)
    u = np.asarray(u, dtype=float)
    r = gradI
    if constraint.kind == "unconstrained":
        r = gradI - op.weighted_mean(gradI)[..., None, :]
    b = op.grid_shaped(r) * op.mass
    ug = op.grid_shaped(u)
    W0 = np.zeros_like(ug)
    if warm_start is not None:
        Wc = op.grid_shaped(np.asarray(warm_start, dtype=float))
        if constraint.kind == "box":
            Wc = np.clip(ug + Wc, constraint.lo, constraint.hi) - ug
        elif constraint.kind == "ball":
            Wc = constraint.project(ug + Wc) - ug
        # keep a warm slice only if it does not raise the energy above the
        # cold start's, so premature stops still yield descent directions
        axes = tuple(range(1, Wc.ndim))
        q = (0.5 * Wc * op.apply(Wc) + b * Wc).sum(axis=axes)
        keep = (q <= 0.0).reshape((-1,) + (1,) * (Wc.ndim - 1))
        W0 = np.where(keep, Wc, 0.0)
    W, sweeps, last = _pgs(op, b, W0, ug, constraint, tol, max_sweeps, omega)
    Wf = op.flat_shaped(W)
    if constraint.kind == "unconstrained":
        Wf = Wf - op.weighted_mean(Wf)[..., None, :]
    return u + Wf, sweeps, last


def solve_obstacle_slice(
    grid: Grid,
    gradI_slice,
    u_slice,
    constraint: ConstraintSet,
    tol=1e-10,
    max_sweeps=100_000,
    omega=None,
) -> ObstacleSolution:
    """Feasible descent direction for one time slice; see module docstring."""
    U, sweeps, last = solve_obstacle_slices(
        grid,
        np.asarray(gradI_slice, dtype=float)[None],
        np.asarray(u_slice, dtype=float)[None],
        constraint,
        tol=tol,
        max_sweeps=max_sweeps,
        omega=omega,
    )
    U = U[0]
    inner = descent_inner_product(grid, gradI_slice, U, u_slice)
    return ObstacleSolution(U_slice=U, iterations=sweeps, residual=last, descent_inner=inner)


def poisson_direction_batch(grid: Grid, gradI, tol=1e-12, max_iter=None):
    """Unconstrained directions: solve K U = -M r0 by conjugate gradients.

    gradI has shape (S, num_nodes, m); component fields are independent
    scalar Poisson problems solved as one batch. Pure Neumann is singular,
    so the right-hand side is mean-corrected per component and the returned
    field has weighted mean zero: constant components of gradI are
    annihilated (reported limitation of the Neumann box).
    """
    op = _operator(grid)
    gradI = np.asarray(gradI, dtype=float)
    S, nn, m = gradI.shape
    r0 = gradI - op.weighted_mean(gradI)[..., None, :]
    b = -(op.grid_shaped(r0) * op.mass)
    # batch the S slices and m components together as scalar fields
    b2 = np.moveaxis(b, -1, 1).reshape((S * m,) + grid.shape + (1,))
    x = np.zeros_like(b2)
    r = b2.copy()
    bnorm = np.sqrt((b2 * b2).sum(axis=tuple(range(1, b2.ndim))))
    floor = 1e-300
    if np.all(bnorm == 0.0):
        return np.zeros_like(gradI)
    p = r.copy()
    rz = (r * r).sum(axis=tuple(range(1, b2.ndim)))
    if max_iter is None:
        max_iter = 20 * nn
    axes = tuple(range(1, b2.ndim))
    for it in range(1, max_iter + 1):
        Ap = op.apply(p)
        pAp = (p * Ap).sum(axis=axes)
        alpha = np.where(pAp > floor, rz / np.maximum(pAp, floor), 0.0)
        sh = (-1,) + (1,) * (b2.ndim - 1)
        x = x + alpha.reshape(sh) * p
        r = r - alpha.reshape(sh) * Ap
        rz_new = (r * r).sum(axis=axes)
        rel = np.sqrt(rz_new) / np.maximum(bnorm, floor)
        if float(rel.max()) <= tol:
            break
        beta = np.where(rz > floor, rz_new / np.maximum(rz, floor), 0.0)
        p = r + beta.reshape(sh) * p
        rz = rz_new
    else:
        raise PoissonConvergenceError(float(rel.max()), max_iter)
    U = np.moveaxis(x.reshape((S, m) + grid.shape + (1,))[..., 0], 1, -1)
    Uf = U.reshape(S, nn, m)
    return Uf - _operator(grid).weighted_mean(Uf)[..., None, :]


def poisson_direction(grid: Grid, gradI_slice, tol=1e-12, max_iter=None):
    """Single-slice unconstrained direction; see :func:`poisson_direction_batch`."""
    return poisson_direction_batch(
        grid, np.asarray(gradI_slice, dtype=float)[None], tol=tol, max_iter=max_iter
    )[0]


def descent_inner_product(grid: Grid, gradI_slice, U_slice, u_slice=None):
    """Trapezoidal quadrature of gradI . (U - u) over the box."""
    gradI_slice = np.asarray(gradI_slice, dtype=float)
    D = np.asarray(U_slice, dtype=float)
    if u_slice is not None:
        D = D - np.asarray(u_slice, dtype=float)
    w = grid.quadrature_weights()
    return float(np.einsum("n,nc,nc->", w, gradI_slice, D))


def gradient_energy(grid: Grid, W_slice):
    """Discrete |grad W|^2 energy (the stiffness quadratic form W K W)."""
    op = _operator(grid)
    Wg = op.grid_shaped(np.asarray(W_slice, dtype=float)[None])[0]
    return float((Wg * op.apply(Wg)).sum())


def complementarity_residual(grid: Grid, gradI_slice, U_slice, u_slice, constraint):
    """Projected-stencil residual of the discrete variational inequality.

    Zero iff every node either satisfies the unconstrained stencil equation
    or sits on the boundary of K with the residual pointing outward. Measured
    as the diagonally scaled projected-gradient fixed-point gap, so it is
    comparable to the nodal-update stopping metric.
    """
    op = _operator(grid)
    U = np.asarray(U_slice, dtype=float)
    u = np.asarray(u_slice, dtype=float)
    r = np.asarray(gradI_slice, dtype=float)
    if constraint.kind == "unconstrained":
        r = r - op.weighted_mean(r)[None, :]
    W = op.grid_shaped((U - u)[None])[0]
    G = op.apply(W) + op.grid_shaped(r[None])[0] * op.mass
    step = op.flat_shaped((W - G / op.diag)[None])[0]
    projected = constraint.project(u + step)
    return float(np.abs(U - projected).max())
