"""Independent ground-truth generators for cross-checking the solvers.

None of these share discretization machinery with the descent path: the
variational integrand is evaluated by constrained minimization over the
control space, the Hamiltonian minimizer by grid scan plus polish, and the
value function by brute-force backward induction with one-step Euler
transitions. They are accuracy-limited oracles with tolerances stated per
test, never production solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from .grids import Grid, GridField, TimeGrid

__all__ = [
    "PhiResult",
    "phi_eval",
    "hamiltonian_argmin",
    "DPValue",
    "dp_solve",
    "OpenLoopReport",
    "open_loop_consistency",
]


@dataclass
class PhiResult:
    value: float  # math.inf marks unattainable velocity
    argmin: np.ndarray | None


def _control_lattice(constraint, control_dim, resolution, span=2.0):
    """Deterministic control sample lattice covering K (or a default box)."""
    if constraint.kind == "box":
        axes = [np.linspace(constraint.lo[j], constraint.hi[j], resolution) for j in range(control_dim)]
    elif constraint.kind == "ball":
        axes = [
            np.linspace(constraint.center[j] - constraint.radius,
                        constraint.center[j] + constraint.radius, resolution)
            for j in range(control_dim)
        ]
    else:
        axes = [np.linspace(-span, span, resolution) for _ in range(control_dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    if constraint.kind == "ball":
        pts = pts[constraint.contains(pts, tol=1e-12)]
    return pts


def phi_eval(problem, x, xi, control_grid_resolution=41, tol=1e-10):
    """Variational integrand: minimum running cost over controls realizing
    the velocity xi = f(x, u), for control-affine dynamics.

    The affine structure f(x, u) = a(x) + B(x) u is probed numerically
    (a = f(x, 0), B = f_u(x, 0)); the feasible controls form an affine
    subspace. Unreachable velocities yield an infinite marker value. On a
    nontrivial null space the minimization runs over the subspace
    parametrization (exact Newton step for control-quadratic costs,
    projected-gradient polish otherwise) and is cross-checked against a
    brute-force lattice scan at the stated resolution.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    n, m = problem.state_dim, problem.control_dim
    X = x[None, :]
    u0 = np.zeros((1, m))
    a = problem.f_batch(X, u0)[0]
    B = problem.fu_batch(X, u0)[0]
    # control-affineness probe
    uprobe = np.ones((1, m)) * 0.37
    lin = a + B @ uprobe[0]
    if not np.allclose(problem.f_batch(X, uprobe)[0], lin, rtol=1e-7, atol=1e-9):
        raise ValueError("phi_eval requires control-affine dynamics f = a(x) + B(x) u")
    z = xi - a
    # particular solution / reachability via least squares
    up, res, rank, sv = np.linalg.lstsq(B, z, rcond=None)
    if not np.allclose(B @ up, z, rtol=1e-8, atol=1e-10):
        return PhiResult(math.inf, None)
    # null-space basis
    _, s, Vt = np.linalg.svd(B)
    tol_rank = max(B.shape) * np.finfo(float).eps * (s[0] if s.size else 1.0)
    null = Vt[(s > tol_rank).sum():].T if Vt.size else np.zeros((m, 0))
    if null.shape[1] == 0:
        if problem.constraint.contains(up, tol=1e-9):
            uopt = problem.constraint.project(up)
            return PhiResult(float(problem.F_batch(X, uopt[None, :])[0]), uopt)
        return PhiResult(math.inf, None)

    def cost(u):
        return float(problem.F_batch(X, u[None, :])[0])

    def grad(u):
        return problem.Fu_batch(X, u[None, :])[0]

    u = up.copy()
    if problem.constraint.kind == "unconstrained":
        # Newton in the null-space coordinates; exact when F is quadratic in u
        for _ in range(50):
            gw = null.T @ grad(u)
            Hw = np.empty((null.shape[1], null.shape[1]))
            delta = 1e-6
            for j in range(null.shape[1]):
                Hw[:, j] = null.T @ (
                    grad(u + delta * null[:, j]) - grad(u - delta * null[:, j])
                ) / (2 * delta)
            try:
                step = np.linalg.solve(Hw, gw)
            except np.linalg.LinAlgError:
                step = gw
            u = u - null @ step
            if np.linalg.norm(null.T @ grad(u)) < tol:
                break
    else:
        # projected gradient along the subspace, re-projected to the subspace
        alpha = 0.5 / max(1.0, np.abs(grad(u)).max())
        for _ in range(500):
            u_new = problem.constraint.project(u - alpha * (null @ (null.T @ grad(u))))
            u_new = up + null @ (null.T @ (u_new - up))
            if np.linalg.norm(u_new - u) < tol:
                u = u_new
                break
            u = u_new
    # brute-force cross-check on the control lattice restricted to the subspace
    lattice = _control_lattice(problem.constraint, m, control_grid_resolution)
    onsub = lattice[np.linalg.norm((lattice - up) @ (np.eye(m) - null @ null.T), axis=1) < 1e-8]
    best = cost(u)
    if onsub.shape[0]:
        costs = problem.F_batch(np.repeat(X, onsub.shape[0], axis=0), onsub)
        k = int(np.argmin(costs))
        if costs[k] < best:
            best, u = float(costs[k]), onsub[k]
    if not problem.constraint.contains(u, tol=1e-9):
        return PhiResult(math.inf, None)
    return PhiResult(best, u)


def hamiltonian_argmin(problem, p, x, control_grid_resolution=41, sign="minus",
                       scan_span=4.0, polish_iters=200):
    """Minimize the Hamiltonian over K at one (p, x) pair.

    ``sign='minus'`` minimizes F(x, v) - p . f(x, v) (the convention used by
    the descent engine); ``sign='plus'`` minimizes F + p . f (the classical
    value-function convention). Compact K: coarse lattice scan followed by
    projected-gradient polish. Unconstrained K: damped Newton from zero with
    divergence detection for non-coercive costs.
    """
    if sign not in ("minus", "plus"):
        raise ValueError("sign must be 'minus' or 'plus'")
    s = -1.0 if sign == "minus" else 1.0
    p = np.atleast_1d(np.asarray(p, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    X = x[None, :]
    m = problem.control_dim

    def value_batch(U):
        return problem.F_batch(np.repeat(X, U.shape[0], axis=0), U) + s * (
            problem.f_batch(np.repeat(X, U.shape[0], axis=0), U) @ p
        )

    def grad(u):
        U = u[None, :]
        return problem.Fu_batch(X, U)[0] + s * (
            p @ problem.fu_batch(X, U)[0]
        )

    if problem.constraint.is_compact:
        lattice = _control_lattice(problem.constraint, m, control_grid_resolution)
        vals = value_batch(lattice)
        u = lattice[int(np.argmin(vals))].copy()
        alpha = None
        for _ in range(polish_iters):
            g = grad(u)
            if alpha is None:
                alpha = 0.1 / max(1.0, np.abs(g).max())
            u_new = problem.constraint.project(u - alpha * g)
            if np.linalg.norm(u_new - u) < 1e-12:
                u = u_new
                break
            if value_batch(u_new[None, :])[0] > value_batch(u[None, :])[0]:
                alpha *= 0.5
            else:
                u = u_new
        return float(value_batch(u[None, :])[0]), u

    # unconstrained: damped Newton with finite-difference curvature
    u = np.zeros(m)
    delta = 1e-5
    for _ in range(200):
        g = grad(u)
        H = np.empty((m, m))
        for j in range(m):
            e = np.zeros(m)
            e[j] = delta
            H[:, j] = (grad(u + e) - grad(u - e)) / (2 * delta)
        try:
            evals = np.linalg.eigvalsh(0.5 * (H + H.T))
            if evals.min() <= 1e-12:
                raise np.linalg.LinAlgError
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = g
        u_new = u - step
        if np.linalg.norm(u_new) > scan_span * 1e6 or not np.all(np.isfinite(u_new)):
            raise ValueError("hamiltonian appears unbounded below over unconstrained controls")
        if np.linalg.norm(u_new - u) < 1e-12:
            u = u_new
            break
        u = u_new
    return float(value_batch(u[None, :])[0]), u


@dataclass
class DPValue:
    """Brute-force value function and policy on a (time, state) grid."""

    grid: Grid
    time_grid: TimeGrid
    control_points: np.ndarray  # (num_controls, m), fixed scan order
    values: np.ndarray  # (steps+1, num_nodes)
    policy: np.ndarray  # (steps+1, num_nodes, m)

    def value_at(self, t, x):
        k, theta = self.time_grid.locate(t)
        v = (1.0 - theta) * self.values[k] + theta * self.values[min(k + 1, self.time_grid.steps)]
        return float(self.grid.interp_slice(v[:, None], np.asarray(x, dtype=float))[0])

    def policy_at(self, t, x):
        k, theta = self.time_grid.locate(t)
        pol = (1.0 - theta) * self.policy[k] + theta * self.policy[min(k + 1, self.time_grid.steps)]
        return self.grid.interp_slice(pol, np.asarray(x, dtype=float))

    def save_csv(self, path):
        from .grids import save_field_csv

        m = self.policy.shape[-1]
        field = GridField(self.grid, self.time_grid, 1 + m,
                          np.concatenate([self.values[..., None], self.policy], axis=-1))
        save_field_csv(field, path)


def dp_solve(problem, state_grid: Grid, control_points, time_grid: TimeGrid) -> DPValue:
    """Backward induction with one-step Euler transitions.

    v(T, .) = g; one step earlier,
    v(t, x) = min over the control lattice of dt F(x, u) + v(t+dt, x + dt f(x, u)),
    with multilinear interpolation of the successor value (clamped at the
    box, sharing the field convention). Argmin ties break toward the lowest
    control index. Exponential in the state dimension by design; refuse N > 2.
    """
    if state_grid.dim > 2:
        raise ValueError("the DP oracle is limited to state dimension <= 2")
    control_points = np.atleast_2d(np.asarray(control_points, dtype=float))
    X = state_grid.node_coordinates()
    nn = state_grid.num_nodes
    dt = time_grid.dt
    values = np.empty((time_grid.steps + 1, nn))
    policy = np.zeros((time_grid.steps + 1, nn, problem.control_dim))
    values[time_grid.steps] = problem.g_batch(X)
    # terminal policy: argmin of F(x, .) alone, for reporting symmetry
    for k in range(time_grid.steps - 1, -1, -1):
        vnext = values[k + 1]
        best = np.full(nn, np.inf)
        best_idx = np.zeros(nn, dtype=np.int64)
        for ci in range(control_points.shape[0]):
            U = np.broadcast_to(control_points[ci], (nn, problem.control_dim))
            xn = state_grid.clamp(X + dt * problem.f_batch(X, U))
            cost = dt * problem.F_batch(X, U) + state_grid.interp_slice(
                vnext[:, None], xn
            )[:, 0]
            better = cost < best
            best = np.where(better, cost, best)
            best_idx = np.where(better, ci, best_idx)
        values[k] = best
        policy[k] = control_points[best_idx]
    policy[time_grid.steps] = policy[time_grid.steps - 1]
    return DPValue(state_grid, time_grid, control_points, values, policy)


@dataclass
class OpenLoopReport:
    max_deviation: float
    times: np.ndarray
    deviations: np.ndarray


def open_loop_consistency(problem, feedback: GridField, dp: DPValue, t, y) -> OpenLoopReport:
    """Compare the closed-loop control record against the DP policy along
    the same path.

    Integrates x' = f(x, u(s, x)) from (t, y) under ``feedback`` and reports
    the worst deviation between the recorded controls and the DP-oracle
    policy sampled at the same (s, x(s)).
    """
    from .flow import integrate_flow

    traj = integrate_flow(problem, feedback, t, np.atleast_1d(y))
    devs = np.empty(traj.times.size)
    for k, s in enumerate(traj.times):
        pol = dp.policy_at(s, traj.states[k])
        devs[k] = float(np.abs(traj.controls[k] - pol).max())
    return OpenLoopReport(float(devs.max()), traj.times, devs)
