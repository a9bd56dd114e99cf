"""Backward semi-Lagrangian solver for the costate transport system.

For a fixed feedback field u(t, x), the costate p(t, x) solves the linear
first-order system

    p_t + (f . grad) p = S(t, x) - p J(t, x),

where J = f_x + f_u grad(u) and S = F_x + F_u grad(u) are the total
spatial derivatives of the closed-loop dynamics and running cost, with
terminal data p(T, .) = grad g (zero when the terminal cost is folded
into F). Each backward step traces the characteristic forward with an RK2
midpoint rule, interpolates p on the later slice, and closes the
along-characteristic ODE with the (implicit) trapezoidal rule; the linear
solve per node is exact.

Node updates within a time step are independent; the backward sweep in
time is sequential. Output is deterministic.
"""

from __future__ import annotations

import warnings

import numpy as np

from .grids import GridField

__all__ = ["CostateBlowUpError", "CFLAdvisory", "solve_costate", "costate_path_residual"]


class CostateBlowUpError(RuntimeError):
    def __init__(self, time):
        super().__init__(f"costate blow-up (non-finite values) at time slice t={time:.6g}")
        self.time = time


class CFLAdvisory(UserWarning):
    """Advisory only: semi-Lagrangian steps remain stable past CFL 1, but
    long characteristic feet degrade interpolation accuracy."""


def _source_and_jacobian(problem, X, U, grad_u):
    """Total spatial derivative fields at given states/controls.

    grad_u has shape (B, m, N). Returns S (B, N) and J (B, N, N) with
    J[b] = f_x + f_u grad_u and S[b] = F_x + F_u grad_u.
    """
    fx = problem.fx_batch(X, U)
    fu = problem.fu_batch(X, U)
    Fx = problem.Fx_batch(X, U)
    Fu = problem.Fu_batch(X, U)
    J = fx + np.einsum("bnk,bkj->bnj", fu, grad_u)
    S = Fx + np.einsum("bk,bkj->bj", Fu, grad_u)
    return S, J


def solve_costate(problem, u: GridField, terminal_grad=None, cfl_warn=True) -> GridField:
    """Solve the costate system backward from t = T for the field ``u``.

    Parameters
    ----------
    problem : ControlProblem
    u : GridField
        Feedback field with m components on the full grid.
    terminal_grad : array (num_nodes, N), optional
        Terminal costate slice. Defaults to grad g sampled on the grid,
        which is identically zero for problems with the terminal cost
        folded into the running cost.

    Returns
    -------
    GridField with N components holding p(t, x).
    """
    grid, tg = u.grid, u.time_grid
    n = problem.state_dim
    X = grid.node_coordinates()
    p = GridField.zeros(grid, tg, n)
    if terminal_grad is None:
        terminal_grad = problem.grad_g_batch(X)
    p.values[tg.steps] = np.asarray(terminal_grad, dtype=float).reshape(grid.num_nodes, n)

    dt = tg.dt
    eye = np.eye(n)
    max_cfl = 0.0
    h_min = float(grid.spacing.min())

    # nodal data on the later slice k+1, reused as the loop marches down
    grad_u_next = u.spatial_gradient(tg.steps)
    for k in range(tg.steps - 1, -1, -1):
        t_k, t_k1 = tg.times[k], tg.times[k + 1]
        u_k = u.values[k]
        grad_u_k = u.spatial_gradient(k)
        v_k = problem.f_batch(X, u_k)
        max_cfl = max(max_cfl, float(np.abs(v_k).max()) * dt / h_min)

        # RK2 midpoint foot of the forward characteristic through (t_k, x)
        x_mid = grid.clamp(X + 0.5 * dt * v_k)
        u_mid = u.interpolate_batch(t_k + 0.5 * dt, x_mid)
        v_mid = problem.f_batch(x_mid, u_mid)
        x_f = grid.clamp(X + dt * v_mid)

        p_f = grid.interp_slice(p.values[k + 1], x_f)
        u_f = grid.interp_slice(u.values[k + 1], x_f)
        gu_f = grid.interp_slice(
            grad_u_next.reshape(grid.num_nodes, -1), x_f
        ).reshape(-1, problem.control_dim, n)
        S_f, J_f = _source_and_jacobian(problem, x_f, u_f, gu_f)
        S_k, J_k = _source_and_jacobian(problem, X, u_k, grad_u_k)

        # trapezoidal closure of p' = S - p J, implicit in the new slice:
        # p_new (I - dt/2 J_k) = p_f - dt/2 (S_k + S_f - p_f J_f)
        rhs = p_f - 0.5 * dt * (S_k + S_f - np.einsum("bi,bij->bj", p_f, J_f))
        A = eye[None, :, :] - 0.5 * dt * np.transpose(J_k, (0, 2, 1))
        p_new = np.linalg.solve(A, rhs[..., None])[..., 0]
        if not np.all(np.isfinite(p_new)):
            raise CostateBlowUpError(t_k)
        p.values[k] = p_new
        grad_u_next = grad_u_k

    if cfl_warn and max_cfl > 1.0:
        warnings.warn(
            f"characteristic feet travel up to {max_cfl:.2f} cells per step; "
            "consider refining the time grid",
            CFLAdvisory,
            stacklevel=2,
        )
    return p


def costate_path_residual(problem, u: GridField, p: GridField, trajectory):
    """Finite-difference residual of the along-characteristic costate ODE.

    Samples p along a stored closed-loop trajectory and measures
    max | d/ds p(s, x(s)) - (S - p J)(s, x(s)) | with central differences,
    which should shrink like O(dt). Diagnostic, not a solver component.
    """
    times, states = trajectory.times, trajectory.states
    K = times.size
    if K < 3:
        raise ValueError("trajectory too short for a residual estimate")
    pvals = np.stack([p.interpolate(times[k], states[k]) for k in range(K)])
    rhs = np.empty_like(pvals)
    for k in range(K):
        x = states[k][None, :]
        u_val = u.interpolate_batch(times[k], x)
        kk, theta = u.time_grid.locate(times[k])
        gu = u.spatial_gradient(kk)
        if theta > 0.0:
            gu = (1 - theta) * gu + theta * u.spatial_gradient(kk + 1)
        gu_x = u.grid.interp_slice(gu.reshape(u.grid.num_nodes, -1), x).reshape(
            1, problem.control_dim, problem.state_dim
        )
        S, J = _source_and_jacobian(problem, x, u_val, gu_x)
        rhs[k] = S[0] - pvals[k] @ J[0]
    dp = (pvals[2:] - pvals[:-2]) / (times[2:] - times[:-2])[:, None]
    return float(np.abs(dp - rhs[1:-1]).max())
