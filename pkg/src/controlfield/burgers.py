"""Backward Burgers equation by exact characteristics.

The scalar academic problem reduces to u_t + u u_x = 0 with data
prescribed at the final time, u(T, x) = f(x). Characteristics are straight
lines carrying the terminal value, so evaluating the classical solution at
(t, x) means inverting

    x = z + (t - T) f(z)

for the terminal foot z and returning f(z). The inversion is a safeguarded
Newton iteration inside an expanding bracket. Going backward from T, the
classical solution breaks down at

    t* = T - 1 / sup f'   (when sup f' > 0),

where characteristics cross; evaluation is refused at or before t*.
"""

from __future__ import annotations

import numpy as np

from .grids import Grid, GridField, TimeGrid

__all__ = [
    "BurgersSolution",
    "CharacteristicInversionError",
    "burgers_eval",
    "burgers_residual",
    "burgers_velocity_field",
    "verify_academic_feedback",
    "AcademicFeedbackReport",
]


class CharacteristicInversionError(RuntimeError):
    pass


class BurgersSolution:
    """Classical solution of the backward Burgers problem.

    Parameters
    ----------
    f, f_prime : callables accepting numpy arrays elementwise
        Terminal data and its derivative.
    T : float
        Terminal time.
    sup_f_prime : float, optional
        Analytic bound for sup f'. When omitted it is estimated by dense
        sampling of f' over ``sample_box`` at ``sample_resolution`` points
        (reported via the ``sup_estimate_resolution`` attribute).
    """

    def __init__(self, f, f_prime, T, sup_f_prime=None, sample_box=(-10.0, 10.0),
                 sample_resolution=100_001):
        self.f = f
        self.f_prime = f_prime
        self.T = float(T)
        self.sup_estimate_resolution = None
        if sup_f_prime is None:
            xs = np.linspace(sample_box[0], sample_box[1], sample_resolution)
            sup_f_prime = float(np.max(f_prime(xs)))
            self.sup_estimate_resolution = (sample_box, sample_resolution)
        self.sup_f_prime = float(sup_f_prime)
        if self.sup_f_prime > 0.0:
            self.blowup_time = self.T - 1.0 / self.sup_f_prime
        else:
            self.blowup_time = None

    def classical_at(self, t):
        if t > self.T + 1e-12:
            return False
        if self.blowup_time is None:
            return True
        return t > self.blowup_time + 1e-12


def _bracket_root(psi, x0, scale):
    """Expand an interval around x0 until psi changes sign."""
    lo, hi = x0 - scale, x0 + scale
    flo, fhi = psi(lo), psi(hi)
    for _ in range(80):
        if flo == 0.0:
            return lo, lo
        if fhi == 0.0:
            return hi, hi
        if flo * fhi < 0.0:
            return lo, hi
        width = hi - lo
        lo, hi = lo - width, hi + width
        flo, fhi = psi(lo), psi(hi)
    raise CharacteristicInversionError(
        "characteristic inversion failed: no sign change found "
        "(near blow-up or bad bracket configuration)"
    )


def burgers_eval(sol: BurgersSolution, t, x, newton_tol=1e-12, max_newton=60):
    """Classical solution value u(t, x) in the pre-blow-up regime.

    Solves x = z + (t - T) f(z) for the characteristic foot z by safeguarded
    Newton (bisection fallback on a bracketing interval) and returns f(z).
    """
    t = float(t)
    x = float(x)
    if not sol.classical_at(t):
        raise ValueError(
            f"classical solution unavailable at t={t:.6g}: blow-up time is "
            f"{sol.blowup_time!r}"
        )
    a = t - sol.T

    def psi(z):
        return z + a * sol.f(z) - x

    if a == 0.0:
        return float(sol.f(x))
    scale = max(1.0, abs(x))
    lo, hi = _bracket_root(psi, x, scale)
    if lo == hi:
        return float(sol.f(lo))
    z = x
    if not (lo <= z <= hi):
        z = 0.5 * (lo + hi)
    flo = psi(lo)
    for _ in range(max_newton):
        val = psi(z)
        if abs(val) <= newton_tol * max(1.0, abs(x)):
            return float(sol.f(z))
        if val * flo < 0.0:
            hi = z
        else:
            lo = z
        slope = 1.0 + a * sol.f_prime(z)
        zn = z - val / slope if slope != 0.0 else np.nan
        z = zn if lo < zn < hi else 0.5 * (lo + hi)
    val = psi(z)
    if abs(val) <= 1e-8 * max(1.0, abs(x)):
        return float(sol.f(z))
    raise CharacteristicInversionError(
        f"characteristic inversion failed at (t={t:.6g}, x={x:.6g}): residual {val:.3e}"
    )


def burgers_residual(sol: BurgersSolution, t, x, h_fd=1e-4, newton_tol=1e-12):
    """|u_t + u u_x| by central differences of the evaluated solution."""
    for pt in (t - h_fd, t + h_fd):
        if not sol.classical_at(pt):
            raise ValueError("finite-difference stencil leaves the classical regime")
    u = burgers_eval(sol, t, x, newton_tol)
    ut = (
        burgers_eval(sol, t + h_fd, x, newton_tol)
        - burgers_eval(sol, t - h_fd, x, newton_tol)
    ) / (2.0 * h_fd)
    ux = (
        burgers_eval(sol, t, x + h_fd, newton_tol)
        - burgers_eval(sol, t, x - h_fd, newton_tol)
    ) / (2.0 * h_fd)
    return abs(ut + u * ux)


def burgers_velocity_field(sol: BurgersSolution, grid: Grid, time_grid: TimeGrid,
                           newton_tol=1e-12) -> GridField:
    """Sample the Burgers velocity field v(t, x) on a grid (1-D only)."""
    if grid.dim != 1:
        raise ValueError("the backward Burgers solution is one-dimensional")
    field = GridField.zeros(grid, time_grid, 1)
    X = grid.node_coordinates()[:, 0]
    for k, t in enumerate(time_grid.times):
        field.values[k, :, 0] = [burgers_eval(sol, t, x, newton_tol) for x in X]
    return field


class AcademicFeedbackReport:
    def __init__(self, max_el_residual, max_terminal_residual, samples, flagged):
        self.max_el_residual = max_el_residual
        self.max_terminal_residual = max_terminal_residual
        self.samples = samples
        self.flagged = flagged


def verify_academic_feedback(f_scalar, f_scalar_prime, T, grid: Grid, time_grid: TimeGrid,
                             starts=None, newton_tol=1e-12):
    """Check that closed-loop paths of the Burgers-built feedback satisfy the
    variational optimality system of the academic problem.

    The Burgers solution is the optimal velocity field v; the matching
    control feedback is U(t, x) = v(t, x) - f(x). Trajectories x' = v are
    integrated with the standard flow routine; the report carries the worst
    second-difference residual of -(x' - f(x))' - x' f'(x) = 0 and the worst
    terminal defect |x'(T) - f(x(T))| (one-sided second-order difference).

    Starts whose horizon intersects the blow-up regime are flagged and
    skipped rather than evaluated.
    """
    from .flow import integrate_flow
    from .problems import academic_problem

    sol = BurgersSolution(f_scalar, f_scalar_prime, T)
    problem = academic_problem(f_scalar, f_scalar_prime, T)
    if starts is None:
        lo, hi = grid.lo[0], grid.hi[0]
        starts = np.linspace(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo), 5)
    flagged = []
    if not sol.classical_at(time_grid.t0):
        return AcademicFeedbackReport(np.nan, np.nan, list(starts), list(starts))

    velocity = burgers_velocity_field(sol, grid, time_grid, newton_tol)
    control = GridField(grid, time_grid, 1, velocity.values.copy())
    X = grid.node_coordinates()[:, 0]
    for k in range(time_grid.steps + 1):
        control.values[k, :, 0] -= f_scalar(X)

    dt = time_grid.dt
    max_el = 0.0
    max_term = 0.0
    for y in starts:
        traj = integrate_flow(problem, control, time_grid.t0, [float(y)])
        xs = traj.states[:, 0]
        # w = x' - f(x) along the path equals the recorded control
        w = traj.controls[:, 0]
        xprime = np.gradient(xs, dt)
        el = -np.gradient(w, dt)[1:-1] - xprime[1:-1] * f_scalar_prime(xs[1:-1])
        max_el = max(max_el, float(np.abs(el).max()))
        xp_T = (3.0 * xs[-1] - 4.0 * xs[-2] + xs[-3]) / (2.0 * dt)
        max_term = max(max_term, abs(xp_T - f_scalar(xs[-1])))
    return AcademicFeedbackReport(max_el, max_term, list(starts), flagged)
