"""Iterative descent on the feedback field.

Each iteration solves the costate transport system for the current field,
assembles the gradient field

    gradI(u)(t, x) = F_u(x, u(t, x)) - p(t, x) f_u(x, u(t, x)),

builds a per-time-slice direction (obstacle problem for constrained sets,
Poisson problem for unconstrained ones, or the pointwise Hamiltonian
shortcut), and updates the field with a backtracking Armijo line search on
the ensemble objective. Constrained modes move along the convex
combination u + eps (U - u), which keeps every node inside K; the
unconstrained Poisson mode moves along u + eps U.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .costate import solve_costate
from .flow import (
    ensemble_objective,
    integrate_flow_batch,
    quadrature_along,
)
from .grids import Grid, GridField, TimeGrid
from .obstacle import (
    descent_inner_product,
    poisson_direction_batch,
    solve_obstacle_slices,
)

__all__ = [
    "DescentConfig",
    "DescentReport",
    "DirectionalDerivativeReport",
    "gradient_field",
    "stationarity_residual",
    "make_ensemble",
    "gaussian_bump_direction",
    "directional_derivative_check",
    "pointwise_hamiltonian_field",
    "run_descent",
]


@dataclass
class DescentConfig:
    """Tunables of the descent loop. Defaults suit desk-scale problems."""

    mode: str = "poisson"  # 'obstacle' | 'poisson' | 'pointwise'
    max_iterations: int = 200
    stationarity_tol: float = 1e-3
    eps_init: float = 1.0
    eps_min: float = 1e-7
    eps_max: float = 16.0  # step-growth cap, unconstrained modes only
    armijo_c1: float = 1e-4
    backtrack_factor: float = 0.5
    line_search_slack: float = 1e-12
    obstacle_tol: float = 1e-9
    obstacle_max_sweeps: int = 200_000
    obstacle_omega: float | None = None  # None = near-optimal SOR for the grid
    poisson_tol: float = 1e-12
    poisson_max_iter: int | None = None
    pointwise_tol: float = 1e-11
    pointwise_max_iter: int = 2000
    interior_fraction: float = 0.5

    def validate(self):
        problems = []
        if self.mode not in ("obstacle", "poisson", "pointwise"):
            problems.append(f"descent.mode must be obstacle|poisson|pointwise, got {self.mode!r}")
        for name in (
            "stationarity_tol",
            "eps_init",
            "eps_min",
            "eps_max",
            "armijo_c1",
            "backtrack_factor",
            "obstacle_tol",
            "poisson_tol",
            "pointwise_tol",
        ):
            if getattr(self, name) <= 0:
                problems.append(f"descent.{name} must be positive")
        if self.obstacle_omega is not None and not 0.0 < self.obstacle_omega < 2.0:
            problems.append("descent.obstacle_omega must lie in (0, 2)")
        if self.max_iterations < 1:
            problems.append("descent.max_iterations must be >= 1")
        if not 0.0 < self.interior_fraction <= 1.0:
            problems.append("descent.interior_fraction must lie in (0, 1]")
        if not 0.0 < self.backtrack_factor < 1.0:
            problems.append("descent.backtrack_factor must lie in (0, 1)")
        return problems


@dataclass
class DescentReport:
    """Per-iteration record of the run.

    Row 0 is the initial state (eps and inner product zero); each further
    row is one accepted iteration. ``status`` is 'converged', 'stalled' or
    'max_iterations'.
    """

    iterations: list = dc_field(default_factory=list)
    objectives: list = dc_field(default_factory=list)
    epsilons: list = dc_field(default_factory=list)
    descent_inners: list = dc_field(default_factory=list)
    max_slice_inners: list = dc_field(default_factory=list)
    residuals: list = dc_field(default_factory=list)
    seconds: list = dc_field(default_factory=list)
    status: str = "max_iterations"
    max_gradient_norm: float = 0.0  # discrete Lipschitz monitor of the final field
    final_stationarity: float = float("inf")  # residual at loop exit

    def append(self, it, objective, eps, inner, max_slice_inner, residual, secs):
        self.iterations.append(it)
        self.objectives.append(objective)
        self.epsilons.append(eps)
        self.descent_inners.append(inner)
        self.max_slice_inners.append(max_slice_inner)
        self.residuals.append(residual)
        self.seconds.append(secs)

    @property
    def final_objective(self):
        return self.objectives[-1]

    @property
    def final_residual(self):
        return self.final_stationarity

    @property
    def first_residual(self):
        return self.residuals[0]

    def save_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,objective,eps,descent_inner,residual,seconds\n")
            for k in range(len(self.iterations)):
                row = (
                    self.iterations[k],
                    self.objectives[k],
                    self.epsilons[k],
                    self.descent_inners[k],
                    self.residuals[k],
                    self.seconds[k],
                )
                fh.write("%d," % row[0] + ",".join("%.17g" % v for v in row[1:]) + "\n")


def gradient_field(problem, u: GridField, p: GridField) -> GridField:
    """Nodewise F_u(x, u) - p . f_u(x, u) as a GridField with m components."""
    grid, tg = u.grid, u.time_grid
    X = grid.node_coordinates()
    out = GridField.zeros(grid, tg, problem.control_dim)
    for k in range(tg.steps + 1):
        Fu = problem.Fu_batch(X, u.values[k])
        fu = problem.fu_batch(X, u.values[k])
        out.values[k] = Fu - np.einsum("bn,bnm->bm", p.values[k], fu)
    return out


def stationarity_residual(problem, u: GridField, gradI: GridField, mask=None):
    """Max projected-gradient norm over the measured region and all slices.

    For unconstrained K this reduces to the max gradient magnitude.
    """
    if mask is None:
        mask = np.ones(u.grid.num_nodes, dtype=bool)
    diff = u.values[:, mask, :] - problem.constraint.project(
        u.values[:, mask, :] - gradI.values[:, mask, :]
    )
    return float(np.abs(diff).max())


def make_ensemble(grid: Grid, points_per_axis, fraction=0.5, t=0.0):
    """Deterministic lattice of start states covering the central ``fraction``
    of the box, paired with the common start time."""
    axes = []
    center = 0.5 * (grid.lo + grid.hi)
    half = 0.5 * fraction * (grid.hi - grid.lo)
    for a in range(grid.dim):
        axes.append(np.linspace(center[a] - half[a], center[a] + half[a], points_per_axis))
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    return [(t, pts[i]) for i in range(pts.shape[0])]


def gaussian_bump_direction(grid: Grid, time_grid: TimeGrid, components, rng, amplitude=1.0):
    """Smooth random test direction: Gaussian bump in x, smooth ramp in t."""
    center = rng.uniform(grid.lo + 0.25 * (grid.hi - grid.lo), grid.hi - 0.25 * (grid.hi - grid.lo))
    width = rng.uniform(0.1, 0.25) * (grid.hi - grid.lo)
    amp = amplitude * rng.uniform(0.5, 1.0, size=components) * rng.choice([-1.0, 1.0], size=components)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    X = grid.node_coordinates()
    bump = np.exp(-0.5 * (((X - center) / width) ** 2).sum(axis=1))
    field = GridField.zeros(grid, time_grid, components)
    for k, t in enumerate(time_grid.times):
        ramp = 1.0 + 0.5 * np.sin(2.0 * np.pi * t / time_grid.T + phase)
        field.values[k] = ramp * bump[:, None] * amp[None, :]
    return field


@dataclass
class DirectionalDerivativeReport:
    fd_values: np.ndarray
    adjoint_values: np.ndarray
    rel_errors: np.ndarray
    skipped: list
    worst_rel_error: float


def _adjoint_directional_derivative(problem, u, gradI, direction, t, Y):
    """Along-trajectory integral of gradI . direction for a batch of starts."""
    times, states, _ = integrate_flow_batch(problem, u, t, Y)
    K = times.size
    vals = np.empty((K, states.shape[1]))
    for k in range(K):
        g = gradI.interpolate_batch(times[k], states[k])
        d = direction.interpolate_batch(times[k], states[k])
        vals[k] = (g * d).sum(axis=1)
    return quadrature_along(times, vals)


def directional_derivative_check(
    problem, u: GridField, direction: GridField, samples, eps_fd=1e-4
) -> DirectionalDerivativeReport:
    """Central finite difference of the cost versus the adjoint integral.

    For each (t, y) sample compares (I(u + eps U) - I(u - eps U)) / (2 eps)
    with the along-trajectory integral of gradI(u) . U. Samples whose
    perturbed flow blows up are skipped and flagged.
    """
    from .flow import FlowBlowUpError, cost_functional

    p = solve_costate(problem, u)
    gradI = gradient_field(problem, u, p)
    plus = GridField(u.grid, u.time_grid, u.components, u.values + eps_fd * direction.values)
    minus = GridField(u.grid, u.time_grid, u.components, u.values - eps_fd * direction.values)
    fd_vals, adj_vals, rels, skipped = [], [], [], []
    for i, (t, y) in enumerate(samples):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        try:
            fd = (cost_functional(problem, plus, t, y) - cost_functional(problem, minus, t, y)) / (
                2.0 * eps_fd
            )
        except FlowBlowUpError:
            skipped.append(i)
            continue
        adj = float(_adjoint_directional_derivative(problem, u, gradI, direction, t, y[None, :])[0])
        fd_vals.append(fd)
        adj_vals.append(adj)
        rels.append(abs(fd - adj) / max(abs(fd), abs(adj), 1e-14))
    rels = np.asarray(rels)
    return DirectionalDerivativeReport(
        fd_values=np.asarray(fd_vals),
        adjoint_values=np.asarray(adj_vals),
        rel_errors=rels,
        skipped=skipped,
        worst_rel_error=float(rels.max()) if rels.size else 0.0,
    )


def pointwise_hamiltonian_field(problem, u: GridField, p: GridField, tol=1e-11, max_iter=2000):
    """Shortcut direction: nodewise argmin over K of F(x, v) - p . f(x, v).

    Solved by projected gradient iterations batched over every node and
    slice, warm-started at u. The result can be rougher in x than the
    obstacle solution (its regularity inherits from the costate), which is
    why it is labeled regularity-unsafe.
    """
    grid, tg = u.grid, u.time_grid
    X = grid.node_coordinates()
    S = tg.steps + 1
    XX = np.tile(X, (S, 1))
    V = u.values.reshape(S * grid.num_nodes, problem.control_dim).copy()
    P = p.values.reshape(S * grid.num_nodes, problem.state_dim)

    def grad(V):
        Fu = problem.Fu_batch(XX, V)
        fu = problem.fu_batch(XX, V)
        return Fu - np.einsum("bn,bnm->bm", P, fu)

    # curvature probe for the step size; exact for control-quadratic costs
    probe = np.zeros_like(V[:1])
    L = 1e-12
    for j in range(problem.control_dim):
        e = np.zeros_like(probe)
        e[0, j] = 1e-3
        g1 = grad(V[:1] + e)[0, j]
        g0 = grad(V[:1] - e)[0, j]
        L = max(L, abs(g1 - g0) / 2e-3)
    alpha = 1.0 / (1.2 * L)
    for _ in range(max_iter):
        Vn = problem.constraint.project(V - alpha * grad(V))
        delta = float(np.abs(Vn - V).max())
        V = Vn
        if delta < tol:
            break
    return GridField(grid, tg, problem.control_dim, V.reshape(u.values.shape))


def _ensemble_dd(problem, u, gradI, D_field, samples):
    """Directional derivative of the ensemble objective along D_field,
    via the adjoint identity on each sample's trajectory."""
    vals = np.empty(len(samples))
    i = 0
    while i < len(samples):
        t0 = samples[i][0]
        j = i
        while j < len(samples) and samples[j][0] == t0:
            j += 1
        Y = np.stack([np.atleast_1d(np.asarray(samples[k][1], dtype=float)) for k in range(i, j)])
        vals[i:j] = _adjoint_directional_derivative(problem, u, gradI, D_field, t0, Y)
        i = j
    return float(np.mean(vals))


def run_descent(problem, u0: GridField, config: DescentConfig, samples):
    """Run the iterative scheme from a feasible initial field.

    Returns (field, report). The loop stops when the stationarity residual
    over the measured interior region drops below tolerance ('converged'),
    when no step of at least eps_min improves the ensemble objective
    ('stalled'), or at the iteration cap.
    """
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    if config.mode == "poisson" and problem.constraint.kind != "unconstrained":
        raise ValueError("poisson mode requires an unconstrained control set")
    if not np.all(problem.constraint.contains(u0.values, tol=0.0)):
        raise ValueError("initial field has nodes outside the constraint set")

    grid, tg = u0.grid, u0.time_grid
    mask = grid.interior_mask(config.interior_fraction)
    constrained = config.mode in ("obstacle", "pointwise")
    u = u0.copy()
    report = DescentReport()
    t_start = time.perf_counter()
    J = ensemble_objective(problem, u, samples)
    w = grid.quadrature_weights()
    eps_prev = None
    W_prev = None  # warm start carried between obstacle solves

    for it in range(config.max_iterations + 1):
        p = solve_costate(problem, u, cfl_warn=(it == 0))
        gradI = gradient_field(problem, u, p)
        residual = stationarity_residual(problem, u, gradI, mask)
        report.final_stationarity = residual
        if it == 0:
            report.append(0, J, 0.0, 0.0, 0.0, residual, time.perf_counter() - t_start)
        if residual <= config.stationarity_tol:
            report.status = "converged"
            break
        if it == config.max_iterations:
            report.status = "max_iterations"
            break

        if config.mode == "poisson":
            D_vals = poisson_direction_batch(
                grid, gradI.values, tol=config.poisson_tol, max_iter=config.poisson_max_iter
            )
        elif config.mode == "obstacle":
            U_vals, _, _ = solve_obstacle_slices(
                grid,
                gradI.values,
                u.values,
                problem.constraint,
                tol=config.obstacle_tol,
                max_sweeps=config.obstacle_max_sweeps,
                omega=config.obstacle_omega,
                warm_start=W_prev,
            )
            D_vals = U_vals - u.values
            W_prev = D_vals
        else:
            U_field = pointwise_hamiltonian_field(
                problem, u, p, tol=config.pointwise_tol, max_iter=config.pointwise_max_iter
            )
            D_vals = U_field.values - u.values

        inners = np.einsum("n,snc,snc->s", w, gradI.values, D_vals)
        inner_sum = float(inners.sum() * tg.dt)
        max_slice_inner = float(inners.max())
        D_field = GridField(grid, tg, u.components, D_vals)
        dd = _ensemble_dd(problem, u, gradI, D_field, samples)

        if constrained:
            eps = 1.0
        else:
            eps = config.eps_init if eps_prev is None else min(2.0 * eps_prev, config.eps_max)
        accepted = False
        while eps >= config.eps_min:
            trial_vals = u.values + eps * D_vals
            if constrained:
                trial_vals = problem.constraint.project(trial_vals)
            trial = GridField(grid, tg, u.components, trial_vals)
            J_trial = ensemble_objective(problem, trial, samples)
            if J_trial <= J + config.armijo_c1 * eps * min(dd, 0.0) + config.line_search_slack:
                accepted = True
                break
            eps *= config.backtrack_factor
        if not accepted:
            report.status = "stalled"
            break

        u = trial
        J = J_trial
        eps_prev = eps
        report.append(
            it + 1, J, eps, inner_sum, max_slice_inner, residual, time.perf_counter() - t_start
        )

    report.max_gradient_norm = u.max_gradient_norm()
    return u, report
