"""Closed-loop flow integration and cost evaluation.

Trajectories solve x'(s) = f(x(s), u(s, x(s))) with classical RK4 locked to
the control field's time step; the cost functional is composite Simpson
quadrature of the running cost along the path plus the terminal cost.
"""

from __future__ import annotations

import numpy as np

from .grids import GridField

__all__ = [
    "Trajectory",
    "FlowBlowUpError",
    "integrate_flow",
    "integrate_flow_batch",
    "cost_functional",
    "cost_functional_batch",
    "ensemble_objective",
    "quadrature_along",
]


class FlowBlowUpError(RuntimeError):
    """Raised when a trajectory leaves the finite floats."""

    def __init__(self, time, detail=""):
        self.time = time
        msg = f"trajectory blow-up (non-finite state) at t={time:.6g}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Trajectory:
    """Closed-loop path: times (K,), states (K, N), controls (K, m).

    Controls are the field values interpolated along the path at the
    stored times.
    """

    def __init__(self, times, states, controls):
        self.times = np.asarray(times, dtype=float)
        self.states = np.asarray(states, dtype=float)
        self.controls = np.asarray(controls, dtype=float)

    def save_csv(self, path):
        n = self.states.shape[1]
        m = self.controls.shape[1]
        cols = ["s"] + [f"x{i+1}" for i in range(n)] + [f"u{j+1}" for j in range(m)]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(self.times.size):
                row = [self.times[k]] + list(self.states[k]) + list(self.controls[k])
                fh.write(",".join("%.17g" % v for v in row) + "\n")


def _time_nodes_from(field: GridField, t):
    """Integration times: t itself, then the field's time nodes after t."""
    tg = field.time_grid
    t = float(t)
    if t >= tg.T - 1e-14 * max(1.0, abs(tg.T)):
        return np.array([tg.T])
    k, theta = tg.locate(t)
    if theta == 0.0:
        return tg.times[k:]
    return np.concatenate(([t], tg.times[k + 1 :]))


def _velocity(problem, field, s, X):
    U = field.interpolate_batch(s, X)
    return problem.f_batch(X, U)


def integrate_flow_batch(problem, field: GridField, t, Y):
    """Integrate the closed loop for a batch of starts Y (B, N) from time t.

    Returns (times (K,), states (K, B, N), controls (K, B, m)). Raises
    :class:`FlowBlowUpError` naming the failure time and the first offending
    sample if any state leaves the finite floats.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    times = _time_nodes_from(field, t)
    K = times.size
    B = Y.shape[0]
    states = np.empty((K, B, problem.state_dim))
    controls = np.empty((K, B, problem.control_dim))
    states[0] = Y
    controls[0] = field.interpolate_batch(times[0], Y)
    x = Y.copy()
    for k in range(K - 1):
        s, s1 = times[k], times[k + 1]
        h = s1 - s
        v1 = _velocity(problem, field, s, x)
        v2 = _velocity(problem, field, s + 0.5 * h, x + 0.5 * h * v1)
        v3 = _velocity(problem, field, s + 0.5 * h, x + 0.5 * h * v2)
        v4 = _velocity(problem, field, s1, x + h * v3)
        x = x + (h / 6.0) * (v1 + 2.0 * v2 + 2.0 * v3 + v4)
        if not np.all(np.isfinite(x)):
            bad = int(np.argmax(~np.all(np.isfinite(x), axis=1)))
            raise FlowBlowUpError(s1, f"sample index {bad}, start {Y[bad].tolist()}")
        states[k + 1] = x
        controls[k + 1] = field.interpolate_batch(s1, x)
    return times, states, controls


def integrate_flow(problem, field: GridField, t, y) -> Trajectory:
    """Closed-loop trajectory from (t, y); see :func:`integrate_flow_batch`."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    times, states, controls = integrate_flow_batch(problem, field, t, y[None, :])
    return Trajectory(times, states[:, 0], controls[:, 0])


def quadrature_along(times, vals):
    """Integrate sampled values over ``times``.

    Composite Simpson on uniform spacing (with a 3/8 block when the
    interval count is odd); trapezoid fallback for non-uniform spacing.
    ``vals`` may carry trailing batch axes.
    """
    times = np.asarray(times, dtype=float)
    vals = np.asarray(vals, dtype=float)
    n = times.size - 1
    if n == 0:
        return np.zeros(vals.shape[1:])
    d = np.diff(times)
    if not np.allclose(d, d[0], rtol=1e-10, atol=1e-14):
        w = np.zeros(times.size)
        w[:-1] += 0.5 * d
        w[1:] += 0.5 * d
        return np.tensordot(w, vals, axes=(0, 0))
    h = d[0]
    if n == 1:
        return 0.5 * h * (vals[0] + vals[1])
    total = np.zeros(vals.shape[1:])
    end = n
    if n % 2 == 1:
        # Simpson 3/8 on the last three intervals, standard Simpson before
        end = n - 3
        tail = vals[end : end + 4]
        total = total + (3.0 * h / 8.0) * (tail[0] + 3.0 * tail[1] + 3.0 * tail[2] + tail[3])
    if end > 0:
        seg = vals[: end + 1]
        total = total + (h / 3.0) * (
            seg[0] + seg[-1] + 4.0 * seg[1:-1:2].sum(axis=0) + 2.0 * seg[2:-1:2].sum(axis=0)
        )
    return total


def cost_functional_batch(problem, field: GridField, t, Y):
    """Costs for a batch of starts: Simpson along each path plus terminal cost."""
    times, states, controls = integrate_flow_batch(problem, field, t, Y)
    K, B = states.shape[0], states.shape[1]
    Fvals = np.empty((K, B))
    for k in range(K):
        Fvals[k] = problem.F_batch(states[k], controls[k])
    run = quadrature_along(times, Fvals)
    return run + problem.g_batch(states[-1])


def cost_functional(problem, field: GridField, t, y):
    """I(u; t, y): running cost along the closed loop plus terminal cost."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return float(cost_functional_batch(problem, field, t, y[None, :])[0])


def ensemble_objective(problem, field: GridField, samples):
    """Mean of the cost functional over (t, y) samples, in fixed order.

    Consecutive samples sharing the same start time are evaluated as one
    batch; the reduction order is the sample order, so results are
    deterministic. Blow-ups are re-raised naming the failing sample.
    """
    if len(samples) == 0:
        raise ValueError("ensemble requires at least one (t, y) sample")
    costs = np.empty(len(samples))
    i = 0
    while i < len(samples):
        t0 = samples[i][0]
        j = i
        while j < len(samples) and samples[j][0] == t0:
            j += 1
        Y = np.stack([np.atleast_1d(np.asarray(samples[k][1], dtype=float)) for k in range(i, j)])
        try:
            costs[i:j] = cost_functional_batch(problem, field, t0, Y)
        except FlowBlowUpError as exc:
            raise FlowBlowUpError(exc.time, f"ensemble batch starting at sample {i}") from exc
        i = j
    return float(np.mean(costs))
