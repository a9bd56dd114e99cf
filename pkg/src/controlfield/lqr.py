"""Closed-form LQR oracle: derived matrices, Riccati-type ODE, feedback law.

For dynamics x' = Ax + Bu with quadratic costs, define

    C = (B R^-1 B*)^-1,   D = H - C A,   E = Q + A* C A.

The optimal velocity field is u(t, x) = F(t) x with F solving the
Riccati-type matrix ODE

    F' + F^2 + 2 C^-1 D_a F = C^-1 E,   F(T) = -C^-1 D,

where D_a = (D - D^T)/2. The coupling term comes from the cross term of
the quadratic variational integrand phi(x, xi) = 1/2 xi'C xi + xi'D x +
1/2 x'E x: its Euler-Lagrange system is C x'' = E x + (D^T - D) x', and
only the symmetric part of D is a null Lagrangian. D_a vanishes whenever
C A is symmetric (always in one dimension), where the system reduces to
the plain F' + F^2 = C^-1 E. The optimal feedback control is

    U(t, y) = R^-1 B* (B R^-1 B*)^-1 (F(t) y - A y).

An independently integrated classical Riccati equation
(-P' = A*P + PA + Q - P B R^-1 B* P, P(T) = H, gain -R^-1 B* P) serves as
an oracle for this oracle; both gains must agree for every valid spec.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import Grid, GridField, TimeGrid
from .problems import LQRSpec

__all__ = [
    "LQRDerived",
    "RiccatiSolution",
    "RiccatiBlowUpError",
    "derive_lqr",
    "solve_riccati",
    "lqr_feedback",
    "lqr_gain",
    "lqr_feedback_field",
    "classical_riccati_gain",
]


class RiccatiBlowUpError(RuntimeError):
    def __init__(self, time):
        super().__init__(f"Riccati integration blew up (non-finite entries) at t={time:.6g}")
        self.time = time


@dataclass(frozen=True)
class LQRDerived:
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray
    C_inv_E: np.ndarray
    F_terminal: np.ndarray  # -C^-1 D
    control_map: np.ndarray  # R^-1 B* (B R^-1 B*)^-1


def derive_lqr(spec: LQRSpec) -> LQRDerived:
    """Exact derived matrices; raises if B R^-1 B* is singular (checked by
    the spec constructor as well)."""
    A, B, R, Q, H = spec.A, spec.B, spec.R, spec.Q, spec.H
    RinvBt = np.linalg.solve(R, B.T)
    BRB = B @ RinvBt
    C = np.linalg.inv(BRB)
    C = 0.5 * (C + C.T)
    D = H - C @ A
    E = Q + A.T @ C @ A
    E = 0.5 * (E + E.T)
    return LQRDerived(
        C=C,
        D=D,
        E=E,
        C_inv_E=np.linalg.solve(C, E),
        F_terminal=-np.linalg.solve(C, D),
        control_map=RinvBt @ C,
    )


@dataclass
class RiccatiSolution:
    time_grid: TimeGrid
    F: np.ndarray  # (steps+1, N, N)

    def at(self, t):
        """F(t), linear interpolation between stored nodes."""
        k, theta = self.time_grid.locate(t)
        if theta == 0.0:
            return self.F[k]
        if theta == 1.0:
            return self.F[k + 1]
        return (1.0 - theta) * self.F[k] + theta * self.F[k + 1]

    def save_csv(self, path):
        n = self.F.shape[1]
        cols = ["t"] + [f"F{i+1}{j+1}" for i in range(n) for j in range(n)]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for k, t in enumerate(self.time_grid.times):
                row = [t] + list(self.F[k].reshape(-1))
                fh.write(",".join("%.17g" % v for v in row) + "\n")


def _rk4_matrix_backward(rhs, terminal, time_grid: TimeGrid):
    """RK4 march of a matrix ODE from T down to t0, stored forward in time."""
    steps = time_grid.steps
    out = np.empty((steps + 1,) + terminal.shape)
    out[steps] = terminal
    h = -time_grid.dt
    Y = terminal.copy()
    for k in range(steps, 0, -1):
        k1 = rhs(Y)
        k2 = rhs(Y + 0.5 * h * k1)
        k3 = rhs(Y + 0.5 * h * k2)
        k4 = rhs(Y + h * k3)
        Y = Y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(Y)):
            raise RiccatiBlowUpError(time_grid.times[k - 1])
        out[k - 1] = Y
    return out


def solve_riccati(derived: LQRDerived, T, steps) -> RiccatiSolution:
    """Integrate F' + F^2 = C^-1 E backward from F(T) = -C^-1 D with RK4.

    Finite-escape (possible for indefinite data) raises
    :class:`RiccatiBlowUpError` naming the time of failure.
    """
    if steps < 10:
        raise ValueError("Riccati integration needs at least 10 steps")
    tg = TimeGrid(0.0, float(T), int(steps))
    CE = derived.C_inv_E

    def rhs(F):
        return CE - F @ F

    return RiccatiSolution(time_grid=tg, F=_rk4_matrix_backward(rhs, derived.F_terminal, tg))


def lqr_gain(spec: LQRSpec, derived: LQRDerived, riccati: RiccatiSolution, t):
    """Feedback gain matrix G(t) with U(t, y) = G(t) y."""
    return derived.control_map @ (riccati.at(t) - spec.A)


def lqr_feedback(spec: LQRSpec, derived: LQRDerived, riccati: RiccatiSolution, t, y):
    """Optimal feedback control U(t, y) = R^-1 B*(B R^-1 B*)^-1 (F(t) - A) y."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return lqr_gain(spec, derived, riccati, t) @ y


def lqr_feedback_field(
    spec: LQRSpec, derived: LQRDerived, riccati: RiccatiSolution, grid: Grid, time_grid: TimeGrid
) -> GridField:
    """Sample the closed-form feedback on all grid nodes and time slices."""
    field = GridField.zeros(grid, time_grid, spec.control_dim)
    X = grid.node_coordinates()
    for k, t in enumerate(time_grid.times):
        G = lqr_gain(spec, derived, riccati, t)
        field.values[k] = X @ G.T
    return field


def classical_riccati_gain(spec: LQRSpec, T, steps):
    """Independent oracle: gains -R^-1 B* P(t) from the classical Riccati ODE.

    Returns (time_grid, gains) with gains of shape (steps+1, m, N).
    """
    tg = TimeGrid(0.0, float(T), int(steps))
    A, B, Q, R, H = spec.A, spec.B, spec.Q, spec.R, spec.H
    RinvBt = np.linalg.solve(R, B.T)
    BRB = B @ RinvBt

    def rhs(P):
        return P @ BRB @ P - A.T @ P - P @ A - Q

    P = _rk4_matrix_backward(rhs, H.copy(), tg)
    gains = np.einsum("mk,tkn->tmn", -RinvBt, P)
    return tg, gains
