"""Uniform truncated spatial grids, uniform time grids, and time-indexed fields.

All solver state lives in ``GridField`` objects: arrays of shape
``(steps+1, num_nodes, components)`` over a tensor-product lattice, with
multilinear interpolation in space, linear interpolation in time, and
clamping of off-box queries to the box faces.
"""

from __future__ import annotations

import json
import os
from itertools import product

import numpy as np

__all__ = ["Grid", "TimeGrid", "GridField", "save_field_csv", "load_field_csv"]

# Queries this close to a node (in index units) snap onto it, so that exact
# node/slice lookups reproduce stored values bit-for-bit.
_SNAP = 1e-9


def _snap_to_integer(s):
    r = np.rint(s)
    return np.where(np.abs(s - r) <= _SNAP, r, s)


class Grid:
    """Uniform tensor-product lattice on a box [lo, hi] in R^N.

    Parameters
    ----------
    lo, hi : array_like, shape (N,)
        Box corners, lo < hi componentwise.
    nodes_per_axis : sequence of int
        Node count per axis, each >= 3.
    """

    def __init__(self, lo, hi, nodes_per_axis):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        self.nodes_per_axis = tuple(int(n) for n in np.atleast_1d(nodes_per_axis))
        if self.lo.shape != self.hi.shape or self.lo.ndim != 1:
            raise ValueError("lo and hi must be 1-D arrays of equal length")
        if len(self.nodes_per_axis) != self.lo.size:
            raise ValueError("nodes_per_axis length must match box dimension")
        if not np.all(self.lo < self.hi):
            raise ValueError("grid box requires lo < hi componentwise")
        if any(n < 3 for n in self.nodes_per_axis):
            raise ValueError("every axis needs at least 3 nodes")
        self.dim = self.lo.size
        self.shape = self.nodes_per_axis
        self.num_nodes = int(np.prod(self.shape))
        self.spacing = (self.hi - self.lo) / (np.array(self.shape) - 1.0)
        self.axis_coords = [
            np.linspace(self.lo[a], self.hi[a], self.shape[a]) for a in range(self.dim)
        ]
        # row-major (C order) strides in flat node index
        strides = np.ones(self.dim, dtype=np.int64)
        for a in range(self.dim - 2, -1, -1):
            strides[a] = strides[a + 1] * self.shape[a + 1]
        self._strides = strides
        self._coords = None
        self._quad_weights = None

    def node_coordinates(self):
        """All node coordinates, shape (num_nodes, dim), row-major order."""
        if self._coords is None:
            mesh = np.meshgrid(*self.axis_coords, indexing="ij")
            self._coords = np.stack([m.reshape(-1) for m in mesh], axis=-1)
        return self._coords

    def clamp(self, x):
        """Clamp points (componentwise) into the box."""
        return np.clip(x, self.lo, self.hi)

    def quadrature_weights(self):
        """Tensor-product trapezoidal weights, shape (num_nodes,)."""
        if self._quad_weights is None:
            w = np.ones(())
            full = np.ones(self.shape)
            for a in range(self.dim):
                wa = np.full(self.shape[a], self.spacing[a])
                wa[0] *= 0.5
                wa[-1] *= 0.5
                sh = [1] * self.dim
                sh[a] = self.shape[a]
                full = full * wa.reshape(sh)
            w = full.reshape(-1)
            self._quad_weights = w
        return self._quad_weights

    def interior_mask(self, fraction):
        """Nodes within the central ``fraction`` of the box extent per axis."""
        center = 0.5 * (self.lo + self.hi)
        half = 0.5 * fraction * (self.hi - self.lo)
        x = self.node_coordinates()
        return np.all(np.abs(x - center) <= half + 1e-12, axis=1)

    def interp_weights(self, x):
        """Corner indices and weights for multilinear interpolation.

        Returns (flat_corner_indices, corner_weights), each with leading
        batch shape of ``x`` and trailing axis of length 2^dim.
        """
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        pts = np.atleast_2d(x)
        s = (self.clamp(pts) - self.lo) / self.spacing
        s = _snap_to_integer(s)
        i0 = np.floor(s).astype(np.int64)
        i0 = np.clip(i0, 0, np.array(self.shape) - 2)
        w = s - i0
        ncorner = 1 << self.dim
        idx = np.empty(pts.shape[:-1] + (ncorner,), dtype=np.int64)
        wgt = np.empty(pts.shape[:-1] + (ncorner,), dtype=float)
        for c, corner in enumerate(product((0, 1), repeat=self.dim)):
            flat = np.zeros(pts.shape[:-1], dtype=np.int64)
            weight = np.ones(pts.shape[:-1])
            for a in range(self.dim):
                flat = flat + (i0[..., a] + corner[a]) * self._strides[a]
                weight = weight * (w[..., a] if corner[a] else (1.0 - w[..., a]))
            idx[..., c] = flat
            wgt[..., c] = weight
        if squeeze:
            return idx[0], wgt[0]
        return idx, wgt

    def interp_slice(self, values, x):
        """Multilinear interpolation of nodal data ``values`` (num_nodes, c) at x."""
        idx, wgt = self.interp_weights(x)
        return np.einsum("...k,...kc->...c", wgt, values[idx])

    def __eq__(self, other):
        return (
            isinstance(other, Grid)
            and self.shape == other.shape
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )

    def __repr__(self):
        return f"Grid(lo={self.lo.tolist()}, hi={self.hi.tolist()}, nodes={self.shape})"


class TimeGrid:
    """Uniform partition of [t0, T] into ``steps`` intervals."""

    def __init__(self, t0, T, steps):
        self.t0 = float(t0)
        self.T = float(T)
        self.steps = int(steps)
        if not self.t0 < self.T:
            raise ValueError("time grid requires t0 < T")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        self.dt = (self.T - self.t0) / self.steps
        self.times = np.linspace(self.t0, self.T, self.steps + 1)

    def locate(self, t):
        """Bracketing slice index and blend weight for time t (clamped)."""
        tau = (float(t) - self.t0) / self.dt
        tau = float(_snap_to_integer(np.asarray(tau)))
        tau = min(max(tau, 0.0), float(self.steps))
        k = int(np.floor(tau))
        k = min(k, self.steps - 1)
        return k, tau - k

    def __eq__(self, other):
        return (
            isinstance(other, TimeGrid)
            and self.steps == other.steps
            and self.t0 == other.t0
            and self.T == other.T
        )

    def __repr__(self):
        return f"TimeGrid(t0={self.t0}, T={self.T}, steps={self.steps})"


class GridField:
    """Time-indexed nodal vector field u(t, x) with c components.

    ``values`` has shape (steps+1, num_nodes, c). Off-grid evaluation is
    multilinear in x and linear in t; spatial queries outside the box are
    clamped to the faces, making evaluation total.
    """

    def __init__(self, grid: Grid, time_grid: TimeGrid, components: int, values=None):
        self.grid = grid
        self.time_grid = time_grid
        self.components = int(components)
        shape = (time_grid.steps + 1, grid.num_nodes, self.components)
        if values is None:
            self.values = np.zeros(shape)
        else:
            values = np.asarray(values, dtype=float)
            if values.shape != shape:
                raise ValueError(f"values must have shape {shape}, got {values.shape}")
            self.values = values

    @classmethod
    def zeros(cls, grid, time_grid, components):
        return cls(grid, time_grid, components)

    @classmethod
    def from_function(cls, grid, time_grid, components, fn):
        """Sample ``fn(t, X) -> (num_nodes, c)`` on every time slice."""
        field = cls(grid, time_grid, components)
        X = grid.node_coordinates()
        for k, t in enumerate(time_grid.times):
            field.values[k] = np.asarray(fn(t, X), dtype=float).reshape(
                grid.num_nodes, components
            )
        return field

    def copy(self):
        return GridField(self.grid, self.time_grid, self.components, self.values.copy())

    def slice_at(self, t):
        """Time-interpolated nodal slice at time t, shape (num_nodes, c)."""
        k, theta = self.time_grid.locate(t)
        if theta == 0.0:
            return self.values[k]
        if theta == 1.0:
            return self.values[k + 1]
        return (1.0 - theta) * self.values[k] + theta * self.values[k + 1]

    def interpolate(self, t, x):
        """Evaluate the field at one (t, x); returns shape (c,)."""
        return self.grid.interp_slice(self.slice_at(t), np.asarray(x, dtype=float))

    def interpolate_batch(self, t, X):
        """Evaluate the field at a common time t for points X (B, N) -> (B, c)."""
        return self.grid.interp_slice(self.slice_at(t), np.asarray(X, dtype=float))

    def spatial_gradient(self, time_index):
        """Nodal spatial gradient of one time slice, shape (num_nodes, c, N).

        Central differences at interior nodes, second-order one-sided at the
        box faces; exact for fields affine in x.
        """
        g = self.grid
        vals = self.values[time_index].reshape(g.shape + (self.components,))
        out = np.empty(g.shape + (self.components, g.dim))
        for a in range(g.dim):
            h = g.spacing[a]
            v = np.moveaxis(vals, a, 0)
            d = np.empty_like(v)
            d[1:-1] = (v[2:] - v[:-2]) / (2.0 * h)
            d[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
            d[-1] = (3.0 * v[-1] - 4.0 * v[-2] + v[-3]) / (2.0 * h)
            out[..., a] = np.moveaxis(d, 0, a)
        return out.reshape(g.num_nodes, self.components, g.dim)

    def max_gradient_norm(self):
        """Max nodal sup-norm of the spatial gradient over all slices.

        Discrete stand-in for the Lipschitz bound of the field; monitored,
        not enforced.
        """
        worst = 0.0
        for k in range(self.time_grid.steps + 1):
            worst = max(worst, float(np.abs(self.spatial_gradient(k)).max()))
        return worst


def save_field_csv(field: GridField, path):
    """Write a field snapshot as CSV plus a JSON metadata sidecar.

    CSV header is ``t,x1..xN,c1..cc``; rows are row-major over (time, node)
    and values carry 17 significant digits. The sidecar at ``path + '.json'``
    records the grid geometry needed to rebuild the field.
    """
    g = field.grid
    X = g.node_coordinates()
    cols = ["t"] + [f"x{i+1}" for i in range(g.dim)] + [
        f"c{j+1}" for j in range(field.components)
    ]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k, t in enumerate(field.time_grid.times):
            vals = field.values[k]
            for i in range(g.num_nodes):
                row = [t] + list(X[i]) + list(vals[i])
                fh.write(",".join("%.17g" % v for v in row) + "\n")
    meta = {
        "dim": g.dim,
        "lo": g.lo.tolist(),
        "hi": g.hi.tolist(),
        "nodes_per_axis": list(g.shape),
        "t0": field.time_grid.t0,
        "T": field.time_grid.T,
        "steps": field.time_grid.steps,
        "components": field.components,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_field_csv(path):
    """Rebuild a GridField from a CSV snapshot and its JSON sidecar."""
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    grid = Grid(meta["lo"], meta["hi"], meta["nodes_per_axis"])
    time_grid = TimeGrid(meta["t0"], meta["T"], meta["steps"])
    c = int(meta["components"])
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    vals = data[:, 1 + grid.dim :].reshape(time_grid.steps + 1, grid.num_nodes, c)
    return GridField(grid, time_grid, c, vals)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
