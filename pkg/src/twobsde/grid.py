"""Time x space lattice, finite-difference stencils and path interpolation."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainExitError


@dataclass(frozen=True)
class Grid:
    T: float = 1.0
    n_t: int = 400
    x_min: float = -6.0
    x_max: float = 6.0
    n_x: int = 401
    boundary: str = "dirichlet"

    def __post_init__(self):
        if self.n_t < 2 or self.n_x < 3 or not self.x_min < self.x_max or self.T <= 0:
            raise ConfigurationError(f"invalid grid {self}")
        if self.boundary not in ("dirichlet", "linear"):
            raise ConfigurationError(f"unknown boundary {self.boundary!r}")

    @property
    def dt(self):
        return self.T / self.n_t

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def t(self):
        return np.arange(self.n_t + 1) * self.dt

    @property
    def x(self):
        return np.linspace(self.x_min, self.x_max, self.n_x)

    def cfl_ok(self, a_max):
        return a_max * self.dt <= self.dx**2 * (1 + 1e-12)

    def refine(self, factor=2):
        """dt / factor and dx^2 / factor (space nodes rounded to keep the endpoints)."""
        m = int(round((self.n_x - 1) * np.sqrt(factor)))
        m += m % 2
        return Grid(self.T, self.n_t * factor, self.x_min, self.x_max, m + 1, self.boundary)

    def node_index(self, x0):
        i = int(round((x0 - self.x_min) / self.dx))
        return i if abs(self.x[i] - x0) < 1e-9 * max(1.0, abs(x0)) else None

    def to_dict(self):
        return {"T": self.T, "n_t": self.n_t, "x_min": self.x_min, "x_max": self.x_max,
                "n_x": self.n_x, "boundary": self.boundary}


def first_derivative(u, dx):
    """Central differences inside, second-order one-sided at both ends (last axis)."""
    d = np.empty_like(u)
    d[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2 * dx)
    if u.shape[-1] >= 3:
        d[..., 0] = (-3 * u[..., 0] + 4 * u[..., 1] - u[..., 2]) / (2 * dx)
        d[..., -1] = (3 * u[..., -1] - 4 * u[..., -2] + u[..., -3]) / (2 * dx)
    return d


def second_derivative(u, dx):
    d = np.empty_like(u)
    d[..., 1:-1] = (u[..., 2:] - 2 * u[..., 1:-1] + u[..., :-2]) / dx**2
    if u.shape[-1] >= 4:
        d[..., 0] = (2 * u[..., 0] - 5 * u[..., 1] + 4 * u[..., 2] - u[..., 3]) / dx**2
        d[..., -1] = (2 * u[..., -1] - 5 * u[..., -2] + 4 * u[..., -3] - u[..., -4]) / dx**2
    else:
        d[..., 0] = d[..., 1]
        d[..., -1] = d[..., -2]
    return d


@dataclass(frozen=True, eq=False)
class GridSolution:
    grid: Grid
    u: np.ndarray
    du: np.ndarray = None
    d2u: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.du is None:
            object.__setattr__(self, "du", first_derivative(self.u, self.grid.dx))
        if self.d2u is None:
            object.__setattr__(self, "d2u", second_derivative(self.u, self.grid.dx))

    def value(self, x0, layer=0):
        return float(np.interp(x0, self.grid.x, self.u[layer]))

    def to_csv(self, path, layers=None):
        g = self.grid
        layers = range(g.n_t + 1) if layers is None else layers
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "u", "du", "d2u"])
            for k in layers:
                for i in range(g.n_x):
                    w.writerow([repr(float(g.t[k])), repr(float(g.x[i])), repr(float(self.u[k, i])),
                                repr(float(self.du[k, i])), repr(float(self.d2u[k, i]))])

    def meta_json(self):
        return json.dumps({"grid": self.grid.to_dict(), **self.meta}, sort_keys=True, default=str)


# ---------------------------------------------------------------------------
# path interpolation


def layer_stride(grid: Grid, dt):
    m = dt / grid.dt
    s = int(round(m))
    if s < 1 or abs(m - s) > 1e-9:
        raise ConfigurationError(f"path step {dt} is not a multiple of the grid step {grid.dt}")
    return s


def check_domain(grid: Grid, paths, allowance=0.01):
    lo, hi = grid.x_min + 2 * grid.dx, grid.x_max - 2 * grid.dx
    out = (paths < lo) | (paths > hi)
    frac = float(out.mean())
    if frac > allowance:
        stats = {"fraction": frac, "min": float(paths.min()), "max": float(paths.max()),
                 "padded_domain": [lo, hi]}
        raise DomainExitError(f"{frac:.2%} of path samples leave the padded domain; widen the grid", stats)
    return frac


def interp_rows(field_, layers, xs, grid: Grid):
    """Linear-in-x interpolation of field_[layers[k]] at xs[:, k] (xs: paths x steps)."""
    x0, dx = grid.x_min, grid.dx
    pos = np.clip((xs - x0) / dx, 0.0, grid.n_x - 1 - 1e-12)
    i = np.floor(pos).astype(np.int64)
    w = pos - i
    rows = field_[layers]  # steps x n_x
    cols = np.arange(xs.shape[1])
    left = rows[cols[None, :], i]
    right = rows[cols[None, :], i + 1]
    return (1 - w) * left + w * right


@dataclass(frozen=True)
class PathSeries:
    y: np.ndarray
    z: np.ndarray
    gamma: np.ndarray
    exit_fraction: float


def evaluate_along_paths(sol: GridSolution, bundle, shift=0) -> PathSeries:
    """y = u(t, X_t), z = Du(t, X_t), gamma = D2u(t, X_t) at the bundle times.

    ``shift`` = 1 reads the fields of the next time layer (used for increments over
    [t_k, t_{k+1}] in the explicit convention).
    """
    g = sol.grid
    if abs(bundle.T - g.T) > 1e-12:
        raise ConfigurationError("bundle horizon differs from the grid horizon")
    stride = layer_stride(g, bundle.dt)
    frac = check_domain(g, bundle.paths)
    layers = np.minimum(np.arange(bundle.n_steps + 1) * stride + shift * stride, g.n_t)
    X = bundle.paths
    return PathSeries(interp_rows(sol.u, layers, X, g), interp_rows(sol.du, layers, X, g),
                      interp_rows(sol.d2u, layers, X, g), frac)
