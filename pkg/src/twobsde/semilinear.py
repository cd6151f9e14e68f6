"""Per-scenario semilinear PDE  d_t u + 1/2 a D2u + F(t, x, u, Du, a) = 0,  u(T) = g.

Two schemes share one time convention (step k covers [t_k, t_{k+1}], the
control is read at t_k) and integrate the ``linear_y`` part of F exactly:

* ``implicit``: backward-Euler diffusion (banded solve) with a trapezoidal
  generator whose implicit half is resolved by Picard iteration;
* ``explicit``: the monotone forward stencil used by the HJB solver, so that
  scenario values and HJB values are directly comparable node by node.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_banded

from .errors import ConfigurationError, SolverError
from .generators import GeneratorSpec, dominating_generator
from .grid import Grid, GridSolution, first_derivative, second_derivative
from .scenarios import Scenario

TOL_PICARD = 1e-10
MAX_PICARD = 200


def _boundary_zeroed(d, boundary):
    if boundary == "dirichlet":
        d = d.copy()
        d[..., 0] = 0.0
        d[..., -1] = 0.0
    return d


def _check_cfl(grid: Grid, a_max):
    if not grid.cfl_ok(a_max):
        raise ConfigurationError(
            f"explicit step violates CFL: a_max*dt = {a_max * grid.dt:.3g} > dx^2 = {grid.dx**2:.3g}"
        )


def explicit_step(f: GeneratorSpec, t_next, x, u, a, grid: Grid, phi):
    """u_k = phi (u_{k+1} + dt (1/2 a D2u + R)) with fields of layer k+1."""
    du = _boundary_zeroed(first_derivative(u, grid.dx), grid.boundary)
    d2u = _boundary_zeroed(second_derivative(u, grid.dx), grid.boundary)
    new = phi * (u + grid.dt * (0.5 * a * d2u + f.remainder(t_next, x, u, du, a)))
    if grid.boundary == "linear":
        new[..., 0] = 2 * new[..., 1] - new[..., 2]
        new[..., -1] = 2 * new[..., -2] - new[..., -3]
    return new


def scenario_alpha_table(s: Scenario, grid: Grid):
    """alpha(t_k, x_i) for k < n_t (Markov scenarios only)."""
    if not s.is_markov:
        raise ConfigurationError("knot-feedback scenarios are evaluated by policy evaluation, not a grid PDE")
    x = grid.x
    return np.stack([np.broadcast_to(s.alpha(t, x), x.shape) for t in grid.t[:-1]])


def solve_explicit(f: GeneratorSpec, alphas, g, grid: Grid, keep_layers=True, batch=False):
    """Explicit backward sweep; ``alphas`` is (n_t, n_x), or (M, n_t) / (M, n_t, n_x) with ``batch``."""
    alphas = np.asarray(alphas, dtype=float)
    _check_cfl(grid, float(alphas.max()))
    x = grid.x
    phi = math.exp(f.linear_y * grid.dt)
    if alphas.ndim == 2 and batch:
        alphas = alphas[:, :, None]
    u = np.asarray(g(x), dtype=float)
    if batch:
        u = np.broadcast_to(u, (alphas.shape[0], grid.n_x)).copy()
    layers = [u] if keep_layers else None
    for k in range(grid.n_t - 1, -1, -1):
        a = alphas[:, k] if batch else alphas[k]
        u = explicit_step(f, grid.t[k + 1], x, u, a, grid, phi)
        if keep_layers:
            layers.append(u)
    if not keep_layers:
        return u
    return np.stack(layers[::-1], axis=-2) if batch else np.stack(layers[::-1])


def _banded(grid: Grid, a):
    """Rows of I - dt L in (2, 2) banded storage; boundary rows by boundary type."""
    n, dt, dx = grid.n_x, grid.dt, grid.dx
    c = 0.5 * dt * np.broadcast_to(a, (n,)) / dx**2
    ab = np.zeros((5, n))
    # ab[2 + i - j, j] = A[i, j]
    i = np.arange(1, n - 1)
    ab[2, i] = 1 + 2 * c[i]
    ab[3, i - 1] = -c[i]      # A[i, i-1]
    ab[1, i + 1] = -c[i]      # A[i, i+1]
    if grid.boundary == "dirichlet":
        ab[2, 0] = ab[2, n - 1] = 1.0
    else:
        ab[2, 0], ab[1, 1], ab[0, 2] = 1.0, -2.0, 1.0            # u0 - 2u1 + u2 = 0
        ab[2, n - 1], ab[3, n - 2], ab[4, n - 3] = 1.0, -2.0, 1.0
    return ab


def _generator_rhs(f, t, x, w, a, grid):
    du = _boundary_zeroed(first_derivative(w, grid.dx), grid.boundary)
    return f.remainder(t, x, w, du, a)


def _mask_boundary_rows(rhs, grid):
    if grid.boundary == "linear":
        rhs[0] = rhs[-1] = 0.0
    return rhs


def solve_implicit(f: GeneratorSpec, alphas, g, grid: Grid, tol_picard=TOL_PICARD,
                   max_picard=MAX_PICARD):
    x = grid.x
    dt = grid.dt
    phi = math.exp(f.linear_y * dt)
    mod = f.modulus
    lip = mod.const + mod.lin if mod.is_lipschitz else math.inf
    if math.isfinite(lip) and dt * lip >= 1:
        raise ConfigurationError(f"Picard contraction needs dt * L < 1 (dt={dt}, L={lip})")
    heun = not math.isfinite(lip)
    u = np.asarray(g(x), dtype=float) * np.ones(grid.n_x)
    layers = [u]
    iters_max, resid_max = 0, 0.0
    ab_cache = {}
    for k in range(grid.n_t - 1, -1, -1):
        a = alphas[k]
        key = a.tobytes()
        ab = ab_cache.get(key)
        if ab is None:
            ab = ab_cache[key] = _banded(grid, a)
        r_next = _generator_rhs(f, grid.t[k + 1], x, u, a, grid)
        base = phi * (u + 0.5 * dt * r_next)
        # predictor: explicit generator
        w = solve_banded((2, 2), ab, _mask_boundary_rows(phi * (u + dt * r_next), grid))
        if heun:
            rhs = base + 0.5 * dt * _generator_rhs(f, grid.t[k], x, w, a, grid)
            w = solve_banded((2, 2), ab, _mask_boundary_rows(rhs, grid))
            iters = 1
        else:
            for iters in range(1, max_picard + 1):
                rhs = base + 0.5 * dt * _generator_rhs(f, grid.t[k], x, w, a, grid)
                w_new = solve_banded((2, 2), ab, _mask_boundary_rows(rhs, grid))
                resid = float(np.max(np.abs(w_new - w)))
                w = w_new
                if resid <= tol_picard:
                    break
            else:
                raise SolverError(f"Picard did not converge at step {k} within {max_picard} iterations", resid)
            resid_max = max(resid_max, resid)
        iters_max = max(iters_max, iters)
        u = w
        layers.append(u)
    return np.stack(layers[::-1]), {"picard_iters": iters_max, "residual": resid_max,
                                     "generator_step": "heun" if heun else "trapezoid-picard"}


def solve_scenario_pde(f: GeneratorSpec, s: Scenario, g, grid: Grid, scheme="implicit",
                       tol_picard=TOL_PICARD, max_picard=MAX_PICARD) -> GridSolution:
    alphas = scenario_alpha_table(s, grid)
    if scheme == "explicit":
        u = solve_explicit(f, alphas, g, grid)
        meta = {"picard_iters": 0, "residual": 0.0, "generator_step": "explicit"}
    elif scheme == "implicit":
        u, meta = solve_implicit(f, alphas, g, grid, tol_picard, max_picard)
    else:
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    meta.update(scenario=s.describe(), scheme=scheme, generator=f.name)
    return GridSolution(grid, u, meta=meta)


def solve_dominating_bsde(f0_abs, C, xi_abs, grid: Grid, scenario: Scenario,
                          scheme="implicit", **kw) -> GridSolution:
    """Driver |F^0| + C (1 + |u| + sqrt(a) |Du|), terminal |g|."""
    f = dominating_generator(f0_abs, C)
    sol = solve_scenario_pde(f, scenario, xi_abs, grid, scheme=scheme, **kw)
    sol.meta["dominating"] = True
    return sol
