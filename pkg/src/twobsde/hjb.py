"""Fully nonlinear HJB  d_t u + sup_a {1/2 a D2u + F(t, x, u, Du, a)} = 0  and its feedback."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded

from .errors import ConfigurationError, SolverError
from .generators import GeneratorSpec, HamiltonianSpec, conjugate_from_H, negate
from .grid import Grid, GridSolution, first_derivative, second_derivative
from .scenarios import Scenario, ScenarioFamily, VolatilityBounds, dyadic_knots, family_a_grid
from .semilinear import (_banded, _boundary_zeroed, _check_cfl, _mask_boundary_rows,
                         explicit_step, solve_explicit)


@dataclass(frozen=True, eq=False)
class HjbSolution:
    base: GridSolution
    a_grid: np.ndarray
    policy: np.ndarray  # (n_t, n_x): argmax used on step [t_k, t_{k+1}]
    bounds: VolatilityBounds
    generator: GeneratorSpec
    mode: str = "explicit"
    meta: dict = field(default_factory=dict)

    @property
    def grid(self):
        return self.base.grid

    @property
    def u(self):
        return self.base.u

    def value(self, x0, layer=0):
        return self.base.value(x0, layer)

    def hamiltonian(self, layer, a, t=None):
        """1/2 a D2u + F(t, x, u, Du, a) on a given layer, boundary derivatives zeroed."""
        g = self.grid
        u = self.u[layer]
        du = _boundary_zeroed(self.base.du[layer], g.boundary)
        d2u = _boundary_zeroed(self.base.d2u[layer], g.boundary)
        t = g.t[layer] if t is None else t
        return 0.5 * a * d2u + self.generator(t, g.x, u, du, a)

    def sup_hamiltonian(self, layer):
        if "a" not in self.generator.depends:
            g = self.grid
            d2u = _boundary_zeroed(self.base.d2u[layer], g.boundary)
            base = self.hamiltonian(layer, self.a_grid[0])
            return base + 0.5 * (np.where(d2u > 0, self.a_grid[-1], self.a_grid[0]) - self.a_grid[0]) * d2u
        return self.hamiltonian(layer, self.a_grid[:, None]).max(axis=0)

    def pointwise_gap(self, layer, alpha):
        """sup_a H(a) - H(alpha) on the nodes of ``layer``."""
        return self.sup_hamiltonian(layer) - self.hamiltonian(layer, alpha)

    def policy_to_csv(self, path, stride=1):
        g = self.grid
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "u", "policy"])
            for k in range(0, g.n_t, stride):
                for i in range(g.n_x):
                    w.writerow([repr(float(g.t[k])), repr(float(g.x[i])), repr(float(self.u[k, i])),
                                repr(float(self.policy[k, i]))])


def hjb_a_grid(bounds: VolatilityBounds, n_a: int):
    if bounds.a_low == bounds.a_high:
        return np.array([bounds.a_low])
    if n_a < 2:
        raise ConfigurationError("the HJB a-grid needs n_a >= 2 (endpoints included)")
    return np.linspace(bounds.a_low, bounds.a_high, n_a)


def _argmax_smallest(cand):
    """Row index of the maximum over axis 0; roundoff-level ties go to the smallest a."""
    top = cand.max(axis=0)
    tol = 64 * np.finfo(float).eps * np.maximum(1.0, np.abs(top))
    return np.argmax(cand >= top - tol, axis=0)


def _explicit_hjb(f, g, grid, a_grid):
    _check_cfl(grid, float(a_grid.max()))
    x, dt = grid.x, grid.dt
    phi = math.exp(f.linear_y * dt)
    u = np.asarray(g(x), dtype=float) * np.ones(grid.n_x)
    layers, policy = [u], np.empty((grid.n_t, grid.n_x))
    # one generator evaluation serves every a when F ignores a; otherwise broadcast over the a-grid
    a_arg = a_grid[0] if "a" not in f.depends else a_grid[:, None]
    for k in range(grid.n_t - 1, -1, -1):
        du = _boundary_zeroed(first_derivative(u, grid.dx), grid.boundary)
        d2u = _boundary_zeroed(second_derivative(u, grid.dx), grid.boundary)
        r = f.remainder(grid.t[k + 1], x, u, du, a_arg)
        cand = phi * (u + dt * (0.5 * a_grid[:, None] * d2u + r))
        if grid.boundary == "linear":
            cand[:, 0] = 2 * cand[:, 1] - cand[:, 2]
            cand[:, -1] = 2 * cand[:, -2] - cand[:, -3]
        idx = _argmax_smallest(cand)
        u = np.take_along_axis(cand, idx[None], axis=0)[0]
        policy[k] = a_grid[idx]
        layers.append(u)
    return np.stack(layers[::-1]), policy, {"policy_iters": 0}


def _policy_iteration_hjb(f, g, grid, a_grid, tol, max_iter):
    x, dt = grid.x, grid.dt
    phi = math.exp(f.linear_y * dt)
    u = np.asarray(g(x), dtype=float) * np.ones(grid.n_x)
    layers, policy = [u], np.empty((grid.n_t, grid.n_x))
    worst = 0
    for k in range(grid.n_t - 1, -1, -1):
        w = u.copy()
        pol = None
        for it in range(1, max_iter + 1):
            du = _boundary_zeroed(first_derivative(w, grid.dx), grid.boundary)
            d2u = _boundary_zeroed(second_derivative(w, grid.dx), grid.boundary)
            ham = 0.5 * a_grid[:, None] * d2u + f.remainder(grid.t[k], x, w, du, a_grid[:, None])
            idx = _argmax_smallest(ham)
            new_pol = a_grid[idx]
            r = f.remainder(grid.t[k], x, w, du, new_pol)
            w_new = solve_banded((2, 2), _banded(grid, new_pol),
                                 _mask_boundary_rows(phi * u + dt * r, grid))
            diff = float(np.max(np.abs(w_new - w)))
            stable = pol is not None and np.array_equal(pol, new_pol)
            w, pol = w_new, new_pol
            if stable and diff <= tol:
                break
        else:
            raise SolverError(f"policy iteration did not converge at step {k}", diff)
        worst = max(worst, it)
        policy[k] = pol
        u = w
        layers.append(u)
    return np.stack(layers[::-1]), policy, {"policy_iters": worst}


def hjb_residual(sol: HjbSolution):
    """Max interior residual of the discrete HJB relation, recomputed from u, du, d2u.

    The defect is scaled by dt / (1 + max |u|) so that roundoff on large payoffs stays O(eps).
    """
    g = sol.grid
    f = sol.generator
    phi = math.exp(f.linear_y * g.dt)
    worst = 0.0
    for k in range(g.n_t):
        if sol.mode == "explicit":
            lhs = (sol.u[k] / phi - sol.u[k + 1]) / g.dt
            rhs = sol.sup_hamiltonian(k + 1) - f.linear_y * sol.u[k + 1]
        else:
            lhs = (sol.u[k] - phi * sol.u[k + 1]) / g.dt
            rhs = sol.sup_hamiltonian(k) - f.linear_y * sol.u[k]
        r = np.abs(lhs - rhs)[1:-1] * g.dt / (1.0 + np.max(np.abs(sol.u[k + 1])))
        worst = max(worst, float(r.max()) if r.size else 0.0)
    return worst


def solve_hjb(f: GeneratorSpec, g, grid: Grid, bounds: VolatilityBounds, n_a: int = 17,
              mode="explicit", residual_tol=1e-10, tol_picard=1e-10, max_picard=200,
              a_grid=None) -> HjbSolution:
    a_grid = hjb_a_grid(bounds, n_a) if a_grid is None else np.sort(np.asarray(a_grid, dtype=float))
    if mode == "explicit":
        u, policy, meta = _explicit_hjb(f, g, grid, a_grid)
    elif mode == "policy":
        u, policy, meta = _policy_iteration_hjb(f, g, grid, a_grid, tol_picard, max_picard)
    else:
        raise ConfigurationError(f"unknown HJB mode {mode!r}")
    sol = HjbSolution(GridSolution(grid, u, meta={"scenario": "hjb", "generator": f.name}),
                      a_grid, policy, bounds, f, mode, meta)
    res = hjb_residual(sol)
    sol.meta["residual"] = res
    sol.base.meta["residual"] = res
    if res > residual_tol:
        raise SolverError(f"HJB residual {res:.3g} exceeds residual_tol {residual_tol:.3g}", res)
    return sol


def extract_feedback(sol: HjbSolution) -> Scenario:
    """Feedback scenario from the policy table (constant when the table is)."""
    table = sol.policy.copy()
    if table.shape[1] >= 3:
        # boundary nodes carry no curvature information; copy their neighbours
        table[:, 0] = table[:, 1]
        table[:, -1] = table[:, -2]
    if np.all(table == table.flat[0]):
        return Scenario.constant(float(table.flat[0]), sol.bounds, label=f"feedback=const({table.flat[0]:g})")
    g = sol.grid
    return Scenario("feedback", sol.bounds, knots=tuple(g.t[:-1]), table=table, x_nodes=g.x,
                    label="feedback")


# ---------------------------------------------------------------------------
# h-form versus conjugate form


def solve_h_form(h: HamiltonianSpec, g, grid: Grid):
    """Explicit sweep of d_t u + H(t, x, u, Du, D2u) = 0."""
    x = grid.x
    u = np.asarray(g(x), dtype=float) * np.ones(grid.n_x)
    layers = [u]
    for k in range(grid.n_t - 1, -1, -1):
        du = _boundary_zeroed(first_derivative(u, grid.dx), grid.boundary)
        d2u = _boundary_zeroed(second_derivative(u, grid.dx), grid.boundary)
        u = u + grid.dt * h(grid.t[k + 1], x, u, du, d2u)
        if grid.boundary == "linear":
            u[0] = 2 * u[1] - u[2]
            u[-1] = 2 * u[-2] - u[-3]
        layers.append(u)
    return GridSolution(grid, np.stack(layers[::-1]), meta={"scenario": "h-form", "generator": h.name})


def hjb_vs_conjugate(h: HamiltonianSpec, g, grid: Grid, bounds: VolatilityBounds, n_a: int = 17,
                     rtol=5e-3, inner_fraction=1.0) -> dict:
    """Solve with H directly and with sup_a {1/2 a D2u - F(a)}, F the conjugate of H."""
    direct = solve_h_form(h, g, grid)
    f = negate(conjugate_from_H(h))
    conj = solve_hjb(f, g, grid, bounds, n_a=n_a, residual_tol=math.inf)
    x = grid.x
    half = 0.5 * (grid.x_max - grid.x_min) * inner_fraction
    mid = 0.5 * (grid.x_max + grid.x_min)
    mask = np.abs(x - mid) <= half + 1e-12
    diff = np.abs(direct.u[:, mask] - conj.u[:, mask])
    scale = max(1.0, float(np.max(np.abs(direct.u[:, mask]))))
    disc = float(diff.max())
    return {"hamiltonian": h.name, "max_discrepancy": disc, "scale": scale,
            "relative": disc / scale, "tolerance": rtol, "pass": disc / scale <= rtol}


# ---------------------------------------------------------------------------
# refinement families


def _interval_steps(grid: Grid, level: int):
    pieces = 2**level
    if grid.n_t % pieces:
        raise ConfigurationError(f"n_t = {grid.n_t} is not divisible by 2^level = {pieces}")
    return grid.n_t // pieces


def _constant_sweep(f, u, grid, k_from, k_to, a, phi):
    """Explicit constant-a sweep from layer k_from back to layer k_to."""
    for k in range(k_from - 1, k_to - 1, -1):
        u = explicit_step(f, grid.t[k + 1], grid.x, u, a, grid, phi)
    return u


@dataclass(frozen=True, eq=False)
class FamilySup:
    level: int
    value: float
    u0: np.ndarray
    policy: np.ndarray  # (2^level, n_x)
    scenario: Scenario


def family_sup(f: GeneratorSpec, g, grid: Grid, bounds: VolatilityBounds, level: int, x0=0.0) -> FamilySup:
    """Sup over controls that are constant on each dyadic interval and chosen at its left knot.

    Dynamic programming over the knots; nondecreasing in ``level`` and bounded by the
    HJB value on the same explicit stencil.
    """
    a_vals = family_a_grid(bounds)
    _check_cfl(grid, float(a_vals.max()))
    m = _interval_steps(grid, level)
    phi = math.exp(f.linear_y * grid.dt)
    pieces = 2**level
    u = np.asarray(g(grid.x), dtype=float) * np.ones(grid.n_x)
    policy = np.empty((pieces, grid.n_x))
    for j in range(pieces - 1, -1, -1):
        cand = np.stack([_constant_sweep(f, u, grid, (j + 1) * m, j * m, a, phi) for a in a_vals])
        idx = np.argmax(cand, axis=0)
        u = np.take_along_axis(cand, idx[None], axis=0)[0]
        policy[j] = a_vals[idx]
    knots = dyadic_knots(level, grid.T)
    if np.all(policy == policy.flat[0]):
        s = Scenario.constant(float(policy.flat[0]), bounds, label=f"dp{level}=const({policy.flat[0]:g})")
    else:
        s = Scenario("knot_feedback", bounds, knots=knots, table=policy, x_nodes=grid.x, label=f"dp{level}")
    return FamilySup(level, float(np.interp(x0, grid.x, u)), u, policy, s)


def evaluate_knot_policy(f: GeneratorSpec, s: Scenario, g, grid: Grid):
    """Time-0 value of a knot-feedback scenario on the explicit stencil."""
    level = int(round(math.log2(len(s.knots))))
    m = _interval_steps(grid, level)
    phi = math.exp(f.linear_y * grid.dt)
    u = np.asarray(g(grid.x), dtype=float) * np.ones(grid.n_x)
    for j in range(len(s.knots) - 1, -1, -1):
        row = s.table[j, s._node(grid.x)]
        out = np.empty_like(u)
        for a in np.unique(row):
            v = _constant_sweep(f, u, grid, (j + 1) * m, j * m, a, phi)
            out[row == a] = v[row == a]
        u = out
    return u


def member_values(f: GeneratorSpec, family: ScenarioFamily, g, grid: Grid, chunk=2048):
    """Time-0 values of every deterministic member (rows) on the explicit stencil."""
    times = grid.t[:-1]
    out = []
    members = [m for m in family.members if m.is_deterministic]
    for start in range(0, len(members), chunk):
        block = members[start:start + chunk]
        alphas = np.stack([m.deterministic_values_on(times) for m in block])
        out.append(solve_explicit(f, alphas, g, grid, keep_layers=False, batch=True))
    return np.concatenate(out, axis=0)
