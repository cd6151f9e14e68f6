"""2BSDE assembly (Y, Z, {K^P}), the minimum condition and the approximation sequence Y^n."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approximation import GapReport, InfConvolutionSpec, default_step, gap_table
from .errors import ConfigurationError, RefinementNeededError
from .generators import GeneratorSpec, exponential_transform
from .grid import Grid, GridSolution, check_domain, interp_rows, layer_stride
from .hjb import HjbSolution, extract_feedback, family_sup, solve_hjb
from .scenarios import (PathBundle, Scenario, ScenarioFamily, VolatilityBounds, dyadic_knots,
                        enumerate_family, n_steps_for, simulate_paths, standard_normals)


def tol_k(c_k, grid: Grid):
    return c_k * (grid.dt + grid.dx**2)


@dataclass(frozen=True, eq=False)
class KPathReport:
    scenario: Scenario
    k_paths: np.ndarray  # (n_paths, n_steps + 1), K_0 = 0
    min_increment: float
    e_k_T: float
    se: float
    n_paths: int
    seed: int

    def increments(self):
        return np.diff(self.k_paths, axis=1)

    def row(self):
        return [self.scenario.describe(), self.n_paths, self.seed, self.e_k_T, self.se, self.min_increment]


def _next_layers(grid: Grid, bundle: PathBundle):
    """Grid layer holding the data used on path step [t_k, t_{k+1}] (first grid step after t_k)."""
    stride = layer_stride(grid, bundle.dt)
    return np.arange(bundle.n_steps) * stride + 1


def _hamiltonians(hjb: HjbSolution, layers, X, alphas):
    """(sup_a H(a), H(alpha)) at path states X, fields of ``layers`` interpolated in x."""
    g = hjb.grid
    f = hjb.generator
    u = interp_rows(hjb.u, layers, X, g)
    du = interp_rows(hjb.base.du, layers, X, g)
    d2u = interp_rows(hjb.base.d2u, layers, X, g)
    t = g.t[layers][None, :]
    best = None
    for a in hjb.a_grid:
        h = 0.5 * a * d2u + f(t, X, u, du, a)
        best = h if best is None else np.maximum(best, h)
    return best, 0.5 * alphas * d2u + f(t, X, u, du, alphas)


def k_increment(hjb: HjbSolution, s: Scenario, bundle: PathBundle, f: GeneratorSpec = None) -> KPathReport:
    """Gap-form K: dK_k = [sup_a H(a) - H(alpha_k)] dt along each path."""
    if f is not None and f is not hjb.generator:
        raise ConfigurationError("k_increment must use the generator the HJB was solved with")
    g = hjb.grid
    check_domain(g, bundle.paths)
    layers = _next_layers(g, bundle)
    X = bundle.paths[:, :-1]
    sup_h, h_alpha = _hamiltonians(hjb, layers, X, bundle.alphas)
    dk = (sup_h - h_alpha) * bundle.dt
    k = np.concatenate([np.zeros((bundle.n_paths, 1)), np.cumsum(dk, axis=1)], axis=1)
    kt = k[:, -1]
    se = float(kt.std(ddof=1) / math.sqrt(kt.size)) if kt.size > 1 else 0.0
    return KPathReport(s, k, float(dk.min()), float(kt.mean()), se, bundle.n_paths, bundle.seed)


def _taylor(field_u, field_du, field_d2u, layers, X, grid):
    """Second-order Taylor expansion about the nearest node (used for the path-form K)."""
    i = np.clip(np.rint((X - grid.x_min) / grid.dx).astype(np.int64), 0, grid.n_x - 1)
    h = X - grid.x[i]
    cols = np.arange(X.shape[1])[None, :]
    L = np.asarray(layers)[None, :]
    u, du, d2u = field_u[L, i], field_du[L, i], field_d2u[L, i]
    return u + du * h + 0.5 * d2u * h * h, du + d2u * h, d2u


def path_form_k(hjb: HjbSolution, bundle: PathBundle):
    """K_T = Y_0 - Y_T - sum F(Y, Z, alpha) dt + sum [Z dX + 1/2 Gamma (dX^2 - alpha dt)] per path."""
    g = hjb.grid
    f = hjb.generator
    nxt = _next_layers(g, bundle)
    X = bundle.paths
    ends = np.array([0, g.n_t])
    Yends, _, _ = _taylor(hjb.u, hjb.base.du, hjb.base.d2u, ends, X[:, [0, -1]], g)
    Xk = X[:, :-1]
    y1, z1, gam = _taylor(hjb.u, hjb.base.du, hjb.base.d2u, nxt, Xk, g)
    dX = np.diff(X, axis=1)
    t = g.t[nxt][None, :]
    fhat = f(t, Xk, y1, z1, bundle.alphas)
    dt = bundle.dt
    integral = np.sum(z1 * dX + 0.5 * gam * (dX**2 - bundle.alphas * dt), axis=1)
    return Yends[:, 0] - Yends[:, 1] - np.sum(fhat, axis=1) * dt + integral


def k_form_difference(hjb: HjbSolution, report: KPathReport, bundle: PathBundle):
    """Median over paths of |K_T(gap form) - K_T(path form)|."""
    return float(np.median(np.abs(report.k_paths[:, -1] - path_form_k(hjb, bundle))))


# ---------------------------------------------------------------------------
# assembly


@dataclass(frozen=True, eq=False)
class TwoBsdeSolution:
    hjb: HjbSolution
    family: ScenarioFamily
    feedback: Scenario
    bundles: dict
    k_reports: dict
    terminal_check: float
    x0: float
    tol_k: float

    @property
    def y(self) -> GridSolution:
        return self.hjb.base

    @property
    def z(self):
        return self.hjb.base.du

    def y0(self):
        return self.hjb.value(self.x0)

    def nondecreasing_ok(self):
        return all(r.min_increment >= -self.tol_k for s, r in self.k_reports.items()
                   if not s.flag_out_of_bounds)

    def report_rows(self):
        return [self.k_reports[s].row() for s in self.family.members]


def assemble_solution(hjb: HjbSolution, family: ScenarioFamily, g, *, x0=0.0, n_paths=2000, seed=0,
                      dt=None, bundles: dict | None = None, c_k=1.0,
                      include_feedback=True) -> TwoBsdeSolution:
    """Y = HJB value, Z = its gradient, K^P per member (common random numbers)."""
    grid = hjb.grid
    dt = grid.dt if dt is None else dt
    feedback = extract_feedback(hjb)
    if include_feedback:
        family = family.with_member(feedback)
    if bundles is None:
        normals = standard_normals(seed, n_paths, n_steps_for(grid.T, dt))
        bundles = {s: simulate_paths(s, x0, grid.T, dt, n_paths, seed, normals=normals)
                   for s in family.members}
    missing = [s for s in family.members if s not in bundles]
    if missing:
        raise ConfigurationError(f"no path bundle for {missing[0].describe()}")
    reports = {s: k_increment(hjb, s, bundles[s]) for s in family.members}
    terminal = float(np.max(np.abs(hjb.u[-1] - g(grid.x))))
    return TwoBsdeSolution(hjb, family, feedback, bundles, reports, terminal, float(x0), tol_k(c_k, grid))


def adapted_family(f: GeneratorSpec, g, grid: Grid, bounds: VolatilityBounds, level: int, *, x0=0.0,
                   deterministic_level=None, cap=10_000) -> ScenarioFamily:
    """Deterministic members of ``deterministic_level`` plus the level-``level`` DP optimizer.

    The DP optimizer is the best control that is constant on the dyadic intervals and
    chosen from the state at each knot; it is what makes the family improve with ``level``.
    """
    det = level if deterministic_level is None else deterministic_level
    fam = enumerate_family(bounds, det, grid.T, cap)
    return fam.with_member(family_sup(f, g, grid, bounds, level, x0).scenario)


@dataclass(frozen=True)
class MinConditionRow:
    t: float
    infimum: float
    se: float
    argmin: str
    tolerance: float
    passed: bool
    refinement_needed: bool
    n_candidates: int


def _composite(reference: Scenario, member: Scenario, grid: Grid, k_switch: int) -> Scenario:
    x = grid.x
    rows = [np.broadcast_to((reference if k < k_switch else member).alpha(t, x), x.shape)
            for k, t in enumerate(grid.t[:-1])]
    return Scenario("feedback", reference.bounds, knots=tuple(grid.t[:-1]), table=np.stack(rows),
                    x_nodes=x, label=f"{reference.describe()}|{member.describe()}@{grid.t[k_switch]:g}")


def check_min_condition(sol: TwoBsdeSolution, t_checks=(0.0,), *, reference: Scenario = None,
                        exclude_feedback=False) -> list[MinConditionRow]:
    """inf over the family (conditional on agreeing with ``reference`` on [0, t]) of E[K_T - K_t]."""
    grid = sol.hjb.grid
    reference = sol.feedback if reference is None else reference
    rows = []
    any_bundle = next(iter(sol.bundles.values()))
    for t in t_checks:
        if t == 0:
            cands = {s: r for s, r in sol.k_reports.items()
                     if not (exclude_feedback and s is sol.feedback)}
            offset = 0
        else:
            knots = dyadic_knots(sol.family.level, grid.T)
            if not any(abs(t - k) < 1e-12 for k in knots):
                raise RefinementNeededError(
                    f"t = {t} is not on the level-{sol.family.level} partition; no member agrees with "
                    "the reference up to t, raise the refinement level")
            k_switch = int(round(t / grid.dt))
            offset = int(round(t / any_bundle.dt))
            members = [m for m in sol.family.members if m.is_markov
                       and not (exclude_feedback and m is sol.feedback)]
            if not members:
                raise RefinementNeededError(f"empty conditional family at t = {t}")
            cands = {}
            for m in members:
                s = _composite(reference, m, grid, k_switch)
                b = simulate_paths(s, any_bundle.x0, grid.T, any_bundle.dt, any_bundle.n_paths,
                                   any_bundle.seed)
                cands[s] = k_increment(sol.hjb, s, b)
        best_s, best_v, best_se = None, math.inf, 0.0
        for s, r in cands.items():
            inc = r.k_paths[:, -1] - r.k_paths[:, offset]
            v = float(inc.mean())
            if v < best_v:
                best_s, best_v = s, v
                best_se = float(inc.std(ddof=1) / math.sqrt(inc.size)) if inc.size > 1 else 0.0
        ok = best_v <= sol.tol_k + 3 * best_se
        rows.append(MinConditionRow(float(t), best_v, best_se, best_s.describe(), sol.tol_k, ok,
                                    not ok, len(cands)))
    return rows


def calibrate_c_k(reports, grid: Grid, floor=1.0, quantile=99.0):
    """3 x the 99th percentile of negative increments over the null suite, per (dt + dx^2)."""
    neg = np.concatenate([np.maximum(-r.increments().ravel(), 0.0) for r in reports])
    q = float(np.percentile(neg, quantile)) if neg.size else 0.0
    return max(3.0 * q / (grid.dt + grid.dx**2), floor), q


# ---------------------------------------------------------------------------
# approximation sequence


@dataclass(frozen=True)
class ConvergenceRow:
    n: float
    y_n: float
    abs_diff_to_limit: float
    sup_gap: float
    envelope: float


@dataclass(frozen=True)
class ConvergenceTable:
    rows: tuple
    y_limit: float
    x0: float
    gaps: tuple = field(default=(), repr=False)

    def y_values(self):
        return np.array([r.y_n for r in self.rows])

    def max_decrease(self):
        y = self.y_values()
        return float(max(0.0, np.max(y[:-1] - y[1:]))) if y.size > 1 else 0.0

    def gap_max_increase(self):
        gs = np.array([r.sup_gap for r in self.rows])
        return float(max(0.0, np.max(gs[1:] - gs[:-1]))) if gs.size > 1 else 0.0

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "y_n", "abs_diff_to_limit", "sup_gap", "envelope"])
            for r in self.rows:
                w.writerow([r.n, repr(r.y_n), repr(r.abs_diff_to_limit), repr(r.sup_gap), repr(r.envelope)])
            w.writerow(["limit", repr(self.y_limit), "", "", ""])


def converge_sequence(f: GeneratorSpec, g, grid: Grid, bounds: VolatilityBounds, n_list, *, x0=0.0,
                      n_a=17, probe_box=None, step=None, transform_lambda=None) -> ConvergenceTable:
    """Y^n(0, x0) from the HJB with F^n, n in ``n_list``, against the HJB with F itself.

    With ``transform_lambda`` every solve uses the exponential transform of its driver and
    the terminal data e^{lambda T} g; values are unscaled at t = 0 (a factor 1).
    """
    n_list = list(n_list)
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigurationError("n_list must be strictly increasing")
    step = default_step(max(n_list)) if step is None else step

    def solve(drv):
        if transform_lambda:
            lam = transform_lambda
            drv = exponential_transform(drv, lam, grid.T)
            gg = lambda x: math.exp(lam * grid.T) * g(x)  # noqa: E731
        else:
            gg = g
        return solve_hjb(drv, gg, grid, bounds, n_a=n_a).value(x0)

    y_lim = solve(f)
    box = probe_box or {"y": (-2.0, 2.0), "a": (bounds.a_low, bounds.a_high)}
    gaps: list[GapReport] = gap_table(f, n_list, box, step=step)
    rows = []
    for n, gap in zip(n_list, gaps):
        fn = InfConvolutionSpec(f, n, step=step).generator()
        y = solve(fn)
        rows.append(ConvergenceRow(float(n), y, abs(y - y_lim), gap.sup_gap, gap.envelope))
    return ConvergenceTable(tuple(rows), y_lim, float(x0), tuple(gaps))


def transform_equivalence(f: GeneratorSpec, g, grid: Grid, bounds: VolatilityBounds, lam, *, x0=0.0,
                          n_a=17, scenario: Scenario | None = None) -> dict:
    """Solve with F and with transform(F, lam) plus rescaling; compare unscaled values."""
    from .semilinear import solve_scenario_pde

    ft = exponential_transform(f, lam, grid.T)
    gt = lambda x: math.exp(lam * grid.T) * g(x)  # noqa: E731
    unscale = np.exp(-lam * grid.t)[:, None]
    if scenario is None:
        u = solve_hjb(f, g, grid, bounds, n_a=n_a).u
        ut = solve_hjb(ft, gt, grid, bounds, n_a=n_a).u * unscale
    else:
        u = solve_scenario_pde(f, scenario, g, grid).u
        ut = solve_scenario_pde(ft, scenario, gt, grid).u * unscale
    i0 = grid.node_index(x0)
    v = float(u[0, i0]) if i0 is not None else float(np.interp(x0, grid.x, u[0]))
    vt = float(ut[0, i0]) if i0 is not None else float(np.interp(x0, grid.x, ut[0]))
    return {"lambda": lam, "direct": v, "transformed": vt, "abs_diff": abs(v - vt),
            "max_node_diff": float(np.max(np.abs(u - ut)))}
