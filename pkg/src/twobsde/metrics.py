"""Empirical family norms, the generalized Doob inequality and the monotone convergence demo."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PreconditionError, RefusalError
from .generators import GeneratorSpec, zero_generator
from .grid import Grid, evaluate_along_paths, interp_rows
from .hjb import extract_feedback, solve_hjb
from .scenarios import (ScenarioFamily, VolatilityBounds, counterexample_family, enumerate_family,
                        n_steps_for, simulate_paths, standard_normals)

KINDS = ("L", "D", "H", "phi")


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


@dataclass(frozen=True)
class ScenarioPaths:
    """Per-scenario path statistics feeding the norms."""

    label: str
    xi: np.ndarray              # (n_paths,)
    y: np.ndarray = None        # (n_paths, n_steps + 1)
    z: np.ndarray = None        # (n_paths, n_steps + 1)
    alpha: np.ndarray = None    # (n_paths, n_steps)
    k_T: np.ndarray = None      # (n_paths,)
    dt: float = 1.0
    flagged: bool = False


@dataclass(frozen=True)
class NormReport:
    kind: str
    p: float
    kappa: float
    value: float                 # sup over scenarios of E[...]^p-type moment
    per_scenario: dict
    se: float
    epsilon: float = 0.0
    argmax: str = ""

    @property
    def norm(self):
        """value^(1/p): the power mean, monotone in p."""
        return self.value ** (1.0 / self.p) if self.value > 0 else 0.0

    def to_dict(self):
        return {"kind": self.kind, "p": self.p, "kappa": self.kappa, "value": self.value,
                "norm": self.norm, "se": self.se, "epsilon": self.epsilon, "argmax": self.argmax,
                "per_scenario": self.per_scenario}


def _reduce(kind, p, kappa, per, eps=0.0):
    # deterministic reduction: max value, ties by label order
    label = max(sorted(per), key=lambda k: per[k][0])
    return NormReport(kind, p, kappa, per[label][0], {k: v[0] for k, v in per.items()}, per[label][1],
                      eps, label)


def empirical_norm(data, kind: str, p: float = 2.0, kappa: float = 2.0, demo=False,
                   epsilon=0.0) -> NormReport:
    """sup over scenarios of  L: E|xi|^p,  D: E sup_t |Y_t|^p,  H: E (int alpha |Z|^2 dt)^(p/2)."""
    if kind not in ("L", "D", "H"):
        raise PreconditionError(f"unknown norm kind {kind!r} (phi is computed by phi_norm)")
    data = list(data)
    if any(d.flagged for d in data) and not demo:
        raise RefusalError("flagged (out-of-bounds) scenarios are accepted only in demo mode")
    per = {}
    for d in data:
        if kind == "L":
            v = np.abs(d.xi) ** p
        elif kind == "D":
            v = np.max(np.abs(d.y), axis=1) ** p
        else:
            qv = np.sum(d.alpha * d.z[:, :-1] ** 2, axis=1) * d.dt
            v = qv ** (p / 2)
        per[d.label] = _mean_se(v)
    return _reduce(kind, p, kappa, per, epsilon)


def scenario_paths(sol, g) -> list[ScenarioPaths]:
    """ScenarioPaths for every member of an assembled solution."""
    out = []
    for s in sol.family.members:
        b = sol.bundles[s]
        ser = evaluate_along_paths(sol.hjb.base, b)
        out.append(ScenarioPaths(s.describe(), g(b.paths[:, -1]), ser.y, ser.z, b.alphas,
                                 sol.k_reports[s].k_paths[:, -1], b.dt, s.flag_out_of_bounds))
    return out


def phi_norm(f: GeneratorSpec, grid: Grid, bounds: VolatilityBounds, bundles, kappa=2.0, n_a=17,
             demo=False) -> NormReport:
    """sup_P E[ sup_t ( int_0^t |F^0|^k ds + sup-conditional E_t int_t^T |F^0|^k ds )^(2/k) ]."""
    def reward(t, x, y, z, a):
        return np.abs(f.at_zero(t, x, a)) ** kappa

    running = GeneratorSpec(f"|F0|^{kappa:g}", reward, depends=f.depends - {"y", "z"} | {"a"})
    w = solve_hjb(running, lambda x: np.zeros_like(x), grid, bounds, n_a=n_a, residual_tol=math.inf)
    per = {}
    for s, b in bundles.items():
        if s.flag_out_of_bounds and not demo:
            raise RefusalError("flagged (out-of-bounds) scenarios are accepted only in demo mode")
        t = b.times[:-1][None, :]
        inc = np.abs(f.at_zero(t, b.paths[:, :-1], b.alphas)) ** kappa * b.dt
        past = np.concatenate([np.zeros((b.n_paths, 1)), np.cumsum(inc, axis=1)], axis=1)
        stride = int(round(b.dt / grid.dt))
        layers = np.arange(b.n_steps + 1) * stride
        future = interp_rows(w.u, layers, b.paths, grid)
        per[s.describe()] = _mean_se(np.max(past + future, axis=1) ** (2.0 / kappa))
    return _reduce("phi", 2.0, kappa, per)


# ---------------------------------------------------------------------------
# generalized Doob inequality


@dataclass(frozen=True)
class DoobReport:
    xi: str
    n: float
    p: float
    lhs: float
    rhs: float
    C: float
    ratio: float
    se: float
    passed: bool
    rhs_mc: float = float("nan")
    per_scenario: dict = field(default_factory=dict)

    def to_dict(self):
        return {"xi": self.xi, "n": self.n, "p": self.p, "lhs": self.lhs, "rhs": self.rhs, "C": self.C,
                "ratio": self.ratio, "se": self.se, "pass": self.passed, "rhs_mc": self.rhs_mc}


def doob_constant(n, p):
    if not p > n >= 1:
        raise PreconditionError(f"need p > n >= 1, got n = {n}, p = {p}")
    return 1.0 + n / (p - n)


def doob_check(xi, family: ScenarioFamily, n: float, p: float, grid: Grid, *, x0=0.0, n_paths=4000,
               seed=0, dt=None, n_a=17, demo=False) -> DoobReport:
    """sup_P E[sup_t M_t^n] <= (1 + n/(p-n)) (sup_P E|xi|^p)^(n/p),  M_t = sup-conditional E_t|xi|.

    M is the grid value of sup over controls of E_t|xi| (HJB with F = 0); the right side uses
    the same grid sup of E|xi|^p.
    """
    C = doob_constant(n, p)
    if family.flagged and not demo:
        raise RefusalError("flagged families are accepted only in demo mode")
    bounds = family.bounds
    absxi = lambda x: np.abs(xi(x))  # noqa: E731
    zero = zero_generator()
    m_sol = solve_hjb(zero, absxi, grid, bounds, n_a=n_a)
    rhs_sol = solve_hjb(zero, lambda x: np.abs(xi(x)) ** p, grid, bounds, n_a=n_a)
    rhs = max(rhs_sol.value(x0), 0.0) ** (n / p)
    members = family.with_member(extract_feedback(m_sol)).members
    dt = grid.dt if dt is None else dt
    normals = standard_normals(seed, n_paths, n_steps_for(grid.T, dt))
    per, rhs_mc = {}, 0.0
    for s in members:
        b = simulate_paths(s, x0, grid.T, dt, n_paths, seed, normals=normals)
        stride = int(round(dt / grid.dt))
        M = interp_rows(m_sol.u, np.arange(b.n_steps + 1) * stride, b.paths, grid)
        per[s.describe()] = _mean_se(np.max(M, axis=1) ** n)
        rhs_mc = max(rhs_mc, float(np.mean(np.abs(xi(b.paths[:, -1])) ** p)))
    label = max(sorted(per), key=lambda k: per[k][0])
    lhs, se = per[label]
    ratio = lhs / (C * rhs) if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    margin = 3 * se / (C * rhs) if rhs > 0 else 0.0
    name = getattr(xi, "name", "xi")
    return DoobReport(name, float(n), float(p), lhs, rhs, C, ratio, se, ratio <= 1 + margin,
                      rhs_mc ** (n / p), {k: v[0] for k, v in per.items()})


# ---------------------------------------------------------------------------
# monotone convergence demo


@dataclass(frozen=True)
class MctRow:
    n: float
    bounded_sup: float
    bounded_se: float
    bounded_theory: float
    unbounded_sup: float
    unbounded_se: float
    unbounded_theory: float
    doubled_sup: float
    doubled_theory: float


def _family_sup_of_mean(family, T, dt, n_paths, seed, fn):
    normals = standard_normals(seed, n_paths, n_steps_for(T, dt))
    best, best_se = -math.inf, 0.0
    for s in family.members:
        b = simulate_paths(s, 0.0, T, dt, n_paths, seed, normals=normals)
        m, se = _mean_se(fn(b.paths[:, -1]))
        if m > best:
            best, best_se = m, se
    return best, best_se


def monotone_convergence_demo(n_list, bounds: VolatilityBounds, p_max: int, *, n_paths=20000, seed=0,
                              T=1.0, dt=None) -> list[MctRow]:
    """Y_n = B_T^2 / n: sup-of-means under a bounded family and under alpha = p, p <= p_max."""
    dt = T / 20 if dt is None else dt
    bounded = enumerate_family(bounds, 0, T)
    unb = counterexample_family(p_max)
    dbl = counterexample_family(2 * p_max)
    b_m, b_se = _family_sup_of_mean(bounded, T, dt, n_paths, seed, lambda x: x**2)
    u_m, u_se = _family_sup_of_mean(unb, T, dt, n_paths, seed, lambda x: x**2)
    d_m, _ = _family_sup_of_mean(dbl, T, dt, n_paths, seed, lambda x: x**2)
    return [MctRow(float(n), b_m / n, b_se / n, bounds.a_high * T / n, u_m / n, u_se / n, p_max * T / n,
                   d_m / n, 2 * p_max * T / n) for n in n_list]


def write_mct_csv(rows, directory):
    d = Path(directory)
    with (d / "mct_demo.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "bounded_sup", "unbounded_sup", "bounded_theory", "unbounded_theory"])
        for r in rows:
            w.writerow([r.n, repr(r.bounded_sup), repr(r.unbounded_sup), repr(r.bounded_theory),
                        repr(r.unbounded_theory)])
    for name, attr in (("bounded", "bounded_sup"), ("unbounded", "unbounded_sup")):
        with (d / f"mct_{name}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "sup"])
            for r in rows:
                w.writerow([r.n, repr(getattr(r, attr))])


# ---------------------------------------------------------------------------
# a-priori estimate ratios


def apriori_terms(sol, g, f: GeneratorSpec, p=2.0, kappa=2.0) -> dict:
    """Numerator D^p(Y) + H^p(Z) + sup E K_T^p over denominator 1 + L^p(xi) + phi^(p/2)."""
    data = scenario_paths(sol, g)
    d = empirical_norm(data, "D", p).value
    h = empirical_norm(data, "H", p).value
    k = max(float(np.mean(np.abs(s.k_T) ** p)) for s in data)
    lnorm = empirical_norm(data, "L", p).value
    ph = phi_norm(f, sol.hjb.grid, sol.family.bounds, sol.bundles, kappa).value
    num = d + h + k
    den = 1.0 + lnorm + ph ** (p / 2)
    return {"D": d, "H": h, "K": k, "L": lnorm, "phi": ph, "numerator": num, "denominator": den,
            "ratio": num / den}


def apriori_report(terms_by_n: dict, bound: float, spread_tol=0.2) -> dict:
    """Pass iff every ratio is below the frozen regression bound."""
    ratios = {n: t["ratio"] for n, t in terms_by_n.items()}
    vals = np.array(list(ratios.values()))
    mx = float(vals.max()) if vals.size else 0.0
    mid = float(np.mean(vals)) if vals.size else 0.0
    spread = float(np.max(np.abs(vals - mid)) / mid) if mid > 0 else 0.0
    return {"ratios": ratios, "max_ratio": mx, "bound": bound, "spread": spread,
            "uniform": spread <= spread_tol, "pass": mx <= bound}
