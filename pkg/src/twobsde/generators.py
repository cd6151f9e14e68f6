"""Generators F(t, x, y, z, a), Hamiltonians H(t, x, y, z, gamma) and their conjugation.

All maps are vectorized: arguments broadcast against each other with numpy rules
and the result has the broadcast shape.  State dimension is one.
"""
from __future__ import annotations

import ast
import math
import re
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError, EvaluationError

ARGS = ("t", "x", "y", "z", "a")


# ---------------------------------------------------------------------------
# moduli of continuity


@dataclass(frozen=True)
class Modulus:
    """rho(u) = const * u**beta + lin * u, concave and nondecreasing for beta <= 1."""

    const: float
    beta: float = 1.0
    lin: float = 0.0

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return self.const * u**self.beta + self.lin * u

    @property
    def is_lipschitz(self):
        return self.beta == 1.0 or self.const == 0.0

    def envelope(self, n):
        """sup over u >= 0 of rho(u) - n u (the inf-convolution gap bound)."""
        if self.is_lipschitz:
            lip = (self.const if self.beta == 1.0 else 0.0) + self.lin
            return 0.0 if n >= lip else math.inf
        slope = n - self.lin
        if slope <= 0:
            return math.inf
        b, c = self.beta, self.const
        u_star = (c * b / slope) ** (1.0 / (1.0 - b))
        return c * u_star**b - slope * u_star

    def describe(self):
        if self.beta == 1.0:
            text = f"lipschitz({self.const + self.lin:g})"
            return text
        if self.beta == 0.5:
            text = f"sqrt({self.const:g})"
        else:
            text = f"holder({self.beta:g},{self.const:g})"
        return text if self.lin == 0 else f"{text}+lin({self.lin:g})"


_MOD_RE = re.compile(r"^\s*(lipschitz|sqrt|holder)\s*\(([^)]*)\)\s*$")


def parse_modulus(descr: str | Modulus) -> Modulus:
    """Parse "lipschitz(C)", "sqrt(c)" or "holder(beta,c)"; bare "sqrt" means c = 1."""
    if isinstance(descr, Modulus):
        return descr
    if descr.strip() == "sqrt":
        return Modulus(1.0, 0.5)
    m = _MOD_RE.match(descr)
    if not m:
        raise ConfigurationError(f"unknown modulus descriptor {descr!r}")
    kind, args = m.group(1), [float(s) for s in m.group(2).split(",") if s.strip()]
    if kind == "lipschitz":
        return Modulus(args[0] if args else 0.0, 1.0)
    if kind == "sqrt":
        return Modulus(args[0] if args else 1.0, 0.5)
    beta = args[0]
    if not 0 < beta <= 1:
        raise ConfigurationError(f"holder exponent must lie in (0, 1], got {beta}")
    return Modulus(args[1] if len(args) > 1 else 1.0, beta)


# ---------------------------------------------------------------------------
# generator / Hamiltonian specs


@dataclass(frozen=True)
class GeneratorSpec:
    """A driver F(t, x, y, z, a) = func(t, x, y, z, a) + linear_y * y.

    ``linear_y`` is kept apart so that time steppers can integrate it exactly;
    presets leave it at zero.  ``depends`` names the arguments ``func`` actually
    reads, which lets solvers skip redundant evaluations.
    """

    name: str
    func: Callable
    lipschitz_z: float = 0.0
    monotonicity_mu: float = 0.0
    growth_const: float = 0.0
    modulus: Modulus = field(default_factory=lambda: Modulus(0.0))
    linear_y: float = 0.0
    depends: frozenset = frozenset(ARGS)

    def __post_init__(self):
        object.__setattr__(self, "modulus", parse_modulus(self.modulus))
        object.__setattr__(self, "depends", frozenset(self.depends))

    def remainder(self, t, x, y, z, a):
        args = [np.asarray(v, dtype=float) for v in (t, x, y, z, a)]
        shape = np.broadcast_shapes(*(v.shape for v in args))
        out = np.asarray(self.func(*args), dtype=float)
        if not np.all(np.isfinite(out)):
            bad = np.argwhere(~np.isfinite(np.broadcast_to(out, shape)))[0]
            point = {k: float(np.broadcast_to(v, shape)[tuple(bad)]) for k, v in zip(ARGS, args)}
            raise EvaluationError(f"generator {self.name!r} is not finite at {point}", point)
        return np.broadcast_to(out, shape)

    def __call__(self, t, x, y, z, a):
        out = self.remainder(t, x, y, z, a)
        if self.linear_y:
            out = out + self.linear_y * np.asarray(y, dtype=float)
        return out

    evaluate = __call__

    def at_zero(self, t, x, a):
        """F^0 := F(t, x, 0, 0, a)."""
        return self(t, x, 0.0, 0.0, a)


@dataclass(frozen=True)
class HamiltonianSpec:
    """H(t, x, y, z, gamma) on an interval D_H containing 0, truncated to ``gamma_grid``."""

    name: str
    func: Callable
    domain: tuple = (-math.inf, math.inf)
    gamma_grid: np.ndarray = None
    depends: frozenset = frozenset(("t", "x", "y", "z"))

    def __post_init__(self):
        lo, hi = self.domain
        if not lo <= 0.0 <= hi:
            raise ConfigurationError(f"D_H = {self.domain} must contain 0")
        grid = self.gamma_grid
        if grid is None:
            grid = default_gamma_grid(self.domain)
        grid = np.unique(np.asarray(grid, dtype=float))
        if grid.size == 0:
            raise ConfigurationError("empty gamma grid")
        if grid[0] < lo - 1e-12 or grid[-1] > hi + 1e-12:
            raise ConfigurationError("gamma grid leaves the domain D_H")
        object.__setattr__(self, "gamma_grid", grid)
        object.__setattr__(self, "depends", frozenset(self.depends))

    def __call__(self, t, x, y, z, gamma):
        args = [np.asarray(v, dtype=float) for v in (t, x, y, z, gamma)]
        return np.broadcast_to(np.asarray(self.func(*args), dtype=float),
                               np.broadcast_shapes(*(v.shape for v in args)))

    def with_grid(self, lo=None, hi=None, step=None):
        lo = max(self.domain[0], -10.0 if lo is None else lo)
        hi = min(self.domain[1], 10.0 if hi is None else hi)
        return replace(self, gamma_grid=make_grid(lo, hi, 1e-3 if step is None else step))


def make_grid(lo, hi, step):
    if hi <= lo:
        return np.array([lo])
    n = int(round((hi - lo) / step))
    return np.linspace(lo, hi, n + 1)


def default_gamma_grid(domain, lo=-10.0, hi=10.0, step=1e-3):
    return make_grid(max(domain[0], lo), min(domain[1], hi), step)


# ---------------------------------------------------------------------------
# conjugation


def conjugate_from_H(h: HamiltonianSpec, *, lipschitz_z=0.0, monotonicity_mu=0.0,
                     growth_const=0.0, modulus="lipschitz(0)", chunk=4096) -> GeneratorSpec:
    """F(t,x,y,z,a) = max over the gamma grid of 1/2 a gamma - H(t,x,y,z,gamma)."""
    grid = h.gamma_grid
    if grid is None or grid.size == 0:
        raise ConfigurationError("conjugation needs a nonempty gamma grid")

    a_only = not (h.depends & {"t", "x", "y", "z"})

    def func(t, x, y, z, a):
        shape = np.broadcast_shapes(t.shape, x.shape, y.shape, z.shape, a.shape)
        if a_only:
            # F depends on a alone: conjugate once per distinct a value
            vals, inv = np.unique(a, return_inverse=True)
            zero = np.zeros_like(vals)
            f_vals = dense(zero, zero, zero, zero, vals)
            return np.broadcast_to(f_vals[inv].reshape(a.shape), shape).copy()
        return dense(t, x, y, z, a)

    def dense(t, x, y, z, a):
        shape = np.broadcast_shapes(t.shape, x.shape, y.shape, z.shape, a.shape)
        best = np.full(shape, -np.inf)
        ex = (...,) + (None,)
        for start in range(0, grid.size, chunk):
            g = grid[start:start + chunk]
            hv = h(t[ex], x[ex], y[ex], z[ex], g)
            if not np.all(np.isfinite(hv)):
                idx = np.argwhere(~np.isfinite(np.broadcast_to(hv, shape + g.shape)))[0]
                raise EvaluationError(
                    f"H is not finite at gamma={g[idx[-1]]}",
                    {"gamma": float(g[idx[-1]])},
                )
            vals = 0.5 * a[ex] * g - hv
            np.maximum(best, vals.max(axis=-1), out=best)
        return best

    depends = (h.depends & {"t", "x", "y", "z"}) | {"a"}
    return GeneratorSpec(
        name=f"conj({h.name})", func=func, lipschitz_z=lipschitz_z,
        monotonicity_mu=monotonicity_mu, growth_const=growth_const,
        modulus=modulus, depends=depends,
    )


def double_conjugate_check(h: HamiltonianSpec, a_grid, probe) -> float:
    """|sup_a {1/2 a gamma - F(a)} - H(gamma)| at one probe point (t, x, y, z, gamma)."""
    t, x, y, z, gamma = (float(v) for v in probe)
    lo, hi = h.domain
    if not lo <= gamma <= hi:
        raise DomainError(f"gamma={gamma} outside D_H={h.domain}")
    a_grid = np.asarray(a_grid, dtype=float)
    f = conjugate_from_H(h)
    fa = f(t, x, y, z, a_grid)
    rec = np.max(0.5 * a_grid * gamma - fa)
    return float(abs(rec - float(h(t, x, y, z, gamma))))


def exponential_transform(f: GeneratorSpec, lam: float, horizon: float = 1.0) -> GeneratorSpec:
    """F^(lam)(t,x,y,z,a) = e^{lam t} F(t, x, e^{-lam t} y, e^{-lam t} z, a) - lam y.

    The -lam y part is stored in ``linear_y`` so solvers integrate it exactly.
    ``horizon`` only enters the declared growth/modulus constants.
    """
    if lam == 0:
        return f
    inner_lin = f.linear_y

    def func(t, x, y, z, a):
        s = np.exp(lam * t)
        # the inner linear part transforms to itself: e^{lt} c e^{-lt} y = c y
        return s * f.remainder(t, x, y / s, z / s, a)

    grow = math.exp(abs(lam) * horizon)
    mod = f.modulus
    return GeneratorSpec(
        name=f"exp[{lam:g}]({f.name})",
        func=func,
        lipschitz_z=f.lipschitz_z,
        monotonicity_mu=f.monotonicity_mu - lam,
        growth_const=(f.growth_const + abs(lam)) * grow,
        modulus=Modulus(mod.const * grow, mod.beta, mod.lin + abs(lam)),
        linear_y=inner_lin - lam,
        depends=f.depends | {"t"},
    )


def negate(f: GeneratorSpec) -> GeneratorSpec:
    return GeneratorSpec(
        name=f"-{f.name}", func=lambda *args: -f.remainder(*args),
        lipschitz_z=f.lipschitz_z, monotonicity_mu=math.inf,
        growth_const=f.growth_const, modulus=f.modulus, linear_y=-f.linear_y,
        depends=f.depends,
    )


# ---------------------------------------------------------------------------
# assumption probes


@dataclass(frozen=True)
class ProbeSet:
    """Sample points with partner coordinates y2, z2 for pairwise checks."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    a: np.ndarray
    y2: np.ndarray
    z2: np.ndarray

    def __len__(self):
        return self.t.size

    @classmethod
    def from_box(cls, box: dict, n: int, seed: int = 0) -> ProbeSet:
        """Uniform samples in ``box`` = {name: (lo, hi)} for name in t, x, y, z, a."""
        if n < 1:
            raise ConfigurationError("probe set must be nonempty")
        rng = np.random.default_rng(seed)
        cols = {}
        for k in ARGS:
            lo, hi = box.get(k, (0.0, 0.0) if k != "a" else (1.0, 1.0))
            cols[k] = rng.uniform(lo, hi, n)
        lo, hi = box.get("y", (0.0, 0.0))
        cols["y2"] = rng.uniform(lo, hi, n)
        lo, hi = box.get("z", (0.0, 0.0))
        cols["z2"] = rng.uniform(lo, hi, n)
        return cls(**cols)

    @classmethod
    def from_points(cls, points, partners=None) -> ProbeSet:
        """``points`` rows are (t, x, y, z, a); partners default to the cyclic shift."""
        arr = np.atleast_2d(np.asarray(points, dtype=float))
        if arr.size == 0:
            raise ConfigurationError("probe set must be nonempty")
        t, x, y, z, a = arr.T
        if partners is None:
            y2, z2 = np.roll(y, 1), np.roll(z, 1)
        else:
            y2, z2 = np.asarray(partners, dtype=float).T
        return cls(t, x, y, z, a, y2, z2)


@dataclass(frozen=True)
class AssumptionCheck:
    check: str
    worst_ratio: float
    witness: dict
    passed: bool

    def to_dict(self):
        return {"check": self.check, "worst_ratio": self.worst_ratio,
                "witness": self.witness, "pass": self.passed}


@dataclass(frozen=True)
class AssumptionReport:
    generator: str
    checks: tuple

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.check == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {"generator": self.generator, "pass": self.passed,
                "checks": [c.to_dict() for c in self.checks]}


def _worst(ratio, cols, names):
    ratio = np.where(np.isnan(ratio), -np.inf, ratio)
    i = int(np.argmax(ratio))
    return float(ratio[i]), {k: float(cols[k][i]) for k in names}


def probe_assumptions(f: GeneratorSpec, samples: ProbeSet, rtol: float = 1e-9) -> AssumptionReport:
    """Sampled checks of the z-Lipschitz, monotonicity and linear-growth assumptions."""
    if len(samples) == 0:
        raise ConfigurationError("probe set must be nonempty")
    s = samples
    cols = {k: getattr(s, k) for k in ("t", "x", "y", "z", "a", "y2", "z2")}
    checks = []

    fz1 = f(s.t, s.x, s.y, s.z, s.a)
    fz2 = f(s.t, s.x, s.y, s.z2, s.a)
    dz = np.sqrt(s.a) * np.abs(s.z - s.z2)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(dz > 0, np.abs(fz1 - fz2) / dz, np.where(fz1 == fz2, 0.0, np.inf))
    worst, wit = _worst(r, cols, ("t", "x", "y", "z", "z2", "a"))
    checks.append(AssumptionCheck("lipschitz_z", worst, wit,
                                  worst <= f.lipschitz_z * (1 + rtol) + rtol))

    fy2 = f(s.t, s.x, s.y2, s.z, s.a)
    dy = s.y - s.y2
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(dy != 0, dy * (fz1 - fy2) / dy**2, 0.0)
    worst, wit = _worst(r, cols, ("t", "x", "y", "y2", "z", "a"))
    mu = f.monotonicity_mu
    checks.append(AssumptionCheck("monotonicity", worst, wit,
                                  worst <= mu + rtol * max(1.0, abs(mu))))

    f0 = np.abs(f.at_zero(s.t, s.x, s.a))
    fy0 = np.abs(f(s.t, s.x, s.y, 0.0, s.a))
    r = (fy0 - f0) / (1.0 + np.abs(s.y))
    worst, wit = _worst(r, cols, ("t", "x", "y", "a"))
    checks.append(AssumptionCheck("growth", worst, wit,
                                  worst <= f.growth_const * (1 + rtol) + rtol))
    return AssumptionReport(f.name, tuple(checks))


# ---------------------------------------------------------------------------
# safe expression form

_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
    "sqrt": np.sqrt, "abs": np.abs, "sign": np.sign, "tanh": np.tanh,
    "minimum": np.minimum, "maximum": np.maximum, "min": np.minimum, "max": np.maximum,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Mod,
)


def compile_expression(text: str, variables=ARGS) -> tuple[Callable, frozenset]:
    """Compile an arithmetic expression over ``variables`` into a numpy function."""
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"bad expression {text!r}: {exc.msg}") from None
    used = set()
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ConfigurationError(f"disallowed syntax {type(node).__name__} in {text!r}")
        if isinstance(node, ast.Call) and not (
            isinstance(node.func, ast.Name) and node.func.id in _FUNCS
        ):
            raise ConfigurationError(f"unknown function in {text!r}")
        if isinstance(node, ast.Name) and node.id not in _FUNCS:
            if node.id in variables:
                used.add(node.id)
            elif node.id not in _CONSTS:
                raise ConfigurationError(f"unknown name {node.id!r} in {text!r}")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ConfigurationError(f"non-numeric constant in {text!r}")
    code = compile(tree, "<expression>", "eval")
    env = {"__builtins__": {}, **_FUNCS, **_CONSTS}

    def fn(*args):
        return eval(code, env, dict(zip(variables, args)))  # noqa: S307 - AST whitelisted

    return fn, frozenset(used)


# ---------------------------------------------------------------------------
# presets


def _zero(t, x, y, z, a):
    return np.zeros(())


def zero_generator() -> GeneratorSpec:
    return GeneratorSpec("zero", _zero, depends=frozenset())


def affine_generator(c0=0.0, cy=0.0, cz=0.0) -> GeneratorSpec:
    """F = c0 + cy*y + cz*sqrt(a)*z."""
    def func(t, x, y, z, a):
        return c0 + cy * y + cz * np.sqrt(a) * z

    return GeneratorSpec(
        f"affine({c0:g},{cy:g},{cz:g})", func, lipschitz_z=abs(cz),
        monotonicity_mu=cy, growth_const=abs(cy), modulus=Modulus(abs(cy)),
        depends=frozenset({"y", "z", "a"} if cz else {"y"}),
    )


def sqrt_generator(cap=4.0, signed=False, x_amp=0.0) -> GeneratorSpec:
    """-sqrt(|y| ^ cap) (or -sign(y) sqrt(|y| ^ cap) when ``signed``) + x_amp*sin(x).

    The unsigned form is decreasing only for y >= 0; the signed form is decreasing
    everywhere with modulus sqrt(2u).
    """
    def func(t, x, y, z, a):
        r = np.sqrt(np.minimum(np.abs(y), cap))
        out = -np.sign(y) * r if signed else -r
        return out + x_amp * np.sin(x) if x_amp else out

    name = ("signed_sqrt" if signed else "sqrt") + f"(cap={cap:g}" + (f",x={x_amp:g})" if x_amp else ")")
    return GeneratorSpec(
        name, func, lipschitz_z=0.0,
        monotonicity_mu=0.0 if signed else math.inf,
        growth_const=1.0, modulus=Modulus(math.sqrt(2.0) if signed else 1.0, 0.5),
        depends=frozenset({"y", "x"} if x_amp else {"y"}),
    )


def piecewise_generator(slope_neg=-0.5, slope_pos=-1.0, c0=0.0) -> GeneratorSpec:
    """Piecewise-linear in y with a kink at 0."""
    def func(t, x, y, z, a):
        return c0 + slope_pos * np.maximum(y, 0.0) + slope_neg * np.minimum(y, 0.0)

    lip = max(abs(slope_neg), abs(slope_pos))
    return GeneratorSpec(
        f"piecewise({slope_neg:g},{slope_pos:g},{c0:g})", func,
        monotonicity_mu=max(slope_neg, slope_pos), growth_const=lip,
        modulus=Modulus(lip), depends=frozenset({"y"}),
    )


def quadratic_conjugate_generator(c=1.0) -> GeneratorSpec:
    """Closed-form conjugate of H = c gamma^2 / 2, i.e. F(a) = a^2 / (8c)."""
    return GeneratorSpec(f"quad_conj({c:g})", lambda t, x, y, z, a: a**2 / (8 * c),
                         depends=frozenset({"a"}))


def expression_generator(text: str, **constants) -> GeneratorSpec:
    func, used = compile_expression(text)
    return GeneratorSpec(f"expr({text})", func, depends=used, **constants)


def dominating_generator(f0_abs: Callable, C: float) -> GeneratorSpec:
    """|F^0|(t, x, a) + C (1 + |y| + sqrt(a) |z|)."""
    def func(t, x, y, z, a):
        return f0_abs(t, x, a) + C * (1.0 + np.abs(y) + np.sqrt(a) * np.abs(z))

    return GeneratorSpec(f"dominating(C={C:g})", func, lipschitz_z=C, monotonicity_mu=C,
                         growth_const=C, modulus=Modulus(C))


def quadratic_hamiltonian(c=1.0, **grid) -> HamiltonianSpec:
    h = HamiltonianSpec(f"quad({c:g})", lambda t, x, y, z, g: 0.5 * c * g**2,
                        depends=frozenset())
    return h.with_grid(**grid) if grid else h


def bsb_hamiltonian(a_low, a_high, **grid) -> HamiltonianSpec:
    """1/2 a_high gamma^+ - 1/2 a_low gamma^-."""
    h = HamiltonianSpec(
        f"bsb({a_low:g},{a_high:g})",
        lambda t, x, y, z, g: 0.5 * a_high * np.maximum(g, 0) + 0.5 * a_low * np.minimum(g, 0),
        depends=frozenset(),
    )
    return h.with_grid(**grid) if grid else h


def abs_hamiltonian(**grid) -> HamiltonianSpec:
    h = HamiltonianSpec("abs", lambda t, x, y, z, g: np.abs(g), depends=frozenset())
    return h.with_grid(**grid) if grid else h


def zero_hamiltonian(domain=(0.0, 0.0), step=1e-3) -> HamiltonianSpec:
    lo, hi = domain
    return HamiltonianSpec("zero", lambda t, x, y, z, g: np.zeros_like(g), domain=domain,
                           gamma_grid=make_grid(lo, hi, step), depends=frozenset())


GENERATOR_PRESETS = {
    "zero": zero_generator,
    "affine": affine_generator,
    "sqrt": sqrt_generator,
    "signed_sqrt": lambda **kw: sqrt_generator(signed=True, **kw),
    "piecewise": piecewise_generator,
    "quadratic_conjugate": quadratic_conjugate_generator,
}

HAMILTONIAN_PRESETS = {
    "zero": zero_hamiltonian,
    "quadratic": quadratic_hamiltonian,
    "bsb": bsb_hamiltonian,
    "abs": abs_hamiltonian,
}


def make_generator(preset: str, **params) -> GeneratorSpec:
    if preset == "expression":
        params = dict(params)
        text = params.pop("expr")
        if "modulus" in params:
            params["modulus"] = parse_modulus(params["modulus"])
        return expression_generator(text, **params)
    try:
        factory = GENERATOR_PRESETS[preset]
    except KeyError:
        raise ConfigurationError(f"unknown generator preset {preset!r}") from None
    return factory(**params)


def make_hamiltonian(preset: str, **params) -> HamiltonianSpec:
    try:
        factory = HAMILTONIAN_PRESETS[preset]
    except KeyError:
        raise ConfigurationError(f"unknown Hamiltonian preset {preset!r}") from None
    return factory(**params)
