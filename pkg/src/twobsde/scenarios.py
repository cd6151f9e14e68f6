"""Volatility scenarios alpha in [a_low, a_high], scenario families, and path simulation."""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, EnumerationCapError, SimulationError

_TIME_TOL = 1e-12


@dataclass(frozen=True)
class VolatilityBounds:
    a_low: float
    a_high: float

    def __post_init__(self):
        if not 0 < self.a_low <= self.a_high:
            raise ConfigurationError(f"need 0 < a_low <= a_high, got ({self.a_low}, {self.a_high})")

    def grid(self, n):
        """n-point grid including both endpoints (a single point for degenerate bounds)."""
        if self.a_low == self.a_high:
            return np.array([self.a_low])
        if n < 2:
            raise ConfigurationError("a-grid needs at least two points")
        return np.linspace(self.a_low, self.a_high, n)

    def contains(self, a):
        a = np.asarray(a)
        return bool(np.all((a >= self.a_low - 1e-12) & (a <= self.a_high + 1e-12)))

    def to_list(self):
        return [self.a_low, self.a_high]


@dataclass(frozen=True, eq=False)
class Scenario:
    """A volatility control.

    kind = "constant":       values = (a,)
    kind = "piecewise":      values[j] on [knots[j], knots[j+1]), knots[0] = 0
    kind = "feedback":       a(t, x) = table[k, nearest x-node], k the step containing t
    kind = "knot_feedback":  on [knots[j], knots[j+1]) the value table[j] at the node
                             nearest to the state observed at knots[j]
    """

    kind: str
    bounds: VolatilityBounds
    values: tuple = ()
    knots: tuple = (0.0,)
    table: np.ndarray = None
    x_nodes: np.ndarray = None
    flag_out_of_bounds: bool = False
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("constant", "piecewise", "feedback", "knot_feedback"):
            raise ConfigurationError(f"unknown scenario kind {self.kind!r}")
        knots = tuple(float(k) for k in self.knots)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if any(b <= a for a, b in zip(knots, knots[1:])) or knots[0] != 0.0:
            raise ConfigurationError("scenario knots must start at 0 and increase strictly")
        if self.kind in ("constant", "piecewise") and len(self.values) != len(knots):
            raise ConfigurationError("one value per piece is required")
        if self.kind in ("feedback", "knot_feedback"):
            if self.table is None or self.x_nodes is None:
                raise ConfigurationError(f"{self.kind} scenario needs a table and x nodes")
            object.__setattr__(self, "table", np.asarray(self.table, dtype=float))
            object.__setattr__(self, "x_nodes", np.asarray(self.x_nodes, dtype=float))
        if not self.flag_out_of_bounds:
            vals = self.table if self.kind in ("feedback", "knot_feedback") else self.values
            if not self.bounds.contains(vals):
                raise ConfigurationError(f"scenario values leave {self.bounds} without the demo flag")

    # -- constructors -------------------------------------------------------

    @classmethod
    def constant(cls, a, bounds, **kw):
        return cls("constant", bounds, values=(a,), **kw)

    @classmethod
    def piecewise(cls, knots, values, bounds, **kw):
        return cls("piecewise", bounds, values=tuple(values), knots=tuple(knots), **kw)

    # -- evaluation ---------------------------------------------------------

    @property
    def is_deterministic(self):
        return self.kind in ("constant", "piecewise")

    @property
    def is_markov(self):
        return self.kind != "knot_feedback"

    def _piece(self, t):
        return int(np.searchsorted(self.knots, t + _TIME_TOL, side="right") - 1)

    def _node(self, x):
        nodes = self.x_nodes
        dx = nodes[1] - nodes[0]
        return np.clip(np.rint((np.asarray(x) - nodes[0]) / dx).astype(np.int64), 0, nodes.size - 1)

    def alpha(self, t, x, x_knot=None):
        """Control value at time t for states x (x_knot: state at the last knot)."""
        shape = np.shape(x)
        if self.kind == "constant":
            return np.full(shape, self.values[0])
        if self.kind == "piecewise":
            return np.full(shape, self.values[self._piece(t)])
        if self.kind == "feedback":
            k = min(self._piece(t), self.table.shape[0] - 1)
            return self.table[k, self._node(x)]
        j = self._piece(t)
        src = x if x_knot is None else x_knot
        return self.table[j, self._node(src)]

    def deterministic_values_on(self, times):
        """Per-step constant value for deterministic kinds, None otherwise."""
        if not self.is_deterministic:
            return None
        return np.array([self.values[self._piece(t)] for t in times])

    def encoding(self):
        """Canonical, partition-independent encoding of a deterministic scenario."""
        if not self.is_deterministic:
            return (self.kind, self.label)
        merged = []
        for k, v in zip(self.knots, self.values):
            if merged and merged[-1][1] == v:
                continue
            merged.append((round(k, 12), round(v, 12)))
        return tuple(merged)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        if self.is_deterministic and other.is_deterministic:
            return self.encoding() == other.encoding() and self.flag_out_of_bounds == other.flag_out_of_bounds
        return self is other

    def __hash__(self):
        return hash(self.encoding()) if self.is_deterministic else id(self)

    def to_dict(self):
        d = {"kind": self.kind, "knots": list(self.knots), "values": list(self.values),
             "bounds": self.bounds.to_list(), "flag": self.flag_out_of_bounds}
        if self.table is not None:
            d["table"] = self.table.tolist()
            d["x_nodes"] = self.x_nodes.tolist()
        if self.label:
            d["label"] = self.label
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], VolatilityBounds(*d["bounds"]), values=tuple(d.get("values", ())),
                   knots=tuple(d.get("knots", (0.0,))), table=d.get("table"),
                   x_nodes=d.get("x_nodes"), flag_out_of_bounds=d.get("flag", False),
                   label=d.get("label", ""))

    def describe(self):
        if self.label:
            return self.label
        if self.kind == "constant":
            return f"const({self.values[0]:g})"
        if self.kind == "piecewise":
            return "pw(" + ",".join(f"{v:g}" for v in self.values) + ")"
        return self.kind


@dataclass(frozen=True)
class ScenarioFamily:
    members: tuple
    bounds: VolatilityBounds
    level: int = 0
    horizon: float = 1.0
    flagged: bool = False

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError("scenario family must be nonempty")
        object.__setattr__(self, "members", tuple(self.members))

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def encodings(self):
        return {m.encoding() for m in self.members}

    def with_member(self, s: Scenario) -> ScenarioFamily:
        if any(m is s for m in self.members):
            return self
        return ScenarioFamily(self.members + (s,), self.bounds, self.level, self.horizon, self.flagged)

    def a_grid(self):
        return family_a_grid(self.bounds)

    def to_json(self):
        return json.dumps({"level": self.level, "horizon": self.horizon,
                           "bounds": self.bounds.to_list(),
                           "members": [m.to_dict() for m in self.members]})


def family_a_grid(bounds: VolatilityBounds):
    """The three-point grid {a_low, mid, a_high} shared by every refinement level."""
    return np.unique(np.array([bounds.a_low, 0.5 * (bounds.a_low + bounds.a_high), bounds.a_high]))


def dyadic_knots(level, horizon):
    return tuple(horizon * j / 2**level for j in range(2**level))


def enumerate_family(bounds: VolatilityBounds, level: int, horizon: float = 1.0,
                     cap: int = 10_000) -> ScenarioFamily:
    """Deterministic piecewise-constant scenarios on the dyadic partition of depth ``level``."""
    if level < 0:
        raise ConfigurationError("refinement level must be >= 0")
    grid = family_a_grid(bounds)
    pieces = 2**level
    needed = grid.size**pieces
    if needed > cap:
        raise EnumerationCapError(cap, needed)
    knots = dyadic_knots(level, horizon)
    seen = {}
    for combo in itertools.product(grid, repeat=pieces):
        s = Scenario.piecewise(knots, combo, bounds) if pieces > 1 else Scenario.constant(combo[0], bounds)
        enc = s.encoding()
        if enc not in seen:
            if len(enc) == 1:
                s = Scenario.constant(enc[0][1], bounds)
            seen[enc] = s
    # constants first, then by number of pieces and values
    members = sorted(seen.values(), key=lambda s: (len(s.encoding()), s.encoding()))
    return ScenarioFamily(tuple(members), bounds, level, horizon)


def counterexample_family(p_max: int) -> ScenarioFamily:
    """alpha = p for p = 1..p_max; flagged, since the set is not bounded uniformly."""
    if p_max < 1:
        raise ConfigurationError("p_max must be >= 1")
    bounds = VolatilityBounds(1.0, float(p_max))
    members = tuple(Scenario.constant(float(p), bounds, flag_out_of_bounds=True)
                    for p in range(1, p_max + 1))
    return ScenarioFamily(members, bounds, 0, 1.0, flagged=True)


# ---------------------------------------------------------------------------
# path simulation


def standard_normals(seed: int, n_paths: int, n_steps: int):
    """Counter-based stream: entry (i, k) depends only on (seed, i, k)."""
    gen = np.random.Generator(np.random.Philox(key=int(seed)))
    return gen.standard_normal((n_paths, n_steps))


def n_steps_for(T, dt):
    m = T / dt
    n = int(round(m))
    if n < 1 or abs(m - n) > 1e-12 * max(1.0, m):
        raise ConfigurationError(f"dt={dt} does not divide T={T}")
    return n


@dataclass(frozen=True, eq=False)
class PathBundle:
    scenario: Scenario
    x0: float
    T: float
    dt: float
    n_paths: int
    seed: int
    paths: np.ndarray
    increments: np.ndarray
    alphas: np.ndarray
    times: np.ndarray = field(repr=False, default=None)

    @property
    def n_steps(self):
        return self.increments.shape[1]

    def x_increments(self):
        return np.diff(self.paths, axis=1)

    def realized_qv(self):
        return np.sum(self.x_increments() ** 2, axis=1)

    def integrated_alpha(self):
        return np.sum(self.alphas, axis=1) * self.dt

    def to_csv(self, path, max_paths=None):
        m = self.n_paths if max_paths is None else min(max_paths, self.n_paths)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "path_id", "X"])
            for i in range(m):
                for k, t in enumerate(self.times):
                    w.writerow([repr(float(t)), i, repr(float(self.paths[i, k]))])


def simulate_paths(s: Scenario, x0: float, T: float, dt: float, n_paths: int, seed: int,
                   normals=None) -> PathBundle:
    """Euler scheme X_{k+1} = X_k + sqrt(alpha(t_k, X_k) dt) xi_k."""
    n_steps = n_steps_for(T, dt)
    if n_paths < 1:
        raise ConfigurationError("n_paths must be >= 1")
    xi = standard_normals(seed, n_paths, n_steps) if normals is None else normals
    times = np.arange(n_steps + 1) * dt
    X = np.empty((n_paths, n_steps + 1))
    X[:, 0] = x0
    alphas = np.empty((n_paths, n_steps))
    x_knot = X[:, 0].copy()
    piece = 0
    sq = math.sqrt(dt)
    for k in range(n_steps):
        t = times[k]
        if s.kind == "knot_feedback":
            j = s._piece(t)
            if j != piece or k == 0:
                piece = j
                x_knot = X[:, k].copy()
        a = s.alpha(t, X[:, k], x_knot)
        if np.any(a <= 0):
            raise SimulationError(f"nonpositive volatility density at t={t}")
        alphas[:, k] = a
        X[:, k + 1] = X[:, k] + np.sqrt(a) * sq * xi[:, k]
    return PathBundle(s, float(x0), float(T), float(dt), n_paths, int(seed), X, sq * xi, alphas, times)


def qv_median_relative_error(bundle: PathBundle) -> float:
    ia = bundle.integrated_alpha()
    return float(np.median(np.abs(bundle.realized_qv() - ia) / ia))


def qv_zscores(bundle: PathBundle):
    """Per-path (realized QV - int alpha dt) / se with se^2 = 2 sum alpha^2 dt^2."""
    se = np.sqrt(2.0 * np.sum(bundle.alphas**2, axis=1)) * bundle.dt
    return (bundle.realized_qv() - bundle.integrated_alpha()) / se
