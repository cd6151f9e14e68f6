"""Inf-convolution Lipschitz approximation F^n and the uniform gap diagnostic."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .errors import ConfigurationError, PreconditionError
from .generators import ARGS, GeneratorSpec, Modulus


def default_step(n):
    return min(1.0 / (4.0 * n * n), 1e-3)


def estimate_oscillation(base: GeneratorSpec, box: dict | None = None, n_samples=4001):
    """max - min of F over a y-sweep with the other arguments at the box centre."""
    box = box or {}
    lo, hi = box.get("y", (-10.0, 10.0))
    y = np.linspace(lo, hi, n_samples)
    mid = {k: 0.5 * sum(box.get(k, (0.0, 0.0) if k != "a" else (1.0, 1.0))) for k in ARGS}
    vals = base(mid["t"], mid["x"], y, mid["z"], mid["a"])
    return float(np.max(vals) - np.min(vals))


@dataclass(frozen=True)
class InfConvolutionSpec:
    """F^n(y) = min over u in {y} U (lattice j*step, |u - y| <= radius) of F(u) + n |y - u|.

    A fixed lattice (rather than y-relative offsets) makes F^m <= F^n <= F hold exactly
    for m <= n sharing one step.
    """

    base: GeneratorSpec
    n: float
    step: float = None
    radius: float = None
    table_range: tuple = (-64.0, 64.0)
    _table: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.n < self.base.growth_const:
            raise PreconditionError(
                f"inf-convolution needs n >= C = {self.base.growth_const}, got n = {self.n}"
            )
        step = default_step(self.n) if self.step is None else float(self.step)
        if step > default_step(self.n) * (1 + 1e-12):
            raise ConfigurationError(
                f"u-grid step {step} exceeds min(1/(4n^2), 1e-3) = {default_step(self.n)}"
            )
        object.__setattr__(self, "step", step)
        if self.radius is None:
            osc = estimate_oscillation(self.base)
            object.__setattr__(self, "radius", (osc + 1.0) / self.n)

    @property
    def y_only(self):
        return self.base.depends <= {"y"}

    def _tabulated(self):
        """Lattice values G_j = min_k F(u_k) + n |u_j - u_k| over the whole table."""
        if "G" not in self._table:
            h, n = self.step, self.n
            lo, hi = self.table_range
            j = np.arange(math.floor(lo / h), math.ceil(hi / h) + 1)
            u = j * h
            fu = np.asarray(self.base(0.0, 0.0, u, 0.0, 1.0), dtype=float)
            fwd = np.minimum.accumulate(fu - n * u) + n * u
            bwd = (np.minimum.accumulate((fu + n * u)[::-1]))[::-1] - n * u
            self._table.update(j0=int(j[0]), G=np.minimum(fwd, bwd), u=u)
        return self._table

    def _eval_table(self, y):
        tab = self._tabulated()
        h, n, G = self.step, self.n, tab["G"]
        j = np.floor(y / h).astype(np.int64) - tab["j0"]
        j = np.clip(j, 0, G.size - 2)
        u_left = (j + tab["j0"]) * h
        left = G[j] + n * np.abs(y - u_left)
        right = G[j + 1] + n * np.abs(u_left + h - y)
        return np.minimum(left, right)

    def _eval_window(self, t, x, y, z, a, chunk_elems=1 << 22):
        h, n = self.step, self.n
        K = int(math.ceil(self.radius / h))
        centre = np.round(y / h)
        best = np.full(y.shape, np.inf)
        per = max(1, chunk_elems // max(1, y.size))
        ex = (...,) + (None,)
        for start in range(-K, K + 1, per):
            k = np.arange(start, min(start + per, K + 1))
            u = (centre[ex] + k) * h
            vals = self.base(t[ex], x[ex], u, z[ex], a[ex]) + n * np.abs(y[ex] - u)
            np.minimum(best, vals.min(axis=-1), out=best)
        return best

    def __call__(self, t, x, y, z, a):
        t, x, y, z, a = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (t, x, y, z, a)))
        own = self.base(t, x, y, z, a)
        if self.y_only:
            lo, hi = self.table_range
            inside = (y >= lo + self.radius) & (y <= hi - self.radius)
            out = np.empty(y.shape)
            out[inside] = self._eval_table(y[inside])
            if not inside.all():
                m = ~inside
                out[m] = self._eval_window(t[m], x[m], y[m], z[m], a[m])
        else:
            out = self._eval_window(t, x, y, z, a)
        return np.minimum(own, out)

    def generator(self) -> GeneratorSpec:
        b = self.base
        return GeneratorSpec(
            name=f"infconv[{self.n:g}]({b.name})",
            func=self,
            lipschitz_z=b.lipschitz_z,
            monotonicity_mu=min(b.monotonicity_mu, self.n),
            growth_const=b.growth_const,
            modulus=Modulus(float(self.n)),
            depends=b.depends | {"y"},
        )


def inf_convolution(base: GeneratorSpec, n, *, step=None, radius=None) -> GeneratorSpec:
    """The n-Lipschitz inf-convolution of ``base`` in y."""
    return InfConvolutionSpec(base, n, step=step, radius=radius).generator()


# ---------------------------------------------------------------------------
# gap diagnostics


@dataclass(frozen=True)
class GapReport:
    n: float
    sup_gap: float
    probe_box: dict
    witness: dict
    envelope: float = math.inf

    def row(self):
        w = self.witness
        return [self.n, self.sup_gap, w["t"], w["x"], w["y"], w["z"], w["a"]]


def _tensor_probes(box, base, y_points, other_points):
    axes = []
    for k in ARGS:
        lo, hi = box.get(k, (0.0, 0.0) if k != "a" else (1.0, 1.0))
        if hi == lo or (k != "y" and k not in base.depends):
            axes.append(np.array([lo]))
        else:
            axes.append(np.linspace(lo, hi, y_points if k == "y" else other_points))
    mesh = np.meshgrid(*axes, indexing="ij")
    return {k: m.ravel() for k, m in zip(ARGS, mesh)}


def _refine(box, centre, rounds, per_round, seed):
    """Scrambled Sobol points in shrinking boxes around ``centre``."""
    pts = {k: [] for k in ARGS}
    sampler = qmc.Sobol(d=len(ARGS), scramble=True, seed=seed)
    for r in range(rounds):
        u = sampler.random(per_round)
        shrink = 0.5 ** (r + 2)
        for i, k in enumerate(ARGS):
            lo, hi = box.get(k, (0.0, 0.0) if k != "a" else (1.0, 1.0))
            half = shrink * (hi - lo)
            c = centre[k]
            v = c - half + 2 * half * u[:, i]
            pts[k].append(np.clip(v, lo, hi))
    return {k: np.concatenate(v) for k, v in pts.items()}


def _reduce(gap, probes):
    # max gap, ties broken by the lexicographically smallest (t, y, z, a)
    order = np.lexsort((probes["a"], probes["z"], probes["y"], probes["t"], -gap))
    i = order[0]
    return float(gap[i]), {k: float(probes[k][i]) for k in ARGS}


def _merge(a, b):
    return {k: np.concatenate([a[k], b[k]]) for k in ARGS}


def gap_sup(base: GeneratorSpec, n, probe_box: dict, *, step=None, y_points=801,
            other_points=5, rounds=4, per_round=256, seed=0, extra_probes=None) -> GapReport:
    """Estimate sup over the probe box of F - F^n."""
    a_lo, a_hi = probe_box.get("a", (1.0, 1.0))
    if a_lo <= 0:
        raise ConfigurationError("probe box needs a > 0")
    fn = InfConvolutionSpec(base, n, step=step).generator()
    probes = _tensor_probes(probe_box, base, y_points, other_points)
    if extra_probes is not None:
        probes = _merge(probes, extra_probes)

    def gaps(p):
        return base(p["t"], p["x"], p["y"], p["z"], p["a"]) - fn(p["t"], p["x"], p["y"], p["z"], p["a"])

    g = gaps(probes)
    if rounds > 0:
        _, wit = _reduce(g, probes)
        more = _refine(probe_box, wit, rounds, per_round, seed)
        probes = _merge(probes, more)
        g = np.concatenate([g, gaps(more)])
    sup, wit = _reduce(g, probes)
    return GapReport(n, max(sup, 0.0), dict(probe_box), wit, base.modulus.envelope(n))


def gap_table(base: GeneratorSpec, n_list, probe_box: dict, *, step=None, **kw) -> list[GapReport]:
    """gap_sup over ``n_list`` on a pooled probe set and one shared lattice step."""
    n_list = list(n_list)
    step = default_step(max(n_list)) if step is None else step
    first = [gap_sup(base, n, probe_box, step=step, **kw) for n in n_list]
    pooled = {k: np.array([r.witness[k] for r in first]) for k in ARGS}
    extra = None
    for i, n in enumerate(n_list):
        more = _refine(probe_box, first[i].witness, kw.get("rounds", 4),
                       kw.get("per_round", 256), kw.get("seed", 0) + 17 * i)
        extra = more if extra is None else _merge(extra, more)
    extra = _merge(extra, pooled)
    kw = {**kw, "rounds": 0}
    return [gap_sup(base, n, probe_box, step=step, extra_probes=extra, **kw) for n in n_list]


def append_gap_csv(path, reports):
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["n", "sup_gap", "t", "x", "y", "z", "a"])
        for r in reports:
            w.writerow(r.row())
