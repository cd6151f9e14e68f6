"""Experiment configuration (TOML in, JSON echo out)."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigurationError
from .generators import GENERATOR_PRESETS, HAMILTONIAN_PRESETS, make_generator, make_hamiltonian
from .grid import Grid
from .scenarios import VolatilityBounds
from .terminals import TERMINAL_PRESETS, make_terminal


@dataclass
class GeneratorConfig:
    preset: str = "zero"
    params: dict = field(default_factory=dict)

    def build(self):
        return make_generator(self.preset, **self.params)


@dataclass
class HamiltonianConfig:
    preset: str = "bsb"
    params: dict = field(default_factory=lambda: {"a_low": 0.5, "a_high": 1.5})

    def build(self):
        return make_hamiltonian(self.preset, **self.params)


@dataclass
class TerminalConfig:
    preset: str = "square"
    expr: str = ""
    scale: float = 1.0

    def build(self):
        return make_terminal(self.preset, self.expr or None, self.scale)


@dataclass
class GridConfig:
    T: float = 1.0
    n_t: int = 200
    x_min: float = -6.0
    x_max: float = 6.0
    n_x: int = 121
    boundary: str = "dirichlet"

    def build(self):
        return Grid(self.T, self.n_t, self.x_min, self.x_max, self.n_x, self.boundary)


@dataclass
class BoundsConfig:
    a_low: float = 0.5
    a_high: float = 1.5

    def build(self):
        return VolatilityBounds(self.a_low, self.a_high)


@dataclass
class FamilyConfig:
    level: int = 0
    max_level: int = 3
    cap: int = 10000
    n_a: int = 17


@dataclass
class PathsConfig:
    n_paths: int = 2000
    seed: int = 0
    x0: float = 0.0
    dt: float = 0.0  # 0 = grid step


@dataclass
class ApproxConfig:
    n_list: list = field(default_factory=lambda: [2, 4, 8, 16, 32])
    probe_y: list = field(default_factory=lambda: [-2.0, 2.0])
    transform_lambda: float = 0.0


@dataclass
class DoobConfig:
    pairs: list = field(default_factory=lambda: [[2, 4], [1, 2], [2, 3]])
    xis: list = field(default_factory=lambda: ["abs", "square", "cos_plus_one"])
    grid: GridConfig = field(default_factory=lambda: GridConfig(1.0, 200, -10.0, 10.0, 201))
    n_paths: int = 4000


@dataclass
class MctConfig:
    n_list: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    p_max: int = 8
    n_paths: int = 20000
    n_steps: int = 20


@dataclass
class Tolerances:
    tol_picard: float = 1e-10
    max_picard: int = 200
    residual_tol: float = 1e-10
    c_k: float = 0.1
    representation_tol: float = 1e-10
    family_gap_tol: float = 5e-3
    hjb_rtol: float = 2e-3
    conjugate_rtol: float = 5e-3
    double_conjugate_tol: float = 1e-2
    transform_tol: float = 1e-8
    approx_tol: float = 1e-3
    k_form_c: float = 1.0
    domination_tol: float = 1e-3
    apriori_bound: float = 4.0
    se_mult: float = 3.0
    mct_se_mult: float = 4.0


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    hamiltonian: HamiltonianConfig = field(default_factory=HamiltonianConfig)
    terminal: TerminalConfig = field(default_factory=TerminalConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)
    family: FamilyConfig = field(default_factory=FamilyConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    approx: ApproxConfig = field(default_factory=ApproxConfig)
    doob: DoobConfig = field(default_factory=DoobConfig)
    mct: MctConfig = field(default_factory=MctConfig)
    tolerances: Tolerances = field(default_factory=Tolerances)
    output_dir: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.generator.preset not in GENERATOR_PRESETS and self.generator.preset != "expression":
            raise ConfigurationError(f"unknown generator preset {self.generator.preset!r}")
        if self.hamiltonian.preset not in HAMILTONIAN_PRESETS:
            raise ConfigurationError(f"unknown Hamiltonian preset {self.hamiltonian.preset!r}")
        for t in [self.terminal.preset, *self.doob.xis]:
            if t not in TERMINAL_PRESETS and t != "expression":
                raise ConfigurationError(f"unknown terminal preset {t!r}")
        for k, v in dataclasses.asdict(self.tolerances).items():
            if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise ConfigurationError(f"tolerance {k} must be positive and finite, got {v!r}")
        if self.paths.n_paths < 2:
            raise ConfigurationError("paths.n_paths must be >= 2")

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        return _build(cls, d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_toml(cls, path) -> ExperimentConfig:
        p = Path(path)
        try:
            with p.open("rb") as fh:
                raw = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file {p} not found") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigurationError(f"invalid TOML in {p}: {exc}") from None
        return cls.from_dict(raw)

    # -- builders -----------------------------------------------------------

    def x0(self):
        return self.paths.x0

    def path_dt(self):
        return self.paths.dt or self.grid.build().dt


def _build(cls, d):
    if not isinstance(d, dict):
        raise ConfigurationError(f"section for {cls.__name__} must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigurationError(f"unknown keys in {cls.__name__}: {sorted(unknown)}")
    kw = {}
    for name, value in d.items():
        ftype = fields[name].type
        sub = _SECTIONS.get(ftype)
        if sub is not None:
            kw[name] = _build(sub, value)
        else:
            kw[name] = _coerce(cls.__name__, name, ftype, value)
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


_SCALARS = {"int": (int,), "float": (int, float), "str": (str,), "list": (list,), "dict": (dict,)}


def _coerce(section, name, ftype, value):
    allowed = _SCALARS.get(ftype)
    if allowed is None:
        return value
    if isinstance(value, bool) or not isinstance(value, allowed):
        raise ConfigurationError(f"{section}.{name} must be {ftype}, got {value!r}")
    return float(value) if ftype == "float" else value


_SECTIONS = {
    "GeneratorConfig": GeneratorConfig, "HamiltonianConfig": HamiltonianConfig,
    "TerminalConfig": TerminalConfig, "GridConfig": GridConfig, "BoundsConfig": BoundsConfig,
    "FamilyConfig": FamilyConfig, "PathsConfig": PathsConfig, "ApproxConfig": ApproxConfig,
    "DoobConfig": DoobConfig, "MctConfig": MctConfig, "Tolerances": Tolerances,
}
