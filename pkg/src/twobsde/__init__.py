"""Second-order BSDEs on a finite family of volatility scenarios, via the HJB value."""
from .config import ExperimentConfig
from .engine import assemble_solution, check_min_condition, converge_sequence
from .errors import (ConfigurationError, DomainExitError, NumericalError, RefinementNeededError,
                     SolverError)
from .generators import GeneratorSpec, HamiltonianSpec, make_generator, make_hamiltonian
from .grid import Grid
from .hjb import family_sup, solve_hjb
from .scenarios import Scenario, ScenarioFamily, VolatilityBounds, enumerate_family, simulate_paths
from .semilinear import solve_scenario_pde
from .terminals import make_terminal

__version__ = "0.1.0"
