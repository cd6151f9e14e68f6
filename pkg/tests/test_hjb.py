import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twobsde.errors import ConfigurationError
from twobsde.generators import (affine_generator, bsb_hamiltonian, quadratic_conjugate_generator,
                                quadratic_hamiltonian, sqrt_generator, zero_generator, zero_hamiltonian)
from twobsde.grid import Grid
from twobsde.hjb import (evaluate_knot_policy, extract_feedback, family_sup, hjb_residual, hjb_vs_conjugate,
                         member_values, solve_hjb)
from twobsde.scenarios import Scenario, VolatilityBounds, enumerate_family
from twobsde.semilinear import solve_scenario_pde
from twobsde.terminals import make_terminal

B = VolatilityBounds(0.5, 1.5)
G = Grid(1.0, 200, -6.0, 6.0, 121)


def test_linear_payoff_ties_to_smallest_a():
    sol = solve_hjb(zero_generator(), make_terminal("linear"), G, B)
    assert abs(sol.value(0.0)) <= 1e-12
    assert np.all(sol.policy == 0.5)


@pytest.mark.parametrize("preset,value,a_star", [("square", 1.5, 1.5), ("neg_square", -0.5, 0.5)])
def test_bsb_closed_form(preset, value, a_star):
    sol = solve_hjb(zero_generator(), make_terminal(preset), Grid(1.0, 400, -6, 6, 121), B)
    assert abs(sol.value(0.0) - value) / abs(value) <= 2e-3
    assert np.all(sol.policy[:, 1:-1] == a_star)
    fb = extract_feedback(sol)
    assert fb.kind == "constant" and fb.values == (a_star,)


def test_singleton_feedback():
    sol = solve_hjb(zero_generator(), make_terminal("cos"), G, VolatilityBounds(1.0, 1.0))
    fb = extract_feedback(sol)
    assert fb.kind == "constant" and fb.values == (1.0,)


def test_cfl_violation():
    with pytest.raises(ConfigurationError, match="CFL"):
        solve_hjb(zero_generator(), make_terminal("cos"), Grid(1.0, 20, -6, 6, 121), B)


def test_n_a_needs_endpoints():
    with pytest.raises(ConfigurationError):
        solve_hjb(zero_generator(), make_terminal("cos"), G, B, n_a=1)


def test_residual_recomputation_matches_meta():
    sol = solve_hjb(affine_generator(c0=0.2, cy=-0.5, cz=0.3), make_terminal("cos"), G, B)
    assert abs(hjb_residual(sol) - sol.meta["residual"]) <= 1e-12
    assert sol.meta["residual"] <= 1e-10


def test_policy_values_in_grid():
    sol = solve_hjb(sqrt_generator(signed=True), make_terminal("cos"), G, B)
    assert np.all(np.isin(sol.policy, sol.a_grid))


def test_feedback_reproduces_value():
    for preset in ("cos", "square", "neg_square"):
        g = make_terminal(preset)
        sol = solve_hjb(zero_generator(), g, G, B)
        fb = extract_feedback(sol)
        v = solve_scenario_pde(zero_generator(), fb, g, G, scheme="explicit").value(0.0)
        assert abs(v - sol.value(0.0)) <= 2 * 2e-3 * max(1.0, abs(sol.value(0.0)))


def test_policy_iteration_mode_close_to_explicit():
    g = make_terminal("cos")
    e = solve_hjb(zero_generator(), g, G, B).value(0.0)
    p = solve_hjb(zero_generator(), g, G, B, mode="policy").value(0.0)
    assert abs(e - p) <= 5 * (G.dt + G.dx**2)


def test_a_dependent_generator():
    # F(a) = a^2 / 8 makes the sup interior only through the generator
    sol = solve_hjb(quadratic_conjugate_generator(), make_terminal("zero"), G, VolatilityBounds(0.5, 1.5))
    assert sol.value(0.0) == pytest.approx(1.5**2 / 8, rel=1e-9)


# -- conjugate comparison --------------------------------------------------------

def test_conjugate_trivial_hamiltonian():
    rep = hjb_vs_conjugate(zero_hamiltonian(), make_terminal("linear"), G, B)
    assert rep["max_discrepancy"] <= 1e-10


def test_conjugate_bsb():
    for preset in ("cos", "square"):
        rep = hjb_vs_conjugate(bsb_hamiltonian(0.5, 1.5), make_terminal(preset), G, B)
        assert rep["relative"] <= 5e-3 and rep["pass"]


def test_conjugate_quadratic_truncation_order():
    g = lambda x: 0.5 * x**2 + 0.25 * np.cos(x)  # noqa: E731
    grid = Grid(1.0, 400, -4.0, 4.0, 81)
    bounds = VolatilityBounds(0.01, 4.0)
    errs = [hjb_vs_conjugate(quadratic_hamiltonian(step=s), g, grid, bounds, n_a=401,
                             inner_fraction=0.5)["max_discrepancy"] for s in (0.4, 0.2, 0.1)]
    assert errs[0] >= 2 * errs[1] and errs[1] >= 2 * errs[2]


# -- dominance and refinement ------------------------------------------------------

def test_dominance_over_level_two_members():
    f = affine_generator(c0=0.1, cy=-0.5, cz=0.2)
    g = make_terminal("cos")
    sol = solve_hjb(f, g, G, B)
    vals = member_values(f, enumerate_family(B, 2), g, G)
    assert np.max(vals - sol.u[0]) <= 1e-10


def test_family_sup_monotone_and_converging():
    f = zero_generator()
    g = make_terminal("cos")
    grid = Grid(1.0, 256, -6.0, 6.0, 121)
    sol = solve_hjb(f, g, grid, B)
    sups = [family_sup(f, g, grid, B, lvl) for lvl in range(4)]
    vals = [s.value for s in sups]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
    assert sol.value(0.0) - vals[-1] <= 5e-3
    assert all(np.max(s.u0 - sol.u[0]) <= 1e-10 for s in sups)
    # the materialized knot policy reproduces the DP value
    np.testing.assert_allclose(evaluate_knot_policy(f, sups[-1].scenario, g, grid), sups[-1].u0, atol=1e-12)


def test_family_sup_needs_divisible_partition():
    with pytest.raises(ConfigurationError):
        family_sup(zero_generator(), make_terminal("cos"), Grid(1.0, 201, -6, 6, 121), B, 1)


@settings(max_examples=10, deadline=None)
@given(c0=st.floats(-1, 1), cy=st.floats(-1, 0), shift=st.floats(-1, 1))
def test_dominance_property(c0, cy, shift):
    f = affine_generator(c0=c0, cy=cy)
    g = lambda x: np.cos(x + shift)  # noqa: E731
    sol = solve_hjb(f, g, G, B)
    vals = member_values(f, enumerate_family(B, 1), g, G)
    assert np.max(vals - sol.u[0]) <= 1e-10


def test_policy_csv(tmp_path):
    sol = solve_hjb(zero_generator(), make_terminal("cos"), G, B)
    sol.policy_to_csv(tmp_path / "p.csv", stride=50)
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "t,x,u,policy" and len(rows) == 1 + 4 * G.n_x
