import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twobsde.errors import ConfigurationError, DomainError, EvaluationError
from twobsde.generators import (GeneratorSpec, HamiltonianSpec, ProbeSet, abs_hamiltonian, affine_generator,
                                bsb_hamiltonian, compile_expression, conjugate_from_H, double_conjugate_check,
                                exponential_transform, make_generator, make_grid, make_hamiltonian,
                                parse_modulus, probe_assumptions, quadratic_hamiltonian, sqrt_generator,
                                zero_hamiltonian)

BOX = {"t": (0, 1), "x": (-2, 2), "y": (-2, 2), "z": (-2, 2), "a": (0.5, 1.5)}


# -- conjugation -------------------------------------------------------------

def test_conjugate_of_zero_on_singleton_is_zero():
    f = conjugate_from_H(zero_hamiltonian())
    a = np.array([0.0, 0.5, 1.0, 3.0])
    assert np.array_equal(f(0.0, 0.0, 0.0, 0.0, a), np.zeros(4))


def test_conjugate_of_half_square_matches_closed_form():
    # maximizer gamma* = a / 2 gives F(a) = a^2 / 8
    f = conjugate_from_H(quadratic_hamiltonian())
    assert abs(float(f(0.0, 0.0, 0.0, 0.0, 2.0)) - 0.5) <= 1e-3


def test_conjugate_of_zero_on_interval_hits_boundary():
    f = conjugate_from_H(zero_hamiltonian(domain=(0.0, 3.0)))
    assert abs(float(f(0.0, 0.0, 0.0, 0.0, 2.0)) - 3.0) <= 1e-12


def test_conjugate_rejects_empty_grid():
    with pytest.raises(ConfigurationError):
        conjugate_from_H(HamiltonianSpec("empty", lambda t, x, y, z, g: g, domain=(0.0, 1.0),
                                         gamma_grid=np.array([])))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_conjugate_reports_nonfinite_hamiltonian():
    h = HamiltonianSpec("log", lambda t, x, y, z, g: -np.log(g), domain=(0.0, 1.0),
                        gamma_grid=make_grid(0.0, 1.0, 0.25))
    f = conjugate_from_H(h)
    with pytest.raises(EvaluationError) as info:
        f(0.0, 0.0, 0.0, 0.0, 1.0)
    assert info.value.inputs["gamma"] == 0.0


def test_conjugate_with_state_dependent_h_uses_dense_path():
    h = HamiltonianSpec("xq", lambda t, x, y, z, g: 0.5 * (1 + x**2) * g**2, depends=frozenset({"x"}))
    f = conjugate_from_H(h)
    x = np.array([0.0, 1.0])
    # F(a) = a^2 / (8 (1 + x^2))
    np.testing.assert_allclose(f(0.0, x, 0.0, 0.0, 2.0), [0.5, 0.25], atol=1e-3)


# -- double conjugate ---------------------------------------------------------

def test_double_conjugate_quadratic():
    err = double_conjugate_check(quadratic_hamiltonian(), make_grid(0.0, 4.0, 1e-2), (0, 0, 0, 0, 1.0))
    assert err <= 1e-2


def test_double_conjugate_zero_on_interval():
    err = double_conjugate_check(zero_hamiltonian(domain=(0.0, 3.0)), make_grid(0.0, 4.0, 1e-2),
                                 (0, 0, 0, 0, 1.5))
    assert err == 0.0


def test_double_conjugate_abs_at_zero():
    step = 1e-2
    err = double_conjugate_check(abs_hamiltonian(), make_grid(0.0, 4.0, step), (0, 0, 0, 0, 0.0))
    assert err <= step


def test_double_conjugate_rejects_gamma_outside_domain():
    with pytest.raises(DomainError):
        double_conjugate_check(zero_hamiltonian(), make_grid(0.0, 1.0, 0.1), (0, 0, 0, 0, 0.5))


def test_bsb_hamiltonian_conjugate_vanishes_inside_bounds():
    f = conjugate_from_H(bsb_hamiltonian(0.5, 1.5))
    a = np.linspace(0.5, 1.5, 11)
    np.testing.assert_allclose(f(0.0, 0.0, 0.0, 0.0, a), 0.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(a1=st.floats(0.0, 4.0), a2=st.floats(0.0, 4.0))
def test_conjugate_monotone_in_a_for_nonnegative_domain(a1, a2):
    f = conjugate_from_H(zero_hamiltonian(domain=(0.0, 2.0)).with_grid(step=1e-2))
    lo, hi = sorted((a1, a2))
    assert float(f(0, 0, 0, 0, lo)) <= float(f(0, 0, 0, 0, hi))


@settings(max_examples=40, deadline=None)
@given(a1=st.floats(0.0, 4.0), a2=st.floats(0.0, 4.0),
       preset=st.sampled_from(["quadratic", "abs"]))
def test_conjugate_midpoint_convex_in_a(a1, a2, preset):
    f = conjugate_from_H(make_hamiltonian(preset).with_grid(step=1e-2))
    fa = lambda a: float(f(0, 0, 0, 0, a))  # noqa: E731
    assert fa(0.5 * (a1 + a2)) <= 0.5 * (fa(a1) + fa(a2)) + 1e-12


# -- exponential transform ----------------------------------------------------

def test_transform_zero_lambda_is_identity():
    f = sqrt_generator()
    assert exponential_transform(f, 0.0) is f


def test_transform_of_constant_one():
    f = affine_generator(c0=1.0)
    ft = exponential_transform(f, 2.0)
    assert float(ft(0.0, 0.0, 1.0, 0.0, 1.0)) == pytest.approx(-1.0, abs=1e-15)
    assert ft.monotonicity_mu == f.monotonicity_mu - 2.0


@settings(max_examples=60, deadline=None)
@given(lam=st.floats(-2.0, 2.0), t=st.floats(0.0, 1.0), y=st.floats(-5, 5), z=st.floats(-5, 5),
       a=st.floats(0.5, 1.5))
def test_transform_round_trip(lam, t, y, z, a):
    f = affine_generator(c0=0.3, cy=-0.7, cz=0.4)
    back = exponential_transform(exponential_transform(f, lam), -lam)
    v, w = float(f(t, 0.1, y, z, a)), float(back(t, 0.1, y, z, a))
    assert abs(v - w) <= 1e-12 * max(1.0, abs(v))


@settings(max_examples=30, deadline=None)
@given(mu=st.floats(0.1, 3.0), seed=st.integers(0, 1000))
def test_transform_by_mu_makes_driver_decreasing(mu, seed):
    f = affine_generator(c0=0.1, cy=mu, cz=0.5)
    ft = exponential_transform(f, mu)
    p = ProbeSet.from_box(BOX, 200, seed)
    d = (p.y - p.y2) * (ft(p.t, p.x, p.y, p.z, p.a) - ft(p.t, p.x, p.y2, p.z, p.a))
    assert np.all(d <= 1e-12)


# -- assumption probes ---------------------------------------------------------

def test_probe_affine_passes():
    f = affine_generator(cy=-1.0, cz=1.0)
    rep = probe_assumptions(f, ProbeSet.from_box(BOX, 500, 1))
    assert rep.passed
    assert rep["monotonicity"].worst_ratio <= 0.0


def test_probe_negative_sqrt_is_decreasing():
    rep = probe_assumptions(sqrt_generator(signed=True), ProbeSet.from_box(BOX, 500, 2))
    assert rep["monotonicity"].passed


def test_probe_square_fails_with_witness():
    f = GeneratorSpec("y2", lambda t, x, y, z, a: y**2, monotonicity_mu=0.0, growth_const=10.0)
    pts = [(0, 0, 2.0, 0, 1), (0, 0, 1.0, 0, 1), (0, 0, -2.0, 0, 1)]
    rep = probe_assumptions(f, ProbeSet.from_points(pts))
    chk = rep["monotonicity"]
    assert not chk.passed
    assert chk.worst_ratio > 0 and {"y", "y2"} <= set(chk.witness)
    assert rep.to_dict()["checks"][1]["check"] == "monotonicity"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_probe_rejects_nonfinite():
    f = GeneratorSpec("bad", lambda t, x, y, z, a: 1.0 / (y - y))
    with pytest.raises(EvaluationError):
        probe_assumptions(f, ProbeSet.from_box(BOX, 10))


def test_probe_set_must_be_nonempty():
    with pytest.raises(ConfigurationError):
        ProbeSet.from_box(BOX, 0)


# -- presets and expression form ----------------------------------------------

def test_expression_generator_is_safe():
    fn, used = compile_expression("-y + 0.5*sqrt(a)*z")
    assert used == frozenset({"y", "a", "z"})
    assert float(fn(0, 0, 1.0, 2.0, 4.0)) == pytest.approx(1.0)
    for bad in ["__import__('os')", "y.real", "[y]", "lambda: 1"]:
        with pytest.raises(ConfigurationError):
            compile_expression(bad)


def test_expression_preset_via_factory():
    f = make_generator("expression", expr="-y", lipschitz_z=0.0, monotonicity_mu=-1.0, growth_const=1.0,
                       modulus="lipschitz(1)")
    assert float(f(0, 0, 2.0, 0, 1)) == -2.0
    assert parse_modulus("sqrt").is_lipschitz is False


def test_unknown_presets():
    with pytest.raises(ConfigurationError):
        make_generator("nope")
    with pytest.raises(ConfigurationError):
        make_hamiltonian("nope")


def test_sqrt_modulus_envelope():
    # sup_u sqrt(u) - n u = 1 / (4n)
    assert sqrt_generator().modulus.envelope(5) == pytest.approx(1 / 20)
    assert math.isinf(sqrt_generator().monotonicity_mu)
