import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from twobsde.errors import ConfigurationError, EnumerationCapError, SimulationError
from twobsde.scenarios import (Scenario, ScenarioFamily, VolatilityBounds, counterexample_family,
                               enumerate_family, qv_median_relative_error, qv_zscores, simulate_paths,
                               standard_normals)

B = VolatilityBounds(0.5, 1.5)


def _var_check(bundle, expected):
    xt = bundle.paths[:, -1]
    var = xt.var(ddof=1)
    # se of the sample variance of a normal sample
    se = expected * np.sqrt(2.0 / (xt.size - 1))
    assert abs(var - expected) <= 4 * se


def test_bounds_validation():
    with pytest.raises(ConfigurationError):
        VolatilityBounds(0.0, 1.0)
    with pytest.raises(ConfigurationError):
        VolatilityBounds(2.0, 1.0)


def test_degenerate_family_is_singleton():
    for level in range(3):
        fam = enumerate_family(VolatilityBounds(1.0, 1.0), level)
        assert len(fam) == 1
        assert fam.members[0].kind == "constant" and fam.members[0].values == (1.0,)


def test_level_zero_family():
    fam = enumerate_family(B, 0)
    assert [m.values[0] for m in fam.members] == [0.5, 1.0, 1.5]


def test_level_one_contains_all_two_piece_scenarios():
    fam = enumerate_family(B, 1)
    enc = fam.encodings()
    for v1 in (0.5, 1.0, 1.5):
        for v2 in (0.5, 1.0, 1.5):
            s = Scenario.piecewise((0.0, 0.5), (v1, v2), B)
            assert s.encoding() in enc
    assert len(fam) == 9


@pytest.mark.parametrize("level", [0, 1, 2])
def test_nesting(level):
    lo = set(enumerate_family(B, level).encodings())
    hi = set(enumerate_family(B, level + 1).encodings())
    assert lo <= hi


def test_enumeration_cap():
    with pytest.raises(EnumerationCapError, match="cap"):
        enumerate_family(B, 4, cap=1000)


def test_out_of_bounds_needs_flag():
    with pytest.raises(ConfigurationError):
        Scenario.constant(2.0, B)
    assert Scenario.constant(2.0, B, flag_out_of_bounds=True).flag_out_of_bounds


def test_knots_must_increase():
    with pytest.raises(ConfigurationError):
        Scenario.piecewise((0.0, 0.5, 0.5), (1, 1, 1), B)


def test_serialization_round_trip():
    s = Scenario.piecewise((0.0, 0.25, 0.5), (0.5, 1.5, 1.0), B)
    d = json.loads(json.dumps(s.to_dict()))
    assert Scenario.from_dict(d) == s
    assert set(d) >= {"kind", "knots", "values", "bounds", "flag"}


def test_constant_var():
    b = simulate_paths(Scenario.constant(1.0, B), 0.0, 1.0, 0.01, 100_000, 3)
    _var_check(b, 1.0)
    assert np.all(b.paths[:, 0] == 0.0)


def test_frozen_path_limit():
    eps = 1e-12
    s = Scenario.constant(eps, VolatilityBounds(eps, eps))
    b = simulate_paths(s, 0.0, 1.0, 0.01, 1000, 0)
    assert b.paths[:, -1].var() < 1e-10


def test_piecewise_var():
    s = Scenario.piecewise((0.0, 0.5), (0.5, 1.5), B)
    _var_check(simulate_paths(s, 0.0, 1.0, 0.01, 100_000, 4), 1.0)


def test_ks_standardized_terminal():
    a = 1.5
    b = simulate_paths(Scenario.constant(a, B), 0.0, 1.0, 0.05, 100_000, 11)
    assert stats.kstest(b.paths[:, -1] / np.sqrt(a), "norm").pvalue > 1e-3


def test_nonpositive_density_rejected():
    tab = np.zeros((2, 5))
    s = Scenario("feedback", B, knots=(0.0, 0.5), table=tab, x_nodes=np.linspace(-1, 1, 5),
                 flag_out_of_bounds=True)
    with pytest.raises(SimulationError):
        simulate_paths(s, 0.0, 1.0, 0.5, 10, 0)


def test_dt_must_divide_horizon():
    with pytest.raises(ConfigurationError):
        simulate_paths(Scenario.constant(1.0, B), 0.0, 1.0, 0.3, 10, 0)


def test_counterexample_family():
    assert [m.values[0] for m in counterexample_family(1).members] == [1.0]
    fam = counterexample_family(4)
    assert fam.flagged and all(m.flag_out_of_bounds for m in fam.members)
    for p, m in zip(range(1, 5), fam.members):
        xt = simulate_paths(m, 0.0, 1.0, 0.05, 40_000, 5).paths[:, -1]
        v = xt**2
        assert abs(v.mean() - p) <= 4 * v.std(ddof=1) / np.sqrt(v.size)


def test_counterexample_family_sup_over_two():
    fam = counterexample_family(10)
    means = []
    for m in fam.members:
        v = simulate_paths(m, 0.0, 1.0, 0.05, 40_000, 6).paths[:, -1] ** 2 / 2
        means.append((v.mean(), v.std(ddof=1) / np.sqrt(v.size)))
    top, se = max(means)
    assert abs(top - 5.0) <= 4 * se


def test_common_random_numbers_are_shared():
    z = standard_normals(9, 50, 20)
    b1 = simulate_paths(Scenario.constant(0.5, B), 0.0, 1.0, 0.05, 50, 9)
    b2 = simulate_paths(Scenario.constant(1.5, B), 0.0, 1.0, 0.05, 50, 9)
    np.testing.assert_array_equal(b1.increments, b2.increments)
    np.testing.assert_array_equal(b1.increments, np.sqrt(0.05) * z)


def test_knot_feedback_reads_state_at_knot():
    nodes = np.linspace(-3, 3, 61)
    tab = np.vstack([np.full(61, 1.0), np.where(nodes > 0, 1.5, 0.5)])
    s = Scenario("knot_feedback", B, knots=(0.0, 0.5), table=tab, x_nodes=nodes)
    b = simulate_paths(s, 0.0, 1.0, 0.05, 200, 2)
    at_half = b.paths[:, 10]
    expect = np.where(nodes[s._node(at_half)] > 0, 1.5, 0.5)
    assert np.all(b.alphas[:, 10:] == expect[:, None])


def test_bundle_csv(tmp_path):
    b = simulate_paths(Scenario.constant(1.0, B), 0.0, 1.0, 0.5, 3, 0)
    b.to_csv(tmp_path / "p.csv")
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert rows[0] == "t,path_id,X" and len(rows) == 1 + 3 * 3


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32), a=st.sampled_from([0.5, 1.0, 1.5]))
def test_determinism(seed, a):
    s = Scenario.constant(a, B)
    b1 = simulate_paths(s, 0.2, 1.0, 0.1, 64, seed)
    b2 = simulate_paths(s, 0.2, 1.0, 0.1, 64, seed)
    assert b1.paths.tobytes() == b2.paths.tobytes()


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**16), level=st.integers(0, 2))
def test_quadratic_variation_consistency(seed, level):
    fam = enumerate_family(B, level)
    s = fam.members[seed % len(fam)]
    dt = 1 / 256
    b = simulate_paths(s, 0.0, 1.0, dt, 400, seed)
    assert qv_median_relative_error(b) <= 3 * np.sqrt(dt)
    assert np.mean(np.abs(qv_zscores(b)) <= 5) >= 0.999


def test_family_with_member_and_json():
    fam = enumerate_family(B, 0)
    s = Scenario.constant(0.75, B)
    fam2 = fam.with_member(s)
    assert len(fam2) == 4 and isinstance(fam2, ScenarioFamily)
    assert json.loads(fam.to_json())["level"] == 0
