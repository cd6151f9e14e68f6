import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twobsde.approximation import (InfConvolutionSpec, append_gap_csv, default_step, gap_sup, gap_table,
                                   inf_convolution)
from twobsde.errors import ConfigurationError, PreconditionError
from twobsde.generators import (ProbeSet, affine_generator, expression_generator, parse_modulus,
                                piecewise_generator, sqrt_generator)

BOX = {"y": (-2.0, 2.0), "a": (0.5, 1.5)}


def zdep_sqrt():
    return expression_generator("-sign(y)*sqrt(minimum(abs(y), 4)) + 0.5*sqrt(a)*z", lipschitz_z=0.5,
                                monotonicity_mu=0.0, growth_const=1.0, modulus=parse_modulus("sqrt"))


def test_identity_when_n_exceeds_lipschitz():
    f = affine_generator(cy=-1.0)
    f4 = inf_convolution(f, 4)
    y = np.linspace(-3, 3, 601)
    assert np.max(np.abs(f4(0, 0, y, 0, 1) - f(0, 0, y, 0, 1))) <= default_step(4)


def test_sqrt_envelope_at_zero():
    # min over r >= 0 of n r - sqrt(r) is -1/(4n)
    n = 5
    step = default_step(n)
    v = float(inf_convolution(sqrt_generator(), n)(0, 0, 0.0, 0, 1))
    assert abs(v + 1 / (4 * n)) <= 2 * step


def test_decreasing_preserved():
    fn = inf_convolution(piecewise_generator(), 3)
    y = np.linspace(-5, 5, 2001)
    assert np.all(np.diff(fn(0, 0, y, 0, 1)) <= 1e-12)


def test_precondition_n_below_growth():
    with pytest.raises(PreconditionError):
        inf_convolution(affine_generator(cy=-3.0), 2)


def test_step_must_resolve_envelope():
    with pytest.raises(ConfigurationError):
        InfConvolutionSpec(sqrt_generator(), 4, step=0.1)


def test_table_and_window_paths_agree():
    spec = InfConvolutionSpec(sqrt_generator(), 6)
    y = np.linspace(-3, 3, 301)
    z = np.zeros_like(y)
    a = np.ones_like(y)
    tab = spec._eval_table(y)
    win = spec._eval_window(z, z, y, z, a)
    np.testing.assert_allclose(tab, win, atol=1e-12)


def test_far_field_uses_window():
    fn = inf_convolution(sqrt_generator(), 4)
    v = float(fn(0, 0, 100.0, 0, 1))
    assert v == pytest.approx(-2.0, abs=1e-9)


def test_gap_lipschitz_base_is_small():
    rep = gap_sup(affine_generator(cy=-1.0), 2, BOX)
    assert rep.sup_gap <= 2 * default_step(2)


def test_gap_sqrt_strictly_decreasing_and_enveloped():
    reps = gap_table(sqrt_generator(), [2, 4, 8, 16], BOX)
    gaps = [r.sup_gap for r in reps]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    for r in reps:
        assert r.sup_gap <= r.envelope + 2 * default_step(16)
        assert r.sup_gap >= 0


def test_gap_floor_vs_four_times_floor():
    f = sqrt_generator(signed=True)
    lo, hi = gap_table(f, [1, 4], BOX)
    assert lo.sup_gap >= hi.sup_gap


def test_gap_witness_and_csv(tmp_path):
    reps = gap_table(sqrt_generator(), [2, 4], BOX)
    path = tmp_path / "gaps.csv"
    append_gap_csv(path, reps)
    append_gap_csv(path, reps[:1])
    lines = path.read_text().splitlines()
    assert lines[0] == "n,sup_gap,t,x,y,z,a"
    assert len(lines) == 4
    assert set(reps[0].witness) == {"t", "x", "y", "z", "a"}


def test_gap_rejects_nonpositive_a():
    with pytest.raises(ConfigurationError):
        gap_sup(sqrt_generator(), 2, {"y": (-1, 1), "a": (0.0, 1.0)})


# -- properties on sampled probes ---------------------------------------------

PRESETS = {"sqrt": sqrt_generator, "signed_sqrt": lambda: sqrt_generator(signed=True),
           "piecewise": piecewise_generator, "zdep": zdep_sqrt}


@settings(max_examples=25, deadline=None)
@given(preset=st.sampled_from(sorted(PRESETS)), m=st.integers(1, 8), dn=st.integers(0, 8),
       seed=st.integers(0, 10_000))
def test_monotone_sandwich(preset, m, dn, seed):
    f = PRESETS[preset]()
    m = max(m, int(np.ceil(f.growth_const)))
    n = m + dn
    step = default_step(n)
    fm = inf_convolution(f, m, step=step)
    fn = inf_convolution(f, n, step=step)
    p = ProbeSet.from_box({"y": (-3, 3), "z": (-2, 2), "a": (0.5, 1.5)}, 200, seed)
    vm, vn, v = fm(p.t, p.x, p.y, p.z, p.a), fn(p.t, p.x, p.y, p.z, p.a), f(p.t, p.x, p.y, p.z, p.a)
    assert np.all(vm <= vn + 1e-12)
    assert np.all(vn <= v + 1e-12)


@settings(max_examples=25, deadline=None)
@given(preset=st.sampled_from(sorted(PRESETS)), n=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_lipschitz_growth_and_z_constant(preset, n, seed):
    f = PRESETS[preset]()
    n = max(n, int(np.ceil(f.growth_const)))
    fn = inf_convolution(f, n)
    step = default_step(n)
    p = ProbeSet.from_box({"y": (-3, 3), "z": (-2, 2), "a": (0.5, 1.5)}, 200, seed)
    v1 = fn(p.t, p.x, p.y, p.z, p.a)
    v2 = fn(p.t, p.x, p.y2, p.z, p.a)
    assert np.all(np.abs(v1 - v2) <= n * np.abs(p.y - p.y2) + 2 * n * step + 1e-12)
    bound = np.abs(f.at_zero(p.t, p.x, p.a)) + f.growth_const * (1 + np.abs(p.y) + np.sqrt(p.a) * np.abs(p.z))
    assert np.all(np.abs(fn(p.t, p.x, p.y, 0 * p.z, p.a)) <= bound + n * step + 1e-12)
    vz = fn(p.t, p.x, p.y, p.z2, p.a)
    dz = np.sqrt(p.a) * np.abs(p.z - p.z2)
    assert np.all(np.abs(v1 - vz) <= f.lipschitz_z * dz + 1e-12)
