import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldpkit.models import CIR, DelayModel, Diffusion, OrnsteinUhlenbeck, Schilder, Segment, TimeGrid, builtin_zoo
from ldpkit.simulate import Control, euler_maruyama, random_controls, sample_brownian
from ldpkit.skeleton import (CapViolation, PositivityError, check_floor, check_skeleton_growth, growth_bound,
                             positivity_floor, skeleton_csv, solve_skeleton, weak_l2_continuity_probe)

decay = Diffusion.scalar(lambda t, x: -x, lambda t, x: 0.3 + 0 * x, 1.0)


def test_linear_decay_matches_exponential():
    g = TimeGrid(1.0, 1000)
    sol = solve_skeleton(decay, [1.0], Control.zeros(g))
    err = np.max(np.abs(sol.path.values[:, 0] - np.exp(-g.nodes)))
    assert err <= 2 * g.dt
    assert sol.path.noise_level == 0.0
    assert sol.residual < 1e-3


def test_constant_control_gives_straight_line():
    g = TimeGrid(1.0, 128)
    sol = solve_skeleton(Schilder(), [0.25], Control.constant(g, 1.5))
    assert np.array_equal(sol.path.values[:, 0], 0.25 + 1.5 * g.nodes)
    assert sol.residual == pytest.approx(0.0, abs=1e-14)


def test_delay_first_interval_by_hand():
    g = TimeGrid(2.0, 2000)
    seg = Segment.constant(1.0, 1.0, g.dt)
    model = DelayModel.from_expressions("y", "0", 1.0, seg, growth_constant=1.0)
    sol = solve_skeleton(model, seg, Control.zeros(g))
    first = g.nodes <= 1.0
    assert np.max(np.abs(sol.path.values[first, 0] - (1 + g.nodes[first]))) <= 2 * g.dt
    assert sol.path.segment is seg


def test_delay_skeleton_equals_reduced_skeleton():
    g = TimeGrid(1.0, 200)
    model, seg = builtin_zoo(g)["delay"]
    f = Control(g, random_controls(g, 1, 1.0, 4, 0, 1)[0])
    direct = solve_skeleton(model, seg, f).path.values
    reduced = euler_maruyama(model.with_segment(seg), 0.0, seg.x0, sample_brownian(g, 1, 0), f).values
    assert np.array_equal(direct, reduced)


@settings(max_examples=20, deadline=None)
@given(name=st.sampled_from(["schilder", "ou", "fw", "delay", "cir"]), seed=st.integers(0, 10_000),
       noise_seed=st.integers(0, 10_000))
def test_skeleton_is_noise_free_simulation(name, seed, noise_seed):
    g = TimeGrid(1.0, 60)
    model, init = builtin_zoo(g)[name]
    f = Control(g, random_controls(g, model.m, 1.0, seed, 0, 1)[0])
    sk = solve_skeleton(model, init, f).path.values
    em = euler_maruyama(model, 0.0, init, sample_brownian(g, model.m, noise_seed), f).values
    assert np.array_equal(sk, em)


def test_skeleton_deterministic():
    g = TimeGrid(1.0, 100)
    f = Control.from_function(g, lambda t: np.cos(3 * t))
    a = solve_skeleton(CIR(), [1.0], f).path.values
    b = solve_skeleton(CIR(), [1.0 + 0.0], f).path.values
    assert np.array_equal(a, b)


def test_skeleton_rejects_mismatched_control():
    g = TimeGrid(1.0, 10)
    with pytest.raises(ValueError):
        solve_skeleton(Schilder(2), [0.0, 0.0], Control.zeros(g, 1))


def test_growth_bound_values():
    assert growth_bound([1.0], 1.0, 1.0, 1.0) == pytest.approx(15 * math.exp(12))
    for t, f2 in [(0.0, 0.0), (0.7, 3.0), (1.0, 10.0)]:
        assert growth_bound([2.0, 0.0], 0.0, t, f2) == 12.0
    assert growth_bound([1.0], 1.0, 0.5, 1.0) < growth_bound([1.0], 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        growth_bound([1.0], -1.0, 1.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(x=st.floats(-10, 10), M=st.floats(0, 3), t1=st.floats(0, 1), t2=st.floats(0, 1), f2=st.floats(0, 5))
def test_growth_bound_monotone_in_time(x, M, t1, t2, f2):
    lo, hi = sorted((t1, t2))
    assert growth_bound([x], M, lo, f2) <= growth_bound([x], M, hi, f2)


@pytest.mark.parametrize("name", ["schilder", "ou", "fw", "delay", "cir"])
def test_skeletons_obey_growth_bound(name):
    g = TimeGrid(1.0, 100)
    model, init = builtin_zoo(g)[name]
    rep = check_skeleton_growth(model, g, init, N=2.0, n_controls=60, seed=5)
    assert rep.passed, rep


def test_weak_l2_probe_schilder():
    g = TimeGrid(1.0, 1000)
    rep = weak_l2_continuity_probe(Schilder(), [0.0], Control.zeros(g), 1.0, [1, 4, 16, 64])
    e = rep.errors
    assert e[-1] < e[0] and e[-1] <= 0.02
    assert rep.passed
    # closed form: sup_t |int_0^t sin(2 pi n s) ds| = 1 / (pi n)
    np.testing.assert_allclose(e, [1 / (np.pi * n) for n in (1, 4, 16, 64)], rtol=0.02)


def test_weak_l2_probe_zero_amplitude():
    g = TimeGrid(1.0, 200)
    rep = weak_l2_continuity_probe(OrnsteinUhlenbeck(), [0.3], Control.zeros(g), 0.0)
    assert rep.errors == [0.0, 0.0, 0.0, 0.0]


def test_weak_l2_probe_ou_decreasing():
    g = TimeGrid(1.0, 1000)
    rep = weak_l2_continuity_probe(OrnsteinUhlenbeck(), [0.0], Control.zeros(g), 1.0, [1, 4, 16, 64])
    assert np.all(np.diff(rep.errors) < 0)


def test_weak_l2_probe_cap():
    g = TimeGrid(1.0, 100)
    with pytest.raises(CapViolation):
        weak_l2_continuity_probe(Schilder(), [0.0], Control.zeros(g), 1.0, N=0.1)


def test_positivity_floor_worked_case():
    cert = positivity_floor(CIR(1.0, 1.0, 1.0), 1.0, 0.5, 1.0)
    assert cert.x_bar == 0.5 and cert.beta == pytest.approx(0.5)
    assert cert.xi == pytest.approx(0.5 * math.exp(-4), abs=1e-9)
    assert cert.eta == cert.xi


def test_positivity_floor_small_energy_approaches_xbar():
    xis = [positivity_floor(CIR(), N, 0.5, 1.0).xi for N in (1e-1, 1e-3, 1e-6)]
    assert np.all(np.diff(xis) > 0)
    assert xis[-1] == pytest.approx(0.5, rel=1e-4)


def test_positivity_floor_holds_on_random_controls():
    g = TimeGrid(1.0, 1000)
    cir = CIR()
    cert = positivity_floor(cir, 1.0, 0.5, 1.0)
    rep = check_floor(cir, g, 1.0, cert, 1000, seed=0)
    assert rep.violations == 0 and rep.min_value >= cert.xi


def test_positivity_needs_positive_drift_at_zero():
    with pytest.raises(PositivityError, match=r"b\(0\) > 0"):
        positivity_floor(CIR(1.0, 0.0, 1.0), 1.0, 0.5, 1.0)


def test_positivity_needs_divergent_integral():
    # rho(u) = u^0.25 makes int rho^-2 finite at 0
    with pytest.raises(PositivityError, match="diverge"):
        positivity_floor(CIR(), 1.0, 0.5, 1.0, rho=lambda u: u ** 0.25)


def test_skeleton_csv_layout():
    g = TimeGrid(1.0, 4)
    lines = skeleton_csv(solve_skeleton(Schilder(), [0.0], Control.constant(g, 1.0))).splitlines()
    assert lines[0] == "t,phi_1,f_1"
    assert len(lines) == 6 and lines[-1].endswith(",")
