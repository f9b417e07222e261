import json
import math

import numpy as np
import pytest
from scipy.stats import norm

from ldpkit.action import PathFunctional, min_action
from ldpkit.estimate import (EventSet, epsilon_sweep, importance_sampling, mc_laplace, mc_probability,
                             naive_stderr)
from ldpkit.models import Diffusion, OrnsteinUhlenbeck, Schilder, TimeGrid
from ldpkit.simulate import Control, DivergenceError

ONE_STEP = TimeGrid(1.0, 1)  # X_T of the Schilder model is exact on any grid
SCHILDER = Schilder()
X0 = np.zeros(1)


def exact_tail(z, eps, T=1.0):
    return norm.sf(z / math.sqrt(eps * T))


def test_gaussian_tail_naive():
    row = mc_probability(SCHILDER, ONE_STEP, X0, 0.25, EventSet.halfspace(1.5), 1_000_000, seed=1)
    assert abs(row.estimate - exact_tail(1.5, 0.25)) < 3 * row.stderr
    assert row.stderr == pytest.approx(naive_stderr(row.estimate, row.n_samples), rel=1e-9)


def test_sure_event():
    row = mc_probability(SCHILDER, TimeGrid(1.0, 20), X0, 0.3, EventSet.halfspace(-1e10), 1000, seed=2)
    assert row.estimate == 1.0 and row.stderr == 0.0 and row.minus_eps_log == 0.0


def test_naive_probability_monotone_in_eps():
    rows = [mc_probability(SCHILDER, ONE_STEP, X0, e, EventSet.halfspace(1.0), 50_000, seed=3)
            for e in (1.0, 0.5, 0.25, 0.125)]
    p = [r.estimate for r in rows]
    se = [r.stderr for r in rows]
    for i in range(len(p) - 1):
        assert p[i + 1] <= p[i] + 3 * math.hypot(se[i], se[i + 1])


@pytest.mark.parametrize("c", [0.0, 0.37, -2.0])
def test_laplace_constant_cost(c):
    for eps in (1.0, 0.05):
        row = mc_laplace(SCHILDER, TimeGrid(1.0, 10), X0, eps, PathFunctional.constant(c), 100, seed=4)
        assert row.estimate == c


def test_zero_tilt_is_naive():
    g = TimeGrid(1.0, 50)
    ev = EventSet.halfspace(0.8)
    a = mc_probability(OrnsteinUhlenbeck(), g, X0, 0.25, ev, 5000, seed=5)
    b = importance_sampling(OrnsteinUhlenbeck(), g, X0, 0.25, ev, Control.zeros(g), 5000, seed=5)
    assert (a.estimate, a.stderr, a.n_hits) == (b.estimate, b.stderr, b.n_hits)
    F = PathFunctional.table_cost([0.0, 1.0], [1.0, 0.0])
    c = mc_laplace(OrnsteinUhlenbeck(), g, X0, 0.25, F, 5000, seed=5)
    d = importance_sampling(OrnsteinUhlenbeck(), g, X0, 0.25, F, Control.zeros(g), 5000, seed=5)
    assert c.estimate == d.estimate


@pytest.fixture(scope="module")
def schilder_tilt():
    g = TimeGrid(1.0, 100)
    return g, min_action(SCHILDER, g, X0, PathFunctional.halfspace(2.0)).control


def test_importance_sampling_gaussian_tail(schilder_tilt):
    g, tilt = schilder_tilt
    row = importance_sampling(SCHILDER, g, X0, 0.05, EventSet.halfspace(2.0), tilt, 10_000, seed=6)
    p = exact_tail(2.0, 0.05)
    assert abs(row.estimate - p) < 3 * row.stderr
    assert naive_stderr(p, 10_000) / row.stderr >= 10
    assert row.rejected == 0


def test_estimators_unbiased_over_repetitions():
    # coverage of 3-standard-error intervals over 100 seeded repetitions
    g = ONE_STEP
    tilt = Control.constant(g, 1.5)
    ev = EventSet.halfspace(1.5)
    p = exact_tail(1.5, 0.25)
    hits = {"naive": 0, "importance": 0}
    for rep in range(100):
        a = mc_probability(SCHILDER, g, X0, 0.25, ev, 10_000, seed=1000 + rep)
        b = importance_sampling(SCHILDER, g, X0, 0.25, ev, tilt, 10_000, seed=1000 + rep)
        hits["naive"] += abs(a.estimate - p) <= 3 * a.stderr
        hits["importance"] += abs(b.estimate - p) <= 3 * b.stderr
    assert hits["naive"] >= 95 and hits["importance"] >= 95, hits


def test_schilder_sweep_approaches_rate(schilder_tilt):
    g, tilt = schilder_tilt
    eps_list = [0.5, 0.2, 0.1, 0.05]
    rep = epsilon_sweep(SCHILDER, g, X0, EventSet.halfspace(2.0), eps_list, 20_000, seed=7)
    vals = [r.minus_eps_log for r in rep.rows]
    assert all(r.resolved for r in rep.rows)
    assert np.all(np.diff(vals) < 0)
    for r in rep.rows:
        exact = -r.eps * math.log(exact_tail(2.0, r.eps))
        assert abs(r.minus_eps_log - exact) < 3 * r.minus_eps_log_stderr
    assert abs(vals[-1] - 2.0) < abs(vals[0] - 2.0)
    assert rep.rows[0].action_reference == pytest.approx(2.0, abs=1e-3)


def test_sweep_sure_event():
    rep = epsilon_sweep(SCHILDER, TimeGrid(1.0, 20), X0, EventSet.halfspace(-1e10), [1.0, 0.1], 500, seed=8,
                        method="naive")
    assert [r.minus_eps_log for r in rep.rows] == [0.0, 0.0]


def test_ou_sweep_gap_shrinks():
    g = TimeGrid(1.0, 100)
    model = OrnsteinUhlenbeck(1.0)
    rep = epsilon_sweep(model, g, X0, EventSet.halfspace(1.0), [0.5, 0.2, 0.1], 20_000, seed=9)
    I = rep.reference["value"]
    gaps = [abs(r.minus_eps_log - I) for r in rep.rows]
    assert np.all(np.diff(gaps) < 0), gaps


def test_unresolved_rows_are_kept():
    rep = epsilon_sweep(SCHILDER, ONE_STEP, X0, EventSet.halfspace(3.0), [0.5, 0.05], 200, seed=10, method="naive")
    last = rep.rows[-1]
    assert not last.resolved and last.minus_eps_log is None
    assert "unresolved" in rep.to_csv().splitlines()[-1]
    assert rep.to_csv().splitlines()[0] == "eps,method,n,hits_or_weightsum,estimate,stderr,minus_eps_log,action_reference"


def test_reports_are_thread_independent(schilder_tilt):
    g, tilt = schilder_tilt
    args = (SCHILDER, g, X0, EventSet.halfspace(2.0), [0.2, 0.1], 5000, 11)
    one = epsilon_sweep(*args, threads=1)
    many = epsilon_sweep(*args, threads=4)
    assert one.to_csv() == many.to_csv()
    assert one.to_dat() == many.to_dat()
    assert json.dumps(one.to_json(), sort_keys=True) == json.dumps(many.to_json(), sort_keys=True)


def test_event_kinds():
    paths = np.array([[[0.0], [2.5], [1.0]], [[0.0], [0.5], [2.1]]])
    assert EventSet.halfspace(2.0).hits(paths).tolist() == [False, True]
    assert EventSet.sup(2.0).hits(paths).tolist() == [True, True]
    assert EventSet.ball([1.0], 0.1).hits(paths).tolist() == [True, False]


def test_eps_list_validation():
    with pytest.raises(ValueError):
        epsilon_sweep(SCHILDER, ONE_STEP, X0, EventSet.halfspace(1.0), [0.1, 0.2], 10, seed=0)


def test_divergent_batch_fails():
    unstable = Diffusion.scalar(lambda t, x: x ** 3, lambda t, x: np.ones_like(x), 1.0)
    with np.errstate(all="ignore"):
        with pytest.raises(DivergenceError):
            mc_probability(unstable, TimeGrid(1.0, 20), [3.0], 1.0, EventSet.halfspace(0.0), 200, seed=0)
