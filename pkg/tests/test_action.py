import math

import numpy as np
import pytest

from contacthj.action import (ActionQuery, NoCharacteristicFound, ShootingConfig, action_table,
                              check_equivalence, check_equivalence_batch, h_backward, h_forward)
from contacthj.flow import integrate_ensemble
from contacthj.hamiltonian import parse_hamiltonian


def oracle(x0, u0, x, t):
    """Closed-form backward action for H = u + p^2/2, minimized over windings."""
    d = (x - x0 + 0.5) % 1.0 - 0.5
    return u0 * math.exp(-t) + 0.5 * d * d * math.exp(-t) / (1 - math.exp(-t))


def test_query_validation():
    with pytest.raises(ValueError):
        ActionQuery(0, 0, 0.5, 0.0)
    with pytest.raises(ValueError):
        ActionQuery(0, 0, 0.5, 1.0, "sideways")


def test_backward_example(e1):
    r = h_backward(e1, ActionQuery(0.0, 0.0, 0.5, 1.0))
    assert r.value == pytest.approx(0.0727471, abs=1e-7)
    # two symmetric hits tie; the lowest p0 is reported
    assert r.attaining_p0[0] == pytest.approx(-0.5 / (1 - math.exp(-1)), abs=1e-8)
    assert r.candidates_scanned == 512
    assert np.sum(np.abs(r.hits_value - r.value) < 1e-9) == 2


def test_backward_same_point(e1):
    r = h_backward(e1, ActionQuery(0.3, 0.0, 0.3, 1.0))
    assert r.value == pytest.approx(0.0, abs=1e-12)
    assert r.winding[0] == 0
    r = h_backward(e1, ActionQuery(0.3, 2.0, 0.3, 1.0))
    assert r.value == pytest.approx(2 * math.exp(-1), abs=1e-9)


def test_monotone_in_u0_example(e1):
    a = h_backward(e1, ActionQuery(0.0, 1.0, 0.5, 1.0)).value
    b = h_backward(e1, ActionQuery(0.0, 0.0, 0.5, 1.0)).value
    assert a == pytest.approx(0.440626, abs=1e-6)
    assert a > b


def test_forward_examples(e1):
    r = h_forward(e1, ActionQuery(0.5, 0.0, 0.0, 1.0))
    assert r.value == pytest.approx(-0.197747, abs=1e-6)
    r = h_forward(e1, ActionQuery(0.2, 0.7, 0.2, 1.0))
    assert r.value == pytest.approx(0.7 * math.e, abs=1e-9)


def test_matches_oracle_on_batch(e1):
    rng = np.random.default_rng(0)
    x0, u0, x = rng.uniform(0, 1, 20), rng.uniform(-1, 1, 20), rng.uniform(0, 1, 20)
    t = rng.uniform(0.1, 2.0, 20)
    table = action_table(e1, x0, u0, x[:, None], t)
    assert table.found.all()
    want = np.array([oracle(*args) for args in zip(x0, u0, x, t)])
    assert np.allclose(table.values[:, 0], want, atol=1e-7)


def test_minimality_and_reintegration(e1):
    r = h_backward(e1, ActionQuery(0.1, 0.3, 0.8, 1.5))
    assert np.all(r.hits_value >= r.value - 1e-9)
    assert len(r.hits_value) >= 3
    cfg = ShootingConfig()
    res = integrate_ensemble(e1, 0.1, r.attaining_p0, 0.3, 1.5, h=cfg.h)
    d = res.unwrapped_x[0, 0] - 0.1
    assert (d - (0.7 + r.winding[0])) == pytest.approx(-1.0, abs=1e-9) or abs(d - 0.7) < 1e-9 or \
        abs((0.1 + d) % 1.0 - 0.8) < 1e-9
    assert res.u[0] == pytest.approx(r.value, abs=1e-12)


@pytest.mark.parametrize("du", [0.1, 1.0])
def test_strict_monotonicity_batch(e2, du):
    rng = np.random.default_rng(5)
    x0, u0, x = rng.uniform(0, 1, 8), rng.uniform(-1, 1, 8), rng.uniform(0, 1, 8)
    lo = action_table(e2, x0, u0, x[:, None], 0.8).values[:, 0]
    hi = action_table(e2, x0, u0 + du, x[:, None], 0.8).values[:, 0]
    assert np.all(hi > lo)
    flo = action_table(e2, x0, u0, x[:, None], 0.8, "forward").values[:, 0]
    fhi = action_table(e2, x0, u0 + du, x[:, None], 0.8, "forward").values[:, 0]
    assert np.all(fhi > flo)


def test_local_lipschitz_slopes_bounded(e1):
    xs = np.linspace(0.05, 0.45, 9)
    vals = action_table(e1, [0.0], [0.0], xs[None, :], 1.0).values[0]
    slopes = np.abs(np.diff(vals) / np.diff(xs))
    assert np.all(np.isfinite(slopes))
    assert slopes.max() < 1.0


def test_equivalence_round_trip(e1):
    assert check_equivalence(e1, 0.0, 0.0, 0.5, 1.0) <= 1e-6
    assert check_equivalence(e1, 0.4, 1.3, 0.4, 0.7) <= 1e-9


def test_equivalence_batch_nonlinear_model(e2):
    rng = np.random.default_rng(7)
    r = check_equivalence_batch(e2, rng.uniform(0, 1, 10), rng.uniform(-1, 1, 10), rng.uniform(0, 1, 10),
                                rng.uniform(0.2, 1.0, 10))
    assert r.max() <= 1e-5


def test_small_time_uses_one_step(e1):
    r = h_backward(e1, ActionQuery(0.0, 0.0, 0.02, 0.005))
    exact = oracle(0.0, 0.0, 0.02, 0.005)
    assert r.candidates_scanned == 0
    assert r.value == pytest.approx(exact, rel=1e-2)


def test_no_characteristic_found_reports_sweep(e1):
    # a tiny scan box cannot reach the far side of the circle in short time
    cfg = ShootingConfig(p_shoot=0.5, n_scan=16, k_max=0)
    with pytest.raises(NoCharacteristicFound) as exc:
        h_backward(e1, ActionQuery(0.0, 0.0, 0.45, 0.1), cfg)
    assert exc.value.sweep is not None
    assert len(exc.value.sweep.p0) == 16


def test_shooting_is_one_dimensional():
    m = parse_hamiltonian("0.5*(p1^2 + p2^2) + u", lambda_bound=1.0)
    with pytest.raises(ValueError):
        h_backward(m, ActionQuery(0.0, 0.0, 0.5, 1.0))


def test_fold_refinement_finds_near_separatrix_branch(e2):
    # the minimizing branch sits in a sub-cell passage of the shooting map
    q = ActionQuery(0.5538320422201747, -0.6060856871579174, 0.2201204362619582, 1.975935354108526)
    dense = h_backward(e2, q, ShootingConfig(n_scan=8192, fold_levels=0))
    r = h_backward(e2, q)
    assert r.value == pytest.approx(dense.value, abs=1e-8)
    assert r.candidates_scanned > 512
    coarse = h_backward(e2, q, ShootingConfig(fold_levels=0))
    assert coarse.value > dense.value + 0.1
