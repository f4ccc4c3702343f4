import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contacthj.flow import (BlowUp, ContactState, StepControl, energy_envelope_violation, energy_residual,
                            integrate, integrate_ensemble, parallel_ensemble, vector_field)
from contacthj.hamiltonian import parse_hamiltonian


def e1_exact(x0, p0, u0, t):
    H0 = u0 + 0.5 * p0 ** 2
    p = p0 * math.exp(-t)
    return x0 + p0 * (1 - math.exp(-t)), p, H0 * math.exp(-t) - 0.5 * p ** 2


def test_vector_field_examples(e1, e2):
    dx, dp, du = vector_field(e1, np.array([0.0]), np.array([1.0]), 0.0)
    assert (float(dx[0]), float(dp[0]), float(du)) == (1.0, -1.0, 0.5)
    dx, dp, du = vector_field(e2, np.array([0.25]), np.array([0.0]), 0.0)
    assert float(dx[0]) == 0.0
    assert float(dp[0]) == pytest.approx(2 * np.pi)
    assert float(du) == pytest.approx(0.0, abs=1e-15)


def test_vector_field_generic_matches_fast_path(e2):
    m = parse_hamiltonian("0.5*p1^2 + 0.2*u + cos(2*pi*x1)", lambda_bound=0.2)
    rng = np.random.default_rng(0)
    x, p, u = rng.uniform(0, 1, (20, 1)), rng.uniform(-2, 2, (20, 1)), rng.uniform(-1, 1, 20)
    for a, b in zip(vector_field(m, x, p, u), vector_field(e2, x, p, u)):
        assert np.allclose(a, b)


def test_e1_closed_form(e1):
    tr = integrate(e1, ContactState.of(0.0, 1.0, 0.0), 1.0)
    ex = e1_exact(0.0, 1.0, 0.0, 1.0)
    assert tr.unwrapped_x[-1, 0] == pytest.approx(ex[0], abs=1e-9)
    assert tr.p[-1, 0] == pytest.approx(ex[1], abs=1e-9)
    assert tr.u[-1] == pytest.approx(ex[2], abs=1e-9)
    assert tr.times[0] == 0.0 and tr.times[-1] == 1.0
    assert np.all(np.diff(tr.times) > 0)


def test_zero_horizon(e1):
    tr = integrate(e1, ContactState.of(0.3, 1.0, 2.0), 0.0)
    assert len(tr) == 1
    assert tr.u[0] == 2.0


def test_classical_degeneration():
    m = parse_hamiltonian("0.5*p1^2", lambda_bound=1.0)
    tr = integrate(m, ContactState.of(0.1, 2.0, 1.0), 0.5)
    assert np.allclose(tr.p[:, 0], 2.0)
    assert tr.u[-1] == pytest.approx(1.0 + 0.5 * 2.0, abs=1e-12)
    assert tr.unwrapped_x[-1, 0] == pytest.approx(1.1, abs=1e-12)
    assert tr.windings[-1, 0] == 1
    assert energy_residual(m, tr) < 1e-9


def test_energies_recomputed(e1):
    tr = integrate(e1, ContactState.of(0.0, 1.0, 0.0), 0.5)
    assert np.allclose(tr.energies, tr.u + 0.5 * tr.p[:, 0] ** 2, rtol=0, atol=1e-15)


def test_energy_residual_second_order(e1):
    s0 = ContactState.of(0.0, 1.0, 0.0)
    r1 = energy_residual(e1, integrate(e1, s0, 2.0, StepControl(h=1e-3)))
    r2 = energy_residual(e1, integrate(e1, s0, 2.0, StepControl(h=5e-4)))
    assert r1 <= 1e-6
    assert 3.5 < r1 / r2 < 4.5


def test_energy_envelope(e2):
    rng = np.random.default_rng(1)
    for _ in range(5):
        s0 = ContactState.of(rng.uniform(), rng.uniform(-2, 2), rng.uniform(-1, 1))
        tr = integrate(e2, s0, 1.0, StepControl(h=2e-3))
        assert energy_envelope_violation(e2, tr) <= 1e-9


def test_reversibility(e2):
    s0 = ContactState.of(0.2, 1.5, -0.5)
    fwd = integrate(e2, s0, 2.0)
    back = integrate(e2, fwd.final, 2.0, backward=True)
    assert back.times[0] == 0.0 and np.all(np.diff(back.times) > 0)
    assert back.signed_times[-1] == -2.0
    assert energy_residual(e2, back) <= 1e-6
    x_back = back.unwrapped_x[-1, 0] + fwd.windings[-1, 0]
    assert x_back == pytest.approx(0.2, abs=1e-6)
    assert back.p[-1, 0] == pytest.approx(1.5, abs=1e-6)
    assert back.u[-1] == pytest.approx(-0.5, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(0, 0.999), st.floats(-5, 5), st.floats(-3, 3))
def test_winding_bookkeeping(x0, p0, u0):
    from contacthj.hamiltonian import build_model
    tr = integrate(build_model("E1"), ContactState.of(x0, p0, u0), 1.0, StepControl(h=1e-2))
    assert np.all((tr.x >= 0) & (tr.x < 1))
    assert np.array_equal(tr.unwrapped_x, tr.x + tr.windings)
    assert tr.unwrapped_x[-1, 0] == pytest.approx(e1_exact(x0, p0, u0, 1.0)[0], abs=1e-7)


def test_blow_up_detected():
    m = parse_hamiltonian("0.5*p1^2 - u^2", lambda_bound=1.0)
    with pytest.raises(BlowUp) as exc:
        integrate(m, ContactState.of(0.0, 0.0, 1.0), 5.0, StepControl(h=1e-3, ceiling=1e6))
    # u' = u^2 from u(0) = 1 blows up at t = 1
    assert 0.9 < exc.value.t_detect <= 1.01


def test_adaptive_meets_tolerance(e1):
    tr = integrate(e1, ContactState.of(0.0, 3.0, 0.0), 2.0, StepControl(h=1e-2, adaptive=True, tol=1e-7))
    assert energy_residual(e1, tr) <= 1e-7
    assert tr.h < 1e-2
    # the controller varies the step along the trajectory
    steps = np.diff(tr.times)
    assert steps.max() > 1.5 * steps.min()
    assert tr.times[-1] == 2.0


def test_ensemble_sample_independent_of_batch(e1):
    alone = integrate_ensemble(e1, [0.1], [0.7], [0.0], [0.35], h=1e-2)
    mixed = integrate_ensemble(e1, [0.1, 0.4], [0.7, -1.0], [0.0, 0.2], [0.35, 1.9], h=1e-2)
    assert mixed.u[0] == alone.u[0]
    assert np.array_equal(mixed.x[0], alone.x[0])


def test_csv_layout(e1):
    tr = integrate(e1, ContactState.of(0.0, 1.0, 0.0), 0.01, StepControl(h=5e-3))
    lines = tr.to_csv().splitlines()
    assert lines[0] == "t,x1,p1,u,H,winding1"
    assert len(lines) == 4
    last = [float(v) for v in lines[-1].split(",")]
    assert last[0] == 0.01


def test_ensemble_matches_single(e2):
    rng = np.random.default_rng(2)
    x0, p0, u0 = rng.uniform(0, 1, 6), rng.uniform(-2, 2, 6), rng.uniform(-1, 1, 6)
    ens = integrate_ensemble(e2, x0, p0, u0, 0.7, h=1e-3)
    for i in range(6):
        tr = integrate(e2, ContactState.of(x0[i], p0[i], u0[i]), 0.7)
        assert ens.unwrapped_x[i, 0] == pytest.approx(tr.unwrapped_x[-1, 0], abs=1e-12)
        assert ens.u[i] == pytest.approx(tr.u[-1], abs=1e-12)


def test_ensemble_flags_blow_up_without_raising():
    m = parse_hamiltonian("0.5*p1^2 - u^2", lambda_bound=1.0)
    ens = integrate_ensemble(m, [0.0, 0.0], [0.0, 0.0], [1.0, -1.0], 2.0, h=1e-3, ceiling=1e6)
    assert list(ens.alive) == [False, True]
    assert 0.9 < ens.t_blow[0] <= 1.01
    assert np.isnan(ens.t_blow[1])


def test_parallel_ensemble_is_bit_identical(e2):
    rng = np.random.default_rng(3)
    x0, p0, u0 = rng.uniform(0, 1, 40), rng.uniform(-2, 2, 40), rng.uniform(-1, 1, 40)
    T = rng.uniform(0.1, 1.0, 40)
    a = integrate_ensemble(e2, x0, p0, u0, T, h=1e-2)
    b = parallel_ensemble(e2, x0, p0, u0, T, h=1e-2, workers=4)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.u, b.u) and np.array_equal(a.windings, b.windings)
