import math

import numpy as np
import pytest

from contacthj.geometry import GridFunction, TorusSpec
from contacthj.hamiltonian import QuadraticContact, parse_hamiltonian
from contacthj.semigroup import EvolutionConfig
from contacthj.verify import (VerifyConfig, battery_corollary_C, battery_theorem_A, battery_theorem_B,
                              check_lemma_flow_inclusion, check_subsolution, epigraph_samples, mesh_tolerance,
                              random_fourier, rate_constant, subsolution_report)

SPEC64 = TorusSpec(1, 1.0, 64)
FAST = VerifyConfig(horizons=(0.25, 0.5), n_samples=40, flow_h=5e-3, evolution=EvolutionConfig(dt=5e-3))


def const(c, spec=SPEC64):
    return GridFunction.constant(spec, c)


def test_subsolution_constants(e1):
    r = check_subsolution(e1, const(-1.0))
    assert r.worst_margin == pytest.approx(-1.0) and r.passed
    r = check_subsolution(e1, const(0.5))
    assert r.worst_margin == pytest.approx(0.5) and not r.passed
    assert r.witness["H"] == pytest.approx(0.5)


def test_subsolution_sine_matches_analytic(e1, sine_phi):
    s = np.linspace(-1, 1, 200001)
    exact = -0.3 + np.max(0.05 * s + 0.5 * (0.1 * np.pi) ** 2 * (1 - s * s))
    assert exact == pytest.approx(-0.23799, abs=1e-5)
    r = check_subsolution(e1, sine_phi)
    assert r.worst_margin == pytest.approx(exact, abs=2e-3)
    assert r.passed
    assert r.lipschitz_bound == pytest.approx(0.1 * np.pi, rel=1e-3)


def test_superdifferential_agrees_on_smooth_data(e1, e2, sine_phi):
    for model in (e1, e2):
        a = check_subsolution(model, sine_phi, "ae")
        b = check_subsolution(model, sine_phi, "superdifferential")
        assert a.passed == b.passed


def test_superdifferential_skips_convex_kinks(e1):
    # |x - 1/2| - 0.6 has a convex kink at 1/2: empty superdifferential there
    spec = TorusSpec(1, 1.0, 64)
    phi = GridFunction.sample(spec, lambda X: np.abs(X[:, 0] - 0.5) - 0.6)
    r = check_subsolution(e1, phi, "superdifferential")
    assert r.constrained_nodes < spec.size


def test_superdifferential_tests_concave_kinks(e1):
    # -|x - 1/2| has a concave kink: D+ = [-1, 1], H(x, +-1, u) = u + 1/2 at the peak
    phi = GridFunction.sample(SPEC64, lambda X: -np.abs(X[:, 0] - 0.5))
    r = check_subsolution(e1, phi, "superdifferential")
    assert r.worst_margin == pytest.approx(0.5)
    assert r.witness["x"][0] == pytest.approx(0.5)
    assert check_subsolution(e1, phi, "ae").worst_margin < 0.5


def test_superdifferential_two_dimensional_corners():
    model = QuadraticContact(dim=2)
    spec = TorusSpec(2, 1.0, 16)
    r = check_subsolution(model, GridFunction.constant(spec, -1.0), "superdifferential")
    assert r.constrained_nodes == spec.size
    assert r.worst_margin == pytest.approx(-1.0)


def test_superdifferential_refuses_nonconvex():
    model = parse_hamiltonian("-0.5*p1^2 + u", lambda_bound=1.0)
    with pytest.raises(ValueError, match="ae"):
        check_subsolution(model, const(-1.0), "superdifferential")


def test_bad_mode(e1):
    with pytest.raises(ValueError):
        check_subsolution(e1, const(-1.0), "viscous")


def test_mesh_tolerance_scales_with_h(e1):
    coarse = GridFunction.sample(TorusSpec(1, 1.0, 64), lambda X: 0.05 * np.sin(2 * np.pi * X[:, 0]))
    fine = GridFunction.sample(TorusSpec(1, 1.0, 128), lambda X: 0.05 * np.sin(2 * np.pi * X[:, 0]))
    assert mesh_tolerance(e1, fine) == pytest.approx(mesh_tolerance(e1, coarse) / 2, rel=1e-2)


def test_epigraph_samples_lie_in_epigraph(e1, sine_phi):
    s = epigraph_samples(e1, sine_phi, VerifyConfig(n_samples=100))
    assert np.all(s.gap >= 0)
    assert np.all(np.abs(s.p) <= 3.0 + np.max(np.abs(s.p[s.boundary])) + 1e-12)
    b = epigraph_samples(e1, sine_phi, VerifyConfig(n_samples=100), on_boundary=True)
    assert np.all(b.gap == 0)


def test_equivalence_battery_constant_subsolution(e1):
    r = battery_theorem_A(e1, const(-1.0), FAST)
    assert r.passed and r.unanimous
    assert r.margins["backward_monotone"] == pytest.approx(1 - math.exp(-0.25), abs=2e-3)


def test_equivalence_battery_non_subsolution_fails_everywhere(e1):
    r = battery_theorem_A(e1, const(0.5), FAST)
    assert not any(r.checks.values()) and r.unanimous
    w = {w["check"]: w for w in r.witnesses}
    assert w["epigraph_invariant"]["final_gap"] < 0
    assert w["epigraph_invariant"]["t"] == 0.5


def test_equivalence_battery_sine(e1, sine_phi):
    r = battery_theorem_A(e1, sine_phi, FAST)
    assert r.passed and r.unanimous
    d = r.to_dict()
    assert d["parameters"]["config"]["seed"] == 0


def test_equivalence_battery_is_deterministic(e2, sine_phi):
    a = battery_theorem_A(e2, sine_phi, FAST).samples_csv
    b = battery_theorem_A(e2, sine_phi, FAST).samples_csv
    assert a == b and a.count("\n") > 40
    c = battery_theorem_A(e2, sine_phi, VerifyConfig(**{**FAST.__dict__, "seed": 1})).samples_csv
    assert c != a


def test_rate_constant_on_constants(e1):
    cb, cf = rate_constant(e1, const(-1.0), EvolutionConfig())
    assert cb == pytest.approx(1.0, abs=1e-3)
    assert cf == pytest.approx(1.0, abs=1e-3)
    cb, _ = rate_constant(e1, const(0.0), EvolutionConfig())
    assert abs(cb) <= 1e-3


def test_rate_battery_strict_and_non_strict(e1):
    cfg = VerifyConfig(horizons=(0.5, 1.0))
    r = battery_theorem_B(e1, const(-1.0, TorusSpec(1, 1.0, 32)), cfg)
    assert r.passed
    assert -1e-3 <= r.margins["rate_margin"] <= 1e-2
    r = battery_theorem_B(e1, const(0.0, TorusSpec(1, 1.0, 32)), cfg)
    assert not r.checks["strict_rate"] and not r.passed


def test_interiority_battery(e1):
    r = battery_corollary_C(e1, const(-1.0), FAST)
    assert r.passed
    assert r.margins["floor_margin"] >= -1e-6
    r = battery_corollary_C(e1, const(0.0), FAST)
    assert not r.checks["interior"]


def test_inclusion_holds_for_non_subsolution(e1):
    r = check_lemma_flow_inclusion(e1, const(0.5), FAST, tol=5e-3)
    assert r.passed and r.margins["violations"] == 0


def test_inclusion_random_fourier(e2):
    phi = random_fourier(TorusSpec(1, 1.0, 128), seed=3)
    r = check_lemma_flow_inclusion(e2, phi, FAST, tol=2e-2)
    assert r.passed


def test_random_fourier_is_seeded():
    a = random_fourier(SPEC64, seed=4).values
    assert np.array_equal(a, random_fourier(SPEC64, seed=4).values)
    assert not np.array_equal(a, random_fourier(SPEC64, seed=5).values)
    assert abs(a.mean()) < 1e-12


def test_subsolution_report_wrapper(e1, sine_phi):
    r = subsolution_report(e1, sine_phi)
    assert r.passed and r.battery == "subsolution"
    assert r.parameters["tolerance"] > 0
