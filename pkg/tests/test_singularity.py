import numpy as np
import pytest

from singchar.characteristics import integrate_euler
from singchar.errors import InsufficientSamples, NotWeakKam, PreconditionFailed
from singchar.fixtures import fixture, free_model, hitting_time, sine_phi, zero_phi
from singchar.hamiltonian import integrate
from singchar.selection import minimal_energy_selection
from singchar.semiconcave import superdifferential
from singchar.simplex import minimize_over_hull
from singchar.singularity import (c11_estimate_check, check_weak_kam, cut_time_calibration, is_singular,
                                  propagation_report, singularity_report)


def test_is_singular_examples(f2, f3):
    sing, diam = is_singular(f2.phi, [0.25])
    assert sing and diam == pytest.approx(4 * np.pi)
    assert not is_singular(f2.phi, [0.1])[0]
    sing, diam = is_singular(f3.phi, [0.5])
    assert sing and diam == pytest.approx(4.0)


def test_cut_time_examples(f3):
    t = cut_time_calibration(f3.model, f3.phi, [0.25], 0.5, 500)
    assert abs(t - hitting_time(0.25)) <= 0.05
    assert cut_time_calibration(f3.model, f3.phi, [0.5], 0.5, 500) == 0.0
    fx = fixture("F1U")
    for x in (0.1, 0.37, 0.8):
        assert cut_time_calibration(fx.model, fx.phi, [x], 0.5, 100) == 0.5


def test_cut_time_rejects_non_weak_kam():
    with pytest.raises(NotWeakKam):
        cut_time_calibration(free_model(), sine_phi(), [0.1], 0.5, 100)
    with pytest.raises(NotWeakKam):
        check_weak_kam(free_model(), sine_phi())


def test_singularity_report(f3):
    rep = singularity_report(f3.model, f3.phi, [0.5])
    assert rep.singular and rep.in_cut and rep.hull_diameter == pytest.approx(4.0)
    assert set(rep.to_dict()) == {"singular", "hull_diameter", "cut_time", "in_cut"}


def test_sing_inside_cut_on_nodes(f3):
    nodes = np.arange(64) / 64
    for x in nodes:
        if is_singular(f3.phi, [x])[0]:
            assert cut_time_calibration(f3.model, f3.phi, [x], 0.5, 500) <= 0.5 / 500


def test_propagation_pendulum_kink(f3):
    run = integrate_euler(f3.model, f3.phi, [0.5], 1.0, 2.0 ** -8)
    rep = propagation_report(f3.model, f3.phi, run)
    assert rep["sing_fraction"] == 1.0 and rep["cut_fraction"] == 1.0
    assert rep["empty_windows"] == 0 and rep["sing_subset_of_cut"]


def test_propagation_edge_2d():
    fx = fixture("F4")
    run = integrate_euler(fx.model, fx.phi, [0.25, 0.1], 1.0, 2.0 ** -8)
    rep = propagation_report(fx.model, fx.phi, run)
    assert rep["sing_fraction"] == 1.0 and rep["windows_without_interval"] == 0


def test_propagation_requires_cut_start(f3):
    run = integrate_euler(f3.model, f3.phi, [0.25], 0.5, 2.0 ** -8)
    with pytest.raises(PreconditionFailed):
        propagation_report(f3.model, f3.phi, run)


def test_c11_zero_and_pendulum(f3):
    fx = fixture("F1U")
    rep = c11_estimate_check(fx.model, fx.phi, samples=8, steps_per_unit=200)
    assert rep["max_over_median"] == 0.0 and all(v == 0.0 for v in rep["sup_ratio"].values())
    rep = c11_estimate_check(f3.model, f3.phi, samples=24)
    sups = list(rep["sup_ratio"].values())
    assert all(np.isfinite(sups)) and min(sups) > 0
    assert rep["max_over_median"] <= 3.0


def test_c11_insufficient_samples(f3):
    # hitting time of 1/2 exceeds 3 only within about 1e-8 of the fixed point x = 0
    with pytest.raises(InsufficientSamples):
        c11_estimate_check(f3.model, f3.phi, t_list=(3.0,), samples=4, steps_per_unit=100)


def test_singular_points_have_subcritical_selection(f3):
    c = f3.critical_value
    sel = minimal_energy_selection(f3.model, f3.phi, [0.5])
    assert sel.h_value < c
    for q in superdifferential(f3.phi, [0.5]).vertices:
        assert float(f3.model.H(np.array([[0.5]]), q[None])[0]) == pytest.approx(c, abs=1e-6)


def test_backward_calibrated_curve_unique_at_smooth_points(f3, rng):
    # the hull is a singleton at smooth points: any projected momentum is the gradient
    x = np.array([0.3])
    sd = superdifferential(f3.phi, x)
    assert len(sd.vertices) == 1
    base = integrate(f3.model, x[None], sd.vertices, -0.2, 400)
    for _ in range(5):
        q = sd.vertices[0] + rng.normal(size=1)
        proj = minimize_over_hull(lambda p: 0.5 * float(np.sum((p - q) ** 2)), lambda p: p - q,
                                  lambda p: np.eye(1), sd.vertices).point
        other = integrate(f3.model, x[None], proj[None], -0.2, 400)
        assert np.max(np.abs(other.x - base.x)) <= 1e-6
