import numpy as np
import pytest

from singchar.action import Curve
from singchar.characteristics import (CharacteristicRun, edi_residual, energy_profile, fenchel_check,
                                      gc_membership, integrate_euler, integrate_euler_td, integrate_intrinsic,
                                      integrate_mollified, lambda_hat, stability_harness, sup_distance,
                                      velocity_selection_mismatch, window_average_gaps)
from singchar.errors import HorizonExceeded, HypothesisViolated, NotCauchy
from singchar.fixtures import _pot, edge_x2, fixture, free_model, hitting_time, kink_phi, sine_phi
from singchar.hamiltonian import with_extra_potential
from singchar.semiconcave import MinSmoothFn, SmoothPiece, mollify
from singchar.singularity import is_singular

TWO_PI = 2 * np.pi


def _td_kink():
    def piece(sign):
        return SmoothPiece(value=lambda x, t: sign * np.cos(TWO_PI * x[..., 0]) - t,
                           grad=lambda x, t: (-sign * TWO_PI * np.sin(TWO_PI * x[..., 0]))[..., None],
                           dt=lambda x, t: -np.ones(x.shape[0]))
    return MinSmoothFn([piece(1.0), piece(-1.0)], dim=1, semiconcavity_constant=4 * np.pi ** 2,
                       lipschitz_constant=TWO_PI)


def _constant_run(x, T=1.0, n=64):
    t = np.linspace(0, T, n + 1)
    z = np.full((n + 1, 1), x)
    return CharacteristicRun(Curve(t, z), "const", np.zeros((n + 1, 1)), np.zeros(n + 1))


# -- Euler ---------------------------------------------------------------------

def test_euler_sticks_at_pendulum_kink(f3):
    run = integrate_euler(f3.model, f3.phi, [0.5], 2.0, 2.0 ** -10)
    assert np.max(np.abs(run.lifted[:, 0] - 0.5)) == 0.0
    assert np.all(run.p_sharp == 0.0)


def test_euler_hitting_time_matches_quadrature(f3):
    h = 2.0 ** -10
    run = integrate_euler(f3.model, f3.phi, [0.3], 0.5, h)
    hit = run.times[np.argmax(np.abs(run.lifted[:, 0] - 0.5) <= 2 * h)]
    assert abs(hit - hitting_time(0.3)) <= 1e-2
    after = run.lifted[run.times >= hit, 0]
    assert np.max(np.abs(after - 0.5)) <= h * 3.0


def test_euler_edge_propagation_2d():
    fx = fixture("F4")
    run = integrate_euler(fx.model, fx.phi, [0.25, 0.1], 0.5, 2.0 ** -10)
    assert np.max(np.abs(run.lifted[:, 0] - 0.25)) <= 1e-3
    assert np.max(np.abs(run.lifted[:, 1] - edge_x2(0.1, run.times))) <= 1e-3


def test_euler_on_smooth_phi_is_gradient_flow():
    # V = 0, phi = sin 2 pi x: x' = 2 pi cos 2 pi x, the eps = 1 case of the edge ODE
    run = integrate_euler(free_model(), sine_phi(), [0.1], 0.1, 2.0 ** -12)
    assert np.max(np.abs(run.lifted[:, 0] - edge_x2(0.1, run.times, eps=1.0))) <= 1e-2


# -- mollified and intrinsic -----------------------------------------------------

def test_mollified_stationary_at_symmetric_kink(f2):
    run = integrate_mollified(f2.model, f2.phi, [0.25], 0.5, [1e2, 1e3], 2.0 ** -8)
    assert np.max(np.abs(run.lifted[:, 0] - 0.25)) <= 1e-6


def test_mollified_smooth_phi_matches_classical():
    run = integrate_mollified(free_model(), sine_phi(), [0.1], 0.1, [1e3], 2.0 ** -10)
    assert np.max(np.abs(run.lifted[:, 0] - edge_x2(0.1, run.times, eps=1.0))) <= 1e-6


def test_mollified_gaps_decrease_on_pendulum(f3):
    run = integrate_mollified(f3.model, f3.phi, [0.3], 1.0, [1e2, 1e3, 1e4], 2.0 ** -9)
    gaps = run.diagnostics["cauchy_gaps"]
    assert gaps[1] < gaps[0]


def test_mollified_not_cauchy(f3):
    with pytest.raises(NotCauchy) as err:
        integrate_mollified(f3.model, f3.phi, [0.3], 1.0, [2.0, 4.0], 2.0 ** -7, tol=1e-6)
    assert len(err.value.gaps) == 1


def test_intrinsic_stationary_at_kink(f2):
    run = integrate_intrinsic(f2.model, f2.phi, [0.25], 0.1, [1 / 64, 1 / 128])
    assert np.max(np.abs(run.lifted[:, 0] - 0.25)) <= 1e-5


def test_intrinsic_smooth_agrees_with_classical():
    w = 1 / 128
    run = integrate_intrinsic(free_model(), sine_phi(), [0.0], 0.1, [1 / 64, w])
    assert np.max(np.abs(run.lifted[:, 0] - edge_x2(0.0, run.times, eps=1.0))) <= 2 * w


def test_intrinsic_width_above_horizon(f3):
    with pytest.raises(HorizonExceeded):
        integrate_intrinsic(f3.model, f3.phi, [0.3], 2.0, [1.0])


def test_three_constructions_agree_short(f3):
    e = integrate_euler(f3.model, f3.phi, [0.3], 0.3, 2.0 ** -10)
    m = integrate_mollified(f3.model, f3.phi, [0.3], 0.3, [1e3], 2.0 ** -10)
    i = integrate_intrinsic(f3.model, f3.phi, [0.3], 0.3, [2.0 ** -7, 2.0 ** -8])
    assert sup_distance(e, m) <= 2e-2 and sup_distance(e, i) <= 2e-2 and sup_distance(m, i) <= 2e-2


# -- verifiers -----------------------------------------------------------------

def test_edi_stationary_kink_is_exact(f3):
    run = integrate_euler(f3.model, f3.phi, [0.5], 1.0, 2.0 ** -8)
    assert edi_residual(f3.model, f3.phi, run) <= 1e-14


def test_edi_wrong_curve_is_negative(f3):
    res, signed = edi_residual(f3.model, f3.phi, _constant_run(0.3), signed=True)
    # L(0.3, 0) = -cos(0.6 pi), H(0.3, u'(0.3)) = c = 1
    expected = -(-np.cos(0.6 * np.pi) + 1.0)
    assert signed == pytest.approx(expected, abs=1e-9)
    assert res == pytest.approx(-expected, abs=1e-9)


@pytest.mark.parametrize("name,x0", [("F1", [0.1]), ("F2", [0.1]), ("F3", [0.3]), ("F4", [0.2, 0.1]),
                                     ("F5", [0.2])])
def test_edi_small_on_euler_runs(name, x0):
    fx = fixture(name)
    run = integrate_euler(fx.model, fx.phi, x0, 1.0, 2.0 ** -10)
    assert edi_residual(fx.model, fx.phi, run) <= 5e-3
    # a strict run has velocity H_p(x, p#) up to O(h), scaled by the speed
    speed = np.max(np.linalg.norm(fx.model.H_p(run.lifted, run.p_sharp), axis=1))
    assert velocity_selection_mismatch(fx.model, fx.phi, run) <= 4 * 2.0 ** -10 * max(speed, 1.0)


def test_landing_step_uses_one_sided_integrand():
    # quartic H is ~400 just before the kink; averaging it with H = 0 on the kink
    # would leave a defect of order 1e-2 regardless of h
    fx = fixture("F5")
    for k in (8, 10):
        run = integrate_euler(fx.model, fx.phi, [0.24], 0.25, 2.0 ** -k)
        assert edi_residual(fx.model, fx.phi, run) * 0.25 <= 1e-4


def test_energy_profile_pendulum(f3):
    run = integrate_euler(f3.model, f3.phi, [0.3], 1.0, 2.0 ** -10)
    rep = energy_profile(f3.model, f3.phi, run)
    assert rep["max_increase_rate"] <= 1e-6
    assert rep["max_drop"] > 0 and not rep["violation"]
    assert run.h_value[0] == pytest.approx(1.0) and run.h_value[-1] == pytest.approx(-1.0)


def test_energy_profile_trivial_runs(f3):
    run = integrate_euler(f3.model, f3.phi, [0.5], 1.0, 2.0 ** -8)
    assert energy_profile(f3.model, f3.phi, run)["max_increase_rate"] == 0.0
    fx = fixture("F1U")
    run = integrate_euler(fx.model, fx.phi, [0.3], 1.0, 2.0 ** -8)
    assert energy_profile(fx.model, fx.phi, run)["max_increase_rate"] == 0.0


def test_lambda_hat_from_bounds(f3):
    # |DH| on |p| <= 2 is at most |(2 pi, 2)| (x = 1/4, |p| = 2); u'' = 2 pi cos pi x <= 2 pi
    C = np.hypot(TWO_PI, 2.0)
    assert lambda_hat(f3.model, f3.phi) == pytest.approx(C ** 2 + TWO_PI * C ** 2, rel=1e-2)


def test_gc_membership(f3):
    h = 2.0 ** -10
    run = integrate_euler(f3.model, f3.phi, [0.3], 1.0, h)
    assert gc_membership(f3.model, f3.phi, run)["max_inclusion_gap"] <= 50 * h
    fx = fixture("F4")
    run = integrate_euler(fx.model, fx.phi, [0.25, 0.1], 0.5, h)
    assert gc_membership(fx.model, fx.phi, run)["max_inclusion_gap"] <= 1e-3
    t = np.linspace(0, 1, 65)
    wild = CharacteristicRun(Curve(t, (0.3 + 0.2 * np.sin(7 * t))[:, None]), "wild",
                             np.zeros((65, 1)), np.zeros(65))
    assert gc_membership(f3.model, f3.phi, wild)["max_inclusion_gap"] > 0.5


def test_harness_constant_sequence_reduces_to_edi(f3):
    run = integrate_euler(f3.model, f3.phi, [0.3], 0.5, 2.0 ** -10)
    rep = stability_harness([f3.model] * 2, [f3.phi] * 2, [run, run], f3.model, f3.phi)
    assert rep["limit_edi_residual"] == pytest.approx(edi_residual(f3.model, f3.phi, run))


def test_harness_mollification_schedule(f2):
    ks = [1e2, 1e3, 1e4]
    phis = [mollify(f2.phi, k) for k in ks]
    # the sampled interpolant carries an O(h H) defect on the arrival interval, so sample finely
    runs = [integrate_mollified(f2.model, f2.phi, [0.1], 0.5, [k], 2.0 ** -14) for k in ks]
    rep = stability_harness([f2.model] * 3, phis, runs, f2.model, f2.phi)
    assert rep["edi_passed"] and rep["limit_edi_residual"] <= 5e-3


def test_harness_perturbed_hamiltonians(f2):
    ks = [4.0, 16.0, 64.0]
    models = [with_extra_potential(f2.model, _pot(1, [1.0], cos=[1.0 / k])) for k in ks]
    runs = [integrate_euler(m, f2.phi, [0.1], 0.5, 2.0 ** -10) for m in models]
    rep = stability_harness(models, [f2.phi] * 3, runs, f2.model, f2.phi)
    assert rep["edi_passed"]


def test_harness_rejects_diverging_sequence(f2):
    ks = [64.0, 16.0, 4.0]
    models = [with_extra_potential(f2.model, _pot(1, [1.0], cos=[1.0 / k])) for k in ks]
    runs = [integrate_euler(m, f2.phi, [0.1], 0.2, 2.0 ** -8) for m in models]
    with pytest.raises(HypothesisViolated):
        stability_harness(models, [f2.phi] * 3, runs, f2.model, f2.phi)
    with pytest.raises(HypothesisViolated):
        stability_harness([], [], [], f2.model, f2.phi)


def test_time_dependent_run():
    run = integrate_euler_td(free_model(), _td_kink(), [0.25], 0.5, 2.0 ** -8)
    assert np.max(np.abs(run.lifted[:, 0] - 0.25)) <= 1e-12
    assert np.all(run.diagnostics["q_sharp"] == -1.0)
    q = run.diagnostics["q_sharp"]
    assert edi_residual(free_model(), _td_kink(), run, q_sharp=q) <= 1e-12


@pytest.mark.parametrize("name", ["F2", "F3", "F4", "F5"])
def test_fenchel_characterisation(name, rng):
    fx = fixture(name)
    xs = rng.random((200, fx.model.dim))
    assert max(fenchel_check(fx.model, fx.phi, x)["gap"] for x in xs) <= 1e-8
    kink = {"F2": [0.25], "F3": [0.5], "F4": [0.25, 0.3], "F5": [0.75]}[name]
    assert is_singular(fx.phi, kink)[0]
    rep = fenchel_check(fx.model, fx.phi, kink)
    assert rep["gap"] <= 1e-8 and min(rep["other_vertex_gaps"]) > 1e-4


def test_window_averages_converge(f3):
    # from 0.05 the run reaches the kink at about 0.405, after every window below
    assert hitting_time(0.05) > 0.1 + 0.2
    run = integrate_euler(f3.model, f3.phi, [0.05], 1.0, 2.0 ** -10)
    assert not energy_profile(f3.model, f3.phi, run)["violation"]
    observables = [lambda z, p: z[:, 0], lambda z, p: p[:, 0], lambda z, p: p[:, 0] ** 2,
                   lambda z, p: np.cos(TWO_PI * z[:, 0]), lambda z, p: np.exp(p[:, 0])]
    for f in observables:
        for t in (0.0, 0.1, 0.6):
            g = window_average_gaps(f3.model, f3.phi, run, f, t, [0.2, 0.1, 0.05])
            assert g[0] + 1e-12 >= g[1] and g[1] + 1e-12 >= g[2]


def test_selection_right_continuous_along_run(f3):
    h = 2.0 ** -10
    run = integrate_euler(f3.model, f3.phi, [0.3], 1.0, h)
    idx = np.linspace(0, len(run.times) - 9, 50).astype(int)
    for w in (1, 8):
        jumps = np.abs(run.p_sharp[idx + w, 0] - run.p_sharp[idx, 0])
        # only the sample straddling the landing step can jump
        assert np.sum(jumps > 0.05) <= 1
