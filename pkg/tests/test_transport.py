import numpy as np
import pytest

from singchar.fixtures import fixture, free_model, hitting_time, sine_phi, zero_phi
from singchar.transport import (CloudEvolution, ParticleCloud, aggregate_edi, ce_residual, energy_averages,
                                evolve_cloud, fourier_modes, mass_monotonicity, singular_nodes)


def _pendulum_position(x0, t):
    # x' = 2 sin pi x on (0, 1/2): tan(pi x / 2) grows like exp(2 pi t), absorbed at 1/2
    x0 = np.asarray(x0, dtype=float)
    left = np.minimum(x0, 1 - x0)
    x = (2 / np.pi) * np.arctan(np.tan(np.pi * left / 2) * np.exp(2 * np.pi * t))
    x = np.minimum(x, 0.5)
    return np.where(x0 <= 0.5, x, 1 - x)


@pytest.fixture(scope="module")
def pendulum_small():
    fx = fixture("F3")
    evo = evolve_cloud(fx.model, fx.phi, ParticleCloud.uniform(256), 2.0, 2.0 ** -9, snapshot_every=0.25)
    return fx, evo


def test_cloud_validation():
    with pytest.raises(ValueError):
        ParticleCloud(np.zeros((2, 1)), np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        ParticleCloud(np.zeros((2, 1)), np.array([1.0]))
    cl = ParticleCloud.uniform(100, dim=2)
    assert len(cl) == 100 and cl.dim == 2 and cl.weights.sum() == pytest.approx(1.0, abs=1e-12)
    cl = ParticleCloud.uniform(50, seed=3)
    assert np.array_equal(cl.positions, ParticleCloud.uniform(50, seed=3).positions)


def test_stationary_cloud_for_zero_field():
    cl = ParticleCloud.uniform(10 ** 4)
    evo = evolve_cloud(free_model(), zero_phi(), cl, 1.0, 2.0 ** -6)
    assert np.all(evo.snapshots == evo.snapshots[0])
    assert ce_residual(free_model(), zero_phi(), evo)["max_residual"] == 0.0


def test_pendulum_particles_follow_oracle(pendulum_small):
    fx, evo = pendulum_small
    x0 = evo.snapshots[0, :, 0]
    for t in (0.25, 0.5, 2.0):
        k = int(np.argmin(np.abs(evo.times - t)))
        x = evo.snapshots[k, :, 0] - np.floor(evo.snapshots[k, :, 0])
        assert np.max(np.abs(x - _pendulum_position(x0, evo.times[k]))) <= 1e-2
    # every particle reaches the kink by the last hitting time
    assert evo.T > hitting_time(x0.min())
    assert np.max(np.abs(evo.snapshots[-1, :, 0] - 0.5)) <= 2 * evo.h


def test_single_particle_at_kink():
    fx = fixture("F3")
    evo = evolve_cloud(fx.model, fx.phi, ParticleCloud([[0.5]], [1.0]), 1.0, 2.0 ** -8)
    assert np.all(evo.snapshots == 0.5)


def test_monotone_absorption(pendulum_small):
    fx, evo = pendulum_small
    dist = np.abs(evo.snapshots[:, :, 0] - 0.5)
    entered = np.maximum.accumulate(dist <= 2 * evo.h, axis=0)
    later = np.where(entered[:-1], dist[1:] - dist[:-1], -np.inf)
    assert later.max() <= evo.h * 3.0


def test_weights_and_mass_conserved(pendulum_small):
    fx, evo = pendulum_small
    assert evo.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert evo.snapshots.shape[1] == len(evo.weights)


def test_positions_at(pendulum_small):
    fx, evo = pendulum_small
    assert np.array_equal(evo.positions_at(0.25), evo.snapshots[1])
    mid = evo.positions_at(0.125)
    assert np.allclose(mid, 0.5 * (evo.snapshots[0] + evo.snapshots[1]))
    with pytest.raises(ValueError):
        evo.positions_at(3.0)


def test_ce_residual_first_order_in_h():
    fx = fixture("F3")
    cl = ParticleCloud.uniform(256)
    res = []
    for e in (8, 9, 10):
        evo = evolve_cloud(fx.model, fx.phi, cl, 1.0, 2.0 ** -e, probe_times=[0.0, 0.5])
        res.append(ce_residual(fx.model, fx.phi, evo)["max_residual"])
    ratios = [a / b for a, b in zip(res, res[1:])]
    assert all(1.6 <= r <= 2.4 for r in ratios)


def test_ce_residual_one_sided_and_modes(pendulum_small):
    fx, evo = pendulum_small
    rep = ce_residual(fx.model, fx.phi, evo)
    assert len(rep["modes"]) == 8 and rep["times"] == [0.0, 0.5, 1.0, 1.5]
    assert rep["max_one_sided"] <= 5e-2
    assert max(max(r) for r in rep["residuals"][1:]) <= 1e-2
    assert len(fourier_modes(2)) == 8


def test_aggregate_edi(pendulum_small):
    fx, evo = pendulum_small
    rep = aggregate_edi(evo)
    assert rep["residual"] <= 1e-2
    assert rep["phi_change"] > 0


def test_energy_averages(pendulum_small):
    fx, evo = pendulum_small
    rep = energy_averages(fx.model, fx.phi, evo)
    assert rep["bounded"]
    assert rep["energy"][0] == pytest.approx(1.0) and rep["energy"][-1] == pytest.approx(-1.0)


def test_mass_monotone_near_kink(pendulum_small):
    fx, evo = pendulum_small
    for delta in (0.02, 0.01):
        rep = mass_monotonicity(fx.phi, evo, delta, speed=3.0)
        assert rep["violations"] == 0 and not rep["empty_set"]
        assert rep["mass"][-1] == pytest.approx(1.0)


def test_mass_empty_region_for_smooth_phi():
    evo = evolve_cloud(free_model(), sine_phi(), ParticleCloud.uniform(64), 0.5, 2.0 ** -7)
    assert len(singular_nodes(sine_phi(), 1)) == 0
    rep = mass_monotonicity(sine_phi(), evo, 0.01, speed=7.0)
    assert rep["empty_set"] and all(m == 0.0 for m in rep["mass"])


def test_csv_format(tmp_path, pendulum_small):
    fx, evo = pendulum_small
    path = tmp_path / "cloud.csv"
    evo.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,particle_id,x_0,weight"
    assert len(lines) == 1 + len(evo.times) * len(evo.weights)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert np.all((data[:, 2] >= 0) & (data[:, 2] < 1))
    assert data[:256, 3].sum() == pytest.approx(1.0)


def test_intrinsic_cloud_matches_euler():
    fx = fixture("F3")
    cl = ParticleCloud([[0.2], [0.3], [0.5], [0.85]], np.full(4, 0.25))
    a = evolve_cloud(fx.model, fx.phi, cl, 0.25, 2.0 ** -8, method="intrinsic")
    b = evolve_cloud(fx.model, fx.phi, cl, 0.25, 2.0 ** -8)
    d = a.snapshots - b.snapshots
    assert np.max(np.abs(d - np.round(d))) <= 2e-2
    with pytest.raises(ValueError):
        evolve_cloud(fx.model, fx.phi, cl, 0.25, 2.0 ** -8, method="mollified")
