import dataclasses

import numpy as np
import pytest

from svmframe.ensemble import (EnsemblePaths, NoiseStream, TrajectoryEnsemble, advance_backward, advance_forward,
                               check_consistency, histogram_density, mean_derivative, reflect, sample_from_density,
                               sample_wiener, stochastic_action_estimate)
from svmframe.errors import PreconditionError
from svmframe.frame import FrameKind, FramePath, classical_trajectory, gauge_velocity_plane, rotation_matrix
from svmframe.grid import (Grid2D, PhysicalParams, coarse_grain, gaussian_packet, interpolate_field, madelung_decompose,
                           tv_distance)
from svmframe.potential import Potential
from svmframe.schrodinger import SchrodingerRun, evolve, ground_state


def _at_origin(n, seed=7):
    return TrajectoryEnsemble(positions=np.zeros((n, 2)), t=0.0, master_seed=seed)


def _binned_mean(anchor, values, bins):
    edges = [bins.edges, bins.edges]
    counts, _, _ = np.histogram2d(anchor[:, 0], anchor[:, 1], bins=edges)
    sums = [np.histogram2d(anchor[:, 0], anchor[:, 1], bins=edges, weights=values[:, c])[0] for c in range(2)]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.stack(sums) / counts


def test_wiener_increment_moments():
    dt, n = 0.01, 200_000
    dw = sample_wiener(dt, NoiseStream(3), step=5, n=n).dW
    assert dw.shape == (n, 2)
    np.testing.assert_allclose(dw.mean(axis=0), 0.0, atol=5.0 * np.sqrt(dt / n))
    np.testing.assert_allclose(dw.var(axis=0), dt, rtol=2e-2)
    assert abs(np.mean(dw[:, 0] * dw[:, 1])) < 5.0 * dt / np.sqrt(n)


def test_wiener_increment_needs_nonzero_dt():
    with pytest.raises(PreconditionError):
        sample_wiener(0.0, NoiseStream(1))


def test_noise_depends_only_on_seed_step_and_index():
    stream = NoiseStream(42)
    big = sample_wiener(0.01, stream, step=9, n=1000).dW
    np.testing.assert_array_equal(sample_wiener(0.01, stream, step=9, n=100).dW, big[:100])
    assert not np.array_equal(sample_wiener(0.01, stream, step=10, n=100).dW, big[:100])
    assert not np.array_equal(sample_wiener(0.01, NoiseStream(42, "backward"), step=9, n=100).dW, big[:100])
    assert not np.array_equal(sample_wiener(0.01, NoiseStream(43), step=9, n=100).dW, big[:100])


def test_trajectory_paths_do_not_depend_on_ensemble_size(params):
    grid = Grid2D.from_length(16.0, 32)
    field = np.zeros((2, grid.n, grid.n))
    small, large = _at_origin(3), _at_origin(50)
    for _ in range(5):
        small = advance_forward(small, field, FramePath.inertial(), params, 0.01, grid)
        large = advance_forward(large, field, FramePath.inertial(), params, 0.01, grid)
    np.testing.assert_array_equal(small.positions, large.positions[:3])
    assert small.step == 5 and small.t == pytest.approx(0.05)


def test_sampled_ensemble_matches_density(grid, params):
    rho = gaussian_packet(grid, params, center=(0.5, -1.0), sigma0=1.0).density
    ensemble = sample_from_density(rho, grid, 200_000, master_seed=5)
    assert ensemble.n_traj == 200_000
    np.testing.assert_array_equal(ensemble.stream_ids, np.arange(200_000))
    assert tv_distance(histogram_density(ensemble.positions, grid), rho, grid) < 4e-2
    np.testing.assert_allclose(ensemble.positions.mean(axis=0), [0.5, -1.0], atol=1e-2)


def test_sampling_rejects_empty_ensemble(grid, params):
    with pytest.raises(PreconditionError):
        sample_from_density(gaussian_packet(grid, params).density, grid, 0, master_seed=1)


def test_reflect_mirrors_into_box():
    np.testing.assert_allclose(reflect(np.array([[8.5, -9.0], [1.0, 7.0]]), 8.0), [[7.5, -7.0], [1.0, 7.0]])


def test_free_diffusion_variance(params):
    grid = Grid2D.from_length(16.0, 32)
    field = np.zeros((2, grid.n, grid.n))
    ensemble = _at_origin(50_000)
    for _ in range(10):
        ensemble = advance_forward(ensemble, field, FramePath.inertial(), params, 0.01, grid)
    np.testing.assert_allclose(ensemble.positions.var(axis=0), 2.0 * params.nu * 0.1, rtol=3e-2)


def test_advance_requires_matching_time_direction(grid, params):
    psi = gaussian_packet(grid, params)
    ensemble = sample_from_density(psi.density, grid, 10, master_seed=1)
    madelung = madelung_decompose(psi)
    with pytest.raises(PreconditionError):
        advance_forward(ensemble, madelung.p_fwd, FramePath.inertial(), params, -0.01, grid)
    with pytest.raises(PreconditionError):
        advance_backward(ensemble, madelung, FramePath.inertial(), 0.01)


def test_consistency_condition(grid, params):
    madelung = madelung_decompose(gaussian_packet(grid, params, sigma0=0.8, k=(0.3, 0.0)))
    assert check_consistency(madelung) < 1e-12
    broken = dataclasses.replace(madelung, p_bwd=madelung.p_bwd + 0.1)
    with pytest.raises(PreconditionError):
        check_consistency(broken)


def test_zero_diffusion_reduces_to_classical_motion():
    params = PhysicalParams(nu=0.0)
    frame = FramePath(kind=FrameKind.TRANSLATION, c=((0.0, 0.0, 0.0), (0.4, -0.2, 0.0)))
    grid = Grid2D.from_length(16.0, 32)
    p0 = np.array([1.0, 0.5])
    field = np.broadcast_to(p0[:, None, None], (2, grid.n, grid.n)).copy()
    ensemble = TrajectoryEnsemble(positions=np.array([[0.3, -0.1]]), t=0.0, master_seed=9)
    for _ in range(100):
        ensemble = advance_forward(ensemble, field, frame, params, 0.01, grid)
    t = np.linspace(0.0, 1.0, 101)
    states = classical_trajectory(params, frame, Potential(), [0.3, -0.1, 0.0], [1.0, 0.5, 0.0], t)
    np.testing.assert_allclose(ensemble.positions[0], states[-1].q[:2], atol=1e-12)


def test_zero_diffusion_follows_classical_path_in_rotating_trap(harmonic):
    """nu = 0 paths of a Hamilton-Jacobi momentum field against RK4.

    S = a(t) r + B(t) r^2 / 2 with B = -tan(t - 1) and a = a0 cos(1) / cos(t - 1)
    solves the inertial Hamilton-Jacobi equation of the unit trap; in the
    rotating frame its gradient is p(q, t) = R(t) a(t) + B(t) q.
    """
    params = PhysicalParams(nu=0.0)
    frame = FramePath.constant_rotation(0.3)
    grid = Grid2D.from_length(8.0, 32)
    x, y = grid.mesh
    a0 = np.array([0.0, 0.3])

    def momentum(q, t):
        a = rotation_matrix(frame, t)[:2, :2] @ (a0 * np.cos(1.0) / np.cos(t - 1.0))
        return a + (-np.tan(t - 1.0)) * q

    q0 = np.array([[0.5, 0.0], [-0.4, 0.6], [0.2, -0.8]])
    dt, per_check = 1e-4, 5000
    ensemble = TrajectoryEnsemble(positions=q0.copy(), t=0.0, master_seed=3)
    sde = [ensemble.positions]
    for k in range(1, 4 * per_check + 1):
        field = np.moveaxis(momentum(np.stack([x, y], axis=-1), ensemble.t), -1, 0)
        ensemble = advance_forward(ensemble, field, frame, params, dt, grid)
        if k % per_check == 0:
            sde.append(ensemble.positions)
    assert ensemble.t == pytest.approx(2.0)

    t_grid = np.linspace(0.0, 2.0, 2001)
    for i, q in enumerate(q0):
        states = classical_trajectory(params, frame, harmonic, [*q, 0.0], [*momentum(q, 0.0), 0.0], t_grid)
        rk4 = np.array([states[j].q[:2] for j in range(0, 2001, 500)])
        np.testing.assert_allclose(np.array(sde)[:, i], rk4, atol=1e-3)


def test_ground_state_ensemble_is_stationary_in_both_directions(fine_grid, params, harmonic):
    """For the harmonic ground state E[x^2 + y^2] = hbar / (M omega) at all times."""
    psi, _ = ground_state(fine_grid, params, harmonic)
    madelung = madelung_decompose(psi)
    start = sample_from_density(psi.density, fine_grid, 100_000, master_seed=17)
    forward, backward = start, start
    for _ in range(20):
        forward = advance_forward(forward, madelung.p_fwd, FramePath.inertial(), params, 0.01, fine_grid,
                                  madelung.mask)
        backward = advance_backward(backward, madelung, FramePath.inertial(), -0.01)
    assert backward.t == pytest.approx(-0.2)
    for ensemble in (forward, backward):
        assert np.mean(np.sum(ensemble.positions ** 2, axis=1)) == pytest.approx(1.0, abs=3e-2)


def test_forward_then_backward_ensemble_returns_to_initial_density(params):
    """Forward SDE to t = 0.5 on the Crank-Nicolson drifts, then the backward SDE to t = 0."""
    grid = Grid2D.from_length(16.0, 96)
    bins = Grid2D.from_length(16.0, 64)
    frame, dt = FramePath.constant_rotation(0.8), 0.01
    psi = gaussian_packet(grid, params, center=(1.0, 0.0), sigma0=0.8, k=(0.0, -1.0))
    fields = []
    evolve(SchrodingerRun(psi=psi, frame=frame, potential=Potential(), dt=dt), 0.5,
           on_step=lambda run: fields.append(madelung_decompose(run.psi, t=run.t)))
    initial = coarse_grain(psi.density, grid, bins)

    ensemble = sample_from_density(psi.density, grid, 200_000, master_seed=41)
    for f in fields[:-1]:
        ensemble = advance_forward(ensemble, f.p_fwd, frame, params, dt, grid, mask=f.mask)
    assert ensemble.t == pytest.approx(fields[-1].t)
    assert tv_distance(histogram_density(ensemble.positions, bins), initial, bins) > 0.15

    for f in reversed(fields[1:]):
        ensemble = advance_backward(ensemble, f, frame, -dt)
    assert ensemble.t == pytest.approx(0.0, abs=1e-9)
    assert tv_distance(histogram_density(ensemble.positions, bins), initial, bins) < 0.05


def test_ensemble_histogram_tracks_schrodinger_density(params, harmonic, rotating):
    grid = Grid2D.from_length(16.0, 128)
    bins = Grid2D.from_length(16.0, 64)
    dt = 0.01
    psi = gaussian_packet(grid, params, center=(1.0, 0.0), sigma0=np.sqrt(0.5), k=(0.0, 1.0))
    state = {"ensemble": sample_from_density(psi.density, grid, 200_000, master_seed=5), "fields": None}

    def advance(run):
        if state["fields"] is not None:
            f = state["fields"]
            state["ensemble"] = advance_forward(state["ensemble"], f.p_fwd, rotating, params, dt, grid, mask=f.mask)
        state["fields"] = madelung_decompose(run.psi, t=run.t)

    result = evolve(SchrodingerRun(psi=psi, frame=rotating, potential=harmonic, dt=dt), 1.0, on_step=advance)
    ensemble = state["ensemble"]
    assert ensemble.t == pytest.approx(1.0)
    final = coarse_grain(result.run.psi.density, grid, bins)
    assert tv_distance(histogram_density(ensemble.positions, bins), final, bins) < 0.05


def test_paths_table_and_lookup():
    positions = np.arange(12, dtype=float).reshape(2, 3, 2)
    paths = EnsemblePaths.from_arrays([0.0, 0.1], positions)
    frame = paths.to_frame()
    assert list(frame.columns) == ["t", "traj", "x", "y"]
    assert frame["traj"].tolist() == [0, 1, 2, 0, 1, 2]
    assert frame["x"].tolist() == [0.0, 2.0, 4.0, 6.0, 8.0, 10.0]
    assert paths.index_of(0.1) == 1
    with pytest.raises(PreconditionError):
        paths.index_of(0.05)


def test_mean_derivatives_of_uniform_motion(rng):
    velocity = np.array([1.0, -0.5])
    q0 = rng.uniform(-2.0, 2.0, size=(2000, 2))
    times = np.array([0.0, 0.1, 0.2])
    paths = EnsemblePaths.from_arrays(times, np.stack([q0 + t * velocity for t in times]))
    bins = Grid2D.from_length(8.0, 16)
    for direction in ("forward", "backward"):
        derivative = mean_derivative(paths, 0.1, 0.1, direction, bins, min_count=5)
        filled = derivative.counts > 0
        np.testing.assert_allclose(derivative.values[0][filled], 1.0, atol=1e-12)
        np.testing.assert_allclose(derivative.values[1][filled], -0.5, atol=1e-12)
        assert np.isnan(derivative.values[0][~filled]).all()
    with pytest.raises(PreconditionError):
        mean_derivative(paths, 0.2, 0.1, "forward", bins)
    with pytest.raises(PreconditionError):
        mean_derivative(paths, 0.1, 0.01, "forward", bins)


def test_forward_mean_derivative_recovers_drift_within_sampling_error(params, rotating, rng):
    """Per-bin error of D against the drift at the anchors, in units of sqrt(2 nu / dt) / sqrt(n_bin)."""
    grid = Grid2D.from_length(16.0, 64)
    x, y = grid.mesh
    field = np.stack([0.5 - 0.3 * y, 0.2 + 0.4 * x])
    dt = 0.01
    start = TrajectoryEnsemble(positions=rng.uniform(-3.0, 3.0, size=(200_000, 2)), t=0.0, master_seed=31)
    paths = EnsemblePaths()
    paths.record(start)
    paths.record(advance_forward(start, field, rotating, params, dt, grid))
    bins = Grid2D.from_length(8.0, 16)
    derivative = mean_derivative(paths, 0.0, dt, "forward", bins, min_count=200)

    q = start.positions
    drift = interpolate_field(field, grid, q) / params.mass - gauge_velocity_plane(rotating, q, 0.0)
    expected = _binned_mean(q, drift, bins)
    ok = derivative.populated
    assert ok.sum() >= 30
    z = (derivative.values - expected)[:, ok] * np.sqrt(derivative.counts[ok] / (2.0 * params.nu / dt))
    assert np.sqrt(np.mean(z ** 2)) < 3.0


def test_mean_derivatives_differ_by_osmotic_velocity(fine_grid, params, harmonic):
    """D - D~ = 2 nu grad ln rho on the stationary ground-state ensemble."""
    psi, _ = ground_state(fine_grid, params, harmonic)
    madelung = madelung_decompose(psi)
    dt = 0.01
    ensemble = sample_from_density(psi.density, fine_grid, 200_000, master_seed=23)
    paths = EnsemblePaths()
    paths.record(ensemble)
    for _ in range(2):
        ensemble = advance_forward(ensemble, madelung.p_fwd, FramePath.inertial(), params, dt, fine_grid,
                                   madelung.mask)
        paths.record(ensemble)
    bins = Grid2D.from_length(8.0, 16)
    forward = mean_derivative(paths, dt, dt, "forward", bins, min_count=1000)
    backward = mean_derivative(paths, dt, dt, "backward", bins, min_count=1000)
    np.testing.assert_array_equal(forward.counts, backward.counts)

    anchor = paths.positions[1]
    expected = 2.0 * params.nu * _binned_mean(anchor, interpolate_field(madelung.grad_ln_rho, fine_grid, anchor), bins)
    ok = forward.populated
    assert ok.sum() >= 12
    gap = (forward.values - backward.values - expected)[:, ok]
    z = gap * np.sqrt(forward.counts[ok] / (2.0 * 2.0 * params.nu / dt))
    assert np.sqrt(np.mean(z ** 2)) < 2.0


def test_action_of_uniform_motion():
    params = PhysicalParams(nu=0.0)
    velocity = np.array([1.0, -0.5])
    times = np.linspace(0.0, 1.0, 11)
    q0 = np.array([[0.0, 0.0], [1.0, 1.0]])
    paths = EnsemblePaths.from_arrays(times, np.stack([q0 + t * velocity for t in times]))
    estimate = stochastic_action_estimate(paths, FramePath.inertial(), Potential(), params)
    assert estimate.value == pytest.approx(0.5 * 1.25 * 0.1 * 9)
    assert estimate.ito_correction == 0.0
    assert estimate.stat_err == pytest.approx(0.0, abs=1e-14)


def test_ito_correction_removes_noise_kinetic_energy(params):
    grid = Grid2D.from_length(16.0, 32)
    field = np.zeros((2, grid.n, grid.n))
    ensemble = _at_origin(20_000)
    paths = EnsemblePaths()
    paths.record(ensemble)
    for _ in range(10):
        ensemble = advance_forward(ensemble, field, FramePath.inertial(), params, 0.01, grid)
        paths.record(ensemble)
    estimate = stochastic_action_estimate(paths, FramePath.inertial(), Potential(), params)
    assert estimate.ito_correction == pytest.approx(0.5 * params.mass * 2.0 * params.nu * 2 * 9)
    assert abs(estimate.value) < 4.0 * estimate.stat_err


def test_action_from_osmotic_fields_of_ground_state(fine_grid, params, harmonic):
    """With the field drifts D = -q and D~ = q the kinetic term is (M/2) q^2, equal to V on average."""
    psi, _ = ground_state(fine_grid, params, harmonic)
    madelung = madelung_decompose(psi)
    positions = sample_from_density(psi.density, fine_grid, 20_000, master_seed=29).positions
    times = 0.01 * np.arange(5)
    paths = EnsemblePaths.from_arrays(times, np.stack([positions] * len(times)))
    estimate = stochastic_action_estimate(paths, FramePath.inertial(), harmonic, params,
                                          fields_per_step=[madelung] * len(times))
    inner = 0.01 * (len(times) - 2)
    assert estimate.ito_correction == 0.0
    assert estimate.kinetic == pytest.approx(0.5 * inner, rel=3e-2)
    assert estimate.potential == pytest.approx(0.5 * inner, rel=3e-2)
    assert estimate.kinetic == pytest.approx(estimate.potential, rel=1e-2)
    with pytest.raises(PreconditionError):
        stochastic_action_estimate(paths, FramePath.inertial(), harmonic, params, fields_per_step=[madelung])
