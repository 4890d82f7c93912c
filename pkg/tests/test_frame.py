import numpy as np
import pytest
from pydantic import ValidationError

from svmframe.errors import DegenerateInputError, DomainEscapeError, OutOfRangeError
from svmframe.frame import (FrameKind, FramePath, classical_trajectory, field_A, field_B, free_inertial_trajectory,
                            from_inertial, inertial_energy, omega_tensor, rotation_matrix, rotation_rate,
                            to_inertial, translation)
from svmframe.grid import Grid2D, curl, divergence
from svmframe.potential import Potential, PotentialKind


def test_rotation_matrix_is_proper_rotation():
    frame = FramePath(phi=(0.3, 0.7, -0.2))
    r = rotation_matrix(frame, 1.2)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-14)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_constant_rotation_omega_tensor():
    omega = 0.5
    w = omega_tensor(FramePath.constant_rotation(omega, phi0=0.4), 3.0)
    expected = omega * np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    np.testing.assert_allclose(w, expected, atol=1e-14)


def test_omega_tensor_matches_numerical_derivative():
    """Omega = R dR^T/dt for a non-uniform rotation."""
    frame = FramePath(phi=(0.1, 0.8, 0.3, -0.05))
    t, eps = 0.9, 1e-6
    r_dot = (rotation_matrix(frame, t + eps) - rotation_matrix(frame, t - eps)) / (2 * eps)
    np.testing.assert_allclose(omega_tensor(frame, t), rotation_matrix(frame, t) @ r_dot.T, atol=1e-8)
    w = omega_tensor(frame, t)
    np.testing.assert_allclose(w, -w.T, atol=1e-14)


def test_field_a_for_pure_rotation():
    omega = 0.3
    frame = FramePath.constant_rotation(omega)
    points = np.array([[1.0, 2.0, 0.0], [-0.5, 0.25, 3.0]])
    expected = omega * np.stack([-points[:, 1], points[:, 0], np.zeros(2)], axis=1)
    np.testing.assert_allclose(field_A(frame, points, 0.7), expected, atol=1e-14)


def test_field_a_of_rotation_is_divergence_free_on_grid():
    frame = FramePath(phi=(0.1, 0.8, 0.3, -0.05))
    grid = Grid2D.from_length(8.0, 33)
    x, y = grid.mesh
    a = field_A(frame, np.stack([x, y, np.zeros_like(x)], axis=-1), 0.9)
    a = np.moveaxis(a[..., :2], -1, 0)
    inner = (slice(1, -1), slice(1, -1))
    assert np.abs(divergence(a, grid)[inner]).max() < 1e-10
    np.testing.assert_allclose(curl(a, grid)[inner], 2.0 * rotation_rate(frame, 0.9), atol=1e-10)


def test_field_b_is_minus_translation_velocity():
    frame = FramePath(kind=FrameKind.TRANSLATION, c=((0.0, 0.0, 0.0), (1.0, -2.0, 0.0), (0.5, 0.0, 0.0)))
    np.testing.assert_allclose(field_B(frame, 2.0), [-3.0, 2.0, 0.0])
    np.testing.assert_allclose(translation(frame, 2.0), [4.0, -4.0, 0.0])


def test_tabulated_rotation_interpolates_and_checks_range():
    times = tuple(np.linspace(0.0, 2.0, 21))
    frame = FramePath(phi=(0.0,), table_times=times, table_phi=tuple(0.5 * t for t in times))
    assert rotation_rate(frame, 1.0) == pytest.approx(0.5, abs=1e-10)
    with pytest.raises(OutOfRangeError):
        rotation_rate(frame, 2.5)


def test_tabulated_rotation_needs_three_samples():
    frame = FramePath(table_times=(0.0, 1.0), table_phi=(0.0, 1.0))
    with pytest.raises(DegenerateInputError):
        rotation_rate(frame, 0.5)


def test_frame_kind_must_match_path():
    with pytest.raises(ValidationError):
        FramePath(kind=FrameKind.Z_ROTATION, c=((1.0, 0.0, 0.0),))


def test_static_frames():
    assert FramePath.constant_rotation(1.0).is_static
    assert not FramePath(phi=(0.0, 1.0, 0.1)).is_static
    assert FramePath(kind=FrameKind.TRANSLATION, c=((0.0, 0.0, 0.0), (1.0, 0.0, 0.0))).is_static
    assert not FramePath(kind=FrameKind.COMPOSITE, phi=(0.0, 1.0), c=((0.0, 0.0, 0.0), (1.0, 0.0, 0.0))).is_static


def test_inertial_round_trip():
    frame = FramePath(kind=FrameKind.COMPOSITE, phi=(0.2, 0.5), c=((1.0, -1.0, 0.0), (0.3, 0.0, 0.0)))
    q = np.array([0.4, -2.0, 1.0])
    np.testing.assert_allclose(from_inertial(frame, to_inertial(frame, q, 1.3), 1.3), q, atol=1e-14)


def test_free_particle_without_rotation_is_straight_line(params):
    free = Potential()
    t = np.linspace(0.0, 2.0, 201)
    states = classical_trajectory(params, FramePath.inertial(), free, [0.0, 1.0, 0.0], [1.0, 0.5, 0.0], t)
    np.testing.assert_allclose(states[-1].q, [2.0, 2.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(states[-1].p, [1.0, 0.5, 0.0], atol=1e-12)


def test_free_particle_in_rotating_frame_follows_rotated_line(params, rotating):
    t = np.linspace(0.0, 2.0, 201)
    q0, p0 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    states = classical_trajectory(params, rotating, Potential(), q0, p0, t)
    exact = free_inertial_trajectory(params, rotating, q0, p0, t)
    for got, want in zip(states[::20], exact[::20]):
        np.testing.assert_allclose(got.q, want.q, atol=1e-8)
        np.testing.assert_allclose(got.p, want.p, atol=1e-8)


def test_inertial_energy_conserved_for_central_potential(params, harmonic):
    frame = FramePath.constant_rotation(0.3)
    t = np.linspace(0.0, 2.0, 2001)
    states = classical_trajectory(params, frame, harmonic, [1.0, 0.5, 0.0], [0.2, -0.4, 0.0], t)
    energies = [inertial_energy(params, frame, harmonic, s) for s in states]
    assert max(energies) - min(energies) < 1e-10


def test_escape_reports_last_valid_state(params):
    t = np.linspace(0.0, 5.0, 51)
    with pytest.raises(DomainEscapeError) as info:
        classical_trajectory(params, FramePath.inertial(), Potential(), [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], t,
                             domain_half_width=1.0)
    assert info.value.last_state.q[0] <= 1.0
    assert info.value.last_state.t == pytest.approx(1.0)


def test_trajectory_needs_increasing_times(params):
    with pytest.raises(DegenerateInputError):
        classical_trajectory(params, FramePath.inertial(), Potential(), [0, 0, 0], [0, 0, 0], [0.0, 0.0, 1.0])


def test_radial_gaussian_gradient_matches_finite_difference():
    potential = Potential(kind=PotentialKind.RADIAL_GAUSSIAN, strength=-2.0, width=0.7)
    x, eps = np.array([0.3, -0.4, 0.0]), 1e-6
    numeric = [(potential.value(x + eps * e) - potential.value(x - eps * e)) / (2 * eps) for e in np.eye(3)]
    np.testing.assert_allclose(potential.gradient(x), numeric, atol=1e-8)
