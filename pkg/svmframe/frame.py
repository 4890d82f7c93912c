"""Non-inertial frame transform q = R(t) r + c(t) and its fictitious-force fields.

Sign convention: the rotation angle phi(t) enters R(t) with the layout

    R = [[ cos phi,  sin phi, 0],
         [-sin phi,  cos phi, 0],
         [       0,        0, 1]]

and the rotation rate is defined as omega = dphi/dt. With this layout
Omega = R dR^T = omega * [[0, -1, 0], [1, 0, 0], [0, 0, 0]], so that
A(x) = omega * (-y, x, 0) for c = 0.
"""
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from numpy.polynomial import polynomial as P
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.interpolate import CubicSpline

from .errors import DegenerateInputError, DomainEscapeError, OutOfRangeError
from .grid import PhysicalParams
from .logger import logger
from .potential import Potential

MAX_DEGREE = 4
_RANGE_SLACK = 1e-12

Vector3 = Tuple[float, float, float]


class FrameKind(str, Enum):
    Z_ROTATION = "z_rotation"
    TRANSLATION = "translation"
    COMPOSITE = "composite"


class FramePath(BaseModel):
    """Time-dependent frame transform (R(t), c(t)).

    phi and c are polynomials in t (ascending coefficients, degree <= 4) unless a
    table is given, in which case they are cubic-interpolated from the samples.
    """

    model_config = ConfigDict(frozen=True)

    kind: FrameKind = Field(default=FrameKind.Z_ROTATION)
    phi: Tuple[float, ...] = Field(default=(0.0,), description="phi(t) polynomial coefficients [rad, rad/time, ...]")
    c: Tuple[Vector3, ...] = Field(default=((0.0, 0.0, 0.0),), description="c(t) polynomial coefficients")
    table_times: Optional[Tuple[float, ...]] = None
    table_phi: Optional[Tuple[float, ...]] = None
    table_c: Optional[Tuple[Vector3, ...]] = None

    @model_validator(mode="after")
    def _check_shape(self) -> "FramePath":
        if len(self.phi) == 0 or len(self.phi) > MAX_DEGREE + 1:
            raise ValueError(f"phi polynomial must have 1..{MAX_DEGREE + 1} coefficients")
        if len(self.c) == 0 or len(self.c) > MAX_DEGREE + 1:
            raise ValueError(f"c polynomial must have 1..{MAX_DEGREE + 1} coefficients")
        if (self.table_phi is not None or self.table_c is not None) and self.table_times is None:
            raise ValueError("tabulated phi or c requires table_times")
        n = len(self.table_times) if self.table_times is not None else 0
        if self.table_phi is not None and len(self.table_phi) != n:
            raise ValueError("table_phi length must match table_times")
        if self.table_c is not None and len(self.table_c) != n:
            raise ValueError("table_c length must match table_times")
        rotates = any(self.phi) or self.table_phi is not None
        translates = any(any(row) for row in self.c) or self.table_c is not None
        if self.kind == FrameKind.Z_ROTATION and translates:
            raise ValueError("z_rotation frames must have c(t) = 0; use kind=composite")
        if self.kind == FrameKind.TRANSLATION and rotates:
            raise ValueError("translation frames must have phi(t) = 0; use kind=composite")
        return self

    @classmethod
    def inertial(cls) -> "FramePath":
        return cls(kind=FrameKind.Z_ROTATION)

    @classmethod
    def constant_rotation(cls, omega: float, phi0: float = 0.0) -> "FramePath":
        return cls(kind=FrameKind.Z_ROTATION, phi=(phi0, omega))

    @property
    def is_static(self) -> bool:
        """True when Omega, c-dot and hence A + B do not depend on time."""
        if self.table_times is not None:
            return False
        constant_rate = not any(self.phi[2:])
        rotating = any(self.phi[1:])
        c_moves = any(any(row) for row in self.c[1:])
        c_accelerates = any(any(row) for row in self.c[2:])
        # Omega (c - x) shifts in time when a rotating frame also translates.
        return constant_rate and not c_accelerates and not (rotating and c_moves)


@dataclass(frozen=True)
class ClassicalState:
    q: np.ndarray
    p: np.ndarray
    t: float


# ------------------------------------------------------------------
# Time functions
# ------------------------------------------------------------------
@lru_cache(maxsize=64)
def _splines(times: Tuple[float, ...], values: Tuple) -> Tuple[CubicSpline, CubicSpline]:
    """Value spline and derivative spline of a tabulated path.

    Node derivatives come from centered differences on the native spacing with
    2nd-order one-sided stencils at the endpoints.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.size < 3:
        raise DegenerateInputError("a tabulated path needs at least 3 samples")
    if np.any(np.diff(t) <= 0.0):
        raise DegenerateInputError("tabulation times must be strictly increasing")
    dv = np.gradient(v, t, axis=0, edge_order=2)
    return CubicSpline(t, v, axis=0), CubicSpline(t, dv, axis=0)


def _check_range(frame: FramePath, t: float) -> None:
    t0, t1 = frame.table_times[0], frame.table_times[-1]
    if t < t0 - _RANGE_SLACK or t > t1 + _RANGE_SLACK:
        raise OutOfRangeError(f"t={t} outside tabulated range [{t0}, {t1}]")


def rotation_angle(frame: FramePath, t: float) -> float:
    if frame.table_phi is not None:
        _check_range(frame, t)
        return float(_splines(frame.table_times, frame.table_phi)[0](t))
    return float(P.polyval(t, frame.phi))


def rotation_rate(frame: FramePath, t: float) -> float:
    """omega(t) = dphi/dt."""
    if frame.table_phi is not None:
        _check_range(frame, t)
        return float(_splines(frame.table_times, frame.table_phi)[1](t))
    return float(P.polyval(t, P.polyder(frame.phi))) if len(frame.phi) > 1 else 0.0


def translation(frame: FramePath, t: float) -> np.ndarray:
    if frame.table_c is not None:
        _check_range(frame, t)
        return np.asarray(_splines(frame.table_times, frame.table_c)[0](t), dtype=float)
    coeffs = np.asarray(frame.c, dtype=float)
    return P.polyval(t, coeffs).astype(float) if coeffs.shape[0] > 1 else coeffs[0].copy()


def translation_rate(frame: FramePath, t: float) -> np.ndarray:
    if frame.table_c is not None:
        _check_range(frame, t)
        return np.asarray(_splines(frame.table_times, frame.table_c)[1](t), dtype=float)
    coeffs = np.asarray(frame.c, dtype=float)
    if coeffs.shape[0] == 1:
        return np.zeros(3)
    return P.polyval(t, P.polyder(coeffs, axis=0))


# ------------------------------------------------------------------
# Matrices and fields
# ------------------------------------------------------------------
def _rz(phi: float) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def _drz(phi: float) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[-s, c, 0.0], [-c, -s, 0.0], [0.0, 0.0, 0.0]])


def rotation_matrix(frame: FramePath, t: float) -> np.ndarray:
    """R(t)."""
    return _rz(rotation_angle(frame, t))


def omega_tensor(frame: FramePath, t: float) -> np.ndarray:
    """Omega(t) = R(t) dR^T/dt, an antisymmetric 3x3 matrix."""
    phi = rotation_angle(frame, t)
    r_dot = rotation_rate(frame, t) * _drz(phi)
    return _rz(phi) @ r_dot.T


def field_A(frame: FramePath, x: np.ndarray, t: float) -> np.ndarray:
    """A(x, t) = Omega(t) (x - c(t)) for points with a trailing axis of length 3."""
    x = np.asarray(x, dtype=float)
    return (x - translation(frame, t)) @ omega_tensor(frame, t).T


def field_B(frame: FramePath, t: float) -> np.ndarray:
    """B(t) = -dc/dt."""
    return -translation_rate(frame, t)


def gauge_velocity_plane(frame: FramePath, xy: np.ndarray, t: float) -> np.ndarray:
    """In-plane A + B at 2D points (trailing axis of length 2).

    Valid for rotations about z, where Omega has no z coupling.
    """
    xy = np.asarray(xy, dtype=float)
    omega = omega_tensor(frame, t)[:2, :2]
    c = translation(frame, t)[:2]
    return (xy - c) @ omega.T + field_B(frame, t)[:2]


# ------------------------------------------------------------------
# Frame changes (q = R r + c)
# ------------------------------------------------------------------
def to_inertial(frame: FramePath, q: np.ndarray, t: float) -> np.ndarray:
    """r = R^T (q - c)."""
    return (np.asarray(q, dtype=float) - translation(frame, t)) @ rotation_matrix(frame, t)


def from_inertial(frame: FramePath, r: np.ndarray, t: float) -> np.ndarray:
    """q = R r + c."""
    return np.asarray(r, dtype=float) @ rotation_matrix(frame, t).T + translation(frame, t)


def inertial_energy(params: PhysicalParams, frame: FramePath, potential: Potential, state: ClassicalState) -> float:
    """Energy of the state measured in the inertial frame.

    The canonical momentum is the rotated inertial momentum, p = M R dr/dt.
    """
    p_inertial = rotation_matrix(frame, state.t).T @ state.p
    return float(p_inertial @ p_inertial / (2.0 * params.mass) + potential.value(state.q))


def free_inertial_trajectory(params: PhysicalParams, frame: FramePath, q0: np.ndarray, p0: np.ndarray,
                             t_grid: np.ndarray) -> List[ClassicalState]:
    """Straight inertial motion expressed in the moving frame."""
    t_grid = np.asarray(t_grid, dtype=float)
    t0 = t_grid[0]
    r0 = to_inertial(frame, q0, t0)
    v = rotation_matrix(frame, t0).T @ np.asarray(p0, dtype=float) / params.mass
    states = []
    for t in t_grid:
        q = from_inertial(frame, r0 + v * (t - t0), t)
        p = params.mass * rotation_matrix(frame, t) @ v
        states.append(ClassicalState(q=q, p=p, t=float(t)))
    return states


# ------------------------------------------------------------------
# Classical equations of motion
# ------------------------------------------------------------------
def _classical_rhs(params: PhysicalParams, frame: FramePath, potential: Potential, t: float, y: np.ndarray) -> np.ndarray:
    q, p = y[:3], y[3:]
    omega = omega_tensor(frame, t)
    q_dot = p / params.mass - omega @ (q - translation(frame, t)) - field_B(frame, t)
    p_dot = omega.T @ p - potential.gradient(q)
    return np.concatenate([q_dot, p_dot])


def classical_trajectory(params: PhysicalParams, frame: FramePath, potential: Potential,
                         q0: np.ndarray, p0: np.ndarray, t_grid: np.ndarray,
                         domain_half_width: Optional[float] = None) -> List[ClassicalState]:
    """Integrate dq/dt = p/M - A - B, dp_i/dt = Omega_ji p_j - dV/dq_i with classical RK4.

    One RK4 step is taken per interval of t_grid.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or t_grid.size < 1 or np.any(np.diff(t_grid) <= 0.0):
        raise DegenerateInputError("t_grid must be a strictly increasing 1D array")

    y = np.concatenate([np.asarray(q0, dtype=float), np.asarray(p0, dtype=float)])
    states = [ClassicalState(q=y[:3].copy(), p=y[3:].copy(), t=float(t_grid[0]))]

    def f(t, y):
        return _classical_rhs(params, frame, potential, t, y)

    for t, t_next in zip(t_grid[:-1], t_grid[1:]):
        dt = t_next - t
        k1 = f(t, y)
        k2 = f(t + dt / 2, y + dt / 2 * k1)
        k3 = f(t + dt / 2, y + dt / 2 * k2)
        k4 = f(t_next, y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

        escaped = not np.all(np.isfinite(y))
        if domain_half_width is not None and not escaped:
            escaped = bool(np.any(np.abs(y[:2]) > domain_half_width))
        if escaped:
            last = states[-1]
            logger.error(f"Classical trajectory left the domain at t={t_next:.6g}")
            raise DomainEscapeError(f"trajectory escaped the potential domain after t={last.t:.6g}", last_state=last)
        states.append(ClassicalState(q=y[:3].copy(), p=y[3:].copy(), t=float(t_next)))

    return states
