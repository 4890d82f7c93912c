"""Monte-Carlo integration of the forward and backward SDEs.

    dq = (p(q, t)/M - A(q, t) - B(t)) dt + sqrt(2 nu) dW,   dt > 0
    dq = (p~(q, t)/M - A(q, t) - B(t)) dt + sqrt(2 nu) dW,  dt < 0

Noise is counter-based: the increment of trajectory i at step k is a
Box-Muller transform of the uniforms at position i of a Philox stream keyed by
(master_seed, direction, k). A trajectory's path therefore depends only on
(master_seed, i, scenario), never on execution order or chunking.

The noise is additive, so Euler-Maruyama already has strong order 1.
"""
import dataclasses
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import PreconditionError
from .frame import FramePath, gauge_velocity_plane
from .grid import Grid2D, MadelungFields, PhysicalParams, interpolate_field, mask_at
from .logger import logger
from .potential import Potential

_MASK64 = (1 << 64) - 1
_DIRECTIONS = {"forward": 0, "backward": 1}
_PURPOSE_WIENER = 0
_PURPOSE_SAMPLING = 1
CONSISTENCY_TOL = 1e-12


# ------------------------------------------------------------------
# Noise
# ------------------------------------------------------------------
@dataclass(frozen=True)
class NoiseStream:
    master_seed: int
    direction: str = "forward"

    def key(self, step: int, purpose: int = _PURPOSE_WIENER) -> np.ndarray:
        word = (_DIRECTIONS[self.direction] << 63) | (purpose << 56) | (int(step) & ((1 << 56) - 1))
        return np.array([int(self.master_seed) & _MASK64, word], dtype=np.uint64)

    def generator(self, step: int, purpose: int = _PURPOSE_WIENER) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key(step, purpose)))

    def uniforms(self, step: int, n: int) -> np.ndarray:
        """Row i holds the two uniforms of trajectory i at this step."""
        return self.generator(step).random((n, 2))


@dataclass(frozen=True)
class WienerIncrement:
    dW: np.ndarray


def sample_wiener(dt: float, stream: NoiseStream, step: int = 0, n: int = 1) -> WienerIncrement:
    """n independent 2D increments with per-component variance |dt| (Box-Muller)."""
    if dt == 0.0:
        raise PreconditionError("Wiener increments need dt != 0")
    u = stream.uniforms(step, n)
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    angle = 2.0 * np.pi * u[:, 1]
    scale = np.sqrt(abs(dt))
    return WienerIncrement(dW=scale * np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1))


# ------------------------------------------------------------------
# Ensembles
# ------------------------------------------------------------------
@dataclass(frozen=True)
class TrajectoryEnsemble:
    positions: np.ndarray
    t: float
    master_seed: int
    step: int = 0

    @property
    def n_traj(self) -> int:
        return self.positions.shape[0]

    @property
    def stream_ids(self) -> np.ndarray:
        """Counter position of each trajectory inside the per-step noise streams."""
        return np.arange(self.n_traj)


def sample_from_density(rho: np.ndarray, grid: Grid2D, n_traj: int, master_seed: int,
                        t: float = 0.0) -> TrajectoryEnsemble:
    """Draw positions from a grid density: a cell by its mass, then uniformly inside it."""
    if n_traj <= 0:
        raise PreconditionError("n_traj must be positive")
    weights = np.clip(np.asarray(rho, dtype=float), 0.0, None).ravel()
    weights = weights / weights.sum()
    rng = NoiseStream(master_seed).generator(0, _PURPOSE_SAMPLING)
    cells = rng.choice(weights.size, size=n_traj, p=weights)
    i, j = np.unravel_index(cells, (grid.n, grid.n))
    jitter = (rng.random((n_traj, 2)) - 0.5) * grid.h
    positions = np.stack([grid.axis[i], grid.axis[j]], axis=1) + jitter
    positions = np.clip(positions, -grid.half_width, grid.half_width)
    return TrajectoryEnsemble(positions=positions, t=t, master_seed=master_seed)


def reflect(positions: np.ndarray, half_width: float) -> np.ndarray:
    """Mirror positions that left [-L/2, L/2] back into the box."""
    q = np.where(positions > half_width, 2.0 * half_width - positions, positions)
    q = np.where(q < -half_width, -2.0 * half_width - q, q)
    return np.clip(q, -half_width, half_width)


def _drift(ensemble: TrajectoryEnsemble, p_field: np.ndarray, grid: Grid2D, mask: Optional[np.ndarray],
           frame: FramePath, params: PhysicalParams) -> np.ndarray:
    q = ensemble.positions
    p = interpolate_field(p_field, grid, q)
    if mask is not None:
        p[mask_at(mask, grid, q)] = 0.0
    return p / params.mass - gauge_velocity_plane(frame, q, ensemble.t)


def _advance(ensemble: TrajectoryEnsemble, drift: np.ndarray, params: PhysicalParams, grid: Grid2D,
             dt: float, direction: str) -> TrajectoryEnsemble:
    dw = sample_wiener(dt, NoiseStream(ensemble.master_seed, direction), ensemble.step, ensemble.n_traj).dW
    q = ensemble.positions + drift * dt + np.sqrt(2.0 * params.nu) * dw
    return dataclasses.replace(ensemble, positions=reflect(q, grid.half_width), t=ensemble.t + dt,
                               step=ensemble.step + 1)


def advance_forward(ensemble: TrajectoryEnsemble, p_field: np.ndarray, frame: FramePath, params: PhysicalParams,
                    dt: float, grid: Grid2D, mask: Optional[np.ndarray] = None) -> TrajectoryEnsemble:
    """Euler-Maruyama step of the forward SDE with p interpolated bilinearly from the grid."""
    if not dt > 0.0:
        raise PreconditionError("the forward SDE needs dt > 0")
    drift = _drift(ensemble, p_field, grid, mask, frame, params)
    return _advance(ensemble, drift, params, grid, dt, "forward")


def check_consistency(madelung: MadelungFields) -> float:
    """Max |p - p~ - 2 M nu grad ln rho| off the node mask; raises above tolerance."""
    params = madelung.params
    gap = madelung.p_fwd - madelung.p_bwd - 2.0 * params.mass * params.nu * madelung.grad_ln_rho
    gap = np.where(madelung.mask[None, :, :], 0.0, gap)
    scale = max(1.0, float(np.abs(madelung.p_fwd).max()))
    worst = float(np.abs(gap).max())
    if worst > CONSISTENCY_TOL * scale:
        raise PreconditionError(f"backward momentum violates the consistency condition by {worst:.3e}")
    return worst


def advance_backward(ensemble: TrajectoryEnsemble, madelung: MadelungFields, frame: FramePath, dt: float,
                     grid: Optional[Grid2D] = None) -> TrajectoryEnsemble:
    """Euler-Maruyama step of the backward SDE (dt < 0) driven by p~ of the Madelung fields."""
    if not dt < 0.0:
        raise PreconditionError("the backward SDE needs dt < 0")
    check_consistency(madelung)
    grid = grid or madelung.grid
    drift = _drift(ensemble, madelung.p_bwd, madelung.grid, madelung.mask, frame, madelung.params)
    return _advance(ensemble, drift, madelung.params, grid, dt, "backward")


# ------------------------------------------------------------------
# Stored paths
# ------------------------------------------------------------------
class EnsemblePaths:
    """Positions of every trajectory at each recorded step."""

    def __init__(self):
        self._times: List[float] = []
        self._positions: List[np.ndarray] = []

    def record(self, ensemble: TrajectoryEnsemble) -> None:
        self._times.append(ensemble.t)
        self._positions.append(ensemble.positions.copy())

    @classmethod
    def from_arrays(cls, times: Sequence[float], positions: np.ndarray) -> "EnsemblePaths":
        paths = cls()
        paths._times = [float(t) for t in times]
        paths._positions = [np.asarray(p, dtype=float) for p in positions]
        return paths

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self._times)

    @property
    def positions(self) -> np.ndarray:
        """Shape (K, N, 2)."""
        return np.stack(self._positions)

    def __len__(self) -> int:
        return len(self._times)

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self._times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise PreconditionError(f"t={t} is not a recorded path time")
        return k

    def to_frame(self) -> pd.DataFrame:
        pos = self.positions
        k, n = pos.shape[:2]
        return pd.DataFrame({
            "t": np.repeat(self.times, n),
            "traj": np.tile(np.arange(n), k),
            "x": pos[:, :, 0].ravel(),
            "y": pos[:, :, 1].ravel(),
        })


# ------------------------------------------------------------------
# Empirical estimates
# ------------------------------------------------------------------
def histogram_density(positions: np.ndarray, bins: Grid2D) -> np.ndarray:
    """Bin counts / (n_traj h^2) on the node-centered cells of bins."""
    positions = np.asarray(positions, dtype=float)
    if positions.shape[0] == 0:
        raise PreconditionError("histogram of an empty ensemble")
    counts, _, _ = np.histogram2d(positions[:, 0], positions[:, 1], bins=[bins.edges, bins.edges])
    return counts / (positions.shape[0] * bins.h ** 2)


@dataclass(frozen=True)
class MeanDerivative:
    values: np.ndarray
    counts: np.ndarray
    populated: np.ndarray


def mean_derivative(paths: EnsemblePaths, t: float, dt: float, direction: str, bins: Grid2D,
                    min_count: int = 10) -> MeanDerivative:
    """Binned conditional average of path increments.

    forward:  E[(q(t + dt) - q(t)) / dt | q(t)]
    backward: E[(q(t) - q(t - dt)) / dt | q(t)], the increment that arrives at q(t)
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', not {direction!r}")
    times = paths.times
    if len(times) < 2:
        raise PreconditionError("mean derivatives need at least two recorded times")
    path_dt = times[1] - times[0]
    lag = int(round(abs(dt) / path_dt))
    if lag < 1:
        raise PreconditionError(f"dt={dt} is shorter than the stored path step {path_dt}")
    k = paths.index_of(t)
    pos = paths.positions
    if direction == "forward":
        if k + lag >= len(times):
            raise PreconditionError(f"no stored positions at t + dt for t={t}")
        increments = (pos[k + lag] - pos[k]) / (lag * path_dt)
    else:
        if k - lag < 0:
            raise PreconditionError(f"no stored positions at t - dt for t={t}")
        increments = (pos[k] - pos[k - lag]) / (lag * path_dt)
    anchor = pos[k]

    edges = [bins.edges, bins.edges]
    counts, _, _ = np.histogram2d(anchor[:, 0], anchor[:, 1], bins=edges)
    sums = [np.histogram2d(anchor[:, 0], anchor[:, 1], bins=edges, weights=increments[:, c])[0] for c in range(2)]
    populated = counts >= min_count
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.stack([np.where(counts > 0, s / counts, np.nan) for s in sums])
    empty = int(np.sum(counts == 0))
    if empty:
        logger.debug(f"{empty} empty bins in the {direction} mean derivative at t={t:.6g}")
    return MeanDerivative(values=values, counts=counts, populated=populated)


@dataclass(frozen=True)
class ActionEstimate:
    value: float
    stat_err: float
    kinetic: float
    potential: float
    ito_correction: float


def stochastic_action_estimate(paths: EnsemblePaths, frame: FramePath, potential: Potential, params: PhysicalParams,
                               fields_per_step: Optional[Sequence[MadelungFields]] = None) -> ActionEstimate:
    """Monte-Carlo estimate of E[sum_t L(q, Dq, D~q) dt].

    The kinetic term averages (M/2)(Dq + A + B)^2 and (M/2)(D~q + A + B)^2.
    With raw increments each square carries the noise contribution 2 nu d / dt
    (d = 2); its total (M/2) 2 nu d per step is subtracted and reported as
    ito_correction. With per-step Madelung fields D and D~ are the field drifts
    and no correction applies.
    """
    times = paths.times
    if len(times) < 3:
        raise PreconditionError("the action estimate needs backward increments: at least 3 recorded times")
    pos = paths.positions
    dt = times[1] - times[0]
    n_traj = pos.shape[1]
    dims = pos.shape[2]
    if fields_per_step is not None and len(fields_per_step) != len(times):
        raise PreconditionError("fields_per_step must hold one Madelung field per recorded time")

    kinetic = np.zeros(n_traj)
    pot = np.zeros(n_traj)
    for k in range(1, len(times) - 1):
        q = pos[k]
        gauge = gauge_velocity_plane(frame, q, times[k])
        if fields_per_step is None:
            d_fwd = (pos[k + 1] - q) / dt
            d_bwd = (q - pos[k - 1]) / dt
        else:
            fields = fields_per_step[k]
            p_fwd = interpolate_field(fields.p_fwd, fields.grid, q)
            p_bwd = interpolate_field(fields.p_bwd, fields.grid, q)
            d_fwd = p_fwd / params.mass - gauge
            d_bwd = p_bwd / params.mass - gauge
        square = 0.5 * (np.sum((d_fwd + gauge) ** 2, axis=1) + np.sum((d_bwd + gauge) ** 2, axis=1))
        kinetic += 0.5 * params.mass * square * dt
        pot += potential.value(q) * dt

    n_inner = len(times) - 2
    ito = 0.5 * params.mass * 2.0 * params.nu * dims * n_inner if fields_per_step is None else 0.0
    per_path = kinetic - ito - pot
    err = float(per_path.std(ddof=1) / np.sqrt(n_traj)) if n_traj > 1 else float("nan")
    return ActionEstimate(
        value=float(per_path.mean()),
        stat_err=err,
        kinetic=float(kinetic.mean() - ito),
        potential=float(pot.mean()),
        ito_correction=ito,
    )
