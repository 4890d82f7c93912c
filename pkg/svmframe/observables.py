"""Expectation values, Ehrenfest and Euler-Lagrange residuals, Noether charges."""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import binary_dilation

from .errors import PreconditionError
from .frame import FramePath, gauge_velocity_plane, omega_tensor
from .grid import MadelungFields, WaveFunction, gradient, interpolate_field, laplacian, mask_at
from .logger import logger
from .potential import Potential

OBSERVABLE_COLUMNS = [
    "t", "norm", "mean_x", "mean_y", "mean_px", "mean_py", "L_z",
    "Q_ensemble", "Q_stat_err", "ehrenfest_res_x", "ehrenfest_res_y", "el_residual_L2",
]
BOUNDARY_MARGIN = 2
BULK_FRACTION = 1e-4
IMAG_RESIDUE_TOL = 1e-10


# ------------------------------------------------------------------
# Wave-function expectation values
# ------------------------------------------------------------------
def _expect(psi: WaveFunction, applied: np.ndarray) -> complex:
    return complex(np.sum(np.conj(psi.values) * applied) * psi.grid.h ** 2)


def expectation_position(psi: WaveFunction) -> np.ndarray:
    x, y = psi.grid.mesh
    rho = psi.density
    return np.array([psi.grid.integrate(rho * x), psi.grid.integrate(rho * y)])


def expectation_momentum(psi: WaveFunction) -> Tuple[np.ndarray, float]:
    """<-i hbar grad> and the largest imaginary residue of its components."""
    grad = gradient(psi.values, psi.grid)
    values = [_expect(psi, -1j * psi.params.hbar * g) for g in grad]
    residue = max(abs(v.imag) for v in values)
    if residue > IMAG_RESIDUE_TOL:
        logger.warning(f"<p> has imaginary residue {residue:.3e}")
    return np.array([v.real for v in values]), residue


def angular_momentum_expectation(psi: WaveFunction) -> Tuple[float, float]:
    """<L_z> with L_z = -i hbar (x d_y - y d_x), and its imaginary residue."""
    x, y = psi.grid.mesh
    gx, gy = gradient(psi.values, psi.grid)
    value = _expect(psi, -1j * psi.params.hbar * (x * gy - y * gx))
    if abs(value.imag) > IMAG_RESIDUE_TOL:
        logger.warning(f"<L_z> has imaginary residue {abs(value.imag):.3e}")
    return value.real, abs(value.imag)


def expectation_potential_gradient(psi: WaveFunction, potential: Potential) -> np.ndarray:
    x, y = psi.grid.mesh
    grad_v = potential.gradient_on_grid(x, y)
    rho = psi.density
    return np.array([psi.grid.integrate(rho * grad_v[0]), psi.grid.integrate(rho * grad_v[1])])


def snapshot_observables(psi: WaveFunction, potential: Potential, t: float) -> Dict[str, float]:
    """Per-step record used by the evolution loops."""
    mean_x = expectation_position(psi)
    mean_p, _ = expectation_momentum(psi)
    l_z, _ = angular_momentum_expectation(psi)
    mean_dv = expectation_potential_gradient(psi, potential)
    return {
        "t": float(t), "norm": psi.norm,
        "mean_x": mean_x[0], "mean_y": mean_x[1],
        "mean_px": mean_p[0], "mean_py": mean_p[1],
        "L_z": l_z,
        "mean_dVx": mean_dv[0], "mean_dVy": mean_dv[1],
    }


def madelung_angular_momentum(madelung: MadelungFields) -> float:
    """Integral of rho (x p_m,y - y p_m,x) over the unmasked nodes."""
    x, y = madelung.grid.mesh
    density = madelung.rho * (x * madelung.p_m[1] - y * madelung.p_m[0])
    return madelung.grid.integrate(np.where(madelung.mask, 0.0, density))


# ------------------------------------------------------------------
# Ehrenfest relation
# ------------------------------------------------------------------
def ehrenfest_from_series(t: np.ndarray, mean_p: np.ndarray, mean_dv: np.ndarray, frame: FramePath) -> np.ndarray:
    """Residual d<p_i>/dt - [Omega_ji <p_j> - <d_i V>] at interior samples.

    mean_p and mean_dv have shape (K, 2) on an equally spaced t; the result has
    shape (K - 2, 2) and belongs to t[1:-1].
    """
    t = np.asarray(t, dtype=float)
    mean_p = np.asarray(mean_p, dtype=float)
    mean_dv = np.asarray(mean_dv, dtype=float)
    if t.size < 3:
        raise PreconditionError("the Ehrenfest residual needs at least 3 consecutive samples")
    dpdt = (mean_p[2:] - mean_p[:-2]) / (t[2:] - t[:-2])[:, None]
    rhs = np.array([
        omega_tensor(frame, tk)[:2, :2].T @ pk - dvk
        for tk, pk, dvk in zip(t[1:-1], mean_p[1:-1], mean_dv[1:-1])
    ])
    return dpdt - rhs


def ehrenfest_residual(snapshots: Sequence[WaveFunction], times: Sequence[float], frame: FramePath,
                       potential: Potential) -> np.ndarray:
    """Ehrenfest residual at the interior times of consecutive, equally spaced snapshots."""
    if len(snapshots) < 3 or len(snapshots) != len(times):
        raise PreconditionError("the Ehrenfest residual needs at least 3 consecutive snapshots with times")
    mean_p = np.array([expectation_momentum(psi)[0] for psi in snapshots])
    mean_dv = np.array([expectation_potential_gradient(psi, potential) for psi in snapshots])
    return ehrenfest_from_series(np.asarray(times), mean_p, mean_dv, frame)


# ------------------------------------------------------------------
# Stochastic Noether charge
# ------------------------------------------------------------------
@dataclass(frozen=True)
class NoetherCharge:
    value: float
    stat_err: float
    n_used: int
    n_excluded: int


def noether_charge_ensemble(positions: np.ndarray, madelung: MadelungFields) -> NoetherCharge:
    """z-component of E[q x p_m(q)] over the ensemble, node-masked particles excluded."""
    positions = np.asarray(positions, dtype=float)
    excluded = mask_at(madelung.mask, madelung.grid, positions)
    used = positions[~excluded]
    p_m = interpolate_field(madelung.p_m, madelung.grid, used)
    samples = used[:, 0] * p_m[:, 1] - used[:, 1] * p_m[:, 0]
    n = samples.size
    if n == 0:
        return NoetherCharge(value=float("nan"), stat_err=float("nan"), n_used=0, n_excluded=int(excluded.sum()))
    err = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return NoetherCharge(value=float(samples.mean()), stat_err=err, n_used=n, n_excluded=int(excluded.sum()))


# ------------------------------------------------------------------
# Stochastic Euler-Lagrange residual
# ------------------------------------------------------------------
@dataclass(frozen=True)
class EulerLagrangeResidual:
    """Masked residual norms per component.

    l2 and linf run over the unmasked bulk nodes; weighted_rms is the
    density-weighted root mean square E[res_i(q)^2]^(1/2).
    """

    l2: np.ndarray
    linf: np.ndarray
    weighted_rms: np.ndarray
    field: np.ndarray
    mask: np.ndarray

    @property
    def l2_total(self) -> float:
        return float(np.sqrt(np.sum(self.l2 ** 2)))


def residual_mask(madelung: MadelungFields, margin: int = BOUNDARY_MARGIN,
                  bulk_fraction: float = BULK_FRACTION) -> np.ndarray:
    """Nodes excluded from residual norms.

    These are the node mask grown by the stencil reach, the tails with
    rho < bulk_fraction * max(rho) and a boundary margin. The quantum force
    divides by sqrt(rho), so in the far tails its discretization error is
    amplified without bound as rho approaches the node floor.
    """
    mask = binary_dilation(madelung.mask | (madelung.rho < bulk_fraction * madelung.rho.max()), iterations=2)
    mask[:margin, :] = True
    mask[-margin:, :] = True
    mask[:, :margin] = True
    mask[:, -margin:] = True
    return mask


def euler_lagrange_residual(series: Sequence[MadelungFields], frame: FramePath, potential: Potential,
                            dt: float, margin: int = BOUNDARY_MARGIN,
                            bulk_fraction: float = BULK_FRACTION) -> EulerLagrangeResidual:
    """Residual of the momentum-field equation at the middle of three consecutive fields.

    [d_t + (p_m/M - A - B) . grad] p_m,i - 2 M nu^2 d_i(rho^-1/2 Lap sqrt(rho))
        - [sum_j p_m,j d_i A_j - d_i V]
    """
    if len(series) < 3:
        raise PreconditionError("the Euler-Lagrange residual needs 3 consecutive Madelung fields")
    before, mid, after = series[-3], series[-2], series[-1]
    grid, params = mid.grid, mid.params
    mass, nu = params.mass, params.nu
    x, y = grid.mesh

    dp_dt = (after.p_m - before.p_m) / (2.0 * dt)
    velocity = mid.p_m / mass - np.moveaxis(gauge_velocity_plane(frame, np.stack([x, y], axis=-1), mid.t), -1, 0)
    grads = [gradient(mid.p_m[i], grid) for i in range(2)]
    advection = np.stack([velocity[0] * grads[i][0] + velocity[1] * grads[i][1] for i in range(2)])

    sqrt_rho = np.sqrt(mid.rho)
    safe = np.where(mid.mask, 1.0, sqrt_rho)
    bohm = np.where(mid.mask, 0.0, laplacian(sqrt_rho, grid) / safe)
    quantum = 2.0 * mass * nu ** 2 * gradient(bohm, grid)

    # d_i A_j = Omega_ji, so sum_j p_m,j d_i A_j = (Omega^T p_m)_i
    omega = omega_tensor(frame, mid.t)[:2, :2]
    coriolis = np.einsum("ji,j...->i...", omega, mid.p_m)
    grad_v = potential.gradient_on_grid(x, y)

    field = dp_dt + advection - quantum - (coriolis - grad_v)
    mask = residual_mask(mid, margin, bulk_fraction)
    masked = np.where(mask[None, :, :], 0.0, field)
    l2 = np.sqrt(np.sum(masked ** 2, axis=(1, 2)) * grid.h ** 2)
    linf = np.abs(masked).max(axis=(1, 2))
    weight = np.where(mask, 0.0, mid.rho)
    weighted_rms = np.sqrt(np.sum(weight * masked ** 2, axis=(1, 2)) / weight.sum())
    return EulerLagrangeResidual(l2=l2, linf=linf, weighted_rms=weighted_rms, field=masked, mask=mask)


# ------------------------------------------------------------------
# Series
# ------------------------------------------------------------------
class ObservableSeries:
    """Observables time series with the fixed CSV column order; absent values stay NaN."""

    def __init__(self):
        self._rows: List[Dict[str, float]] = []

    def append(self, **values: float) -> None:
        unknown = set(values) - set(OBSERVABLE_COLUMNS)
        if unknown:
            raise KeyError(f"unknown observable columns: {sorted(unknown)}")
        self._rows.append(values)

    def __len__(self) -> int:
        return len(self._rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records(self._rows, columns=OBSERVABLE_COLUMNS)

    @classmethod
    def from_evolution(cls, series: pd.DataFrame, frame: FramePath,
                       extra: Optional[Dict[int, Dict[str, float]]] = None) -> "ObservableSeries":
        """Build from an evolution record, adding centered Ehrenfest residuals at interior steps.

        extra maps a row index to further columns, e.g. Q_ensemble or el_residual_L2.
        """
        out = cls()
        res = None
        if len(series) >= 3:
            res = ehrenfest_from_series(
                series["t"].to_numpy(),
                series[["mean_px", "mean_py"]].to_numpy(),
                series[["mean_dVx", "mean_dVy"]].to_numpy(),
                frame,
            )
        for k, row in enumerate(series.itertuples(index=False)):
            values = {c: getattr(row, c) for c in ("t", "norm", "mean_x", "mean_y", "mean_px", "mean_py", "L_z")}
            if res is not None and 0 < k < len(series) - 1:
                values["ehrenfest_res_x"], values["ehrenfest_res_y"] = res[k - 1]
            if extra and k in extra:
                values.update(extra[k])
            out.append(**values)
        return out
