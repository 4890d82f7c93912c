"""Square 2D grids, finite-difference calculus and the Madelung decomposition.

Fields are dense arrays indexed ``f[i, j]`` with ``i`` along x and ``j`` along y
(``np.meshgrid(..., indexing="ij")``). Vector fields carry the component on a
leading axis of length 2.
"""
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import IO, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigurationError, ShapeError, ZeroNormError

RHO_FLOOR_FACTOR = 1e-12
SNAPSHOT_KINDS = ("rho", "psi_re", "psi_im", "pm_x", "pm_y")


class Boundary(str, Enum):
    DIRICHLET_ZERO = "dirichlet_zero"
    NO_FLUX = "no_flux"


class Grid2D(BaseModel):
    """n x n nodes on [-L/2, L/2]^2, centered on the rotation axis."""

    model_config = ConfigDict(frozen=True)

    half_width: float = Field(gt=0.0, description="L/2")
    n: int = Field(ge=16, description="Points per axis")
    boundary: Boundary = Field(default=Boundary.DIRICHLET_ZERO)

    @classmethod
    def from_length(cls, length: float, n: int, boundary: Boundary = Boundary.DIRICHLET_ZERO) -> "Grid2D":
        return cls(half_width=length / 2.0, n=n, boundary=boundary)

    @property
    def length(self) -> float:
        return 2.0 * self.half_width

    @property
    def h(self) -> float:
        return self.length / (self.n - 1)

    @property
    def axis(self) -> np.ndarray:
        return _axis(self.half_width, self.n)

    @property
    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        return _mesh(self.half_width, self.n)

    @property
    def edges(self) -> np.ndarray:
        """Cell edges of the node-centered cells, used as histogram bins."""
        return np.linspace(-self.half_width - self.h / 2, self.half_width + self.h / 2, self.n + 1)

    def integrate(self, f: np.ndarray) -> float:
        return float(np.sum(f) * self.h ** 2)


@lru_cache(maxsize=16)
def _axis(half_width: float, n: int) -> np.ndarray:
    axis = np.linspace(-half_width, half_width, n)
    axis.flags.writeable = False
    return axis


@lru_cache(maxsize=16)
def _mesh(half_width: float, n: int) -> Tuple[np.ndarray, np.ndarray]:
    axis = _axis(half_width, n)
    x, y = np.meshgrid(axis, axis, indexing="ij")
    x.flags.writeable = False
    y.flags.writeable = False
    return x, y


class PhysicalParams(BaseModel):
    """Mass, Planck constant and diffusion coefficient.

    nu defaults to hbar / (2M) when omitted.
    """

    model_config = ConfigDict(frozen=True)

    mass: float = Field(default=1.0, gt=0.0)
    hbar: float = Field(default=1.0, gt=0.0)
    nu: float = Field(default=None, ge=0.0)

    @model_validator(mode="before")
    @classmethod
    def _derive_nu(cls, data):
        if isinstance(data, dict) and data.get("nu") is None:
            data = dict(data)
            data["nu"] = data.get("hbar", 1.0) / (2.0 * data.get("mass", 1.0))
        return data

    @property
    def quantum_nu(self) -> float:
        return self.hbar / (2.0 * self.mass)

    def is_quantum(self, rtol: float = 1e-12) -> bool:
        return abs(self.nu - self.quantum_nu) <= rtol * self.quantum_nu

    def require_quantum(self) -> None:
        if not self.is_quantum():
            raise ConfigurationError(
                f"nu = hbar/(2M) is required in quantum mode (nu={self.nu!r}, hbar/(2M)={self.quantum_nu!r})"
            )


# ------------------------------------------------------------------
# Finite differences
# ------------------------------------------------------------------
def _padded(f: np.ndarray, grid: Grid2D) -> np.ndarray:
    if f.shape != (grid.n, grid.n):
        raise ShapeError(f"field shape {f.shape} does not match grid ({grid.n}, {grid.n})")
    # Ghost reflection mirrors about the boundary node: f[-1] = f[1].
    if grid.boundary == Boundary.NO_FLUX:
        return np.pad(f, 1, mode="reflect")
    return np.pad(f, 1, mode="constant")


def gradient(f: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Centered 2nd-order gradient, shape (2, n, n)."""
    fp = _padded(np.asarray(f), grid)
    inv = 1.0 / (2.0 * grid.h)
    gx = (fp[2:, 1:-1] - fp[:-2, 1:-1]) * inv
    gy = (fp[1:-1, 2:] - fp[1:-1, :-2]) * inv
    return np.stack([gx, gy])


def laplacian(f: np.ndarray, grid: Grid2D) -> np.ndarray:
    """5-point Laplacian."""
    f = np.asarray(f)
    fp = _padded(f, grid)
    return (fp[2:, 1:-1] + fp[:-2, 1:-1] + fp[1:-1, 2:] + fp[1:-1, :-2] - 4.0 * f) / grid.h ** 2


def divergence(v: np.ndarray, grid: Grid2D) -> np.ndarray:
    v = np.asarray(v)
    return gradient(v[0], grid)[0] + gradient(v[1], grid)[1]


def curl(v: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Scalar curl dv_y/dx - dv_x/dy."""
    v = np.asarray(v)
    return gradient(v[1], grid)[0] - gradient(v[0], grid)[1]


# ------------------------------------------------------------------
# Wave functions
# ------------------------------------------------------------------
@dataclass(frozen=True)
class WaveFunction:
    values: np.ndarray
    grid: Grid2D
    params: PhysicalParams

    def __post_init__(self):
        if self.values.shape != (self.grid.n, self.grid.n):
            raise ShapeError(f"wave function shape {self.values.shape} does not match grid n={self.grid.n}")

    @property
    def density(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    @property
    def norm(self) -> float:
        """sum |psi|^2 h^2."""
        return self.grid.integrate(self.density)

    def replace(self, values: np.ndarray) -> "WaveFunction":
        return WaveFunction(values=values, grid=self.grid, params=self.params)


def normalize(psi: WaveFunction) -> WaveFunction:
    norm = psi.norm
    if not norm > 0.0:
        raise ZeroNormError("cannot normalize an identically zero wave function")
    return psi.replace(psi.values / np.sqrt(norm))


def _zero_boundary(values: np.ndarray) -> np.ndarray:
    values[0, :] = 0.0
    values[-1, :] = 0.0
    values[:, 0] = 0.0
    values[:, -1] = 0.0
    return values


def gaussian_packet(grid: Grid2D, params: PhysicalParams, center: Sequence[float] = (0.0, 0.0),
                    sigma0: float = 0.5, k: Sequence[float] = (0.0, 0.0), t: float = 0.0,
                    vortex_charge: int = 0) -> WaveFunction:
    """Normalized Gaussian packet whose density has standard deviation sigma0 per axis.

    For t > 0 (and no vortex) this is the analytic free evolution of the t = 0
    packet in an inertial frame. A vortex of charge m multiplies the packet by
    ((x - x0) + i (y - y0))^m.
    """
    x, y = grid.mesh
    s = 1.0 + 1j * params.hbar * t / (2.0 * params.mass * sigma0 ** 2)
    values = np.ones_like(x, dtype=complex)
    for coord, c0, kk in ((x, center[0], k[0]), (y, center[1], k[1])):
        shift = params.hbar * kk * t / params.mass
        values = values * np.exp(
            -(coord - c0 - shift) ** 2 / (4.0 * sigma0 ** 2 * s)
            + 1j * kk * (coord - c0)
            - 1j * params.hbar * kk ** 2 * t / (2.0 * params.mass)
        )
    if vortex_charge:
        z = (x - center[0]) + 1j * (y - center[1])
        values = values * (z if vortex_charge > 0 else np.conj(z)) ** abs(vortex_charge)
    if grid.boundary == Boundary.DIRICHLET_ZERO:
        values = _zero_boundary(values)
    return normalize(WaveFunction(values=values, grid=grid, params=params))


# ------------------------------------------------------------------
# Madelung decomposition
# ------------------------------------------------------------------
@dataclass(frozen=True)
class MadelungFields:
    """rho = |psi|^2 with mean, forward and backward momentum fields.

    p_fwd - p_bwd = 2 M nu grad ln rho and (p_fwd + p_bwd) / 2 = p_m off the
    node mask; every momentum field is zero on it.
    """

    rho: np.ndarray
    p_m: np.ndarray
    p_fwd: np.ndarray
    p_bwd: np.ndarray
    grad_ln_rho: np.ndarray
    mask: np.ndarray
    rho_floor: float
    grid: Grid2D
    params: PhysicalParams
    t: float = 0.0

    @property
    def osmotic(self) -> np.ndarray:
        """(p_fwd - p_bwd) / 2 = M nu grad ln rho."""
        return self.params.mass * self.params.nu * self.grad_ln_rho


def madelung_decompose(psi: WaveFunction, rho_floor: Optional[float] = None, t: float = 0.0) -> MadelungFields:
    """Split psi into rho and the SVM momentum fields.

    p_m comes from Im(psi* grad psi) / rho, so no phase unwrapping is needed.
    """
    rho = psi.density
    if rho_floor is None:
        rho_floor = RHO_FLOOR_FACTOR * float(rho.max())
    mask = rho < rho_floor
    safe_rho = np.where(mask, 1.0, rho)

    flux = np.conj(psi.values)[None, :, :] * gradient(psi.values, psi.grid)
    p_m = np.where(mask, 0.0, psi.params.hbar * flux.imag / safe_rho)
    grad_ln_rho = np.where(mask, 0.0, 2.0 * flux.real / safe_rho)

    osmotic = psi.params.mass * psi.params.nu * grad_ln_rho
    return MadelungFields(
        rho=rho,
        p_m=p_m,
        p_fwd=p_m + osmotic,
        p_bwd=p_m - osmotic,
        grad_ln_rho=grad_ln_rho,
        mask=mask,
        rho_floor=rho_floor,
        grid=psi.grid,
        params=psi.params,
        t=t,
    )


# ------------------------------------------------------------------
# Sampling fields at scattered points
# ------------------------------------------------------------------
def interpolate_field(values: np.ndarray, grid: Grid2D, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at points of shape (N, 2).

    Scalar fields give shape (N,); vector fields (2, n, n) give (N, 2).
    """
    values = np.asarray(values)
    if values.ndim == 3:
        values = np.moveaxis(values, 0, -1)
    interp = RegularGridInterpolator((grid.axis, grid.axis), values, method="linear",
                                     bounds_error=False, fill_value=0.0)
    return interp(np.asarray(points, dtype=float))


def mask_at(mask: np.ndarray, grid: Grid2D, points: np.ndarray) -> np.ndarray:
    """Node-mask value of the nearest node for each point."""
    interp = RegularGridInterpolator((grid.axis, grid.axis), np.asarray(mask, dtype=float), method="nearest",
                                     bounds_error=False, fill_value=1.0)
    return interp(np.asarray(points, dtype=float)) > 0.5


# ------------------------------------------------------------------
# Densities
# ------------------------------------------------------------------
def _overlap(fine: np.ndarray, coarse: np.ndarray) -> np.ndarray:
    """Overlap lengths of the intervals of two edge arrays, shape (len(fine) - 1, len(coarse) - 1)."""
    lo = np.maximum(fine[:-1, None], coarse[None, :-1])
    hi = np.minimum(fine[1:, None], coarse[None, 1:])
    return np.clip(hi - lo, 0.0, None)


def coarse_grain(rho: np.ndarray, grid: Grid2D, bins: Grid2D) -> np.ndarray:
    """Mass-preserving re-binning of a density onto the cells of another grid.

    Each node stands for its cell [x - h/2, x + h/2]^2 of mass rho h^2, which is
    split over the bins in proportion to the overlap area.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (grid.n, grid.n):
        raise ShapeError(f"density shape {rho.shape} does not match grid ({grid.n}, {grid.n})")
    overlap = _overlap(grid.edges, bins.edges)
    mass = overlap.T @ rho @ overlap
    return mass / bins.h ** 2


def l1_distance(rho_a: np.ndarray, rho_b: np.ndarray, grid: Grid2D, mask: Optional[np.ndarray] = None) -> float:
    diff = np.abs(np.asarray(rho_a) - np.asarray(rho_b))
    if mask is not None:
        diff = np.where(mask, 0.0, diff)
    return grid.integrate(diff)


def tv_distance(rho_a: np.ndarray, rho_b: np.ndarray, grid: Grid2D) -> float:
    """Half the L1 distance between two normalized densities."""
    return 0.5 * l1_distance(rho_a, rho_b, grid)


# ------------------------------------------------------------------
# Snapshot files
# ------------------------------------------------------------------
def write_snapshot(target: Union[str, IO[str]], values: np.ndarray, grid: Grid2D, t: float, kind: str,
                   preamble: Sequence[str] = ()) -> None:
    """Write ``# grid n=.. L=.. t=.. kind=..`` followed by n rows of n values."""
    if kind not in SNAPSHOT_KINDS:
        raise ValueError(f"unknown snapshot kind {kind!r}")
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n, grid.n):
        raise ShapeError(f"snapshot shape {values.shape} does not match grid n={grid.n}")
    lines = list(preamble) + [f"# grid n={grid.n} L={grid.length!r} t={float(t)!r} kind={kind}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in values]
    text = "\n".join(lines) + "\n"
    if isinstance(target, str):
        with open(target, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        target.write(text)


def read_snapshot(path: str) -> Tuple[Dict[str, str], np.ndarray]:
    """Return the parsed ``# grid`` header and the field."""
    header: Dict[str, str] = {}
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("# grid"):
                header = dict(item.split("=", 1) for item in line[len("# grid"):].split())
            elif not line.startswith("#"):
                rows.append([float(v) for v in line.split()])
    return header, np.array(rows)
