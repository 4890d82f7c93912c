from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .frame import FrameKind, FramePath
from .grid import Boundary, Grid2D, PhysicalParams
from .potential import Potential, PotentialKind

MODES = ("schrodinger", "fokker_planck", "ensemble", "classical", "crosscheck")
QUANTUM_MODES = ("schrodinger", "fokker_planck", "ensemble", "crosscheck")
MIN_PACKET_WIDTHS = 12.0

Vector3 = Tuple[float, float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ParamsConfig(_Section):
    mass: float = Field(default=1.0, gt=0.0, description="Particle mass M")
    hbar: float = Field(default=1.0, gt=0.0, description="Planck constant")
    nu: Optional[float] = Field(default=None, ge=0.0, description="Diffusion coefficient; derived as hbar/(2M) when omitted")

    @model_validator(mode="after")
    def _fill_nu(self) -> "ParamsConfig":
        if self.nu is None:
            self.nu = self.hbar / (2.0 * self.mass)
        return self

    def to_params(self) -> PhysicalParams:
        return PhysicalParams(mass=self.mass, hbar=self.hbar, nu=self.nu)


class FrameConfig(_Section):
    kind: FrameKind = Field(default=FrameKind.Z_ROTATION)
    omega: Optional[float] = Field(default=None, description="Constant rotation rate; shorthand for phi = [0, omega]")
    phi: Optional[List[float]] = Field(default=None, description="phi(t) polynomial coefficients, ascending")
    c: List[Vector3] = Field(default_factory=lambda: [(0.0, 0.0, 0.0)], description="c(t) polynomial coefficients")
    table_times: Optional[List[float]] = None
    table_phi: Optional[List[float]] = None
    table_c: Optional[List[Vector3]] = None

    @model_validator(mode="after")
    def _one_rotation_source(self) -> "FrameConfig":
        if self.omega is not None and self.phi is not None:
            raise ValueError("frame: give either omega or phi, not both")
        return self

    def to_frame(self) -> FramePath:
        phi = self.phi if self.phi is not None else [0.0, self.omega or 0.0]
        return FramePath(
            kind=self.kind,
            phi=tuple(phi),
            c=tuple(tuple(row) for row in self.c),
            table_times=tuple(self.table_times) if self.table_times is not None else None,
            table_phi=tuple(self.table_phi) if self.table_phi is not None else None,
            table_c=tuple(tuple(row) for row in self.table_c) if self.table_c is not None else None,
        )


class PotentialConfig(_Section):
    kind: PotentialKind = Field(default=PotentialKind.FREE)
    strength: float = Field(default=0.0)
    width: float = Field(default=1.0, gt=0.0)

    def to_potential(self) -> Potential:
        return Potential(kind=self.kind, strength=self.strength, width=self.width)


class InitialConfig(_Section):
    center: Tuple[float, float] = Field(default=(0.0, 0.0))
    sigma0: float = Field(default=0.5, gt=0.0, description="Density standard deviation per axis")
    k: Tuple[float, float] = Field(default=(0.0, 0.0), description="Momentum kick (wave vector)")
    vortex_charge: int = Field(default=0)
    ground_state: bool = Field(default=False, description="Start from the discrete ground state of H0")


class GridConfig(_Section):
    n: int = Field(default=256, ge=16)
    L: float = Field(default=16.0, gt=0.0)
    boundary: Boundary = Field(default=Boundary.DIRICHLET_ZERO)

    def to_grid(self) -> Grid2D:
        return Grid2D.from_length(self.L, self.n, self.boundary)


class TolerancesConfig(_Section):
    norm: float = Field(default=1e-8, gt=0.0)
    tv: float = Field(default=0.05, gt=0.0)
    l1: float = Field(default=1e-2, gt=0.0)
    ehrenfest: float = Field(default=1e-3, gt=0.0)
    lz_drift: float = Field(default=1e-3, gt=0.0)
    noether_sigma: float = Field(default=3.0, gt=0.0)
    el_residual: Optional[float] = Field(default=None, gt=0.0, description="Omitted: the residual is reported only")


class RunConfig(_Section):
    mode: Optional[Literal["schrodinger", "fokker_planck", "ensemble", "classical", "crosscheck"]] = None
    dt: float = Field(default=1e-3, gt=0.0)
    t_end: float = Field(default=1.0, gt=0.0)
    snapshot_times: List[float] = Field(default_factory=list)
    n_traj: int = Field(default=200_000, ge=1)
    master_seed: int = Field(default=0, ge=0, lt=2 ** 64)
    solver_tol: float = Field(default=1e-10, gt=0.0)
    max_iter: int = Field(default=500, ge=1)
    drift_source: Literal["schrodinger", "static"] = Field(default="schrodinger")
    bins: int = Field(default=64, ge=16, description="Histogram bins per axis")
    diagnostic_every: int = Field(default=10, ge=1, description="Steps between Noether and Euler-Lagrange evaluations")
    tolerances: TolerancesConfig = Field(default_factory=TolerancesConfig)

    @model_validator(mode="after")
    def _snapshots_in_range(self) -> "RunConfig":
        for ts in self.snapshot_times:
            if ts < 0.0 or ts > self.t_end:
                raise ValueError(f"snapshot time {ts} outside [0, t_end={self.t_end}]")
        return self


class OutputConfig(_Section):
    directory: str = Field(default="output")
    snapshot_kinds: List[Literal["rho", "psi_re", "psi_im", "pm_x", "pm_y"]] = Field(default_factory=lambda: ["rho"])
    write_paths: bool = Field(default=False)
    path_traj: int = Field(default=100, ge=1, description="Trajectories written to the path dump")
    path_stride: int = Field(default=1, ge=1, description="Steps between path dump rows")


class ScenarioConfig(_Section):
    params: ParamsConfig = Field(default_factory=ParamsConfig)
    frame: FrameConfig = Field(default_factory=FrameConfig)
    potential: PotentialConfig = Field(default_factory=PotentialConfig)
    initial: InitialConfig = Field(default_factory=InitialConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    run: RunConfig = Field(default_factory=RunConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def _check_invariants(self) -> "ScenarioConfig":
        if not self.initial.ground_state and self.grid.L < MIN_PACKET_WIDTHS * self.initial.sigma0:
            raise ValueError(
                f"grid.L={self.grid.L} must be at least {MIN_PACKET_WIDTHS:g} sigma0 "
                f"({MIN_PACKET_WIDTHS * self.initial.sigma0:g})"
            )
        if self.run.mode is not None:
            quantum_nu_violation(self, self.run.mode, raise_error=True)
        try:
            self.frame.to_frame()
        except ValueError as e:
            raise ValueError(f"frame: {e}") from e
        return self


def quantum_nu_violation(config: ScenarioConfig, mode: str, raise_error: bool = False) -> Optional[str]:
    """Message when a quantum mode runs with nu != hbar/(2M), else None."""
    if mode not in QUANTUM_MODES:
        return None
    params = config.params.to_params()
    if params.is_quantum():
        return None
    message = (f"params.nu={params.nu!r} must equal hbar/(2M)={params.quantum_nu!r} in {mode} mode")
    if raise_error:
        raise ValueError(message)
    return message
