"""Crank-Nicolson evolution of the rotating-frame Schrodinger equation.

H = (1/2M)(-i hbar grad - M a)^2 - (M/2) a^2 + V with a = A + B. The a^2 terms
cancel, leaving

    H = -hbar^2 Lap / 2M + (i hbar / 2) [a . grad + grad . (a .)] + V

on the interior nodes of a Dirichlet grid. The symmetrized cross term is a real
antisymmetric matrix times i, so H is Hermitian and the scheme is unitary.
"""
import dataclasses
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from .config import settings
from .errors import ConfigurationError, ConvergenceError, PreconditionError
from .frame import FramePath, field_B, omega_tensor, translation
from .grid import Boundary, Grid2D, PhysicalParams, WaveFunction, normalize
from .logger import logger
from .observables import snapshot_observables
from .potential import Potential
from .utils import snapshot_steps, step_count

DEFAULT_SOLVER_TOL = 1e-10
DEFAULT_MAX_ITER = 500
NORM_DRIFT_TOL = 1e-10
LEAKAGE_TOL = 1e-8


# ------------------------------------------------------------------
# Sparse operators on the interior nodes
# ------------------------------------------------------------------
@dataclass(frozen=True)
class GridOperators:
    """Interior-node operators; flat index k = i * m + j with m = n - 2."""

    dx: sp.csr_matrix
    dy: sp.csr_matrix
    lap: sp.csr_matrix
    x: np.ndarray
    y: np.ndarray
    sym_x_dx: sp.csr_matrix
    sym_y_dx: sp.csr_matrix
    sym_x_dy: sp.csr_matrix
    sym_y_dy: sp.csr_matrix


def _sym(f: np.ndarray, d: sp.csr_matrix) -> sp.csr_matrix:
    """(F D + D F) / 2 for the diagonal matrix F = diag(f)."""
    fd = sp.diags(f)
    return ((fd @ d + d @ fd) * 0.5).tocsr()


@lru_cache(maxsize=8)
def grid_operators(grid: Grid2D) -> GridOperators:
    if grid.boundary != Boundary.DIRICHLET_ZERO:
        raise ConfigurationError("the Schrodinger solver requires a dirichlet_zero grid")
    m = grid.n - 2
    h = grid.h
    eye = sp.identity(m, format="csr")
    d1 = sp.diags([-1.0, 1.0], [-1, 1], shape=(m, m)) / (2.0 * h)
    d2 = sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(m, m)) / h ** 2
    dx = sp.kron(d1, eye, format="csr")
    dy = sp.kron(eye, d1, format="csr")
    lap = (sp.kron(d2, eye) + sp.kron(eye, d2)).tocsr()
    x, y = grid.mesh
    xi = x[1:-1, 1:-1].ravel()
    yi = y[1:-1, 1:-1].ravel()
    return GridOperators(
        dx=dx, dy=dy, lap=lap, x=xi, y=yi,
        sym_x_dx=_sym(xi, dx), sym_y_dx=_sym(yi, dx),
        sym_x_dy=_sym(xi, dy), sym_y_dy=_sym(yi, dy),
    )


@lru_cache(maxsize=8)
def _potential_diag(grid: Grid2D, potential: Potential) -> np.ndarray:
    x, y = grid.mesh
    return potential.on_grid(x[1:-1, 1:-1], y[1:-1, 1:-1]).ravel()


def cross_term(grid: Grid2D, frame: FramePath, t: float) -> sp.csr_matrix:
    """K = [diag(a) D + D diag(a)] / 2 summed over x and y, a real antisymmetric matrix."""
    ops = grid_operators(grid)
    w = omega_tensor(frame, t)[:2, :2]
    offset = field_B(frame, t)[:2] - w @ translation(frame, t)[:2]
    return (w[0, 0] * ops.sym_x_dx + w[0, 1] * ops.sym_y_dx + offset[0] * ops.dx
            + w[1, 0] * ops.sym_x_dy + w[1, 1] * ops.sym_y_dy + offset[1] * ops.dy).tocsr()


def hamiltonian_matrix(grid: Grid2D, params: PhysicalParams, frame: FramePath, potential: Potential,
                       t: float) -> sp.csr_matrix:
    params.require_quantum()
    ops = grid_operators(grid)
    kinetic = ops.lap * (-params.hbar ** 2 / (2.0 * params.mass))
    h = kinetic + 1j * params.hbar * cross_term(grid, frame, t) + sp.diags(_potential_diag(grid, potential))
    return h.tocsr()


def angular_momentum_matrix(grid: Grid2D, params: PhysicalParams) -> sp.csr_matrix:
    """L_z = -i hbar (x d_y - y d_x)."""
    ops = grid_operators(grid)
    return (-1j * params.hbar * (sp.diags(ops.x) @ ops.dy - sp.diags(ops.y) @ ops.dx)).tocsr()


def _interior(values: np.ndarray) -> np.ndarray:
    return values[1:-1, 1:-1].ravel()


def _embed(vec: np.ndarray, grid: Grid2D) -> np.ndarray:
    out = np.zeros((grid.n, grid.n), dtype=complex)
    out[1:-1, 1:-1] = vec.reshape(grid.n - 2, grid.n - 2)
    return out


def hamiltonian_apply(psi: WaveFunction, frame: FramePath, potential: Potential, t: float) -> np.ndarray:
    """H psi on the grid; boundary nodes are returned as zero."""
    h = hamiltonian_matrix(psi.grid, psi.params, frame, potential, t)
    return _embed(h @ _interior(psi.values), psi.grid)


def ground_state(grid: Grid2D, params: PhysicalParams, potential: Potential) -> Tuple[WaveFunction, float]:
    """Lowest eigenpair of the inertial-frame H by shift-invert Lanczos."""
    h0 = hamiltonian_matrix(grid, params, FramePath.inertial(), potential, 0.0).real.tocsc()
    sigma = float(_potential_diag(grid, potential).min()) - 1.0
    energies, vectors = spla.eigsh(h0, k=1, sigma=sigma, which="LM", tol=1e-14)
    vec = vectors[:, 0]
    vec = vec * np.sign(vec.sum())
    psi = normalize(WaveFunction(values=_embed(vec.astype(complex), grid), grid=grid, params=params))
    logger.info(f"Ground state found: E0={energies[0]:.12g}")
    return psi, float(energies[0])


def free_packet_width(params: PhysicalParams, sigma0: float, t: float) -> float:
    """Standard deviation of a free Gaussian packet's density at time t."""
    return sigma0 * np.sqrt(1.0 + (params.hbar * t / (2.0 * params.mass * sigma0 ** 2)) ** 2)


def cn_conditioning(grid: Grid2D, params: PhysicalParams, dt: float) -> float:
    """dt hbar / (M h^2); the iterative solve is well conditioned below ~1."""
    return dt * params.hbar / (params.mass * grid.h ** 2)


# ------------------------------------------------------------------
# Crank-Nicolson
# ------------------------------------------------------------------
@dataclass(frozen=True)
class SchrodingerRun:
    psi: WaveFunction
    frame: FramePath
    potential: Potential
    dt: float
    t: float = 0.0
    solver_tol: float = DEFAULT_SOLVER_TOL
    max_iter: int = DEFAULT_MAX_ITER
    step_index: int = 0
    norm_drift: float = 0.0
    boundary_leakage: float = 0.0


@dataclass(frozen=True)
class CrankNicolsonSystem:
    lhs: sp.csr_matrix
    rhs: sp.csr_matrix
    preconditioner: spla.LinearOperator


@lru_cache(maxsize=4)
def _cn_system(grid: Grid2D, params: PhysicalParams, frame: FramePath, potential: Potential,
               t_mid: float, dt: float) -> CrankNicolsonSystem:
    h = hamiltonian_matrix(grid, params, frame, potential, t_mid)
    eye = sp.identity(h.shape[0], format="csr", dtype=complex)
    alpha = 1j * dt / (2.0 * params.hbar)
    lhs = (eye + alpha * h).tocsr()
    rhs = (eye - alpha * h).tocsr()
    inv_diag = 1.0 / lhs.diagonal()
    precond = spla.LinearOperator(lhs.shape, matvec=lambda v: inv_diag * v, dtype=complex)
    return CrankNicolsonSystem(lhs=lhs, rhs=rhs, preconditioner=precond)


def _bicgstab(system: CrankNicolsonSystem, b: np.ndarray, x0: np.ndarray, tol: float, max_iter: int,
              callback: Optional[Callable[[np.ndarray], None]] = None) -> np.ndarray:
    x, info = spla.bicgstab(system.lhs, b, x0=x0, rtol=tol, atol=0.0, maxiter=max_iter, M=system.preconditioner,
                            callback=callback)
    b_norm = np.linalg.norm(b)
    residual = float(np.linalg.norm(b - system.lhs @ x) / b_norm) if b_norm > 0 else 0.0
    if info != 0 or residual > tol:
        raise ConvergenceError(f"Crank-Nicolson solve did not converge (info={info})", residual=residual, iterate=x)
    return x


def _solve(system: CrankNicolsonSystem, b: np.ndarray, x0: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """bicgstab with warm-started restarts on breakdown or stagnation.

    max_iter bounds the iterations of all attempts together; restarts stop
    once it is spent.
    """
    budget = {"x0": x0, "left": max_iter}

    def spend(_):
        budget["left"] -= 1

    for attempt in Retrying(
        stop=stop_after_attempt(settings.solver_max_restarts) | (lambda state: budget["left"] <= 0),
        retry=retry_if_exception_type(ConvergenceError),
        before_sleep=lambda state: logger.warning(
            f"Restarting Crank-Nicolson solve from last iterate ({budget['left']} iterations left): "
            f"{state.outcome.exception()}"
        ),
        reraise=True,
    ):
        with attempt:
            try:
                return _bicgstab(system, b, budget["x0"], tol, budget["left"], callback=spend)
            except ConvergenceError as exc:
                budget["x0"] = exc.iterate
                raise


def step(run: SchrodingerRun) -> SchrodingerRun:
    """One Crank-Nicolson step with H frozen at t + dt/2."""
    if not run.dt > 0.0 or not run.solver_tol > 0.0:
        raise PreconditionError("dt and solver_tol must be positive")
    psi = run.psi
    t_mid = run.t + run.dt / 2.0
    key_t = 0.0 if run.frame.is_static else t_mid
    system = _cn_system(psi.grid, psi.params, run.frame, run.potential, key_t, run.dt)

    current = _interior(psi.values)
    new = _solve(system, system.rhs @ current, current, run.solver_tol, run.max_iter)
    new_psi = psi.replace(_embed(new, psi.grid))

    drift = abs(new_psi.norm - psi.norm)
    if drift > NORM_DRIFT_TOL:
        logger.warning(f"Norm drift {drift:.3e} at t={run.t + run.dt:.6g} exceeds {NORM_DRIFT_TOL:g}")

    ring = np.concatenate([new_psi.values[1, :], new_psi.values[-2, :], new_psi.values[:, 1], new_psi.values[:, -2]])
    leakage = float(np.abs(ring).max())
    if leakage > LEAKAGE_TOL and run.boundary_leakage <= LEAKAGE_TOL:
        logger.warning(f"Boundary leakage: |psi| = {leakage:.3e} next to the Dirichlet boundary at t={run.t + run.dt:.6g}")

    return dataclasses.replace(
        run,
        psi=new_psi,
        t=run.t + run.dt,
        step_index=run.step_index + 1,
        norm_drift=max(run.norm_drift, drift),
        boundary_leakage=max(run.boundary_leakage, leakage),
    )


@dataclass
class EvolutionResult:
    run: SchrodingerRun
    snapshots: Dict[float, WaveFunction]
    series: pd.DataFrame


def evolve(run: SchrodingerRun, t_end: float, snapshot_times: Sequence[float] = (),
           on_snapshot: Optional[Callable[[float, WaveFunction], None]] = None,
           on_step: Optional[Callable[[SchrodingerRun], None]] = None) -> EvolutionResult:
    """Step to t_end, collecting snapshots and per-step observables.

    Callbacks run as results become available, so output written by them
    survives a failing step.
    """
    if t_end < run.t:
        raise PreconditionError(f"t_end={t_end} precedes the current time {run.t}")
    n_steps = step_count(run.t, t_end, run.dt)
    wanted = snapshot_steps(run.t, run.dt, n_steps, snapshot_times)
    snapshots: Dict[float, WaveFunction] = {}
    records: List[Dict[str, float]] = []

    def observe(r: SchrodingerRun, k: int):
        records.append(snapshot_observables(r.psi, r.potential, r.t))
        if k in wanted:
            snapshots[wanted[k]] = r.psi
            if on_snapshot is not None:
                on_snapshot(wanted[k], r.psi)
        if on_step is not None:
            on_step(r)

    observe(run, 0)
    for k in range(1, n_steps + 1):
        try:
            run = step(run)
        except Exception as e:
            logger.error(f"Schrodinger evolution aborted at step {k} (t={run.t:.6g}): {e}")
            raise
        observe(run, k)

    logger.info(f"Schrodinger evolution finished at t={run.t:.6g}: max norm drift {run.norm_drift:.3e}, "
                f"boundary leakage {run.boundary_leakage:.3e}")
    return EvolutionResult(run=run, snapshots=snapshots, series=pd.DataFrame.from_records(records))
