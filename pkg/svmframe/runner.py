"""Scenario loading and orchestration of the run modes.

Exit codes: 0 success, 1 configuration or output error, 2 numerical failure,
3 crosscheck tolerance failure (the report is still written).
"""
import json
import os
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, Iterator, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from .config import settings
from .data_handler import OutputWriter, content_hash
from .ensemble import (EnsemblePaths, TrajectoryEnsemble, advance_forward, histogram_density,
                       sample_from_density)
from .errors import ConfigurationError, OutputError, SVMFrameError, ToleranceFailure
from .fokker_planck import drift_from_madelung, fp_advance, fp_evolve
from .frame import FrameKind, FramePath, classical_trajectory, inertial_energy
from .grid import (Grid2D, MadelungFields, PhysicalParams, WaveFunction, coarse_grain, gaussian_packet,
                   l1_distance, madelung_decompose, tv_distance)
from .logger import logger
from .observables import (ObservableSeries, euler_lagrange_residual, noether_charge_ensemble,
                          snapshot_observables)
from .potential import Potential
from .schema import MODES, ScenarioConfig, quantum_nu_violation
from .schrodinger import SchrodingerRun, cn_conditioning, evolve, ground_state, step
from .utils import snapshot_steps, step_count


# ------------------------------------------------------------------
# Configuration files
# ------------------------------------------------------------------
def _defaults_applied(model: BaseModel, prefix: str = "") -> Iterator[str]:
    for name in type(model).model_fields:
        value = getattr(model, name)
        if name not in model.model_fields_set:
            shown = "defaults" if isinstance(value, BaseModel) else repr(value)
            yield f"{prefix}{name} = {shown}"
        elif isinstance(value, BaseModel):
            yield from _defaults_applied(value, f"{prefix}{name}.")


def load_config(path: str) -> ScenarioConfig:
    """Parse and validate a JSON scenario, logging every default that was applied."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigurationError(f"cannot read scenario {path}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"parse error in {path}: {e.msg} (column {e.colno})", line=e.lineno) from e
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path} must hold a JSON object of scenario sections", line=1)
    try:
        config = ScenarioConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        loc = ".".join(str(part) for part in first["loc"]) or "scenario"
        raise ConfigurationError(f"invalid scenario {path}: {loc}: {first['msg']}") from e
    for applied in _defaults_applied(config):
        logger.info(f"Default applied: {applied}")
    return config


def dump_config(config: ScenarioConfig) -> str:
    return config.model_dump_json(indent=2)


def config_hash(config: ScenarioConfig) -> str:
    """SHA-256 of the canonical dump."""
    return content_hash(dump_config(config))


def resolve_output_dir(config: ScenarioConfig, out: Optional[str] = None) -> str:
    """--out wins over SVMFRAME_OUTPUT_DIR, which wins over output.directory."""
    if out:
        os.makedirs(out, exist_ok=True)
        return out
    return settings.output_dir(config.output.directory)


# ------------------------------------------------------------------
# Scenario objects
# ------------------------------------------------------------------
@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    params: PhysicalParams
    frame: FramePath
    potential: Potential
    grid: Grid2D
    bins: Grid2D

    @classmethod
    def build(cls, config: ScenarioConfig) -> "Scenario":
        return cls(
            config=config,
            params=config.params.to_params(),
            frame=config.frame.to_frame(),
            potential=config.potential.to_potential(),
            grid=config.grid.to_grid(),
            bins=Grid2D.from_length(config.grid.L, config.run.bins),
        )

    @property
    def rotation_symmetric(self) -> bool:
        """Central potential in a frame rotating at constant rate about the origin."""
        return self.frame.kind == FrameKind.Z_ROTATION and self.frame.is_static


def initial_state(scenario: Scenario) -> WaveFunction:
    initial = scenario.config.initial
    if initial.ground_state:
        psi, _ = ground_state(scenario.grid, scenario.params, scenario.potential)
        return psi
    return gaussian_packet(scenario.grid, scenario.params, center=initial.center, sigma0=initial.sigma0,
                           k=initial.k, vortex_charge=initial.vortex_charge)


def warn_conditioning(scenario: Scenario) -> float:
    conditioning = cn_conditioning(scenario.grid, scenario.params, scenario.config.run.dt)
    if conditioning > 1.0:
        logger.warning(f"Crank-Nicolson conditioning dt*hbar/(M h^2) = {conditioning:.3g} > 1; "
                       "expect slow iterative solves")
    return conditioning


class QuantumDriver:
    """Schrodinger run stepped one dt at a time, keeping the latest Madelung fields."""

    def __init__(self, scenario: Scenario):
        run_cfg = scenario.config.run
        self.scenario = scenario
        self.run = SchrodingerRun(psi=initial_state(scenario), frame=scenario.frame, potential=scenario.potential,
                                  dt=run_cfg.dt, solver_tol=run_cfg.solver_tol, max_iter=run_cfg.max_iter)
        warn_conditioning(scenario)
        self.records: List[Dict[str, float]] = []
        self.history: Deque[MadelungFields] = deque(maxlen=3)
        self._observe()

    @property
    def psi(self) -> WaveFunction:
        return self.run.psi

    @property
    def t(self) -> float:
        return self.run.t

    @property
    def fields(self) -> MadelungFields:
        return self.history[-1]

    def _observe(self) -> None:
        self.records.append(snapshot_observables(self.run.psi, self.run.potential, self.run.t))
        self.history.append(madelung_decompose(self.run.psi, t=self.run.t))

    def advance(self) -> None:
        self.run = step(self.run)
        self._observe()

    def el_residual(self) -> float:
        """Euler-Lagrange residual norm at the middle of the last three steps."""
        scenario = self.scenario
        return euler_lagrange_residual(list(self.history), scenario.frame, scenario.potential,
                                       scenario.config.run.dt).l2_total


def _snapshot_name(prefix: str, kind: str, t: float) -> str:
    return f"{prefix}_{kind}_t{t:.6f}.txt"


def _write_psi_snapshot(writer: OutputWriter, scenario: Scenario, psi: WaveFunction, t: float) -> None:
    kinds = scenario.config.output.snapshot_kinds
    fields = madelung_decompose(psi, t=t) if {"pm_x", "pm_y"} & set(kinds) else None
    for kind in kinds:
        values = {
            "rho": lambda: psi.density,
            "psi_re": lambda: psi.values.real,
            "psi_im": lambda: psi.values.imag,
            "pm_x": lambda: fields.p_m[0],
            "pm_y": lambda: fields.p_m[1],
        }[kind]()
        writer.write_snapshot(_snapshot_name("psi", kind, t), values, psi.grid, t, kind)


def _ensemble_row(ensemble: TrajectoryEnsemble, fields: MadelungFields, l_z: float) -> Dict[str, float]:
    charge = noether_charge_ensemble(ensemble.positions, fields)
    mean = ensemble.positions.mean(axis=0)
    return {"t": ensemble.t, "mean_x": mean[0], "mean_y": mean[1], "L_z": l_z,
            "Q_ensemble": charge.value, "Q_stat_err": charge.stat_err}


# ------------------------------------------------------------------
# Modes
# ------------------------------------------------------------------
def run_schrodinger(scenario: Scenario, writer: OutputWriter) -> None:
    cfg = scenario.config.run
    psi0 = initial_state(scenario)
    warn_conditioning(scenario)
    history: Deque[MadelungFields] = deque(maxlen=3)
    el: Dict[int, Dict[str, float]] = {}

    def on_step(r: SchrodingerRun):
        history.append(madelung_decompose(r.psi, t=r.t))
        mid = r.step_index - 1
        if len(history) == 3 and mid % cfg.diagnostic_every == 0:
            res = euler_lagrange_residual(list(history), scenario.frame, scenario.potential, cfg.dt)
            el[mid] = {"el_residual_L2": res.l2_total}

    result = evolve(
        SchrodingerRun(psi=psi0, frame=scenario.frame, potential=scenario.potential, dt=cfg.dt,
                       solver_tol=cfg.solver_tol, max_iter=cfg.max_iter),
        cfg.t_end,
        snapshot_times=cfg.snapshot_times,
        on_snapshot=lambda t, psi: _write_psi_snapshot(writer, scenario, psi, t),
        on_step=on_step,
    )
    series = ObservableSeries.from_evolution(result.series, scenario.frame, el)
    writer.write_table("observables.csv", series.to_frame())
    drift = abs(result.run.psi.norm - psi0.norm)
    logger.info(f"Schrodinger run done: |norm - 1| = {drift:.3e}")


def run_fokker_planck(scenario: Scenario, writer: OutputWriter) -> None:
    cfg = scenario.config.run
    driver = QuantumDriver(scenario)
    rho0 = driver.psi.density
    static_fields = driver.fields

    def source(t: float):
        if cfg.drift_source == "static":
            return drift_from_madelung(static_fields, scenario.frame, t=t)
        while driver.t < t - 0.5 * cfg.dt:
            driver.advance()
        return drift_from_madelung(driver.fields, scenario.frame, t=t)

    result = fp_evolve(
        rho0, source, scenario.params.nu, scenario.grid, cfg.t_end, cfg.dt,
        snapshot_times=cfg.snapshot_times,
        on_snapshot=lambda t, rho: writer.write_snapshot(_snapshot_name("fp", "rho", t), rho, scenario.grid, t, "rho"),
    )
    writer.write_table("fp_series.csv", result.series)
    if cfg.drift_source == "schrodinger":
        while driver.t < result.t - 0.5 * cfg.dt:
            driver.advance()
        l1 = l1_distance(result.rho, driver.psi.density, scenario.grid)
        logger.info(f"Fokker-Planck vs |psi|^2 at t={result.t:.6g}: L1 = {l1:.3e}")


def run_ensemble(scenario: Scenario, writer: OutputWriter) -> None:
    cfg = scenario.config.run
    out = scenario.config.output
    driver = QuantumDriver(scenario)
    static = cfg.drift_source == "static"
    ensemble = sample_from_density(driver.psi.density, scenario.grid, cfg.n_traj, cfg.master_seed)
    n_steps = step_count(0.0, cfg.t_end, cfg.dt)
    wanted = snapshot_steps(0.0, cfg.dt, n_steps, cfg.snapshot_times)
    series = ObservableSeries()
    paths = EnsemblePaths()

    def observe(k: int):
        fields = driver.fields
        l_z = driver.records[-1]["L_z"]
        if k % cfg.diagnostic_every == 0 or k == n_steps or k in wanted:
            series.append(**_ensemble_row(ensemble, fields, l_z))
        if k in wanted:
            hist = histogram_density(ensemble.positions, scenario.bins)
            writer.write_snapshot(_snapshot_name("hist", "rho", wanted[k]), hist, scenario.bins, wanted[k], "rho")
        if out.write_paths and k % out.path_stride == 0:
            paths.record(TrajectoryEnsemble(positions=ensemble.positions[:out.path_traj], t=ensemble.t,
                                            master_seed=ensemble.master_seed, step=ensemble.step))

    observe(0)
    for k in range(1, n_steps + 1):
        fields = driver.fields
        ensemble = advance_forward(ensemble, fields.p_fwd, scenario.frame, scenario.params, cfg.dt,
                                   scenario.grid, mask=fields.mask)
        if not static:
            driver.advance()
        observe(k)

    writer.write_table("ensemble_observables.csv", series.to_frame())
    if out.write_paths:
        writer.write_paths("paths.txt", paths)
    logger.info(f"Ensemble of {ensemble.n_traj} trajectories advanced to t={ensemble.t:.6g}")


def run_classical(scenario: Scenario, writer: OutputWriter) -> None:
    cfg = scenario.config.run
    initial = scenario.config.initial
    q0 = np.array([initial.center[0], initial.center[1], 0.0])
    p0 = scenario.params.hbar * np.array([initial.k[0], initial.k[1], 0.0])
    n_steps = step_count(0.0, cfg.t_end, cfg.dt)
    t_grid = cfg.dt * np.arange(n_steps + 1)
    states = classical_trajectory(scenario.params, scenario.frame, scenario.potential, q0, p0, t_grid,
                                  domain_half_width=scenario.grid.half_width)
    table = pd.DataFrame({
        "t": [s.t for s in states],
        "x": [s.q[0] for s in states],
        "y": [s.q[1] for s in states],
        "px": [s.p[0] for s in states],
        "py": [s.p[1] for s in states],
        "energy_inertial": [inertial_energy(scenario.params, scenario.frame, scenario.potential, s) for s in states],
    })
    writer.write_table("classical.csv", table)
    drift = float(np.ptp(table["energy_inertial"]))
    logger.info(f"Classical trajectory done: {len(states)} states, inertial energy spread {drift:.3e}")


def _check(name: str, value: float, tolerance: Optional[float]) -> Dict[str, object]:
    passed = None if tolerance is None else bool(np.isfinite(value) and value <= tolerance)
    return {"check": name, "value": value, "tolerance": tolerance, "passed": passed}


def noether_check(q_ensemble: float, l_z: float, stat_err: float, tolerance: Optional[float]) -> Dict[str, object]:
    """|Q - L_z| in units of the ensemble's statistical error.

    A zero or undefined error (a single used trajectory, or none) is reported as
    its own failed check.
    """
    if not (np.isfinite(stat_err) and stat_err > 0.0):
        logger.error(f"Noether check impossible: ensemble statistical error is {stat_err}")
        return {"check": "noether_stat_err", "value": float(stat_err), "tolerance": tolerance,
                "passed": None if tolerance is None else False}
    return _check("noether_sigma", abs(q_ensemble - l_z) / stat_err, tolerance)


def run_crosscheck(scenario: Scenario, writer: OutputWriter) -> None:
    """Schrodinger ground truth with Fokker-Planck and ensemble both driven by its Madelung drifts."""
    cfg = scenario.config.run
    tol = cfg.tolerances
    grid, frame, params = scenario.grid, scenario.frame, scenario.params
    driver = QuantumDriver(scenario)
    rho_fp = driver.psi.density
    ensemble = sample_from_density(rho_fp, grid, cfg.n_traj, cfg.master_seed)
    n_steps = step_count(0.0, cfg.t_end, cfg.dt)
    wanted = snapshot_steps(0.0, cfg.dt, n_steps, cfg.snapshot_times)
    extra: Dict[int, Dict[str, float]] = {}
    clipped = 0.0

    def diagnose(k: int):
        charge = noether_charge_ensemble(ensemble.positions, driver.fields)
        extra.setdefault(k, {}).update(Q_ensemble=charge.value, Q_stat_err=charge.stat_err)

    def snapshot(k: int):
        t = wanted[k]
        _write_psi_snapshot(writer, scenario, driver.psi, t)
        writer.write_snapshot(_snapshot_name("fp", "rho", t), rho_fp, grid, t, "rho")
        writer.write_snapshot(_snapshot_name("hist", "rho", t), histogram_density(ensemble.positions, scenario.bins),
                              scenario.bins, t, "rho")

    diagnose(0)
    if 0 in wanted:
        snapshot(0)
    for k in range(1, n_steps + 1):
        fields = driver.fields
        fp = fp_advance(rho_fp, drift_from_madelung(fields, frame), params.nu, cfg.dt, grid)
        rho_fp, clipped = fp.rho, clipped + fp.clipped_mass
        ensemble = advance_forward(ensemble, fields.p_fwd, frame, params, cfg.dt, grid, mask=fields.mask)
        driver.advance()
        if k % cfg.diagnostic_every == 0 or k == n_steps:
            diagnose(k)
        if (k - 1) % cfg.diagnostic_every == 0 and len(driver.history) == 3:
            extra.setdefault(k - 1, {})["el_residual_L2"] = driver.el_residual()
        if k in wanted:
            snapshot(k)

    series = ObservableSeries.from_evolution(pd.DataFrame.from_records(driver.records), frame, extra)
    table = series.to_frame()
    writer.write_table("observables.csv", table)

    rho_psi = driver.psi.density
    final = table.iloc[-1]
    ehrenfest = table[["ehrenfest_res_x", "ehrenfest_res_y"]].abs().to_numpy()
    checks = [
        _check("norm_drift", float(np.abs(table["norm"] - table["norm"].iloc[0]).max()), tol.norm),
        _check("tv_histogram", tv_distance(histogram_density(ensemble.positions, scenario.bins),
                                           coarse_grain(rho_psi, grid, scenario.bins), scenario.bins), tol.tv),
        _check("l1_fokker_planck", l1_distance(rho_fp, rho_psi, grid), tol.l1),
        _check("ehrenfest_max", float(np.nanmax(ehrenfest)) if np.isfinite(ehrenfest).any() else float("nan"),
               tol.ehrenfest),
        _check("lz_drift", float(np.abs(table["L_z"] - table["L_z"].iloc[0]).max()),
               tol.lz_drift if scenario.rotation_symmetric else None),
        noether_check(float(final["Q_ensemble"]), float(final["L_z"]), float(final["Q_stat_err"]), tol.noether_sigma),
        _check("el_residual_max", float(table["el_residual_L2"].max()), tol.el_residual),
        _check("fp_clipped_mass", clipped, None),
    ]
    writer.write_report("crosscheck_report.csv", checks)
    failed = [c["check"] for c in checks if c["passed"] is False]
    for c in checks:
        logger.info(f"Crosscheck {c['check']}: {c['value']:.6g} (tolerance {c['tolerance']}, passed {c['passed']})")
    if failed:
        raise ToleranceFailure(f"crosscheck tolerances exceeded: {', '.join(failed)}")


_MODE_HANDLERS = {
    "schrodinger": run_schrodinger,
    "fokker_planck": run_fokker_planck,
    "ensemble": run_ensemble,
    "classical": run_classical,
    "crosscheck": run_crosscheck,
}


def run(mode: str, config: ScenarioConfig, seed: Optional[int] = None, out: Optional[str] = None) -> int:
    """Run one mode and return the process exit status."""
    if mode not in MODES:
        logger.error(f"Unknown mode {mode!r}; expected one of: {', '.join(MODES)}")
        return ConfigurationError.exit_code
    try:
        if seed is not None:
            config = config.model_copy(update={"run": config.run.model_copy(update={"master_seed": seed})})
        problem = quantum_nu_violation(config, mode)
        if problem:
            raise ConfigurationError(problem)
        scenario = Scenario.build(config)
        writer = OutputWriter(resolve_output_dir(config, out), config_hash(config))
        logger.info(f"Running {mode} into {writer.directory} (config sha256 {writer.config_sha256[:12]})")
        _MODE_HANDLERS[mode](scenario, writer)
    except SVMFrameError as e:
        logger.error(f"{mode} run failed: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{mode} run failed: cannot prepare output: {e}")
        return OutputError.exit_code
    logger.info(f"{mode} run finished: {len(writer.written)} files written")
    return 0
