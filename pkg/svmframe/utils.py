from typing import Dict, Sequence

import numpy as np

from .errors import PreconditionError
from .logger import logger


def step_count(t_start: float, t_end: float, dt: float) -> int:
    """Number of fixed steps from t_start to t_end; warns when t_end is off the dt grid."""
    n = int(round((t_end - t_start) / dt))
    if abs(n * dt - (t_end - t_start)) > 1e-9 * max(1.0, abs(t_end)):
        logger.warning(f"t_end={t_end} is not on the dt grid; running {n} steps to t={t_start + n * dt:.12g}")
    return n


def snapshot_steps(t_start: float, dt: float, n_steps: int, snapshot_times: Sequence[float]) -> Dict[int, float]:
    """Map snapshot times to step indices."""
    steps = {}
    for ts in snapshot_times:
        k = int(round((ts - t_start) / dt))
        if k < 0 or k > n_steps:
            raise PreconditionError(f"snapshot time {ts} outside [{t_start}, {t_start + n_steps * dt}]")
        steps[k] = float(ts)
    return steps


def observed_order(errors: Sequence[float], ratio: float = 2.0) -> np.ndarray:
    """Observed convergence orders log(e_k / e_k+1) / log(ratio) for successive refinements."""
    errors = np.asarray(errors, dtype=float)
    return np.log(errors[:-1] / errors[1:]) / np.log(ratio)
