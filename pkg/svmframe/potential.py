from enum import Enum
import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class PotentialKind(str, Enum):
    FREE = "free"
    HARMONIC = "harmonic"
    RADIAL_GAUSSIAN = "radial_gaussian"


class Potential(BaseModel):
    """Central external potential V(|x|).

    harmonic:        V = strength * |x|^2 / 2
    radial_gaussian: V = strength * exp(-|x|^2 / (2 width^2))

    Points are arrays whose last axis holds the Cartesian components, so the same
    object serves 3-vectors of the classical integrator and 2D grid coordinates.
    """

    model_config = ConfigDict(frozen=True)

    kind: PotentialKind = Field(default=PotentialKind.FREE)
    strength: float = Field(default=0.0, description="Spring constant (harmonic) or depth (radial_gaussian)")
    width: float = Field(default=1.0, gt=0.0, description="Gaussian width (radial_gaussian only)")

    def value(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        r2 = np.sum(points * points, axis=-1)
        if self.kind == PotentialKind.FREE:
            return np.zeros_like(r2)
        if self.kind == PotentialKind.HARMONIC:
            return 0.5 * self.strength * r2
        return self.strength * np.exp(-r2 / (2.0 * self.width ** 2))

    def gradient(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if self.kind == PotentialKind.FREE:
            return np.zeros_like(points)
        if self.kind == PotentialKind.HARMONIC:
            return self.strength * points
        r2 = np.sum(points * points, axis=-1, keepdims=True)
        return -self.strength * points / self.width ** 2 * np.exp(-r2 / (2.0 * self.width ** 2))

    def on_grid(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """V sampled on a 2D mesh (the z = 0 plane)."""
        return self.value(np.stack([x, y], axis=-1))

    def gradient_on_grid(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Analytic (dV/dx, dV/dy) on a 2D mesh, stacked on the leading axis."""
        grad = self.gradient(np.stack([x, y], axis=-1))
        return np.moveaxis(grad, -1, 0)
