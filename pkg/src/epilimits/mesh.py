"""Uniform time grids shared by the solvers and the simulators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TimeMesh:
    """Uniform grid 0, h, 2h, ..., T."""

    horizon: float
    step: float

    def __post_init__(self) -> None:
        if not (self.step > 0 and self.horizon > 0):
            raise ValueError("mesh step and horizon must be positive")
        if self.step > self.horizon * (1 + 1e-12):
            raise ValueError("mesh step exceeds horizon")
        n = self.horizon / self.step
        if abs(n - round(n)) > 1e-6 * max(1.0, n):
            raise ValueError(f"horizon {self.horizon} is not a multiple of step {self.step}")

    @property
    def size(self) -> int:
        """Number of steps (the grid has size + 1 nodes)."""
        return int(round(self.horizon / self.step))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.size + 1) * self.step

    def refined(self, factor: int) -> TimeMesh:
        return TimeMesh(self.horizon, self.step / factor)

    def index(self, t: float) -> int:
        k = int(round(t / self.step))
        if abs(k * self.step - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"time {t} is not a mesh node")
        return k
