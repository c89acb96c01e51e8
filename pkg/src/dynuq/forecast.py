"""Container for probabilistic multi-step forecasts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class ForecastResult:
    """Mean trajectory and per-coordinate central intervals.

    ``mean``, ``lower`` and ``upper`` have shape ``(m, horizon)``: rows are
    output coordinates, columns are forecast steps 1..horizon. ``samples``,
    when kept, has shape ``(S, m, horizon)``.
    """

    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float = 0.95
    samples: Optional[np.ndarray] = None
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.mean.ndim != 2:
            raise ValueError("mean must be an (m, horizon) array")
        if self.mean.shape[1] < 1:
            raise ValueError("forecast horizon must be >= 1")
        if self.lower.shape != self.mean.shape or self.upper.shape != self.mean.shape:
            raise ValueError("mean, lower and upper must share one shape")
        if not 0 < self.level < 1:
            raise ValueError(f"level must lie in (0, 1), got {self.level}")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def horizon(self) -> int:
        return self.mean.shape[1]

    @property
    def m(self) -> int:
        return self.mean.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def head(self, steps: int) -> "ForecastResult":
        """The first ``steps`` forecast steps as a new result."""
        samples = None if self.samples is None else self.samples[:, :, :steps]
        return ForecastResult(
            self.mean[:, :steps],
            self.lower[:, :steps],
            self.upper[:, :steps],
            level=self.level,
            samples=samples,
            seed=self.seed,
            meta=dict(self.meta),
        )

    @classmethod
    def from_samples(cls, samples, level=0.95, seed=None, keep_samples=True, meta=None):
        """Summarize an ``(S, m, horizon)`` sample tensor by mean and quantiles."""
        samples = np.asarray(samples, dtype=float)
        alpha = 1.0 - level
        lower, upper = np.quantile(samples, [alpha / 2, 1 - alpha / 2], axis=0)
        return cls(
            samples.mean(axis=0),
            lower,
            upper,
            level=level,
            samples=samples if keep_samples else None,
            seed=seed,
            meta=meta or {},
        )
