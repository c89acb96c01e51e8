"""Forecast scores: RMSE, interval coverage and average interval length."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


def _pair(a, b, names=("pred", "truth")):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")
    if a.size == 0:
        raise ValueError("empty input")
    return a, b


def _sum(a: np.ndarray) -> float:
    # left-to-right over the row-major entries, so scores match a plain loop bit for bit
    return float(np.cumsum(a, axis=None)[-1])


def rmse(pred, truth, normalize: bool = True) -> float:
    """Root mean squared error over all entries.

    With ``normalize=False`` the square root of the raw sum of squared
    errors is returned instead.
    """
    pred, truth = _pair(pred, truth)
    sse = _sum((pred - truth) ** 2)
    return float(np.sqrt(sse / pred.size if normalize else sse))


def coverage(lower, upper, truth) -> float:
    """Fraction of entries with ``lower <= truth <= upper``."""
    lower, upper = _pair(lower, upper, ("lower", "upper"))
    lower, truth = _pair(lower, truth, ("lower", "truth"))
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    return float(np.mean((truth >= lower) & (truth <= upper)))


def avg_interval_length(lower, upper) -> float:
    lower, upper = _pair(lower, upper, ("lower", "upper"))
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    return _sum(upper - lower) / lower.size


def heldout_std(truth) -> float:
    """Sample standard deviation of all entries (``ddof=1``)."""
    truth = np.asarray(truth, dtype=float)
    if truth.size < 2:
        raise ValueError("need at least two entries")
    return float(np.std(truth, ddof=1))


@dataclass
class MetricsReport:
    rmse: float
    coverage: float
    avg_length: float
    heldout_std: float
    level: float = 0.95
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError(f"coverage must lie in [0, 1], got {self.coverage}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def table(self, method: str = "") -> str:
        """Plain-text table with one row per method."""
        head = f"{'method':<10} {'RMSE':>10} {'P(' + _pct(self.level) + ')':>10} {'L(' + _pct(self.level) + ')':>10}"
        row = f"{method:<10} {self.rmse:>10.4g} {self.coverage:>10.1%} {self.avg_length:>10.4g}"
        return f"{head}\n{row}\nheld-out std {self.heldout_std:.4g}\n"


def _pct(level):
    return f"{100 * level:g}%"


def evaluate(result, truth, normalize: bool = True, **provenance) -> MetricsReport:
    """Score a :class:`~dynuq.forecast.ForecastResult` against ``(m, horizon)`` truth."""
    truth = np.asarray(truth, dtype=float)
    return MetricsReport(
        rmse=rmse(result.mean, truth, normalize=normalize),
        coverage=coverage(result.lower, result.upper, truth),
        avg_length=avg_interval_length(result.lower, result.upper),
        heldout_std=heldout_std(truth),
        level=float(result.level),
        provenance=dict(provenance),
    )
