"""Random sampling, fixed-step integration and the Lorenz 96 generator."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class RngStream:
    """Deterministic, independent random stream keyed by ``(seed, stream_id)``.

    Every call to :meth:`generator` returns a fresh generator positioned at
    the start of the stream, so two holders of equal streams draw identical
    sequences without sharing state.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(ss))


def _rng(stream) -> np.random.Generator:
    if isinstance(stream, np.random.Generator):
        return stream
    return stream.generator()


def sample_wishart_identity(m: int, dof: int, stream) -> np.ndarray:
    """Draw from Wishart(I_m, dof) with the Bartlett decomposition."""
    if dof < m:
        raise ValueError(f"Wishart degrees of freedom ({dof}) must be >= dimension ({m})")
    rng = _rng(stream)
    T = np.zeros((m, m))
    # chi-square degrees of freedom dof, dof-1, ..., dof-m+1 on the diagonal
    T[np.diag_indices(m)] = np.sqrt(rng.chisquare(dof - np.arange(m)))
    rows, cols = np.tril_indices(m, k=-1)
    T[rows, cols] = rng.standard_normal(rows.size)
    W = T @ T.T
    return 0.5 * (W + W.T)


def sample_mvn(mean, cov_chol, stream) -> np.ndarray:
    """Return ``mean + cov_chol @ z`` with ``z`` standard normal."""
    mean = np.asarray(mean, dtype=float)
    L = np.asarray(cov_chol, dtype=float)
    if not np.allclose(L, np.tril(L)):
        raise ValueError("cov_chol must be lower triangular")
    z = _rng(stream).standard_normal(mean.shape[0])
    return mean + L @ z


def sample_student_t(dof: int, stream, size=None):
    """Standard Student-t draws as a normal over a scaled chi root."""
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    rng = _rng(stream)
    z = rng.standard_normal(size)
    c = rng.chisquare(dof, size)
    return z / np.sqrt(c / dof)


def rk4_step(f: Callable[[np.ndarray], np.ndarray], y, h: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step for an autonomous field."""
    y = np.asarray(y, dtype=float)
    k1 = f(y)
    _check_stage(k1, 1)
    k2 = f(y + 0.5 * h * k1)
    _check_stage(k2, 2)
    k3 = f(y + 0.5 * h * k2)
    _check_stage(k3, 3)
    k4 = f(y + h * k3)
    _check_stage(k4, 4)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_stage(k, idx):
    if not np.all(np.isfinite(k)):
        raise FloatingPointError(f"non-finite value in RK4 stage k{idx}")


def lorenz96_rhs(y, F: float) -> np.ndarray:
    """Lorenz 96 tendency with cyclic indexing.

    Works on a state vector or on an array whose first axis is the
    coordinate axis.
    """
    y = np.asarray(y, dtype=float)
    return (np.roll(y, -1, axis=0) - np.roll(y, 2, axis=0)) * np.roll(y, 1, axis=0) - y + F


@dataclass(frozen=True)
class Lorenz96Config:
    m: int = 40
    forcing: float = 8.0
    h: float = 0.01
    steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.m < 4:
            raise ValueError(f"Lorenz 96 needs m >= 4, got {self.m}")
        if not self.h > 0:
            raise ValueError(f"step size must be > 0, got {self.h}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    def to_dict(self) -> dict:
        return asdict(self)


def lorenz96_initial_state(cfg: Lorenz96Config) -> np.ndarray:
    """Zero-mean normal state whose covariance is itself Wishart(I, m)."""
    cov = sample_wishart_identity(cfg.m, cfg.m, RngStream(cfg.seed, 0))
    L = np.linalg.cholesky(cov)
    return sample_mvn(np.zeros(cfg.m), L, RngStream(cfg.seed, 1))


def integrate(f, y0, h: float, steps: int) -> np.ndarray:
    """Iterate :func:`rk4_step`; returns states as columns, ``steps + 1`` of them."""
    y = np.asarray(y0, dtype=float)
    out = np.empty((y.shape[0], steps + 1))
    out[:, 0] = y
    for t in range(steps):
        try:
            y = rk4_step(f, y, h)
        except FloatingPointError as exc:
            raise FloatingPointError(f"trajectory blew up at step {t + 1}: {exc}") from None
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"trajectory blew up at step {t + 1}")
        out[:, t + 1] = y
    return out


def gen_lorenz96(cfg: Lorenz96Config, y0=None):
    """Generate a Lorenz 96 trajectory and its tendencies.

    Returns
    -------
    states, derivs : ndarray of shape (m, steps + 1)
        Rows are coordinates, columns are time; ``derivs[:, t]`` is the
        right-hand side evaluated at ``states[:, t]``.
    """
    if y0 is None:
        y0 = lorenz96_initial_state(cfg)
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (cfg.m,):
        raise ValueError(f"initial state must have shape ({cfg.m},), got {y0.shape}")
    states = integrate(lambda y: lorenz96_rhs(y, cfg.forcing), y0, cfg.h, cfg.steps)
    derivs = lorenz96_rhs(states, cfg.forcing)
    return states, derivs
