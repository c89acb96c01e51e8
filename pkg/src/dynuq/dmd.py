"""Exact DMD, higher-order DMD and a small extended DMD.

Snapshot matrices are ``(m, n)``: rows are output coordinates, columns are
time points.

The fitted operator is kept in factored form ``A = B U_r^T`` with
``B = Y_2 V_r Sigma_r^-1`` (``m x r``); it is applied as two skinny
products and only materialized when ``m <= 4 r``. Reading ``A`` as the
mean map of the linear Gaussian model ``y_{t+1} = A y_t + eps``,
``eps ~ N(0, tau^2 I)``, gives a Gaussian forecast posterior whose
covariance after ``k`` steps is ``tau^2 sum_{i<k} A^i (A^T)^i``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .forecast import ForecastResult

RANK_RULES = ("singular", "eigen")


class UnstableSpectrumWarning(RuntimeWarning):
    """The fitted operator has spectral radius above one; forecasts grow."""


class RankDeficiencyWarning(RuntimeWarning):
    """A least-squares system was rank deficient; the minimum-norm solution is used."""


def _as_snapshots(Y, name="Y") -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2:
        raise ValueError(f"{name} must be an (m, n) snapshot matrix")
    if not np.all(np.isfinite(Y)):
        raise ValueError(f"{name} contains non-finite entries")
    return Y


def _numerical_rank(sigma: np.ndarray, shape) -> int:
    if sigma.size == 0 or sigma[0] == 0:
        return 0
    tol = sigma[0] * max(shape) * np.finfo(float).eps
    return int(np.sum(sigma > tol))


def choose_rank(singular_values, energy: float = 0.99) -> int:
    """Smallest ``r`` whose leading ``sigma**2`` carry at least ``energy`` of the total.

    >>> choose_rank([3.0, 1.0], 0.99)
    2
    """
    s = np.asarray(singular_values, dtype=float)
    if s.ndim != 1 or np.any(s < 0):
        raise ValueError("singular values must be a non-negative vector")
    if np.any(np.diff(s) > 0):
        raise ValueError("singular values must be sorted in descending order")
    if not 0 < energy <= 1:
        raise ValueError(f"energy must lie in (0, 1], got {energy}")
    if not np.any(s > 0):
        raise ValueError("all singular values are zero")
    nonzero = int(np.sum(s > 0))
    if energy == 1.0:
        return nonzero
    e = s**2
    frac = np.cumsum(e) / e.sum()
    # tolerance keeps an exact hit such as 9/10 = 0.9 from rounding below
    r = int(np.searchsorted(frac, energy * (1 - 1e-12))) + 1
    return min(r, nonzero)


@dataclass(frozen=True)
class DmdModel:
    """Fitted exact DMD.

    Attributes
    ----------
    rank : int
    u_r : ndarray (m, r)
    sigma_r : ndarray (r,)
    v_r : ndarray (n-1, r)
    a_tilde : ndarray (r, r)
        ``U_r^T Y_2 V_r Sigma_r^-1``.
    eigvals : complex ndarray (r,)
    modes : complex ndarray (m, r)
        ``Y_2 V_r Sigma_r^-1 omega_i / lambda_i``; for a zero eigenvalue the
        projected mode ``U_r omega_i`` is used instead.
    amplitudes : complex ndarray (r,)
        ``modes^+ y_1``.
    tau2_hat : float
        Residual variance per entry, ``||Y_2 - A Y_1||_F^2 / (m (n-1))``.
    n_train : int
    b_factor : ndarray (m, r)
        Left factor ``Y_2 V_r Sigma_r^-1`` of the operator.
    """

    rank: int
    u_r: np.ndarray
    sigma_r: np.ndarray
    v_r: np.ndarray
    a_tilde: np.ndarray
    eigvals: np.ndarray
    modes: np.ndarray
    amplitudes: np.ndarray
    tau2_hat: float
    n_train: int
    b_factor: np.ndarray
    energy: float = 0.99
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.u_r.shape[0]

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(self.eigvals)))

    @property
    def unstable(self) -> bool:
        return self.spectral_radius > 1.0 + 1e-12

    def apply(self, Y) -> np.ndarray:
        """``A @ Y`` for a vector or a matrix of column states."""
        Y = np.asarray(Y, dtype=float)
        if self.m <= 4 * self.rank:
            return self.dense() @ Y
        return self.b_factor @ (self.u_r.T @ Y)

    def dense(self) -> np.ndarray:
        """The ``m x m`` operator."""
        return self.b_factor @ self.u_r.T


def fit_dmd(
    Y,
    energy: float = 0.99,
    rank_override: Optional[int] = None,
    rank_rule: str = "singular",
) -> DmdModel:
    """Exact DMD of the snapshot matrix ``Y``.

    Parameters
    ----------
    Y : array_like (m, n)
    energy : float
        Energy threshold for :func:`choose_rank`.
    rank_override : int, optional
        Fixed truncation rank; capped at the numerical rank.
    rank_rule : {"singular", "eigen"}
        ``"singular"`` applies the energy rule to ``sigma**2``. ``"eigen"``
        fits at full numerical rank first, then keeps the smallest ``r``
        whose largest ``|lambda|`` sum to ``energy`` of the total.
    """
    Y = _as_snapshots(Y)
    m, n = Y.shape
    if n < 2:
        raise ValueError("DMD needs at least two snapshots")
    if rank_rule not in RANK_RULES:
        raise ValueError(f"unknown rank rule {rank_rule!r}; expected one of {RANK_RULES}")
    if rank_override is not None and rank_override < 1:
        raise ValueError("rank_override must be >= 1")
    model = _fit_pair(Y[:, :-1], Y[:, 1:], energy, rank_override, rank_rule, n_train=n)
    if model.unstable:
        warnings.warn(
            f"DMD operator has spectral radius {model.spectral_radius:.6g} > 1",
            UnstableSpectrumWarning,
        )
    return model


def _a_tilde(u, s, v, Y2):
    return u.T @ ((Y2 @ v) / s)


def amplitudes_lsq(model: DmdModel, Y) -> np.ndarray:
    """Amplitudes fitted to all snapshots of ``Y`` jointly.

    Minimizes ``sum_t ||Phi Lambda^(t-1) b - y_t||^2``. A rank deficient
    stacked system gives the minimum-norm solution and a
    :class:`RankDeficiencyWarning`.
    """
    Y = _as_snapshots(Y)
    m, n = Y.shape
    if m != model.m:
        raise ValueError(f"Y has {m} rows, model has {model.m}")
    powers = model.eigvals[None, :] ** np.arange(n)[:, None]  # (n, r)
    M = (powers[:, None, :] * model.modes[None, :, :]).reshape(n * m, model.rank)
    b, _, rank, _ = np.linalg.lstsq(M, Y.T.reshape(-1).astype(complex), rcond=None)
    if rank < model.rank:
        warnings.warn(
            f"stacked amplitude system has rank {rank} < {model.rank}", RankDeficiencyWarning
        )
    return b


def reconstruct(model: DmdModel, t: int, amplitudes=None, return_complex: bool = False):
    """Reconstructed snapshot ``Phi Lambda^(t-1) b`` at time index ``t >= 1``."""
    if int(t) != t or t < 1:
        raise ValueError(f"time index must be an integer >= 1, got {t}")
    b = model.amplitudes if amplitudes is None else np.asarray(amplitudes)
    y = model.modes @ (model.eigvals ** (int(t) - 1) * b)
    return y if return_complex else y.real


def _check_start(model, y_n, horizon):
    y_n = np.asarray(y_n, dtype=float).ravel()
    if y_n.size != model.m:
        raise ValueError(f"initial state has {y_n.size} entries, model has {model.m}")
    if int(horizon) != horizon or horizon < 1:
        raise ValueError(f"horizon must be an integer >= 1, got {horizon}")
    return y_n


def _warn_unstable(model):
    if model.unstable:
        warnings.warn(
            f"forecasting with spectral radius {model.spectral_radius:.6g} > 1",
            UnstableSpectrumWarning,
        )


def forecast_dmd(model: DmdModel, y_n, horizon: int) -> np.ndarray:
    """Point forecast ``A^k y_n`` for ``k = 1..horizon``, as an ``(m, horizon)`` array."""
    y = _check_start(model, y_n, horizon)
    _warn_unstable(model)
    out = np.empty((model.m, horizon))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(horizon):
            y = model.apply(y)
            out[:, k] = y
    return out


def _cov_core(model: DmdModel, steps: int):
    """r x r matrices ``D_k`` with ``cov_k = tau^2 (I + B D_k B^T)``, ``k = 1..steps``.

    ``A^i (A^T)^i = B At^(i-1) (At^T)^(i-1) B^T`` for ``i >= 1``, so the
    recursion ``D_(k+1) = At D_k At^T + I`` with ``D_1 = 0`` is exact.
    """
    r = model.rank
    D = np.zeros((r, r))
    out = [D]
    At = model.a_tilde
    for _ in range(steps - 1):
        D = At @ D @ At.T + np.eye(r)
        D = 0.5 * (D + D.T)
        out.append(D)
    return out


def dmd_posterior(model: DmdModel, y_n, t_star: int, t_now: Optional[int] = None):
    """Gaussian forecast law at time ``t_star`` given the state ``y_n`` at ``t_now``.

    ``t_now`` defaults to the last training index. Returns ``(mean, cov)``
    with ``mean = A^k y_n`` and ``cov = tau^2 sum_{i<k} A^i (A^T)^i``, where
    ``k = t_star - t_now``.
    """
    t_now = model.n_train if t_now is None else int(t_now)
    k = int(t_star) - t_now
    if k < 1:
        raise ValueError(f"t_star must exceed {t_now}, got {t_star}")
    y = _check_start(model, y_n, k)
    for _ in range(k):
        y = model.apply(y)
    D = _cov_core(model, k)[-1]
    B = model.b_factor
    cov = model.tau2_hat * (np.eye(model.m) + B @ D @ B.T)
    return y, 0.5 * (cov + cov.T)


def _marginal_vars(model: DmdModel, horizon: int, rows=None, proj=None) -> np.ndarray:
    """Diagonal of the forecast covariance per step, shape ``(len(rows), horizon)``.

    ``proj`` maps the state to reported outputs (``P cov P^T``); ``rows``
    selects a subset of the state coordinates.
    """
    B = model.b_factor
    if proj is not None:
        PB = proj @ B
        base = np.sum(proj * proj, axis=1)
    else:
        PB = B if rows is None else B[rows]
        base = np.ones(PB.shape[0])
    out = np.empty((PB.shape[0], horizon))
    for k, D in enumerate(_cov_core(model, horizon)):
        out[:, k] = base + np.einsum("ij,jk,ik->i", PB, D, PB)
    return model.tau2_hat * np.maximum(out, 0.0)


def _gaussian_result(mean, var, level, meta):
    z = stats.norm.ppf(0.5 + level / 2)
    half = z * np.sqrt(var)
    with np.errstate(invalid="ignore"):
        lower, upper = mean - half, mean + half
    return ForecastResult(mean, lower, upper, level=level, samples=None, meta=meta)


def forecast_dmd_intervals(model: DmdModel, y_n, horizon: int, level: float = 0.95):
    """Point forecast with Gaussian central intervals from the forecast covariance."""
    mean = forecast_dmd(model, y_n, horizon)
    var = _marginal_vars(model, horizon)
    return _gaussian_result(mean, var, level, {"mode": "dmd", "rank": model.rank})


# ---------------------------------------------------------------------------
# higher-order DMD
# ---------------------------------------------------------------------------


def build_augmented(Y, d: int, delta_t: int):
    """Time-delay matrices for HODMD.

    Column ``i`` of the first matrix stacks ``y_(1+i dt), ..., y_(i dt+d)``
    (1-based time), the second matrix is the same shifted by one step, for
    ``i = 0 .. floor((n-d-1)/dt)``.

    Returns
    -------
    Y1_aug, Y2_aug : ndarray (m d, q)
    """
    Y = _as_snapshots(Y)
    if int(d) != d or d < 1:
        raise ValueError(f"d must be an integer >= 1, got {d}")
    if int(delta_t) != delta_t or delta_t < 1:
        raise ValueError(f"delta_t must be an integer >= 1, got {delta_t}")
    m, n = Y.shape
    need = d + 1 + delta_t
    if n < need:
        err = ValueError(f"d={d}, delta_t={delta_t} need at least {need} snapshots, got {n}")
        err.min_n = need
        raise err
    starts = np.arange(0, n - d, delta_t)  # 0-based first column of each block
    lags = np.arange(d)
    Y1 = Y[:, starts[None, :] + lags[:, None]]  # (m, d, q)
    Y2 = Y[:, starts[None, :] + lags[:, None] + 1]
    q = starts.size
    # block-major rows: the first m rows hold the oldest snapshot
    return (
        Y1.transpose(1, 0, 2).reshape(m * d, q),
        Y2.transpose(1, 0, 2).reshape(m * d, q),
    )


@dataclass(frozen=True)
class HodmdModel:
    d: int
    delta_t: int
    inner: DmdModel
    tau2_aug: float
    m: int


def _fit_pair(Y1, Y2, energy, rank_override=None, rank_rule="singular", n_train=None):
    # exact DMD of the regression Y2 ~ A Y1; amplitudes from the first column
    m, q = Y1.shape
    U, s, Vh = np.linalg.svd(Y1, full_matrices=False)
    full = _numerical_rank(s, Y1.shape)
    if full == 0:
        raise ValueError("snapshot matrix is zero; DMD is undefined")
    if rank_override is not None:
        r = min(int(rank_override), full)
    elif rank_rule == "eigen":
        lam = np.linalg.eigvals(_a_tilde(U[:, :full], s[:full], Vh[:full].T, Y2))
        mag = np.sort(np.abs(lam))[::-1]
        frac = np.cumsum(mag) / mag.sum() if mag.sum() > 0 else np.ones(1)
        r = min(int(np.searchsorted(frac, energy * (1 - 1e-12))) + 1, full)
    else:
        r = min(choose_rank(s, energy), full)
    u_r, sig, v_r = U[:, :r], s[:r], Vh[:r].T
    B = (Y2 @ v_r) / sig
    a_tilde = u_r.T @ B
    lam, omega = np.linalg.eig(a_tilde)
    modes = np.empty((m, r), dtype=complex)
    for i in range(r):
        if abs(lam[i]) > 1e-13 * max(1.0, np.max(np.abs(lam))):
            modes[:, i] = (B @ omega[:, i]) / lam[i]
        else:
            modes[:, i] = u_r @ omega[:, i]
    amps = np.linalg.lstsq(modes, Y1[:, 0].astype(complex), rcond=None)[0]
    resid = Y2 - B @ (u_r.T @ Y1)
    tau2 = float(np.sum(resid**2) / resid.size)
    return DmdModel(
        rank=r, u_r=u_r, sigma_r=sig, v_r=v_r, a_tilde=a_tilde, eigvals=lam,
        modes=modes, amplitudes=amps, tau2_hat=tau2,
        n_train=q + 1 if n_train is None else n_train, b_factor=B,
        energy=float(energy), meta={"rank_rule": rank_rule},
    )


def fit_hodmd(Y, d: int = 6, delta_t: int = 3, energy: float = 0.99, rank_override=None,
              rank_rule: str = "singular") -> HodmdModel:
    """HODMD: exact DMD on time-delay snapshots with ``d`` lags, every ``delta_t`` steps."""
    Y = _as_snapshots(Y)
    if rank_rule not in RANK_RULES:
        raise ValueError(f"unknown rank rule {rank_rule!r}; expected one of {RANK_RULES}")
    Y1, Y2 = build_augmented(Y, d, delta_t)
    inner = _fit_pair(Y1, Y2, energy, rank_override, rank_rule, n_train=Y.shape[1])
    if inner.unstable:
        warnings.warn(
            f"HODMD operator has spectral radius {inner.spectral_radius:.6g} > 1",
            UnstableSpectrumWarning,
        )
    return HodmdModel(d=int(d), delta_t=int(delta_t), inner=inner, tau2_aug=inner.tau2_hat,
                      m=Y.shape[0])


def forecast_hodmd(model: HodmdModel, recent, horizon: int, level: float = 0.95):
    """Forecast from the last ``d`` snapshots, ``recent`` of shape ``(m, d)`` oldest first.

    The augmented state advances one step at a time and its newest block is
    read off as the forecast; intervals use the newest block of the
    augmented forecast covariance.
    """
    recent = _as_snapshots(recent, "recent")
    m, d = model.m, model.d
    if recent.shape != (m, d):
        raise ValueError(f"recent must have shape ({m}, {d}), got {recent.shape}")
    if int(horizon) != horizon or horizon < 1:
        raise ValueError(f"horizon must be an integer >= 1, got {horizon}")
    inner = model.inner
    _warn_unstable(inner)
    z = recent.T.reshape(-1)
    newest = slice(m * (d - 1), m * d)
    mean = np.empty((m, horizon))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(horizon):
            z = inner.apply(z)
            mean[:, k] = z[newest]
    var = _marginal_vars(inner, horizon, rows=newest)
    return _gaussian_result(mean, var, level, {"mode": "hodmd", "rank": inner.rank})


# ---------------------------------------------------------------------------
# extended DMD
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dictionary:
    """Lifting functions from output space to ``m~`` observables.

    Built from a name (see :meth:`parse`) or from a list of scalar maps.
    """

    name: str
    degree: int = 1
    centers: Optional[np.ndarray] = None
    gamma: float = 1.0
    funcs: Optional[tuple] = None

    @classmethod
    def parse(cls, text: str, loader: Optional[Callable] = None) -> "Dictionary":
        """``"identity"``, ``"polynomial:k"`` or ``"rbf:centers_file:gamma"``.

        ``loader`` reads the centers file into an ``(m, c)`` array (columns are
        centers); it defaults to :func:`numpy.loadtxt` with comma delimiter.
        """
        parts = text.split(":")
        if parts[0] == "identity" and len(parts) == 1:
            return cls("identity")
        if parts[0] == "polynomial" and len(parts) == 2:
            k = int(parts[1])
            if k < 1:
                raise ValueError("polynomial degree must be >= 1")
            return cls("polynomial", degree=k)
        if parts[0] == "rbf" and len(parts) == 3:
            load = loader or (lambda p: np.loadtxt(p, delimiter=",", ndmin=2))
            centers = np.asarray(load(parts[1]), dtype=float)
            gamma = float(parts[2])
            if not gamma > 0:
                raise ValueError("rbf gamma must be > 0")
            return cls("rbf", centers=centers, gamma=gamma, funcs=(parts[1],))
        raise ValueError(
            f"unknown dictionary {text!r}; use identity, polynomial:k or rbf:centers_file:gamma"
        )

    @classmethod
    def from_callables(cls, funcs: Sequence[Callable]) -> "Dictionary":
        if len(funcs) == 0:
            raise ValueError("dictionary must contain at least one function")
        return cls("callables", funcs=tuple(funcs))

    def spec(self) -> str:
        if self.name == "polynomial":
            return f"polynomial:{self.degree}"
        if self.name == "rbf":
            return f"rbf:{self.funcs[0]}:{self.gamma!r}"
        return self.name

    def lift(self, Y) -> np.ndarray:
        """Lifted snapshots, ``(m~, n)``."""
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if self.name == "identity":
            Z = Y.copy()
        elif self.name == "polynomial":
            Z = _monomials(Y, self.degree)
        elif self.name == "rbf":
            C = self.centers
            if C.shape[0] != Y.shape[0]:
                raise ValueError(f"rbf centers have dimension {C.shape[0]}, data {Y.shape[0]}")
            d2 = np.sum((Y[:, None, :] - C[:, :, None]) ** 2, axis=0)
            Z = np.vstack([Y, np.exp(-self.gamma * d2)])
        else:
            Z = np.array([[f(y) for y in Y.T] for f in self.funcs], dtype=float)
        bad = ~np.all(np.isfinite(Z), axis=1)
        if bad.any():
            raise ValueError(f"dictionary function {int(np.flatnonzero(bad)[0])} is not finite")
        return Z


def _monomials(Y, degree):
    from itertools import combinations_with_replacement

    m = Y.shape[0]
    rows = [np.ones(Y.shape[1])]
    for k in range(1, degree + 1):
        for idx in combinations_with_replacement(range(m), k):
            rows.append(np.prod(Y[list(idx)], axis=0))
    return np.vstack(rows)


@dataclass(frozen=True)
class EdmdModel:
    dictionary: Dictionary
    inner: DmdModel
    p_matrix: np.ndarray
    tau2_edmd: float

    @property
    def a_edmd(self) -> np.ndarray:
        return self.inner.dense()

    @property
    def m(self) -> int:
        return self.p_matrix.shape[0]


def fit_edmd(Y, dictionary="identity", energy: float = 0.99, rank_override=None) -> EdmdModel:
    """EDMD: DMD on lifted snapshots, with a least-squares map ``P`` back to outputs."""
    Y = _as_snapshots(Y)
    if isinstance(dictionary, str):
        dictionary = Dictionary.parse(dictionary)
    elif not isinstance(dictionary, Dictionary):
        dictionary = Dictionary.from_callables(dictionary)
    Z = dictionary.lift(Y)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnstableSpectrumWarning)
        inner = fit_dmd(Z, energy=energy, rank_override=rank_override)
    P = np.linalg.lstsq(Z.T, Y.T, rcond=None)[0].T
    model = EdmdModel(dictionary=dictionary, inner=inner, p_matrix=P, tau2_edmd=inner.tau2_hat)
    if inner.unstable:
        warnings.warn(
            f"EDMD operator has spectral radius {inner.spectral_radius:.6g} > 1",
            UnstableSpectrumWarning,
        )
    return model


def forecast_edmd(model: EdmdModel, y_n, horizon: int, level: float = 0.95):
    """Lift ``y_n``, advance in the lifted space, project back with ``P``."""
    y_n = np.asarray(y_n, dtype=float).ravel()
    if y_n.size != model.m:
        raise ValueError(f"initial state has {y_n.size} entries, model has {model.m}")
    z = model.dictionary.lift(y_n)[:, 0]
    Zf = forecast_dmd(model.inner, z, horizon)
    mean = model.p_matrix @ Zf
    var = _marginal_vars(model.inner, horizon, proj=model.p_matrix)
    return _gaussian_result(mean, var, level, {"mode": "edmd", "rank": model.inner.rank})
