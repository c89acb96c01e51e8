"""Parallel partial Gaussian process emulator and its forecast drivers.

All output coordinates share one correlation structure ``K + nugget * I``
while keeping their own mean and variance, which are integrated out under
the reference prior. The one-step predictive law of every coordinate is then
a Student-t with ``n - 1`` degrees of freedom, and the cost of predicting
``m`` coordinates at a point is one pair of triangular solves of size ``n``
plus ``O(n m)`` accumulation.

Range and nugget parameters are fixed at the maximum marginal posterior
mode: log marginal likelihood plus the jointly robust prior, optimized over
log inverse ranges and log nugget.

Arrays follow the scikit-learn orientation in this module: ``X`` is
``(n_samples, p)`` and ``y`` is ``(n_samples, m)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, optimize, stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted, validate_data

from .exceptions import ForecastFailureError, NumericalFailureError
from .forecast import ForecastResult
from .kernels import KernelSpec, corr_matrix, cross_corr
from .stochastics import RngStream, sample_student_t

OPTIMIZERS = ("quasi-newton", "quasi-newton-numeric-grad", "nelder-mead")
JITTER_FLOOR = 1e-10
DIVERGENCE_FACTOR = 1e6

_LOG_BETA_SPAN = 12.0  # search box half width, in log units around the prior mode
_LOG_NUGGET_BOUNDS = (np.log(1e-14), np.log(1e3))


@dataclass(frozen=True)
class FitConfig:
    """Settings for the marginal posterior mode search."""

    optimizer: str = "quasi-newton"
    restarts: int = 3
    max_iters: int = 200
    prior_a: float = 0.2
    fix_nugget_zero: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


# ---------------------------------------------------------------------------
# factorization and objective
# ---------------------------------------------------------------------------


def _cholesky(K: np.ndarray, nugget: float):
    """Lower Cholesky factor of ``K + nugget I`` and the jitter actually used."""
    n = K.shape[0]
    try:
        return linalg.cholesky(K + nugget * np.eye(n), lower=True), 0.0
    except linalg.LinAlgError:
        if nugget > 0:
            raise
    # deterministic outputs with nugget fixed at zero: retry with the floor
    return linalg.cholesky(K + JITTER_FLOOR * np.eye(n), lower=True), JITTER_FLOOR


class _Profile:
    """Quantities of the integrated likelihood at one ``(ranges, nugget)``."""

    def __init__(self, spec: KernelSpec, X: np.ndarray, Y: np.ndarray, fit_mean: bool = True,
                 factor=None):
        n = X.shape[0]
        self.K = corr_matrix(spec, X)
        if factor is not None:
            # restoring a saved model: reuse its factor and jitter
            self.L, self.jitter = factor
        else:
            try:
                self.L, self.jitter = _cholesky(self.K, spec.nugget)
            except linalg.LinAlgError:
                raise NumericalFailureError(
                    "Cholesky factorization of K + nugget*I failed",
                    params={"ranges": list(spec.ranges), "nugget": spec.nugget},
                ) from None
        ones = np.ones(n)
        self.kinv_ones = linalg.cho_solve((self.L, True), ones)
        self.ones_quad = float(ones @ self.kinv_ones)
        if fit_mean:
            self.mu = (Y.T @ self.kinv_ones) / self.ones_quad
        else:
            self.mu = np.zeros(Y.shape[1])
        self.R = Y - self.mu
        self.kinv_R = linalg.cho_solve((self.L, True), self.R)
        self.S2 = np.einsum("ij,ij->j", self.R, self.kinv_R)
        self.logdet = 2.0 * np.sum(np.log(np.diag(self.L)))


def log_kernel_derivs(spec: KernelSpec, X):
    """Derivatives of ``log K`` with respect to each log inverse range.

    Yields one ``(n, n)`` array per range parameter; multiplying by ``K``
    elementwise gives ``dK / d log beta_l``.
    """
    X = np.asarray(X, dtype=float)
    beta = 1.0 / np.asarray(spec.ranges)
    if spec.structure == "product":
        dists = [np.abs(X[:, l, None] - X[None, :, l]) for l in range(X.shape[1])]
    else:
        diff = X[:, None, :] - X[None, :, :]
        dists = [np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))]
    for b, d in zip(beta, dists):
        if spec.family == "matern_2_5":
            s = np.sqrt(5.0) * b * d
            yield -(s * s) * (1.0 + s) / (3.0 * (1.0 + s + s * s / 3.0))
        else:
            yield -b * d**spec.alpha


def _varying(Y: np.ndarray) -> np.ndarray:
    return np.ptp(Y, axis=0) > 0


def log_marginal_lik(spec: KernelSpec, X, Y) -> float:
    """Log marginal likelihood of ``(ranges, nugget)`` up to an additive constant.

    Means and variances of all coordinates are integrated out under the
    reference prior::

        -m/2 log|K~| - m/2 log(1' K~^-1 1) - (n-1)/2 sum_j log S_j^2

    where ``S_j^2`` is the generalized residual sum of squares of column
    ``j``. Columns of ``Y`` that are exactly constant carry no information
    about the correlation and are left out.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = X.shape[0]
    if n < 2:
        raise ValueError("at least two observations are required")
    keep = _varying(Y)
    Y = Y[:, keep]
    m = Y.shape[1]
    prof = _Profile(spec, X, Y)
    if m == 0:
        return 0.0
    return float(
        -0.5 * m * prof.logdet
        - 0.5 * m * np.log(prof.ones_quad)
        - 0.5 * (n - 1) * np.sum(np.log(prof.S2))
    )


def jr_prior_coefficients(X, n_ranges: int) -> np.ndarray:
    """Scale coefficients ``C_l = n^(-1/p) |max_l - min_l|`` of the jointly robust prior."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if n_ranges == p:
        spans = np.ptp(X, axis=0)
    elif n_ranges == 1:
        # isotropic kernels: the range acts on Euclidean distance
        spans = np.array([np.linalg.norm(np.ptp(X, axis=0))])
    else:
        raise ValueError(f"{n_ranges} range parameters do not match input dimension {p}")
    C = n ** (-1.0 / n_ranges) * spans
    if not np.any(C > 0):
        raise ValueError("all input coordinates are constant; the prior scale is degenerate")
    return C


def log_jr_prior(betas, eta: float, X, prior_a: float = 0.2) -> float:
    """Log jointly robust prior density of inverse ranges and nugget, up to a constant."""
    betas = np.atleast_1d(np.asarray(betas, dtype=float))
    if np.any(betas <= 0) or eta < 0:
        raise ValueError("inverse ranges must be > 0 and nugget >= 0")
    n = np.asarray(X).shape[0]
    pt = betas.size
    C = jr_prior_coefficients(X, pt)
    return jr_log_density(betas, eta, C, prior_a, _prior_b(n, pt, prior_a))


def jr_log_density(betas, eta, C, a, b) -> float:
    """``a log(s) - b s`` with ``s = C' betas + eta``."""
    s = float(np.dot(C, np.atleast_1d(betas)) + eta)
    return a * np.log(s) - b * s


def _prior_b(n: int, n_ranges: int, prior_a: float) -> float:
    return n ** (-1.0 / n_ranges) * (prior_a + n_ranges)


class _Objective:
    """Negative log marginal posterior on ``theta = (log beta, [log eta])``."""

    def __init__(self, template: KernelSpec, X, Y, n_ranges, cfg: FitConfig, fixed_nugget=None):
        self.template = template
        self.X = X
        self.Y = Y[:, _varying(Y)]
        self.n_ranges = n_ranges
        self.cfg = cfg
        self.C = jr_prior_coefficients(X, n_ranges)
        self.n_samples = X.shape[0]
        self.b = _prior_b(X.shape[0], n_ranges, cfg.prior_a)
        if cfg.fix_nugget_zero:
            fixed_nugget = 0.0
        self.fixed_nugget = fixed_nugget
        self.nugget_fixed = fixed_nugget is not None

    def unpack(self, theta):
        betas = np.exp(theta[: self.n_ranges])
        if self.nugget_fixed:
            return betas, float(self.fixed_nugget)
        return betas, float(np.exp(theta[self.n_ranges]))

    def log_post(self, theta) -> float:
        betas, eta = self.unpack(theta)
        spec = self.template.with_params(1.0 / betas, eta)
        s = float(self.C @ betas + eta)
        lp = self.cfg.prior_a * np.log(s) - self.b * s
        if self.Y.shape[1] == 0:
            return lp
        return log_marginal_lik(spec, self.X, self.Y) + lp

    def value_and_grad(self, theta):
        """Negative log posterior and its gradient in ``theta``."""
        try:
            return self._value_and_grad(theta)
        except (NumericalFailureError, FloatingPointError, ValueError, linalg.LinAlgError):
            return 1e100, np.zeros_like(theta)

    def _value_and_grad(self, theta):
        betas, eta = self.unpack(theta)
        spec = self.template.with_params(1.0 / betas, eta)
        s = float(self.C @ betas + eta)
        a = self.cfg.prior_a
        lp = a * np.log(s) - self.b * s
        dprior = a / s - self.b
        grad = np.empty(len(theta))
        grad[: self.n_ranges] = dprior * self.C * betas
        if not self.nugget_fixed:
            grad[self.n_ranges] = dprior * eta
        Y = self.Y
        n, m = Y.shape
        if m == 0:
            return -lp, -grad
        prof = _Profile(spec, self.X, Y)
        val = (
            -0.5 * m * prof.logdet
            - 0.5 * m * np.log(prof.ones_quad)
            - 0.5 * (n - 1) * np.sum(np.log(prof.S2))
            + lp
        )
        if not np.isfinite(val):
            return 1e100, np.zeros_like(theta)
        # d logL = <G, dK> for any perturbation dK of K~
        Kinv = linalg.cho_solve((prof.L, True), np.eye(n))
        u = prof.kinv_ones
        Rs = prof.kinv_R / np.sqrt(prof.S2)
        G = -0.5 * m * Kinv + (0.5 * m / prof.ones_quad) * np.outer(u, u)
        G += 0.5 * (n - 1) * (Rs @ Rs.T)
        GK = G * prof.K
        for l, dlog in enumerate(log_kernel_derivs(spec, self.X)):
            grad[l] += np.sum(GK * dlog)
        if not self.nugget_fixed:
            grad[self.n_ranges] += eta * np.trace(G)
        return -val, -grad

    def __call__(self, theta) -> float:
        try:
            val = self.log_post(theta)
        except (NumericalFailureError, FloatingPointError, ValueError):
            return 1e100
        if not np.isfinite(val):
            return 1e100
        return -val

    def initial_points(self, restarts: int, seed: int):
        s_mode = self.cfg.prior_a / self.b
        parts = self.n_ranges + (0 if self.nugget_fixed else 1)
        C = np.where(self.C > 0, self.C, np.max(self.C))
        base_beta = np.log(s_mode / parts / C)
        base = base_beta if self.nugget_fixed else np.append(base_beta, np.log(s_mode / parts))
        rng = np.random.default_rng(seed)
        pts = [base]
        for _ in range(restarts - 1):
            pts.append(base + rng.normal(scale=1.0, size=base.size))
        # the prior mode can sit where K is nearly the identity and the
        # likelihood is flat; also start from ranges on the scale of the data
        wide = np.log(self.n_samples ** (-1.0 / self.n_ranges) / C)
        pts.append(wide if self.nugget_fixed else np.append(wide, np.log(1e-6)))
        return [np.clip(p, *zip(*self.bounds())) for p in pts]

    def bounds(self):
        s_mode = self.cfg.prior_a / self.b
        C = np.where(self.C > 0, self.C, np.max(self.C))
        centre = np.log(s_mode / C)
        bnds = [(c - _LOG_BETA_SPAN, c + _LOG_BETA_SPAN) for c in centre]
        if not self.nugget_fixed:
            bnds.append(_LOG_NUGGET_BOUNDS)
        return bnds


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------


class PPGPRegressor(RegressorMixin, BaseEstimator):
    """Parallel partial Gaussian process emulator.

    Parameters
    ----------
    kernel : {"matern_2_5", "pow_exp"}
    structure : {"isotropic", "product"}
    alpha : float
        Roughness of the power exponential kernel.
    ranges, nugget : optional
        When both are given the marginal posterior search is skipped and the
        values are used as is.
    fix_nugget_zero : bool
        Treat the outputs as noise free.
    optimizer : {"quasi-newton", "quasi-newton-numeric-grad", "nelder-mead"}
        Limited-memory BFGS with the analytic gradient, the same with
        finite-difference gradients, or the simplex method.
    n_restarts, max_iter : int
    prior_a : float
        Shape parameter ``a`` of the jointly robust prior.
    fit_mean : bool
        Estimate per-coordinate means by generalized least squares. With
        ``False`` the means are fixed at zero and the predictive mean reduces
        to kernel ridge regression with ridge ``nugget``.
    random_state : int
        Seed for the restart jitter.

    Attributes
    ----------
    kernel_spec_ : KernelSpec
        Kernel with fitted ranges and nugget.
    chol_ : ndarray (n, n)
        Lower Cholesky factor of ``K + nugget I``.
    mu_, sigma2_ : ndarray (m,)
    weights_ : ndarray (m, n)
        Rows ``(y_j - mu_j 1)' K~^-1``.
    ones_quad_ : float
        ``1' K~^-1 1``.
    objective_ : float
        Log marginal posterior at the returned parameters.
    converged_ : bool
    """

    def __init__(
        self,
        kernel="matern_2_5",
        structure="isotropic",
        alpha=1.9,
        ranges=None,
        nugget=None,
        fix_nugget_zero=False,
        optimizer="quasi-newton",
        n_restarts=3,
        max_iter=200,
        prior_a=0.2,
        fit_mean=True,
        random_state=0,
    ):
        self.kernel = kernel
        self.structure = structure
        self.alpha = alpha
        self.ranges = ranges
        self.nugget = nugget
        self.fix_nugget_zero = fix_nugget_zero
        self.optimizer = optimizer
        self.n_restarts = n_restarts
        self.max_iter = max_iter
        self.prior_a = prior_a
        self.fit_mean = fit_mean
        self.random_state = random_state

    def _template(self, p: int) -> KernelSpec:
        n_ranges = p if self.structure == "product" else 1
        return KernelSpec(
            family=self.kernel,
            structure=self.structure,
            ranges=(1.0,) * n_ranges,
            nugget=0.0,
            alpha=self.alpha,
        )

    def fit_config(self) -> FitConfig:
        return FitConfig(
            optimizer=self.optimizer,
            restarts=self.n_restarts,
            max_iters=self.max_iter,
            prior_a=self.prior_a,
            fix_nugget_zero=self.fix_nugget_zero,
            seed=0 if self.random_state is None else int(self.random_state),
        )

    def fit(self, X, y):
        X, y = validate_data(self, X, y, multi_output=True, y_numeric=True)
        y = np.asarray(y, dtype=float)
        self._single_output = y.ndim == 1
        Y = y[:, None] if y.ndim == 1 else y
        n = X.shape[0]
        if n < 2:
            raise ValueError("PP-GP needs at least two training points")
        template = self._template(X.shape[1])
        cfg = self.fit_config()
        self.converged_ = True
        self.fit_history_ = []

        if self.ranges is not None and self.nugget is not None:
            spec = template.with_params(np.atleast_1d(self.ranges), self.nugget)
            self.objective_ = np.nan
        else:
            spec = self._search(template, X, Y, cfg)
        self.X_train_ = X
        self.y_train_ = Y
        self._set_posterior(spec)
        return self

    def _search(self, template, X, Y, cfg):
        # a user-supplied nugget is held fixed while the ranges move
        pinned = None if self.nugget is None else float(self.nugget)
        obj = _Objective(template, X, Y, template.n_ranges, cfg, fixed_nugget=pinned)
        starts = obj.initial_points(cfg.restarts, cfg.seed)
        best = None
        for x0 in starts:
            f0 = obj(x0)
            if cfg.optimizer == "nelder-mead":
                res = optimize.minimize(
                    obj, x0, method="Nelder-Mead",
                    options={"maxiter": cfg.max_iters * len(x0), "xatol": 1e-6, "fatol": 1e-8},
                )
                res.x = np.clip(res.x, *zip(*obj.bounds()))
                res.fun = obj(res.x)
            elif cfg.optimizer == "quasi-newton":
                res = optimize.minimize(
                    obj.value_and_grad, x0, jac=True, method="L-BFGS-B", bounds=obj.bounds(),
                    options={"maxiter": cfg.max_iters},
                )
            else:
                res = optimize.minimize(
                    obj, x0, method="L-BFGS-B", bounds=obj.bounds(),
                    options={"maxiter": cfg.max_iters, "eps": 1e-7},
                )
            x, fx = (res.x, res.fun) if res.fun <= f0 else (x0, f0)
            self.fit_history_.append(
                {"start": x0.tolist(), "start_objective": -f0, "objective": -fx,
                 "converged": bool(res.success)}
            )
            if best is None or fx < best[1]:
                best = (x, fx, bool(res.success))
        if best[1] >= 1e100:
            raise NumericalFailureError(
                "Cholesky factorization failed at every restart",
                params={"starts": [s.tolist() for s in starts]},
            )
        x, fx, ok = best
        self.objective_ = -float(fx)
        self.converged_ = ok
        if not ok:
            warnings.warn(
                "marginal posterior search did not converge; using the best point found",
                ConvergenceWarning,
            )
        betas, eta = obj.unpack(x)
        return template.with_params(1.0 / betas, eta)

    @classmethod
    def _from_saved(cls, params, spec, X, Y, factor, single_output, objective, converged):
        est = cls(**params)
        est.X_train_ = np.asarray(X, dtype=float)
        est.y_train_ = np.asarray(Y, dtype=float)
        est.n_features_in_ = est.X_train_.shape[1]
        est._single_output = bool(single_output)
        est.objective_ = objective
        est.converged_ = converged
        est.fit_history_ = []
        est._set_posterior(spec, factor=factor)
        return est

    def _set_posterior(self, spec: KernelSpec, factor=None):
        X, Y = self.X_train_, self.y_train_
        n = X.shape[0]
        prof = _Profile(spec, X, Y, fit_mean=self.fit_mean, factor=factor)
        self.kernel_spec_ = spec
        self.chol_ = prof.L
        self.chol_inv_ = linalg.solve_triangular(prof.L, np.eye(n), lower=True)
        self.jitter_ = prof.jitter
        self.kinv_ones_ = prof.kinv_ones
        self.ones_quad_ = prof.ones_quad
        self.mu_ = prof.mu
        self.weights_ = prof.kinv_R.T.copy()
        dof = n - 1 if self.fit_mean else n
        self.sigma2_ = np.maximum(prof.S2, 0.0) / dof
        self.dof_ = dof
        self.train_max_abs_ = float(np.max(np.abs(Y))) if Y.size else 0.0

    # -- prediction -------------------------------------------------------

    def _check_X(self, X):
        check_is_fitted(self, "chol_")
        single = np.ndim(X) == 1
        X = check_array(np.atleast_2d(X), dtype=float)
        if X.shape[1] != self.X_train_.shape[1]:
            raise ValueError(
                f"X has {X.shape[1]} features, model was fitted with {self.X_train_.shape[1]}"
            )
        return X, single

    def _moments(self, X, need_scale=True):
        """Predictive location ``(q, m)`` and ``K*`` ``(q,)`` for rows of ``X``."""
        k = cross_corr(self.kernel_spec_, self.X_train_, X)  # (n, q)
        loc = self.mu_ + (self.weights_ @ k).T
        if not need_scale:
            return loc, None
        v = self.chol_inv_ @ k
        kk = np.einsum("ij,ij->j", v, v)
        kinv_k1 = self.kinv_ones_ @ k
        kstar = 1.0 + self.kernel_spec_.nugget + self.jitter_ - kk
        if self.fit_mean:
            kstar = kstar + (1.0 - kinv_k1) ** 2 / self.ones_quad_
        return loc, np.maximum(kstar, 0.0)

    def predict_t(self, X):
        """Student-t predictive parameters.

        Returns
        -------
        location : ndarray (q, m)
        scale2 : ndarray (q, m)
            Squared scale ``sigma2_j * K*``.
        dof : int
        """
        X, _ = self._check_X(X)
        loc, kstar = self._moments(X)
        return loc, kstar[:, None] * self.sigma2_[None, :], self.dof_

    def predict(self, X, return_std=False):
        X, single = self._check_X(X)
        loc, kstar = self._moments(X, need_scale=return_std)
        if self._single_output:
            loc = loc[:, 0]
        if single:
            loc = loc[0]
        if not return_std:
            return loc
        scale2 = kstar[:, None] * self.sigma2_[None, :]
        # standard deviation of a t with dof > 2; infinite otherwise
        factor = self.dof_ / (self.dof_ - 2) if self.dof_ > 2 else np.inf
        std = np.sqrt(scale2 * factor)
        if self._single_output:
            std = std[:, 0]
        if single:
            std = std[0]
        return loc, std

    def predict_interval(self, X, level=0.95):
        """Central Student-t interval, shapes ``(q, m)``."""
        loc, scale2, dof = self.predict_t(X)
        q = stats.t.ppf(0.5 + level / 2, dof)
        half = q * np.sqrt(scale2)
        return loc - half, loc + half

    def prediction_weights(self, x_star):
        """Weights of the predictive mean as an average of training outputs.

        Returns
        -------
        v : ndarray (n,)
            Row vector with ``Y' v`` equal to the predictive mean; sums to one.
        wk : ndarray (m,)
            Kernel-residual part ``W k(x*)``; ``mu_ + wk`` is the mean too.
        """
        X, _ = self._check_X(x_star)
        k = cross_corr(self.kernel_spec_, self.X_train_, X[0])
        kinv_k = linalg.cho_solve((self.chol_, True), k)
        if self.fit_mean:
            v = (1.0 - self.kinv_ones_ @ k) * self.kinv_ones_ / self.ones_quad_ + kinv_k
        else:
            v = kinv_k
        return v, self.weights_ @ k

    @property
    def n_outputs_(self):
        return self.y_train_.shape[1]


# ---------------------------------------------------------------------------
# forecasting
# ---------------------------------------------------------------------------


def _identity(states):
    return states


def _chain_streams(seed: int, S: int):
    return [RngStream(seed, s).generator() for s in range(S)]


def _summarize(samples, alive, level, seed, keep_samples, meta):
    S = samples.shape[0]
    n_dead = int(S - alive.sum())
    if n_dead * 2 > S:
        raise ForecastFailureError(
            f"{n_dead} of {S} chains diverged", step=meta.get("first_divergence_step")
        )
    meta = dict(meta, diverged=n_dead, chains=S)
    res = ForecastResult.from_samples(
        samples[alive], level=level, seed=seed, keep_samples=keep_samples, meta=meta
    )
    return res


def forecast_chains(
    model: PPGPRegressor,
    y_n,
    horizon: int,
    n_chains: int = 100,
    level: float = 0.95,
    seed: int = 0,
    input_map: Callable = _identity,
    keep_samples: bool = True,
) -> ForecastResult:
    """Forecast by iterating the one-step predictive law along sampled chains.

    Each chain starts at ``y_n``; at every step each output coordinate is
    drawn independently from its marginal Student-t predictive law at the
    chain's current input ``input_map(state)``. Chains whose values go
    non-finite or exceed ``1e6`` times the training magnitude are marked
    diverged and excluded from the summary.

    ``input_map`` maps an ``(S, m)`` array of current states to the
    ``(S, p)`` model inputs.
    """
    check_is_fitted(model, "chol_")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    y_n = np.asarray(y_n, dtype=float).ravel()
    m = y_n.size
    gens = _chain_streams(seed, n_chains)
    states = np.tile(y_n, (n_chains, 1))
    samples = np.full((n_chains, m, horizon), np.nan)
    alive = np.ones(n_chains, dtype=bool)
    limit = DIVERGENCE_FACTOR * max(model.train_max_abs_, 1.0)
    first_bad = None
    for step in range(horizon):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        loc, scale2, dof = model.predict_t(input_map(states[idx]))
        draws = np.stack([sample_student_t(dof, gens[s], size=m) for s in idx])
        new = loc + np.sqrt(scale2) * draws
        bad = ~np.all(np.isfinite(new) & (np.abs(new) <= limit), axis=1)
        if bad.any() and first_bad is None:
            first_bad = step + 1
        alive[idx[bad]] = False
        states[idx] = new
        samples[idx[~bad], :, step] = new[~bad]
    return _summarize(
        samples, alive, level, seed, keep_samples,
        {"mode": "chains", "first_divergence_step": first_bad},
    )


def forecast_plugin_mean(model: PPGPRegressor, y_n, horizon: int, input_map: Callable = _identity):
    """Deterministic trajectory obtained by iterating the predictive mean.

    Returns an ``(m, horizon)`` array.
    """
    check_is_fitted(model, "chol_")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    state = np.asarray(y_n, dtype=float).ravel()[None, :]
    out = np.empty((state.shape[1], horizon))
    for step in range(horizon):
        X, _ = model._check_X(input_map(state))
        state, _ = model._moments(X, need_scale=False)
        if not np.all(np.isfinite(state)):
            raise ForecastFailureError(f"non-finite forecast at step {step + 1}", step=step + 1)
        out[:, step] = state[0]
    return out


@dataclass(frozen=True)
class StencilSpec:
    """Cyclic neighbourhood offsets forming the input of a local tendency model.

    The default ``(-2, -1, 0, 1)`` matches the Lorenz 96 tendency of
    coordinate ``j``, which depends on ``y[j-2], y[j-1], y[j], y[j+1]``.
    """

    offsets: tuple = (-2, -1, 0, 1)

    def inputs(self, states: np.ndarray) -> np.ndarray:
        """``(S, m)`` states to ``(S * m, len(offsets))`` stencil inputs."""
        states = np.atleast_2d(states)
        cols = [np.roll(states, -o, axis=1) for o in self.offsets]
        return np.stack(cols, axis=-1).reshape(-1, len(self.offsets))

    def training_pairs(self, states: np.ndarray, derivs: np.ndarray):
        """Pool stencil inputs and tendencies over coordinates and time.

        ``states`` and ``derivs`` are ``(m, T)`` snapshot matrices; the result
        holds ``m * T`` rows ordered time-major.
        """
        X = self.inputs(np.asarray(states, dtype=float).T)
        y = np.asarray(derivs, dtype=float).T.reshape(-1)
        return X, y


def subsample_pairs(X, y, n_sub: int, seed: int):
    """Uniform subsample without replacement; returns ``(X_sub, y_sub, index)``."""
    n = X.shape[0]
    if n_sub >= n:
        idx = np.arange(n)
    else:
        idx = np.sort(RngStream(seed, 0).generator().choice(n, size=n_sub, replace=False))
    return X[idx], y[idx], idx


def forecast_rk4_emulated(
    model: PPGPRegressor,
    y_n,
    horizon: int,
    h: float,
    n_chains: int = 100,
    level: float = 0.95,
    seed: int = 0,
    stencil: StencilSpec = StencilSpec(),
    keep_samples: bool = True,
) -> ForecastResult:
    """Integrate an emulated tendency with RK4 along sampled chains.

    The model maps stencil inputs to the scalar tendency of one coordinate.
    Every step takes one RK4 step with the predictive mean at all four
    stages, then perturbs coordinate ``j`` by ``h * eps_j`` where ``eps_j``
    is a centred Student-t draw with the predictive scale at the step's
    starting state.
    """
    check_is_fitted(model, "chol_")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if model.n_outputs_ != 1:
        raise ValueError("the tendency emulator must have a single output")
    y_n = np.asarray(y_n, dtype=float).ravel()
    m = y_n.size
    gens = _chain_streams(seed, n_chains)
    states = np.tile(y_n, (n_chains, 1))
    samples = np.full((n_chains, m, horizon), np.nan)
    alive = np.ones(n_chains, dtype=bool)
    limit = DIVERGENCE_FACTOR * max(np.max(np.abs(y_n)), 1.0)
    first_bad = None

    def field(Y, need_scale=False):
        loc, kstar = model._moments(stencil.inputs(Y), need_scale=need_scale)
        loc = loc[:, 0].reshape(Y.shape)
        if kstar is None:
            return loc, None
        return loc, (kstar * model.sigma2_[0]).reshape(Y.shape)

    with np.errstate(all="ignore"):
        for step in range(horizon):
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            Y = states[idx]
            k1, scale2 = field(Y, need_scale=True)
            k2, _ = field(Y + 0.5 * h * k1)
            k3, _ = field(Y + 0.5 * h * k2)
            k4, _ = field(Y + h * k3)
            new = Y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if np.any(scale2 > 0):
                draws = np.stack([sample_student_t(model.dof_, gens[s], size=m) for s in idx])
                new = new + h * np.sqrt(scale2) * draws
            bad = ~np.all(np.isfinite(new) & (np.abs(new) <= limit), axis=1)
            if bad.any() and first_bad is None:
                first_bad = step + 1
            alive[idx[bad]] = False
            states[idx] = new
            samples[idx[~bad], :, step] = new[~bad]
    return _summarize(
        samples, alive, level, seed, keep_samples,
        {"mode": "rk4", "first_divergence_step": first_bad},
    )
