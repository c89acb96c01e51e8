"""Correlation kernels used by the parallel partial Gaussian process.

Two families are supported:

``pow_exp``
    Power exponential, ``K(d) = exp(-d**alpha / gamma)`` with fixed roughness
    ``0 < alpha <= 2``.
``matern_2_5``
    Matern with roughness 5/2,
    ``K(d) = (1 + sqrt(5) d / gamma + 5 d**2 / (3 gamma**2)) exp(-sqrt(5) d / gamma)``.

Each family can be used isotropically (one range parameter, Euclidean
distance) or as a product over input coordinates (one range per coordinate).
Inputs follow the scikit-learn orientation: one row per point.

The nugget is carried by :class:`KernelSpec` but never added by the
functions in this module; callers form ``K + nugget * I`` themselves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numba
import numpy as np

FAMILIES = ("pow_exp", "matern_2_5")
STRUCTURES = ("isotropic", "product")

_SQRT5 = np.sqrt(5.0)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family, structure, range parameters and nugget.

    Parameters
    ----------
    family : {"pow_exp", "matern_2_5"}
    structure : {"isotropic", "product"}
    ranges : sequence of float
        Positive range parameters. One entry for isotropic kernels, one per
        input dimension for product kernels.
    nugget : float
        Non-negative noise-to-signal ratio.
    alpha : float
        Roughness of the power exponential family, ignored for Matern.
    """

    family: str = "matern_2_5"
    structure: str = "isotropic"
    ranges: tuple = (1.0,)
    nugget: float = 0.0
    alpha: float = 1.9

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if self.structure not in STRUCTURES:
            raise ValueError(
                f"unknown kernel structure {self.structure!r}; expected one of {STRUCTURES}"
            )
        ranges = tuple(float(r) for r in np.atleast_1d(self.ranges))
        object.__setattr__(self, "ranges", ranges)
        if len(ranges) == 0:
            raise ValueError("at least one range parameter is required")
        if not all(np.isfinite(r) and r > 0 for r in ranges):
            raise ValueError(f"range parameters must be finite and > 0, got {ranges}")
        if self.structure == "isotropic" and len(ranges) != 1:
            raise ValueError("isotropic kernels take exactly one range parameter")
        if not (np.isfinite(self.nugget) and self.nugget >= 0):
            raise ValueError(f"nugget must be finite and >= 0, got {self.nugget}")
        if self.family == "pow_exp" and not 0 < self.alpha <= 2:
            raise ValueError(f"power exponential roughness must lie in (0, 2], got {self.alpha}")

    @property
    def n_ranges(self) -> int:
        return len(self.ranges)

    def check_dim(self, p: int) -> None:
        if self.structure == "product" and self.n_ranges != p:
            raise ValueError(
                f"product kernel has {self.n_ranges} ranges but inputs have dimension {p}"
            )

    def with_params(self, ranges: Sequence[float], nugget: float) -> "KernelSpec":
        return replace(self, ranges=tuple(ranges), nugget=float(nugget))

    def to_dict(self) -> dict:
        out = {"family": self.family, "structure": self.structure}
        if self.family == "pow_exp":
            out["alpha"] = self.alpha
        out["ranges"] = list(self.ranges)
        out["nugget"] = self.nugget
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        kwargs = dict(
            family=d["family"],
            structure=d["structure"],
            ranges=tuple(d["ranges"]),
            nugget=d.get("nugget", 0.0),
        )
        if "alpha" in d:
            kwargs["alpha"] = d["alpha"]
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "KernelSpec":
        return cls.from_dict(json.loads(text))


def profile(spec: KernelSpec, d, gamma: float):
    """Correlation as a function of a non-negative distance, for one range."""
    d = np.asarray(d, dtype=float)
    if spec.family == "matern_2_5":
        s = _SQRT5 * d / gamma
        return (1.0 + s + s * s / 3.0) * np.exp(-s)
    return np.exp(-(d**spec.alpha) / gamma)


def _as_points(X, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty 2-d array of points")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite entries")
    return X


# The loops below take coordinate-major inputs (p, n) so that the innermost
# loop runs over contiguous memory of the second point set.


@numba.njit(cache=True, nogil=True, fastmath=True)
def _matern_product(AT, BT, inv_ranges):
    p, na = AT.shape
    nb = BT.shape[1]
    out = np.empty((na, nb))
    poly = np.empty(nb)
    ssum = np.empty(nb)
    for i in range(na):
        poly[:] = 1.0
        ssum[:] = 0.0
        for l in range(p):
            a = AT[l, i]
            c = inv_ranges[l]
            for j in range(nb):
                s = abs(a - BT[l, j]) * c
                poly[j] *= 1.0 + s + s * s * (1.0 / 3.0)
                ssum[j] += s
        for j in range(nb):
            out[i, j] = poly[j] * np.exp(-ssum[j])
    return out


@numba.njit(cache=True, nogil=True, fastmath=True)
def _matern_iso(AT, BT, inv_range):
    p, na = AT.shape
    nb = BT.shape[1]
    out = np.empty((na, nb))
    d2 = np.empty(nb)
    for i in range(na):
        d2[:] = 0.0
        for l in range(p):
            a = AT[l, i]
            for j in range(nb):
                diff = a - BT[l, j]
                d2[j] += diff * diff
        for j in range(nb):
            s = np.sqrt(d2[j]) * inv_range
            out[i, j] = (1.0 + s + s * s * (1.0 / 3.0)) * np.exp(-s)
    return out


@numba.njit(cache=True, nogil=True, fastmath=True)
def _powexp_product(AT, BT, inv_ranges, alpha):
    p, na = AT.shape
    nb = BT.shape[1]
    out = np.empty((na, nb))
    acc = np.empty(nb)
    for i in range(na):
        acc[:] = 0.0
        for l in range(p):
            a = AT[l, i]
            c = inv_ranges[l]
            for j in range(nb):
                acc[j] += abs(a - BT[l, j]) ** alpha * c
        for j in range(nb):
            out[i, j] = np.exp(-acc[j])
    return out


@numba.njit(cache=True, nogil=True, fastmath=True)
def _powexp_iso(AT, BT, inv_range, alpha):
    p, na = AT.shape
    nb = BT.shape[1]
    out = np.empty((na, nb))
    d2 = np.empty(nb)
    half = 0.5 * alpha
    for i in range(na):
        d2[:] = 0.0
        for l in range(p):
            a = AT[l, i]
            for j in range(nb):
                diff = a - BT[l, j]
                d2[j] += diff * diff
        for j in range(nb):
            out[i, j] = np.exp(-(d2[j] ** half) * inv_range)
    return out


def _pairwise(spec: KernelSpec, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    spec.check_dim(A.shape[1])
    A = np.ascontiguousarray(A.T, dtype=np.float64)
    B = np.ascontiguousarray(B.T, dtype=np.float64)
    inv = 1.0 / np.asarray(spec.ranges)
    if spec.family == "matern_2_5":
        inv = inv * _SQRT5
        if spec.structure == "isotropic":
            return _matern_iso(A, B, inv[0])
        return _matern_product(A, B, inv)
    if spec.structure == "isotropic":
        return _powexp_iso(A, B, inv[0], float(spec.alpha))
    return _powexp_product(A, B, inv, float(spec.alpha))


def kernel_eval(spec: KernelSpec, x, x_prime) -> float:
    """Correlation between two points; equals 1 when they coincide."""
    x = np.asarray(x, dtype=float).ravel()
    x_prime = np.asarray(x_prime, dtype=float).ravel()
    if x.shape != x_prime.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {x_prime.shape[0]}")
    return float(_pairwise(spec, x[None, :], x_prime[None, :])[0, 0])


def corr_matrix(spec: KernelSpec, X) -> np.ndarray:
    """Correlation matrix of the rows of ``X``, without the nugget.

    The result is exactly symmetric with unit diagonal.
    """
    X = _as_points(X)
    K = _pairwise(spec, X, X)
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, 1.0)
    return K


def cross_corr(spec: KernelSpec, X, x_star) -> np.ndarray:
    """Correlations between training rows ``X`` and test point(s) ``x_star``.

    Returns an ``n`` vector for a single test point, or an ``(n, q)`` array
    when ``x_star`` holds ``q`` rows.
    """
    X = _as_points(X)
    single = np.ndim(x_star) == 1
    Xs = _as_points(x_star, "x_star")
    k = _pairwise(spec, X, Xs)
    return k[:, 0] if single else k
