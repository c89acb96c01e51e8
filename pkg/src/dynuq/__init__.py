"""Probabilistic forecasting of dynamical systems.

A parallel partial Gaussian process emulator with Student-t predictive
intervals, and exact / higher-order / extended dynamic mode decomposition
with Gaussian forecast intervals, plus the data and scoring plumbing around
them.
"""

from .dmd import (
    DmdModel,
    EdmdModel,
    HodmdModel,
    fit_dmd,
    fit_edmd,
    fit_hodmd,
    forecast_dmd,
    forecast_dmd_intervals,
    forecast_edmd,
    forecast_hodmd,
)
from .exceptions import ForecastFailureError, NumericalFailureError
from .forecast import ForecastResult
from .kernels import KernelSpec
from .metrics import MetricsReport, avg_interval_length, coverage, heldout_std, rmse
from .ppgp import (
    PPGPRegressor,
    StencilSpec,
    forecast_chains,
    forecast_plugin_mean,
    forecast_rk4_emulated,
)
from .stochastics import Lorenz96Config, RngStream, gen_lorenz96

__version__ = "0.1.0"
