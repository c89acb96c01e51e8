"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The Lorenz 96 runs (criteria 1 to 3) share one module-scoped fixture and take
several minutes on a single core.
"""

import math
import time
import warnings

import numpy as np
import pytest

import conftest
from conftest import linear_trajectory, stable_matrix
from dynuq.cli import main as cli_main
from dynuq.dmd import (
    UnstableSpectrumWarning,
    dmd_posterior,
    fit_dmd,
    fit_edmd,
    fit_hodmd,
    forecast_dmd_intervals,
    forecast_hodmd,
)
from dynuq.io import DatasetManifest, load_forecast, load_snapshots, write_matrix
from dynuq.kernels import KernelSpec, corr_matrix, cross_corr
from dynuq.metrics import avg_interval_length, coverage, heldout_std, rmse
from dynuq.ppgp import PPGPRegressor, StencilSpec, forecast_rk4_emulated, subsample_pairs
from dynuq.stochastics import Lorenz96Config, RngStream, gen_lorenz96, integrate

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning", "ignore::UserWarning")

LORENZ_SEEDS = (0, 1, 2, 3, 4)
N_TRAIN = 100


def record(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
    conftest.ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def lorenz_run(seed):
    states, derivs = gen_lorenz96(Lorenz96Config(seed=seed))
    train = states[:, :N_TRAIN]
    truth = states[:, N_TRAIN : N_TRAIN + 900]
    stencil = StencilSpec()
    X, y = stencil.training_pairs(train, derivs[:, :N_TRAIN])
    X, y, _ = subsample_pairs(X, y, 500, seed)
    model = PPGPRegressor(kernel="matern_2_5", structure="product").fit(X, y)
    pp = forecast_rk4_emulated(model, train[:, -1], 900, 0.01, n_chains=100, seed=seed,
                               stencil=stencil, keep_samples=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnstableSpectrumWarning)
        dmd = forecast_dmd_intervals(fit_dmd(train, energy=0.99), train[:, -1], 500)
        hod = forecast_hodmd(fit_hodmd(train, d=6, delta_t=3, energy=0.99), train[:, -6:], 500)
    return {"truth": truth, "ppgp": pp, "dmd": dmd, "hodmd": hod}


@pytest.fixture(scope="module")
def lorenz():
    t0 = time.perf_counter()
    runs = {s: lorenz_run(s) for s in LORENZ_SEEDS}
    print(f"Lorenz 96 runs over {len(LORENZ_SEEDS)} seeds took {time.perf_counter() - t0:.0f} s")
    return runs


def scores(res, truth, steps):
    head = res.head(steps)
    t = truth[:, :steps]
    sd = heldout_std(t)
    return {
        "rmse": rmse(head.mean, t) / sd,
        "cov": coverage(head.lower, head.upper, t),
        "len": avg_interval_length(head.lower, head.upper) / sd,
    }


def fmt(vals):
    return "[" + ", ".join(f"{v:.4g}" for v in vals) + "]"


@pytest.mark.slow
def test_criterion_01_lorenz_500(lorenz):
    per = [scores(r["ppgp"], r["truth"], 500) for r in lorenz.values()]
    med = {k: float(np.median([p[k] for p in per])) for k in per[0]}
    ok = med["rmse"] < 0.05 and 0.85 <= med["cov"] <= 0.99 and med["len"] < 0.10
    record(1, ok, f"Lorenz 500 steps median RMSE/sd {med['rmse']:.4g} (<0.05), "
           f"P95 {med['cov']:.4f} (in [0.85, 0.99]), L95/sd {med['len']:.4g} (<0.10); "
           f"per seed RMSE/sd {fmt([p['rmse'] for p in per])} P95 {fmt([p['cov'] for p in per])}")
    assert ok


@pytest.mark.slow
def test_criterion_02_lorenz_900(lorenz):
    per = [scores(r["ppgp"], r["truth"], 900) for r in lorenz.values()]
    ratios = [float(np.mean(r["ppgp"].width[:, 800:900]) / np.mean(r["ppgp"].width[:, :100]))
              for r in lorenz.values()]
    med_cov = float(np.median([p["cov"] for p in per]))
    med_ratio = float(np.median(ratios))
    ok = 0.85 <= med_cov <= 0.99 and med_ratio >= 5
    record(2, ok, f"Lorenz 900 steps median P95 {med_cov:.4f} (in [0.85, 0.99]), "
           f"median width ratio 801-900 vs 1-100 {med_ratio:.4g} (>=5); "
           f"per seed P95 {fmt([p['cov'] for p in per])} ratio {fmt(ratios)}")
    assert ok


@pytest.mark.slow
def test_criterion_03_dmd_undercoverage(lorenz):
    cov = {
        name: [coverage(r[name].lower, r[name].upper, r["truth"][:, :500]) for r in lorenz.values()]
        for name in ("dmd", "hodmd")
    }
    med = {k: float(np.median(v)) for k, v in cov.items()}
    ok = med["dmd"] < 0.5 and med["hodmd"] < 0.5
    record(3, ok, f"Lorenz 500 steps median P95 DMD {med['dmd']:.4f}, HODMD {med['hodmd']:.4f} "
           f"(both <0.50); per seed DMD {fmt(cov['dmd'])} HODMD {fmt(cov['hodmd'])}")
    assert ok


def test_criterion_04_dmd_exact_recovery():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    A = stable_matrix(rng, 8, 0.95)
    Y = linear_trajectory(A, rng.normal(size=8), 50)
    model = fit_dmd(Y, energy=1.0)
    rel = np.linalg.norm(model.dense() - A) / np.linalg.norm(A)
    elapsed = time.perf_counter() - t0
    ok = rel < 1e-8 and model.tau2_hat < 1e-12 and elapsed < 1.0
    record(4, ok, f"DMD recovery relative error {rel:.3g} (<1e-8), tau2 {model.tau2_hat:.3g} "
           f"(<1e-12), {elapsed:.3f} s (<1 s)")
    assert ok


def test_criterion_05_forecast_covariance_monte_carlo():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    A = stable_matrix(rng, 5, 0.9)
    Y = np.empty((5, 100))
    Y[:, 0] = rng.normal(size=5)
    for t in range(99):
        Y[:, t + 1] = A @ Y[:, t] + 0.1 * rng.normal(size=5)
    model = fit_dmd(Y, energy=1.0)
    Ahat, tau = model.dense(), np.sqrt(model.tau2_hat)
    res = forecast_dmd_intervals(model, Y[:, -1], 5)
    gen = RngStream(5).generator()
    sims = np.repeat(Y[:, -1:], 10000, axis=1)
    cov_err, covs = [], []
    for k in range(5):
        sims = Ahat @ sims + tau * gen.normal(size=sims.shape)
        _, cov = dmd_posterior(model, Y[:, -1], model.n_train + k + 1)
        emp = np.cov(sims)
        cov_err.append(np.linalg.norm(emp - cov) / np.linalg.norm(cov))
        lo, hi = res.lower[:, k : k + 1], res.upper[:, k : k + 1]
        covs.append(float(np.mean((sims >= lo) & (sims <= hi))))
    elapsed = time.perf_counter() - t0
    ok = max(cov_err) < 0.05 and all(0.94 <= c <= 0.96 for c in covs) and elapsed < 30
    record(5, ok, f"forecast covariance Monte Carlo rel. Frobenius error {fmt(cov_err)} (<0.05), "
           f"coverage {fmt(covs)} (in [0.94, 0.96]), {elapsed:.2f} s")
    assert ok


def test_criterion_06_kernel_ridge_equivalence():
    worst = 0.0
    for seed in range(20):
        g = np.random.default_rng(600 + seed)
        n, p = int(g.integers(2, 31)), int(g.integers(1, 4))
        X, y = g.normal(size=(n, p)), g.normal(size=n)
        gamma, eta = float(g.uniform(0.2, 3)), float(g.uniform(1e-4, 1))
        est = PPGPRegressor(ranges=[gamma], nugget=eta, fit_mean=False).fit(X, y)
        spec = KernelSpec(ranges=(gamma,))
        Xs = g.normal(size=(10, p))
        alpha = np.linalg.solve(corr_matrix(spec, X) + eta * np.eye(n), y)
        ref = cross_corr(spec, X, Xs).T @ alpha
        worst = max(worst, float(np.max(np.abs(est.predict(Xs) - ref))))
    ok = worst < 1e-8
    record(6, ok, f"zero-mean PP-GP vs kernel ridge max abs difference {worst:.3g} (<1e-8)")
    assert ok


def test_criterion_07_predictive_t_calibration():
    spec = KernelSpec(ranges=(0.6,), nugget=1e-3)
    covs = []
    for seed in range(10):
        g = np.random.default_rng(700 + seed)
        X = g.uniform(0, 3, size=(1060, 2))
        K = corr_matrix(spec, X) + spec.nugget * np.eye(1060)
        y = 1.5 + 0.8 * np.linalg.cholesky(K) @ g.normal(size=1060)
        est = PPGPRegressor().fit(X[:60], y[:60])
        lo, hi = est.predict_interval(X[60:], 0.95)
        covs.append(coverage(lo[:, 0], hi[:, 0], y[60:]))
    mean = float(np.mean(covs))
    ok = 0.90 <= mean <= 0.99
    record(7, ok, f"predictive-t 95% coverage on prior draws, mean over 10 seeds {mean:.4f} "
           f"(in [0.90, 0.99]); per seed {fmt(covs)}")
    assert ok


def naive_metrics(pred, lo, hi, truth):
    m, n = len(truth), len(truth[0])
    sse = hits = width = 0.0
    for i in range(m):
        for t in range(n):
            sse += (pred[i][t] - truth[i][t]) ** 2
            hits += 1 if lo[i][t] <= truth[i][t] <= hi[i][t] else 0
            width += hi[i][t] - lo[i][t]
    return math.sqrt(sse / (m * n)), hits / (m * n), width / (m * n)


def test_criterion_08_metrics_oracle():
    mismatches = 0
    for seed in range(100):
        g = np.random.default_rng(800 + seed)
        truth, pred = g.normal(size=(5, 7)), g.normal(size=(5, 7))
        a, b = g.normal(size=(5, 7)), g.normal(size=(5, 7))
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        ours = (rmse(pred, truth), coverage(lo, hi, truth), avg_interval_length(lo, hi))
        mismatches += ours != naive_metrics(pred.tolist(), lo.tolist(), hi.tolist(), truth.tolist())
    ok = mismatches == 0
    record(8, ok, f"metrics equal naive loops exactly on {100 - mismatches}/100 instances")
    assert ok


def test_criterion_09_reduction_identities():
    rng = np.random.default_rng(9)
    Y = rng.normal(size=(6, 40)).cumsum(axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnstableSpectrumWarning)
        dmd = fit_dmd(Y)
        hod = fit_hodmd(Y, d=1, delta_t=1)
        edmd = fit_edmd(Y, "identity")
        fc_d = forecast_dmd_intervals(dmd, Y[:, -1], 10)
        fc_h = forecast_hodmd(hod, Y[:, -1:], 10)
    e_h = max(float(np.max(np.abs(hod.inner.dense() - dmd.dense()))),
              float(np.max(np.abs(fc_h.mean - fc_d.mean))),
              float(np.max(np.abs(fc_h.upper - fc_d.upper))))
    e_e = float(np.max(np.abs(edmd.a_edmd - dmd.dense())))
    ok = e_h < 1e-10 and e_e < 1e-8
    record(9, ok, f"HODMD(1,1) vs DMD max difference {e_h:.3g} (<1e-10), "
           f"EDMD(identity) vs DMD operator {e_e:.3g} (<1e-8)")
    assert ok


def damped_oscillation(seed=0, n_total=200):
    """Noisy 16-channel readout of a damped nonlinear pendulum."""
    g = np.random.default_rng(seed)
    traj = integrate(lambda s: np.array([s[1], -np.sin(s[0]) - 0.02 * s[1]]),
                     np.array([2.0, 0.0]), 0.1, n_total - 1)
    th, om = traj
    feats = np.vstack([np.cos(th), np.sin(th), om, om * np.cos(th)])
    return g.normal(size=(16, 4)) @ feats + 0.01 * g.normal(size=(16, n_total))


def test_criterion_10_sixteen_channel_pipeline(tmp_path):
    Y = damped_oscillation()
    write_matrix(tmp_path / "snapshots.csv", Y, time_header=True)
    DatasetManifest(snapshots="snapshots.csv", n_train=150,
                    description="16-channel damped oscillation").to_json(tmp_path / "manifest.json")
    train, test, _ = load_snapshots(DatasetManifest.from_json(tmp_path / "manifest.json"))
    assert train.shape == (16, 150)
    horizon = test.shape[1]
    codes, cov = [], {}
    fits = {"ppgp": [], "dmd": ["--energy", "0.99"], "hodmd": ["--d", "6", "--dt", "3"]}
    for method, flags in fits.items():
        mdir, fc, rep = tmp_path / method, tmp_path / f"{method}.csv", tmp_path / f"{method}.json"
        codes.append(cli_main(["fit", "--method", method, *flags, "--data",
                               str(tmp_path / "manifest.json"), "--out", str(mdir)]))
        codes.append(cli_main(["forecast", "--model", str(mdir), "--horizon", str(horizon),
                               "--out", str(fc)]))
        codes.append(cli_main(["evaluate", "--forecast", str(fc), "--data",
                               str(tmp_path / "manifest.json"), "--out", str(rep)]))
        res = load_forecast(fc)
        cov[method] = coverage(res.lower, res.upper, test)
    ok = all(c == 0 for c in codes) and cov["ppgp"] > cov["dmd"]
    record(10, ok, f"16-row fixture fit/forecast/evaluate exit codes {codes}; damped oscillation "
           f"P95 PP-GP {cov['ppgp']:.3f} > DMD {cov['dmd']:.3f} (HODMD {cov['hodmd']:.3f})")
    assert ok
