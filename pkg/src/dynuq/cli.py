"""Command line front end: ``dynuq generate|fit|forecast|evaluate|plot``.

Exit status is 0 on success, 1 on a runtime or numerical failure and 2 on
a usage error. ``DYNUQ_THREADS`` caps the number of BLAS/OpenMP threads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import warnings
from contextlib import nullcontext
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import dmd as dmd_mod
from . import io as dio
from .exceptions import ForecastFailureError, NumericalFailureError
from .forecast import ForecastResult
from .metrics import evaluate
from .ppgp import (
    PPGPRegressor,
    StencilSpec,
    forecast_chains,
    forecast_plugin_mean,
    forecast_rk4_emulated,
    subsample_pairs,
)
from .stochastics import Lorenz96Config, gen_lorenz96


class UsageError(Exception):
    """Bad flag values discovered after parsing; exit status 2."""


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _level(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"level must lie in (0, 1), got {text}")
    return v


def _energy(text):
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"energy must lie in (0, 1], got {text}")
    return v


def _offsets(text):
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = Lorenz96Config(m=args.m, forcing=args.f, h=args.h, steps=args.steps, seed=args.seed)
    if not 1 <= args.n_train < cfg.steps + 1:
        raise UsageError(f"--n-train must lie in [1, {cfg.steps}]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    states, derivs = gen_lorenz96(cfg)
    dio.write_matrix(out / "states.csv", states, time_header=True)
    dio.write_matrix(out / "derivs.csv", derivs, time_header=True)
    (out / "config.json").write_text(json.dumps({"system": "lorenz96", **cfg.to_dict()}, indent=2) + "\n")
    dio.DatasetManifest(
        snapshots="states.csv", derivs="derivs.csv", n_train=args.n_train,
        description=f"Lorenz 96, m={cfg.m}, F={cfg.forcing}, h={cfg.h}, seed={cfg.seed}",
    ).to_json(out / "manifest.json")
    print(f"wrote {states.shape[0]}x{states.shape[1]} snapshots to {out}")
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

_METHOD_FLAGS = {
    "ppgp": {"subsample", "kernel", "structure", "target", "stencil", "fix_nugget_zero",
             "restarts", "h", "optimizer"},
    "dmd": {"energy", "rank", "rank_rule"},
    "hodmd": {"energy", "rank", "rank_rule", "d", "dt"},
    "edmd": {"energy", "rank", "dictionary"},
}
_ALL_METHOD_FLAGS = set().union(*_METHOD_FLAGS.values())


def _check_method_flags(args):
    allowed = _METHOD_FLAGS[args.method]
    for name in sorted(_ALL_METHOD_FLAGS - allowed):
        if getattr(args, name) not in (None, False):
            flag = "--" + name.replace("_", "-")
            raise UsageError(f"{flag} does not apply to --method {args.method}")


def _opt(v, default):
    return default if v is None else v


def cmd_fit(args) -> int:
    _check_method_flags(args)
    manifest = dio.DatasetManifest.from_json(args.data)
    train, _, derivs = dio.load_snapshots(manifest)
    out = Path(args.out)
    t0 = time.perf_counter()
    report = {"method": args.method, "n_train": int(train.shape[1]), "m": int(train.shape[0])}
    extra = {"method": args.method, "data": str(Path(args.data).resolve())}

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if args.method == "ppgp":
            model = _fit_ppgp(args, train, derivs, extra)
            report.update(objective=model.objective_, converged=model.converged_,
                          ranges=list(model.kernel_spec_.ranges), nugget=model.kernel_spec_.nugget)
            lags = 1
        elif args.method == "dmd":
            model = dmd_mod.fit_dmd(train, energy=_opt(args.energy, 0.99), rank_override=args.rank,
                                    rank_rule=_opt(args.rank_rule, "singular"))
            report.update(rank=model.rank, tau2_hat=model.tau2_hat,
                          spectral_radius=model.spectral_radius)
            lags = 1
        elif args.method == "hodmd":
            d, dt = _opt(args.d, 6), _opt(args.dt, 3)
            model = dmd_mod.fit_hodmd(train, d=d, delta_t=dt, energy=_opt(args.energy, 0.99),
                                      rank_override=args.rank,
                                      rank_rule=_opt(args.rank_rule, "singular"))
            report.update(rank=model.inner.rank, tau2_aug=model.tau2_aug, d=d, delta_t=dt,
                          spectral_radius=model.inner.spectral_radius)
            lags = d
        else:
            spec = _opt(args.dictionary, "identity")
            dic = dmd_mod.Dictionary.parse(spec, loader=lambda p: dio.read_matrix(
                Path(p) if Path(p).is_absolute() else Path(args.data).parent / p))
            model = dmd_mod.fit_edmd(train, dic, energy=_opt(args.energy, 0.99),
                                     rank_override=args.rank)
            report.update(rank=model.inner.rank, tau2_edmd=model.tau2_edmd, dictionary=spec,
                          spectral_radius=model.inner.spectral_radius)
            lags = 1
    report["warnings"] = [str(w.message) for w in caught]
    report["elapsed_s"] = time.perf_counter() - t0
    dio.save_model(model, out, extra=extra)
    dio.write_matrix(out / "last.csv", train[:, -lags:])
    (out / "fit_report.json").write_text(json.dumps(dio._jsonable(report), indent=2) + "\n")
    print(f"fitted {args.method} model written to {out}")
    return 0


def _fit_ppgp(args, train, derivs, extra):
    target = _opt(args.target, "transition")
    seed = args.seed
    if target == "derivative":
        if derivs is None:
            raise UsageError("--target derivative needs a 'derivs' file in the manifest")
        stencil = StencilSpec(_opt(args.stencil, (-2, -1, 0, 1)))
        X, y = stencil.training_pairs(train, derivs[:, : train.shape[1]])
        extra.update(stencil=list(stencil.offsets), h=_opt(args.h, 0.01))
    else:
        if args.stencil is not None or args.h is not None:
            raise UsageError("--stencil and --h apply only to --target derivative")
        X, y = train[:, :-1].T, train[:, 1:].T
    if args.subsample is not None:
        X, y, idx = subsample_pairs(X, y, args.subsample, seed)
        extra.update(subsample=args.subsample, subsample_seed=seed)
    extra.update(target=target)
    default_structure = "product" if target == "derivative" else "isotropic"
    model = PPGPRegressor(
        kernel=_opt(args.kernel, "matern_2_5"),
        structure=_opt(args.structure, default_structure),
        fix_nugget_zero=bool(args.fix_nugget_zero),
        optimizer=_opt(args.optimizer, "quasi-newton"),
        n_restarts=_opt(args.restarts, 3),
        random_state=seed,
    )
    return model.fit(X, y)


# ---------------------------------------------------------------------------
# forecast
# ---------------------------------------------------------------------------


def cmd_forecast(args) -> int:
    model, extra = dio.load_model(args.model)
    last = dio.read_matrix(Path(args.model) / "last.csv")
    if args.start is not None:
        last = dio.read_matrix(args.start)
    H, level, seed = args.horizon, args.level, args.seed
    if isinstance(model, PPGPRegressor):
        target = extra.get("target", "transition")
        mode = args.mode or ("rk4" if target == "derivative" else "chains")
        y_n = last[:, -1]
        if (mode == "rk4") != (target == "derivative"):
            raise UsageError(f"--mode {mode} does not match a model of target {target}")
        if mode == "rk4":
            res = forecast_rk4_emulated(model, y_n, H, h=float(extra["h"]), n_chains=args.chains,
                                        level=level, seed=seed,
                                        stencil=StencilSpec(tuple(extra["stencil"])),
                                        keep_samples=False)
        elif mode == "chains":
            res = forecast_chains(model, y_n, H, n_chains=args.chains, level=level, seed=seed,
                                  keep_samples=False)
        else:
            mean = forecast_plugin_mean(model, y_n, H)
            res = ForecastResult(mean, mean.copy(), mean.copy(), level=level, seed=seed,
                                 meta={"mode": "plugin"})
    else:
        if args.mode is not None:
            raise UsageError("--mode applies only to ppgp models")
        if isinstance(model, dmd_mod.HodmdModel):
            res = dmd_mod.forecast_hodmd(model, last[:, -model.d:], H, level=level)
        elif isinstance(model, dmd_mod.EdmdModel):
            res = dmd_mod.forecast_edmd(model, last[:, -1], H, level=level)
        else:
            res = dmd_mod.forecast_dmd_intervals(model, last[:, -1], H, level=level)
        res.seed = seed
        if not np.all(np.isfinite(res.mean)):
            bad = int(np.argmax(~np.all(np.isfinite(res.mean), axis=0))) + 1
            raise ForecastFailureError(f"non-finite forecast at step {bad}", step=bad)
    dio.save_forecast(res, args.out)
    print(f"wrote {res.m}x{res.horizon} forecast to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _truth_for(args, horizon, m):
    if args.truth is not None:
        truth = dio.read_matrix(args.truth)
    elif args.data is not None:
        _, truth, _ = dio.load_snapshots(dio.DatasetManifest.from_json(args.data))
    else:
        raise UsageError("one of --truth or --data is required")
    if truth.shape[0] != m or truth.shape[1] < horizon:
        raise ValueError(
            f"truth has shape {truth.shape}, forecast needs ({m}, >= {horizon})"
        )
    return truth[:, :horizon]


def cmd_evaluate(args) -> int:
    res = dio.load_forecast(args.forecast, level=args.level)
    truth = _truth_for(args, res.horizon, res.m)
    report = evaluate(res, truth, normalize=not args.raw_sum, forecast=str(args.forecast))
    table = report.table(args.label)
    if args.out is not None:
        Path(args.out).write_text(report.to_json())
        Path(str(args.out) + ".txt").write_text(table)
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


def _svg_series(xs, ys, sx, sy):
    return " ".join(f"{'M' if i == 0 else 'L'}{sx(x):.2f},{sy(y):.2f}" for i, (x, y) in enumerate(zip(xs, ys)))


def render_svg(steps, mean, lower, upper, truth=None, title="", width=640, height=360):
    """SVG text for one coordinate: interval band, forecast mean and optional truth."""
    pad_l, pad_r, pad_t, pad_b = 60, 20, 30, 45
    vals = [lower, upper, mean] + ([truth] if truth is not None else [])
    finite = np.concatenate([v[np.isfinite(v)] for v in vals])
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    x0, x1 = float(steps[0]), float(steps[-1]) if len(steps) > 1 else float(steps[0]) + 1

    def sx(x):
        return pad_l + (x - x0) / (x1 - x0) * (width - pad_l - pad_r)

    def sy(y):
        return height - pad_b - (y - lo) / (hi - lo) * (height - pad_t - pad_b)

    band = list(zip(steps, upper)) + list(zip(steps[::-1], lower[::-1]))
    band.append(band[0])
    band_d = " ".join(
        f"{'M' if i == 0 else 'L'}{sx(x):.2f},{sy(y):.2f}" for i, (x, y) in enumerate(band)
    ) + " Z"
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<path class="band" d="{band_d}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>',
    ]
    if truth is not None:
        parts.append(f'<path class="truth" d="{_svg_series(steps, truth, sx, sy)}" '
                     'fill="none" stroke="black" stroke-width="1.2"/>')
    parts.append(f'<path class="mean" d="{_svg_series(steps, mean, sx, sy)}" '
                 'fill="none" stroke="#3182bd" stroke-width="1.2" stroke-dasharray="4 2"/>')
    bx, by = pad_l, height - pad_b
    parts += [
        f'<line x1="{bx}" y1="{by}" x2="{width - pad_r}" y2="{by}" stroke="black"/>',
        f'<line x1="{bx}" y1="{pad_t}" x2="{bx}" y2="{by}" stroke="black"/>',
        f'<text x="{(width + pad_l) / 2:.1f}" y="{height - 10}" text-anchor="middle" '
        'font-size="12">step</text>',
        f'<text x="15" y="{(height - pad_b + pad_t) / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {(height - pad_b + pad_t) / 2:.1f})">value</text>',
        f'<text x="{bx}" y="{by + 15}" font-size="10" text-anchor="middle">{x0:g}</text>',
        f'<text x="{width - pad_r}" y="{by + 15}" font-size="10" text-anchor="middle">{x1:g}</text>',
        f'<text x="{bx - 5}" y="{by}" font-size="10" text-anchor="end">{lo:.3g}</text>',
        f'<text x="{bx - 5}" y="{pad_t + 4}" font-size="10" text-anchor="end">{hi:.3g}</text>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    coords = args.coords
    if not coords:
        raise UsageError("--coords must name at least one coordinate")
    res = dio.load_forecast(args.forecast)
    bad = [c for c in coords if not 0 <= c < res.m]
    if bad:
        raise UsageError(f"unknown coordinate(s) {bad}; forecast has {res.m}")
    truth = None
    if args.truth is not None or args.data is not None:
        truth = _truth_for(args, res.horizon, res.m)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    steps = np.arange(1, res.horizon + 1, dtype=float)
    for c in coords:
        svg = render_svg(steps, res.mean[c], res.lower[c], res.upper[c],
                         None if truth is None else truth[c], title=f"coordinate {c}")
        (out / f"coord_{c}.svg").write_text(svg)
    print(f"wrote {len(coords)} plot(s) to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


def _coords(text):
    text = text.strip()
    if not text:
        return []
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="dynuq", description=__doc__.splitlines()[0],
                                formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a benchmark system", formatter_class=fmt)
    g.add_argument("system", choices=["lorenz96"])
    g.add_argument("--m", type=_positive_int, default=40, help="state dimension")
    g.add_argument("--f", type=float, default=8.0, help="forcing")
    g.add_argument("--h", type=float, default=0.01, help="RK4 step size")
    g.add_argument("--steps", type=_positive_int, default=1000, help="number of RK4 steps")
    g.add_argument("--seed", type=int, default=0, help="seed of the random initial state")
    g.add_argument("--n-train", type=_positive_int, default=100,
                   help="training columns recorded in manifest.json")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit a model to the training split", formatter_class=fmt)
    f.add_argument("--method", required=True, choices=["ppgp", "dmd", "hodmd", "edmd"])
    f.add_argument("--data", required=True, help="dataset manifest JSON")
    f.add_argument("--out", required=True, help="model directory")
    f.add_argument("--seed", type=int, default=0, help="seed for subsampling and restarts")
    f.add_argument("--energy", type=_energy, default=None,
                   help="DMD family: singular value energy kept (0.99 when unset)")
    f.add_argument("--rank", type=_positive_int, default=None, help="DMD family: fixed rank")
    f.add_argument("--rank-rule", choices=dmd_mod.RANK_RULES, default=None,
                   help="dmd/hodmd: energy of sigma^2 or of |eigenvalues| (singular when unset)")
    f.add_argument("--d", type=_positive_int, default=None, help="hodmd: lag depth (6 when unset)")
    f.add_argument("--dt", type=_positive_int, default=None, help="hodmd: skip (3 when unset)")
    f.add_argument("--dictionary", default=None,
                   help="edmd: identity, polynomial:k or rbf:centers_file:gamma (identity when unset)")
    f.add_argument("--subsample", type=_positive_int, default=None,
                   help="ppgp: number of training pairs drawn uniformly (all when unset)")
    f.add_argument("--kernel", choices=["matern_2_5", "pow_exp"], default=None,
                   help="ppgp: kernel family (matern_2_5 when unset)")
    f.add_argument("--structure", choices=["isotropic", "product"], default=None,
                   help="ppgp: kernel structure (product for derivative targets, else isotropic)")
    f.add_argument("--target", choices=["transition", "derivative"], default=None,
                   help="ppgp: learn y_t -> y_(t+1), or stencil -> tendency (transition when unset)")
    f.add_argument("--stencil", type=_offsets, default=None,
                   help="ppgp derivative target: cyclic offsets (-2,-1,0,1 when unset)")
    f.add_argument("--h", type=float, default=None,
                   help="ppgp derivative target: integration step for forecasts (0.01 when unset)")
    f.add_argument("--fix-nugget-zero", action="store_true", default=False,
                   help="ppgp: treat outputs as noise free")
    f.add_argument("--restarts", type=_positive_int, default=None,
                   help="ppgp: optimizer restarts (3 when unset)")
    f.add_argument("--optimizer", choices=["quasi-newton", "quasi-newton-numeric-grad", "nelder-mead"],
                   default=None, help="ppgp: search method (quasi-newton when unset)")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("forecast", help="forecast from a fitted model", formatter_class=fmt)
    c.add_argument("--model", required=True, help="model directory")
    c.add_argument("--horizon", type=_positive_int, required=True, help="number of steps")
    c.add_argument("--level", type=_level, default=0.95, help="central interval level")
    c.add_argument("--chains", type=_positive_int, default=100, help="ppgp: sampled chains")
    c.add_argument("--seed", type=int, default=0, help="seed of the chain streams")
    c.add_argument("--mode", choices=["chains", "plugin", "rk4"], default=None,
                   help="ppgp: forecast scheme (rk4 for derivative models, else chains)")
    c.add_argument("--start", default=None,
                   help="CSV of starting snapshots (default: end of the training split)")
    c.add_argument("--out", required=True, help="forecast CSV")
    c.set_defaults(func=cmd_forecast)

    e = sub.add_parser("evaluate", help="score a forecast against held-out truth",
                       formatter_class=fmt)
    e.add_argument("--forecast", required=True, help="forecast CSV")
    e.add_argument("--truth", default=None, help="truth CSV, rows are coordinates")
    e.add_argument("--data", default=None, help="manifest whose test split is the truth")
    e.add_argument("--level", type=_level, default=None,
                   help="interval level (read from the forecast sidecar when unset)")
    e.add_argument("--raw-sum", action="store_true", default=False,
                   help="RMSE without the 1/(m n*) normalization")
    e.add_argument("--label", default="", help="method name shown in the table")
    e.add_argument("--out", default=None, help="report JSON; the table goes to <out>.txt")
    e.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("plot", help="write SVG plots of a forecast", formatter_class=fmt)
    pl.add_argument("--forecast", required=True, help="forecast CSV")
    pl.add_argument("--coords", type=_coords, required=True, help="comma separated coordinates")
    pl.add_argument("--truth", default=None, help="truth CSV")
    pl.add_argument("--data", default=None, help="manifest whose test split is the truth")
    pl.add_argument("--out", required=True, help="output directory")
    pl.set_defaults(func=cmd_plot)
    return p


def _thread_limit():
    raw = os.environ.get("DYNUQ_THREADS")
    if raw is None or raw.strip() == "":
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"DYNUQ_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"dynuq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ForecastFailureError as exc:
        step = "" if exc.step is None else f" (step {exc.step})"
        print(f"dynuq {args.command}: forecast failed{step}: {exc}", file=sys.stderr)
        return 1
    except (NumericalFailureError, ValueError, OSError, FloatingPointError, KeyError) as exc:
        print(f"dynuq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
