"""Reading and writing snapshot matrices, manifests, forecasts and models.

Matrices are plain CSV: ``,`` separated, ``.`` decimal, one row per line
and 17 significant digits so that doubles survive a round trip. An optional
first line ``t0,t1,...`` labels the time columns. Snapshot files hold one
row per output coordinate and one column per time point.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .dmd import Dictionary, DmdModel, EdmdModel, HodmdModel
from .forecast import ForecastResult
from .kernels import KernelSpec
from .ppgp import PPGPRegressor

FORECAST_COLUMNS = ("coord", "step", "mean", "lower", "upper")
_TIME_LABEL = re.compile(r"t\d+")


class DataFormatError(ValueError):
    """A data file could not be parsed; carries the file and 1-based position."""

    def __init__(self, message, path=None, line=None, column=None):
        where = str(path)
        if line is not None:
            where += f":{line}"
        if column is not None:
            where += f":{column}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line
        self.column = column


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------


def write_matrix(path, A, time_header: bool = False) -> None:
    """Write a 2-d array (or a vector as one row) as CSV.

    With ``time_header`` a first line ``t0,t1,...`` labels the columns.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2:
        raise ValueError("only 1-d and 2-d arrays can be written")
    with open(path, "w", newline="") as fh:
        if time_header:
            fh.write(",".join(f"t{k}" for k in range(A.shape[1])) + "\n")
        for row in A:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_matrix(path, allow_nonfinite: bool = False) -> np.ndarray:
    """Read a rectangular numeric CSV.

    A first line whose cells all look like ``t<integer>`` is taken as a
    column header and skipped.

    Raises
    ------
    DataFormatError
        On an unparsable or non-finite cell, a ragged row, or an empty file,
        with the file, line and column of the offending cell.
    """
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record or (len(record) == 1 and record[0].strip() == ""):
                continue
            if lineno == 1 and all(_TIME_LABEL.fullmatch(c.strip()) for c in record):
                continue
            vals = []
            for col, cell in enumerate(record, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataFormatError(f"cannot parse {cell!r} as a number", path, lineno, col) from None
                if not allow_nonfinite and not math.isfinite(v):
                    raise DataFormatError(f"non-finite value {cell!r}", path, lineno, col)
                vals.append(v)
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DataFormatError(
                    f"ragged row: {len(vals)} fields, expected {width}", path, lineno
                )
            rows.append(vals)
    if not rows:
        raise DataFormatError("file holds no data", path)
    return np.array(rows, dtype=float)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    """Where a snapshot data set lives and how it splits into train and test.

    Relative paths are resolved against ``base_dir`` (the manifest's own
    directory when loaded from file).
    """

    snapshots: str
    n_train: int
    derivs: Optional[str] = None
    inputs: Optional[str] = None
    description: str = ""
    base_dir: str = "."

    def resolve(self, name: Optional[str]) -> Optional[Path]:
        if name is None:
            return None
        p = Path(name)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @classmethod
    def from_json(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataFormatError(exc.msg, path, exc.lineno, exc.colno) from None
        unknown = set(d) - {"snapshots", "n_train", "derivs", "inputs", "description"}
        if unknown:
            raise DataFormatError(f"unknown manifest fields {sorted(unknown)}", path)
        if "snapshots" not in d or "n_train" not in d:
            raise DataFormatError("manifest needs 'snapshots' and 'n_train'", path)
        return cls(base_dir=str(path.parent), **d)

    def to_json(self, path) -> None:
        d = {k: v for k, v in asdict(self).items() if k != "base_dir" and v is not None}
        Path(path).write_text(json.dumps(d, indent=2) + "\n")


def load_snapshots(manifest: DatasetManifest):
    """Load and split the snapshot matrix.

    Returns
    -------
    train : ndarray (m, n_train)
    test : ndarray (m, n_total - n_train)
    derivs : ndarray (m, n_total) or None
        Tendencies aligned with every snapshot column, when listed.
    """
    Y = read_matrix(manifest.resolve(manifest.snapshots))
    n_total = Y.shape[1]
    if not 1 <= manifest.n_train < n_total:
        raise ValueError(f"n_train must lie in [1, {n_total - 1}], got {manifest.n_train}")
    derivs = None
    for name in (manifest.derivs, manifest.inputs):
        if name is None:
            continue
        other = read_matrix(manifest.resolve(name))
        if other.shape[1] != n_total:
            raise DataFormatError(
                f"{other.shape[1]} columns, snapshot file has {n_total}", manifest.resolve(name)
            )
        if name == manifest.derivs:
            if other.shape[0] != Y.shape[0]:
                raise DataFormatError(
                    f"{other.shape[0]} rows, snapshot file has {Y.shape[0]}", manifest.resolve(name)
                )
            derivs = other
    return Y[:, : manifest.n_train], Y[:, manifest.n_train :], derivs


# ---------------------------------------------------------------------------
# forecasts
# ---------------------------------------------------------------------------


def save_forecast(result: ForecastResult, path, write_meta: bool = True) -> None:
    """One row per (coordinate, step), coordinates 0-based and steps 1-based.

    A sidecar ``<path>.json`` keeps the level, seed and run metadata.
    """
    m, H = result.mean.shape
    with open(path, "w", newline="") as fh:
        fh.write(",".join(FORECAST_COLUMNS) + "\n")
        for j in range(m):
            for k in range(H):
                fh.write(
                    f"{j},{k + 1},{_fmt(result.mean[j, k])},"
                    f"{_fmt(result.lower[j, k])},{_fmt(result.upper[j, k])}\n"
                )
    if write_meta:
        meta = {"level": result.level, "seed": result.seed, "meta": _jsonable(result.meta)}
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2) + "\n")


def load_forecast(path, level: Optional[float] = None) -> ForecastResult:
    """Inverse of :func:`save_forecast`; the sidecar supplies the level if present."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != FORECAST_COLUMNS:
            raise DataFormatError(f"header must be {','.join(FORECAST_COLUMNS)}", path, 1)
        recs = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 5:
                raise DataFormatError(f"ragged row: {len(rec)} fields, expected 5", path, lineno)
            try:
                j, k = int(rec[0]), int(rec[1])
            except ValueError:
                raise DataFormatError("coord and step must be integers", path, lineno) from None
            vals = []
            for col in (2, 3, 4):
                try:
                    vals.append(float(rec[col]))
                except ValueError:
                    raise DataFormatError(f"cannot parse {rec[col]!r}", path, lineno, col + 1) from None
            recs.append((j, k, *vals))
    if not recs:
        raise DataFormatError("forecast file holds no rows", path)
    arr = np.array(recs)
    coords = arr[:, 0].astype(int)
    steps = arr[:, 1].astype(int)
    m, H = coords.max() + 1, steps.max()
    if coords.min() < 0 or steps.min() < 1 or len(recs) != m * H:
        raise DataFormatError("rows do not form a complete coord x step grid", path)
    out = np.full((3, m, H), np.nan)
    out[:, coords, steps - 1] = arr[:, 2:].T
    if np.isnan(out).any():
        raise DataFormatError("rows do not form a complete coord x step grid", path)
    seed, meta = None, {}
    side = Path(str(path) + ".json")
    if side.exists():
        info = json.loads(side.read_text())
        level = info.get("level") if level is None else level
        seed, meta = info.get("seed"), info.get("meta", {})
    return ForecastResult(out[0], out[1], out[2], level=0.95 if level is None else level,
                          seed=seed, meta=meta)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def _write_complex(path, Z):
    """Complex matrix as interleaved real and imaginary columns."""
    Z = np.atleast_2d(np.asarray(Z, dtype=complex))
    out = np.empty((Z.shape[0], 2 * Z.shape[1]))
    out[:, 0::2] = Z.real
    out[:, 1::2] = Z.imag
    write_matrix(path, out)


def _read_complex(path):
    A = read_matrix(path)
    return A[:, 0::2] + 1j * A[:, 1::2]


def save_model(model, directory, extra: Optional[dict] = None) -> None:
    """Persist a fitted model as ``model.json`` plus CSV payloads.

    ``extra`` is stored verbatim under the ``"extra"`` key.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if isinstance(model, PPGPRegressor):
        doc = _save_ppgp(model, d)
    elif isinstance(model, DmdModel):
        doc = _save_dmd(model, d)
    elif isinstance(model, HodmdModel):
        doc = {"kind": "hodmd", "d": model.d, "delta_t": model.delta_t, "m": model.m,
               "tau2_aug": model.tau2_aug}
        save_model(model.inner, d / "inner")
    elif isinstance(model, EdmdModel):
        dic = model.dictionary
        if dic.name == "callables":
            raise ValueError("dictionaries built from Python callables cannot be saved")
        spec = dic.spec()
        if dic.name == "rbf":
            write_matrix(d / "centers.csv", dic.centers)
            spec = f"rbf:centers.csv:{dic.gamma!r}"
        doc = {"kind": "edmd", "dictionary": spec, "tau2_edmd": model.tau2_edmd}
        write_matrix(d / "p_matrix.csv", model.p_matrix)
        save_model(model.inner, d / "inner")
    else:
        raise TypeError(f"cannot save objects of type {type(model).__name__}")
    doc["extra"] = _jsonable(extra or {})
    (d / "model.json").write_text(json.dumps(doc, indent=2) + "\n")


def _save_ppgp(model: PPGPRegressor, d: Path) -> dict:
    write_matrix(d / "X.csv", model.X_train_.T)
    write_matrix(d / "Y.csv", model.y_train_.T)
    write_matrix(d / "chol.csv", model.chol_)
    objective = model.objective_
    return {
        "kind": "ppgp",
        "kernel": model.kernel_spec_.to_dict(),
        "params": _jsonable(model.get_params()),
        "mu": model.mu_.tolist(),
        "sigma2": model.sigma2_.tolist(),
        "dof": model.dof_,
        "jitter": model.jitter_,
        "n": model.X_train_.shape[0],
        "p": model.X_train_.shape[1],
        "m": model.y_train_.shape[1],
        "single_output": bool(model._single_output),
        "objective": None if objective is None or not np.isfinite(objective) else objective,
        "converged": bool(model.converged_),
    }


def _save_dmd(model: DmdModel, d: Path) -> dict:
    write_matrix(d / "u_r.csv", model.u_r)
    write_matrix(d / "sigma_r.csv", model.sigma_r[None, :])
    write_matrix(d / "v_r.csv", model.v_r)
    write_matrix(d / "a_tilde.csv", model.a_tilde)
    write_matrix(d / "b_factor.csv", model.b_factor)
    _write_complex(d / "modes.csv", model.modes)
    _write_complex(d / "amplitudes.csv", model.amplitudes[None, :])
    return {
        "kind": "dmd",
        "rank": model.rank,
        "eigvals": [[float(z.real), float(z.imag)] for z in model.eigvals],
        "tau2_hat": model.tau2_hat,
        "n_train": model.n_train,
        "energy": model.energy,
        "meta": _jsonable(model.meta),
    }


def read_model_doc(directory) -> dict:
    path = Path(directory) / "model.json"
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(exc.msg, path, exc.lineno, exc.colno) from None


def load_model(directory):
    """Inverse of :func:`save_model`; returns ``(model, extra)``."""
    d = Path(directory)
    doc = read_model_doc(d)
    kind = doc.get("kind")
    extra = doc.get("extra", {})
    if kind == "ppgp":
        spec = KernelSpec.from_dict(doc["kernel"])
        X = np.ascontiguousarray(read_matrix(d / "X.csv").T)
        Y = np.ascontiguousarray(read_matrix(d / "Y.csv").T)
        L = read_matrix(d / "chol.csv")
        obj = doc.get("objective")
        model = PPGPRegressor._from_saved(
            doc["params"], spec, X, Y, (L, float(doc["jitter"])), doc["single_output"],
            np.nan if obj is None else obj, doc["converged"],
        )
    elif kind == "dmd":
        model = DmdModel(
            rank=int(doc["rank"]),
            u_r=read_matrix(d / "u_r.csv"),
            sigma_r=read_matrix(d / "sigma_r.csv")[0],
            v_r=read_matrix(d / "v_r.csv"),
            a_tilde=read_matrix(d / "a_tilde.csv"),
            eigvals=np.array([complex(re, im) for re, im in doc["eigvals"]]),
            modes=_read_complex(d / "modes.csv"),
            amplitudes=_read_complex(d / "amplitudes.csv")[0],
            tau2_hat=float(doc["tau2_hat"]),
            n_train=int(doc["n_train"]),
            b_factor=read_matrix(d / "b_factor.csv"),
            energy=float(doc["energy"]),
            meta=doc.get("meta", {}),
        )
    elif kind == "hodmd":
        inner, _ = load_model(d / "inner")
        model = HodmdModel(d=int(doc["d"]), delta_t=int(doc["delta_t"]), inner=inner,
                           tau2_aug=float(doc["tau2_aug"]), m=int(doc["m"]))
    elif kind == "edmd":
        inner, _ = load_model(d / "inner")
        spec = doc["dictionary"]
        loader = lambda name: read_matrix(d / name)  # noqa: E731
        dic = Dictionary.parse(spec, loader=loader)
        model = EdmdModel(dictionary=dic, inner=inner, p_matrix=read_matrix(d / "p_matrix.csv"),
                          tau2_edmd=float(doc["tau2_edmd"]))
    else:
        raise DataFormatError(f"unknown model kind {kind!r}", d / "model.json")
    return model, extra
